#include "p4d/tracking/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "p4d/util/binio.hpp"
#include "p4d/util/rng.hpp"

namespace p4d::track {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

constexpr std::string_view kPredMagic = "P4DPRD01";
// Frequency scales of the centroid and frame-gap encodings. Centroids span
// tens of metres, so a coarse scale keeps nearby positions correlated.
constexpr double kCentroidScale = 0.05;
constexpr double kGapScale = 0.5;

BankEntry entry_from(const SeqTracklet& t, std::uint32_t id) {
    BankEntry e;
    e.id = id;
    e.query = t.query;
    e.centroid = t.centroid;
    e.last_frame = t.last_frame;
    e.last_points = t.points.at(t.last_frame);
    return e;
}

}  // namespace

std::vector<SeqTracklet> lift_tracklets(const dec::PanopticAssembly& assembly, const synth::PointCloudClip& clip,
                                        std::int64_t clip_end) {
    std::vector<SeqTracklet> out;
    for (const auto& tr : assembly.tracklets) {
        SeqTracklet s;
        s.query = tr.query;
        s.centroid = tr.centroid;
        s.cls = tr.cls;
        s.first_frame = clip_end - 1 + tr.first_slot;
        s.last_frame = clip_end - 1 + tr.last_slot;
        for (int slot = 0; slot < 2; ++slot) {
            if (tr.points[static_cast<std::size_t>(slot)].empty()) continue;
            auto& pts = s.points[clip_end - 1 + slot];
            for (auto i : tr.points[static_cast<std::size_t>(slot)]) pts.push_back(clip.source_index[i]);
            std::sort(pts.begin(), pts.end());
        }
        out.push_back(std::move(s));
    }
    return out;
}

double index_iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    std::size_t inter = 0, i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double overlap_iou(const BankEntry& entry, const SeqTracklet& tracklet) {
    const auto it = tracklet.points.find(entry.last_frame);
    if (it == tracklet.points.end()) return 0.0;
    return index_iou(entry.last_points, it->second);
}

std::size_t tam_feature_length(std::size_t dim) { return 3 * kAttributeWidth + 1 + 2 * dim; }

std::vector<double> tam_features(const BankEntry& entry, const SeqTracklet& tracklet, std::int64_t gap, double iou) {
    if (gap < 0) throw std::invalid_argument("tam_features: negative frame gap");
    if (entry.query.size() != tracklet.query.size())
        throw ad::ShapeError("tam_features: query widths differ");
    std::vector<double> f;
    f.reserve(tam_feature_length(entry.query.size()));
    auto append = [&f](const std::vector<double>& v) { f.insert(f.end(), v.begin(), v.end()); };
    append(geom::sinusoidal_expand(entry.centroid, kAttributeWidth, kCentroidScale));
    append(geom::sinusoidal_expand(tracklet.centroid, kAttributeWidth, kCentroidScale));
    append(entry.query);
    append(tracklet.query);
    const double g = static_cast<double>(gap);
    append(geom::sinusoidal_expand(std::span<const double>(&g, 1), kAttributeWidth, kGapScale));
    f.push_back(iou);
    return f;
}

Tam::Tam(ad::ParameterSet& params, std::size_t dim, std::uint64_t seed)
    : mlp_(params, "tam", {tam_feature_length(dim), 256, 128, 64, 1}, seed) {}

Var Tam::logits(Graph& g, Var features) const { return mlp_(g, features); }

double Tam::score(std::span<const double> features) const {
    if (features.size() != input_width())
        throw ad::ShapeError("tam: expected " + std::to_string(input_width()) + " features, got " +
                             std::to_string(features.size()));
    Tensor x = Tensor::matrix(1, features.size());
    std::copy(features.begin(), features.end(), x.storage().begin());
    const double z = ad::mlp_forward(mlp_, x).item();
    return 1.0 / (1.0 + std::exp(-z));
}

void MemoryBank::prune(std::int64_t frame) {
    std::erase_if(entries_, [&](const BankEntry& e) { return e.last_frame < frame - history_; });
}

std::vector<std::uint32_t> MemoryBank::update(const std::vector<SeqTracklet>& tracklets,
                                              std::vector<std::uint32_t> ids, std::int64_t frame) {
    if (ids.size() != tracklets.size()) throw std::invalid_argument("MemoryBank::update: one id per tracklet");
    for (std::size_t k = 0; k < tracklets.size(); ++k) {
        if (ids[k] == 0) ids[k] = next_id_++;
        auto it = std::lower_bound(entries_.begin(), entries_.end(), ids[k],
                                   [](const BankEntry& e, std::uint32_t id) { return e.id < id; });
        if (it != entries_.end() && it->id == ids[k]) {
            *it = entry_from(tracklets[k], ids[k]);
        } else {
            if (ids[k] >= next_id_) throw std::invalid_argument("MemoryBank::update: unknown track id");
            entries_.insert(it, entry_from(tracklets[k], ids[k]));
        }
    }
    prune(frame);
    return ids;
}

std::vector<std::uint32_t> greedy_accept(std::vector<ScoredPair> pairs, const MemoryBank& bank,
                                         std::size_t tracklets, double threshold, bool strict) {
    std::stable_sort(pairs.begin(), pairs.end(), [](const ScoredPair& a, const ScoredPair& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.tracklet != b.tracklet) return a.tracklet < b.tracklet;
        return a.entry < b.entry;
    });
    std::vector<std::uint32_t> ids(tracklets, 0);
    std::vector<bool> entry_used(bank.entries().size(), false);
    for (const auto& p : pairs) {
        if (strict ? !(p.score > threshold) : !(p.score >= threshold)) break;
        if (entry_used[p.entry] || ids[p.tracklet] != 0) continue;
        entry_used[p.entry] = true;
        ids[p.tracklet] = bank.entries()[p.entry].id;
    }
    return ids;
}

std::vector<std::uint32_t> associate(const MemoryBank& bank, const std::vector<SeqTracklet>& tracklets,
                                     std::int64_t frame, const Tam* tam, const TrackingConfig& config) {
    if (!config.baseline_iou && tam == nullptr) throw std::invalid_argument("associate: TAM association needs a model");
    std::vector<ScoredPair> pairs;
    const auto& entries = bank.entries();
    for (std::size_t e = 0; e < entries.size(); ++e) {
        if (entries[e].last_frame < frame - bank.history()) continue;
        for (std::size_t k = 0; k < tracklets.size(); ++k) {
            const double iou = overlap_iou(entries[e], tracklets[k]);
            const double s =
                config.baseline_iou ? iou : tam->score(tam_features(entries[e], tracklets[k], frame - entries[e].last_frame, iou));
            pairs.push_back({e, k, s});
        }
    }
    return config.baseline_iou ? greedy_accept(std::move(pairs), bank, tracklets.size(), config.iou_threshold, true)
                               : greedy_accept(std::move(pairs), bank, tracklets.size(), config.tau, false);
}

SceneInference infer_scene(const dec::PanopticModel& model, const synth::Scene& scene) {
    if (scene.frame_count() < 2) throw std::invalid_argument("infer_scene: scene needs at least two frames");
    SceneInference out;
    for (const auto& fr : scene.frames) out.frame_points.push_back(fr.points.size());
    for (std::size_t t = 1; t < scene.frame_count(); ++t) {
        out.clips.push_back(synth::make_clip(scene, t));
        out.assemblies.push_back(model.infer(out.clips.back()));
    }
    return out;
}

SequenceLabels track_scene(const SceneInference& inference, const Tam* tam, const TrackingConfig& config) {
    const std::size_t frames = inference.frame_points.size();
    SequenceLabels out;
    out.cls.resize(frames);
    out.track.resize(frames);
    MemoryBank bank(config.history);
    for (std::size_t t = 1; t < frames; ++t) {
        const auto& clip = inference.clips[t - 1];
        const auto& assembly = inference.assemblies[t - 1];
        const auto frame = static_cast<std::int64_t>(t);
        const auto tracklets = lift_tracklets(assembly, clip, frame);
        bank.prune(frame);
        const auto ids = bank.update(tracklets, associate(bank, tracklets, frame, tam, config), frame);

        // Frame t comes from clip (t-1, t); frame 0 also from the first clip.
        for (int slot = t == 1 ? 0 : 1; slot < 2; ++slot) {
            const std::size_t f = t - 1 + static_cast<std::size_t>(slot);
            out.cls[f].assign(inference.frame_points[f], 0);
            out.track[f].assign(inference.frame_points[f], 0);
            for (std::size_t i = 0; i < clip.size(); ++i) {
                if (clip.slot(i) != slot) continue;
                const auto src = clip.source_index[i];
                out.cls[f][src] = assembly.cls[i];
                if (assembly.tracklet[i] >= 0) out.track[f][src] = ids[static_cast<std::size_t>(assembly.tracklet[i])];
            }
        }
    }
    return out;
}

SequenceLabels run_sequence(const dec::PanopticModel& model, const Tam* tam, const synth::Scene& scene,
                            const TrackingConfig& config) {
    return track_scene(infer_scene(model, scene), tam, config);
}

void write_predictions(const SequenceLabels& labels, const std::filesystem::path& dir, const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"format", "p4d-predictions"}, {"version", 1}, {"frames", nlohmann::json::array()}};
    for (std::size_t f = 0; f < labels.cls.size(); ++f) {
        if (labels.track[f].size() != labels.cls[f].size())
            throw std::invalid_argument("write_predictions: class and track arrays differ in length");
        util::ByteWriter w;
        w.put_bytes(kPredMagic);
        w.put(static_cast<std::uint32_t>(labels.cls[f].size()));
        for (std::size_t i = 0; i < labels.cls[f].size(); ++i) {
            w.put(labels.cls[f][i]);
            w.put(labels.track[f][i]);
        }
        const std::string name = "pred_" + std::to_string(f) + ".bin";
        util::write_file(dir / name, w.bytes());
        manifest["frames"].push_back({{"file", name}, {"num_points", labels.cls[f].size()}});
    }
    if (!extra.is_null()) manifest["meta"] = extra;
    util::write_file(dir / "pred_manifest.json", manifest.dump(2) + "\n");
}

SequenceLabels read_predictions(const std::filesystem::path& dir) {
    const auto mpath = dir / "pred_manifest.json";
    const auto raw = util::read_file(mpath);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
        throw util::FormatError(mpath.string(), 0, std::string("malformed manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "p4d-predictions")
        throw util::FormatError(mpath.string(), 0, "not a prediction manifest");
    SequenceLabels out;
    for (const auto& fr : manifest.at("frames")) {
        const auto path = dir / fr.at("file").get<std::string>();
        util::ByteReader r(path.string(), util::read_file(path));
        r.expect_magic(kPredMagic);
        const auto n = r.get<std::uint32_t>();
        std::vector<std::uint16_t> cls(n);
        std::vector<std::uint32_t> track(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            cls[i] = r.get<std::uint16_t>();
            track[i] = r.get<std::uint32_t>();
        }
        r.expect_end();
        out.cls.push_back(std::move(cls));
        out.track.push_back(std::move(track));
    }
    return out;
}

std::optional<std::uint32_t> majority_track(const SeqTracklet& tracklet, const synth::Scene& scene) {
    std::map<std::uint32_t, std::size_t> votes;
    std::size_t total = 0;
    for (const auto& [frame, pts] : tracklet.points) {
        const auto& fr = scene.frames.at(static_cast<std::size_t>(frame));
        for (auto i : pts) {
            ++votes[fr.track.at(i)];
            ++total;
        }
    }
    for (const auto& [id, n] : votes)
        if (id != 0 && 2 * n > total) return id;
    return std::nullopt;
}

std::vector<TamSample> tam_samples(const SceneInference& inference, const synth::Scene& scene,
                                   const std::vector<int>& gaps) {
    std::vector<std::vector<SeqTracklet>> per_clip(scene.frame_count());
    for (std::size_t t = 1; t < scene.frame_count(); ++t)
        per_clip[t] = lift_tracklets(inference.assemblies[t - 1], inference.clips[t - 1], static_cast<std::int64_t>(t));
    std::vector<TamSample> out;
    for (int gap : gaps) {
        if (gap <= 0) throw std::invalid_argument("tam_samples: gaps must be positive");
        for (std::size_t t = 1; t + static_cast<std::size_t>(gap) < scene.frame_count(); ++t) {
            const std::size_t t2 = t + static_cast<std::size_t>(gap);
            for (const auto& a : per_clip[t]) {
                const auto ga = majority_track(a, scene);
                const BankEntry entry = entry_from(a, 0);
                for (const auto& b : per_clip[t2]) {
                    const auto gb = majority_track(b, scene);
                    TamSample s;
                    s.features = tam_features(entry, b, static_cast<std::int64_t>(t2) - a.last_frame, overlap_iou(entry, b));
                    s.label = ga && gb && *ga == *gb ? 1.0 : 0.0;
                    out.push_back(std::move(s));
                }
            }
        }
    }
    return out;
}

std::vector<TamLogRow> train_stage2(const dec::PanopticModel& model, Tam& tam, ad::ParameterSet& tam_params,
                                    const std::vector<synth::Scene>& scenes, const TamTrainConfig& config,
                                    std::vector<std::size_t>* skipped,
                                    const std::function<void(const TamLogRow&)>& on_step) {
    std::vector<TamSample> samples;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        auto part = tam_samples(infer_scene(model, scenes[s]), scenes[s], config.gaps);
        if (part.empty()) {
            if (skipped) skipped->push_back(s);
            continue;
        }
        std::move(part.begin(), part.end(), std::back_inserter(samples));
    }
    std::vector<TamLogRow> log;
    if (samples.empty() || config.steps <= 0) return log;

    ad::AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr;
    ad::AdamW opt(tam_params, opt_cfg);
    util::Rng rng(util::mix_seed(config.seed, 31));
    const std::size_t width = tam.input_width();
    const std::size_t batch = std::min(config.batch, samples.size());
    for (std::int64_t step = 0; step < config.steps; ++step) {
        Tensor x = Tensor::matrix(batch, width);
        Tensor y = Tensor::matrix(batch, 1);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& s = samples[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1))];
            if (s.features.size() != width) throw ad::ShapeError("train_stage2: feature width does not match the TAM");
            std::copy(s.features.begin(), s.features.end(), x.row(b).begin());
            y(b, 0) = s.label;
        }
        Graph g;
        Var z = tam.logits(g, g.constant(std::move(x)));
        Var loss = g.mean(g.sub(g.softplus(z), g.mul(z, g.constant(std::move(y)))));
        const double value = g.value(loss).item();
        tam_params.zero_grad();
        g.backward(loss);
        opt.step();
        log.push_back({step, value});
        if (on_step) on_step(log.back());
    }
    return log;
}

}  // namespace p4d::track
