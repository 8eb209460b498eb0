#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "p4d/autodiff/optim.hpp"
#include "p4d/cli/run.hpp"
#include "p4d/util/rng.hpp"

namespace p4d::cli {

using nlohmann::json;

namespace {

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string file_hash(const fs::path& p) {
    const auto raw = util::read_file(p);
    return hex64(fnv1a64(std::string_view(raw.data(), raw.size())));
}

RunManifest start_manifest(const std::string& command, const RunConfig& cfg, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.config = cfg.to_json();
    m.config_hash = fnv1a64(m.config.dump());
    m.seed = seed;
    return m;
}

std::string scene_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04zu", i);
    return buf;
}

// The model's class heads follow the config palette, so scenes must agree with it.
void check_palette(const RunConfig& cfg, const synth::Scene& scene) {
    if (scene.config.classes != cfg.data.scene.classes)
        throw ConfigError("data.scene.classes", "config palette differs from the dataset's palette");
}

bool is_dataset(const fs::path& dir) { return fs::exists(dir / "dataset.json"); }

// Accepts a checkpoint base path or a directory holding `<name>.bin/.idx`.
std::string resolve_checkpoint(const fs::path& path, const std::string& name, const std::string& flag) {
    if (path.empty()) throw ConfigError(flag, "no checkpoint given");
    const fs::path base = fs::is_directory(path) ? path / name : path;
    if (!fs::exists(base.string() + ".bin") || !fs::exists(base.string() + ".idx"))
        throw ConfigError(flag, "checkpoint not found at " + base.string());
    return base.string();
}

void add_checkpoint_outputs(RunManifest& m, const fs::path& out, const std::string& name) {
    for (const char* ext : {".bin", ".idx"}) m.outputs.emplace_back(name + ext, file_hash(out / (name + ext)));
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Pooled labels with ids renumbered so tracks from different scenes never collide.
struct Pool {
    metrics::PanopticLabeling labels;
    std::map<std::pair<std::size_t, std::uint32_t>, std::uint32_t> ids;

    void add(std::size_t scene, const metrics::PanopticLabeling& l) {
        for (std::size_t f = 0; f < l.frames(); ++f) {
            labels.cls.push_back(l.cls[f]);
            auto tr = l.track[f];
            for (auto& t : tr) {
                if (t == 0) continue;
                auto [it, fresh] = ids.emplace(std::make_pair(scene, t), static_cast<std::uint32_t>(ids.size() + 1));
                t = it->second;
            }
            labels.track.push_back(std::move(tr));
        }
    }
};

metrics::PanopticLabeling ground_truth(const synth::Scene& s) {
    metrics::PanopticLabeling l;
    for (const auto& f : s.frames) {
        l.cls.push_back(f.cls);
        l.track.push_back(f.track);
    }
    return l;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

std::uint64_t hash_tree(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a64("");
    for (const auto& f : files) {
        h = fnv1a64(fs::relative(f, dir).generic_string(), h);
        h = fnv1a64(std::string_view("\0", 1), h);
        const auto raw = util::read_file(f);
        h = fnv1a64(std::string_view(raw.data(), raw.size()), h);
    }
    return h;
}

json RunManifest::to_json() const {
    json outs = json::array();
    for (const auto& [f, h] : outputs) outs.push_back({{"file", f}, {"hash", h}});
    return {{"format", "p4d-run-manifest"},
            {"version", 1},
            {"command", command},
            {"config_hash", hex64(config_hash)},
            {"seed", seed},
            {"code_version", code_version},
            {"inputs", inputs},
            {"outputs", outs},
            {"timings", timings},
            {"config", config}};
}

void write_manifest(const fs::path& dir, RunManifest manifest) {
    fs::create_directories(dir);
    const fs::path tmp = dir / (std::string(kManifestName) + ".tmp");
    util::write_file(tmp, manifest.to_json().dump(2) + "\n");
    fs::rename(tmp, dir / kManifestName);
}

std::vector<fs::path> scene_dirs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw util::IoError("not a directory: " + dir.string());
    if (!is_dataset(dir)) return {dir};
    const auto raw = util::read_file(dir / "dataset.json");
    const json j = json::parse(raw.begin(), raw.end(), nullptr, false);
    if (j.is_discarded() || j.value("format", "") != "p4d-dataset" || !j.contains("scenes"))
        throw util::FormatError((dir / "dataset.json").string(), 0, "not a dataset index");
    std::vector<fs::path> out;
    for (const auto& s : j["scenes"]) out.push_back(dir / s.get<std::string>());
    return out;
}

std::vector<synth::Scene> load_scenes(const fs::path& dir) {
    std::vector<synth::Scene> out;
    for (const auto& d : scene_dirs(dir)) out.push_back(synth::read_dataset(d));
    return out;
}

void cmd_generate(const RunConfig& cfg, const fs::path& out) {
    Stopwatch clock;
    auto m = start_manifest("generate", cfg, cfg.data.seed);
    fs::create_directories(out);
    json names = json::array();
    for (int i = 0; i < cfg.data.scenes; ++i) {
        const auto name = scene_name(static_cast<std::size_t>(i));
        const auto scene = synth::generate_scene(cfg.data.scene, util::mix_seed(cfg.data.seed, static_cast<std::uint64_t>(i)));
        synth::write_dataset(scene, out / name);
        names.push_back(name);
        m.outputs.emplace_back(name, hex64(hash_tree(out / name)));
    }
    const json index{{"format", "p4d-dataset"}, {"version", 1}, {"seed", cfg.data.seed}, {"scenes", names}};
    util::write_file(out / "dataset.json", index.dump(2) + "\n");
    m.outputs.emplace_back("dataset.json", file_hash(out / "dataset.json"));
    m.outputs.emplace_back(".", hex64(hash_tree(out)));
    m.timings["total"] = clock.seconds();
    write_manifest(out, std::move(m));
}

void cmd_train(const RunConfig& cfg, const fs::path& dataset, const fs::path& out) {
    Stopwatch clock;
    auto m = start_manifest("train", cfg, cfg.training.seed);
    const auto scenes = load_scenes(dataset);
    for (const auto& s : scenes) check_palette(cfg, s);
    m.inputs["dataset"] = hex64(hash_tree(dataset));
    const double load_time = clock.seconds();

    dec::PanopticModel model(cfg.model_config());
    auto tc = cfg.train_config();
    if (cfg.training.epochs)
        tc.steps = *cfg.training.epochs * static_cast<std::int64_t>(sup::enumerate_clips(scenes).size());
    fs::create_directories(out);
    std::ostringstream log;
    log << "step,ce,dice,cls,pf,total\n";
    auto flush_log = [&] { util::write_file(out / "train_log.csv", log.str()); };
    try {
        sup::train_stage1(model, scenes, tc, [&](const sup::TrainLogRow& r) {
            log << r.step << ',' << fmt(r.ce) << ',' << fmt(r.dice) << ',' << fmt(r.cls) << ',' << fmt(r.pf) << ','
                << fmt(r.total) << '\n';
        });
    } catch (const sup::DivergenceError&) {
        flush_log();
        throw;
    }
    flush_log();
    ad::save_checkpoint((out / "stage1").string(), model.params());
    util::write_file(out / "config.json", cfg.to_json().dump(2) + "\n");
    add_checkpoint_outputs(m, out, "stage1");
    m.outputs.emplace_back("train_log.csv", file_hash(out / "train_log.csv"));
    m.timings["load"] = load_time;
    m.timings["total"] = clock.seconds();
    write_manifest(out, std::move(m));
}

void cmd_train_tam(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1, const fs::path& out) {
    Stopwatch clock;
    auto m = start_manifest("train-tam", cfg, cfg.tam.seed);
    const auto ckpt = resolve_checkpoint(stage1, "stage1", "stage1");
    const auto scenes = load_scenes(dataset);
    for (const auto& s : scenes) check_palette(cfg, s);
    m.inputs["dataset"] = hex64(hash_tree(dataset));
    m.inputs["stage1"] = file_hash(ckpt + ".bin");

    dec::PanopticModel model(cfg.model_config());
    ad::load_checkpoint(ckpt, model.params());
    ad::ParameterSet tam_params;
    track::Tam tam(tam_params, cfg.model.dim, cfg.tam.seed);
    std::vector<std::size_t> skipped;
    std::ostringstream log;
    log << "step,loss\n";
    track::train_stage2(model, tam, tam_params, scenes, cfg.tam_config(), &skipped,
                        [&](const track::TamLogRow& r) { log << r.step << ',' << fmt(r.loss) << '\n'; });
    for (auto s : skipped) std::cerr << "train-tam: scene " << s << " produced no tracklet pairs; skipped\n";
    fs::create_directories(out);
    util::write_file(out / "tam_log.csv", log.str());
    ad::save_checkpoint((out / "tam").string(), tam_params);
    add_checkpoint_outputs(m, out, "tam");
    m.outputs.emplace_back("tam_log.csv", file_hash(out / "tam_log.csv"));
    m.timings["total"] = clock.seconds();
    write_manifest(out, std::move(m));
}

void cmd_infer(const RunConfig& cfg, const fs::path& stage1, const fs::path& tam_path, const fs::path& scenes,
               const fs::path& out, bool baseline_iou) {
    Stopwatch clock;
    auto m = start_manifest(baseline_iou ? "infer --baseline-iou" : "infer", cfg, cfg.training.seed);
    const auto ckpt = resolve_checkpoint(stage1, "stage1", "stage1");
    dec::PanopticModel model(cfg.model_config());
    ad::load_checkpoint(ckpt, model.params());
    m.inputs["stage1"] = file_hash(ckpt + ".bin");
    ad::ParameterSet tam_params;
    track::Tam tam;
    if (!baseline_iou) {
        const auto tck = resolve_checkpoint(tam_path, "tam", "tam");
        tam = track::Tam(tam_params, cfg.model.dim, cfg.tam.seed);
        ad::load_checkpoint(tck, tam_params);
        m.inputs["tam"] = file_hash(tck + ".bin");
    }
    const auto dirs = scene_dirs(scenes);
    const bool multi = is_dataset(scenes);
    m.inputs["scenes"] = hex64(hash_tree(scenes));
    const auto tc = cfg.tracking_config(baseline_iou);
    for (const auto& d : dirs) {
        const auto scene = synth::read_dataset(d);
        check_palette(cfg, scene);
        const auto labels = track::run_sequence(model, baseline_iou ? nullptr : &tam, scene, tc);
        const fs::path dst = multi ? out / d.filename() : out;
        track::write_predictions(labels, dst, {{"scene", d.filename().string()}, {"baseline_iou", baseline_iou}});
        m.outputs.emplace_back(multi ? d.filename().string() : ".", hex64(hash_tree(dst)));
    }
    m.timings["total"] = clock.seconds();
    write_manifest(out, std::move(m));
}

EvalResult cmd_eval(const fs::path& pred, const fs::path& gt, const fs::path& out, bool oracle) {
    const auto dirs = scene_dirs(gt);
    const bool multi = is_dataset(gt);
    Pool p_pool, g_pool;
    EvalResult res;
    std::optional<metrics::MetricConfig> mc;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const auto scene = synth::read_dataset(dirs[i]);
        RunConfig palette;
        palette.data.scene = scene.config;
        if (!mc) mc = palette.metric_config();
        else if (mc->names != palette.metric_config().names)
            throw metrics::MisalignedInput("scene " + dirs[i].string() + " uses a different class palette");
        const fs::path pdir = multi ? pred / dirs[i].filename() : pred;
        // A labelled scene directory also serves as a prediction (ground truth against itself).
        const auto p = !fs::exists(pdir / "pred_manifest.json") && fs::exists(pdir / "manifest.json")
                           ? ground_truth(synth::read_dataset(pdir))
                           : track::read_predictions(pdir);
        const auto g = ground_truth(scene);
        if (p.frames() != g.frames())
            throw metrics::MisalignedInput(pdir.string() + ": " + std::to_string(p.frames()) + " prediction frames, " +
                                           std::to_string(g.frames()) + " ground-truth frames");
        for (std::size_t f = 0; f < g.frames(); ++f)
            if (p.cls[f].size() != g.cls[f].size())
                throw metrics::MisalignedInput(pdir.string() + ": frame " + std::to_string(f) + " has " +
                                               std::to_string(p.cls[f].size()) + " predicted points, expected " +
                                               std::to_string(g.cls[f].size()));
        if (oracle) {
            std::size_t points = 0;
            for (const auto& c : g.cls) points += c.size();
            if (points <= kOracleMaxPoints) {
                const double d = metrics::max_discrepancy(metrics::evaluate(p, g, *mc), metrics::oracle_evaluate(p, g, *mc));
                res.oracle_discrepancy = std::max(res.oracle_discrepancy.value_or(0.0), d);
                ++res.oracle_scenes_checked;
            } else {
                ++res.oracle_scenes_skipped;
            }
        }
        p_pool.add(i, p);
        g_pool.add(i, g);
    }
    res.report = metrics::evaluate(p_pool.labels, g_pool.labels, *mc);

    json j = res.report.to_json(mc->names);
    j["scenes"] = dirs.size();
    if (oracle) {
        j["oracle"] = {{"scenes_checked", res.oracle_scenes_checked},
                       {"scenes_skipped", res.oracle_scenes_skipped},
                       {"max_discrepancy", res.oracle_discrepancy ? json(*res.oracle_discrepancy) : json(nullptr)}};
    }
    fs::create_directories(out);
    util::write_file(out / "report.json", j.dump(2) + "\n");
    util::write_file(out / "report.csv", metrics::MetricReport::csv_header() + "\n" + res.report.csv_row() + "\n");
    return res;
}

int run_guarded(const std::function<void()>& body) {
    try {
        body();
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const sup::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return kDivergence;
    } catch (const metrics::MisalignedInput& e) {
        std::cerr << "data mismatch: " << e.what() << '\n';
        return kMismatch;
    } catch (const util::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::invalid_argument& e) {
        // Shape and argument errors surface from configs that disagree with a checkpoint.
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}

}  // namespace p4d::cli
