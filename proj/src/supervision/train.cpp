#include <cmath>
#include <map>

#include "p4d/autodiff/optim.hpp"
#include "p4d/supervision/supervision.hpp"
#include "p4d/util/rng.hpp"

namespace p4d::sup {

std::vector<ClipRef> enumerate_clips(const std::vector<synth::Scene>& scenes) {
    std::vector<ClipRef> out;
    for (std::size_t s = 0; s < scenes.size(); ++s)
        for (std::size_t f = 1; f < scenes[s].frame_count(); ++f) out.push_back({s, f});
    return out;
}

std::vector<TrainLogRow> train_stage1(dec::PanopticModel& model, const std::vector<synth::Scene>& scenes,
                                      const TrainConfig& config, const std::function<void(const TrainLogRow&)>& on_step) {
    const auto clips = enumerate_clips(scenes);
    if (clips.empty()) throw std::invalid_argument("train_stage1: no clips with two frames");
    if (config.steps < 0) throw std::invalid_argument("train_stage1: negative step count");

    ad::AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr_rest;
    opt_cfg.weight_decay = config.weight_decay;
    ad::AdamW opt(model.params(), opt_cfg, {{"lidar.", config.lr_lidar}});

    struct Cached {
        synth::PointCloudClip clip;
        enc::ClipGeometry geo;
        TargetSet targets;
    };
    std::map<std::size_t, Cached> cache;
    const auto& thing = model.config().thing;

    util::Rng order_rng(util::mix_seed(config.seed, 7));
    std::vector<std::size_t> order(clips.size());
    std::size_t cursor = order.size();
    int epoch = -1;

    std::vector<TrainLogRow> log;
    for (std::int64_t step = 0; step < config.steps; ++step) {
        if (cursor == order.size()) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            order_rng.shuffle(order);
            cursor = 0;
            ++epoch;
            opt.set_lr_scale(ad::step_decay(1.0, epoch, config.decay_epochs, config.decay_gamma));
        }
        const std::size_t ci = order[cursor++];
        const ClipRef ref = clips[ci];

        Cached fresh;
        const Cached* sample = nullptr;
        if (!config.augment) {
            auto it = cache.find(ci);
            if (it == cache.end()) {
                Cached c;
                c.clip = synth::make_clip(scenes[ref.scene], ref.frame);
                c.geo = model.prepare(c.clip);
                c.targets = build_targets(c.clip.cls, c.clip.track, thing);
                if (cache.size() < config.geometry_cache) {
                    it = cache.emplace(ci, std::move(c)).first;
                    sample = &it->second;
                } else {
                    fresh = std::move(c);
                    sample = &fresh;
                }
            } else {
                sample = &it->second;
            }
        } else {
            const auto base = synth::make_clip(scenes[ref.scene], ref.frame);
            fresh.clip = synth::augment_clip(base, config.augment_params,
                                             util::mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(step)));
            fresh.geo = model.prepare(fresh.clip);
            fresh.targets = build_targets(fresh.clip.cls, fresh.clip.track, thing);
            sample = &fresh;
        }

        ad::Graph g;
        const auto fwd = model.forward(g, sample->geo, sample->clip.images);
        const auto loss = clip_loss(g, model, fwd, sample->targets, config.supervision);

        TrainLogRow row;
        row.step = step;
        row.ce = loss.report.sum_ce();
        row.dice = loss.report.sum_dice();
        row.cls = loss.report.sum_cls();
        row.pf = loss.report.pf;
        row.total = loss.report.total;
        if (!std::isfinite(row.total)) throw DivergenceError(step, "non-finite loss");

        model.params().zero_grad();
        g.backward(loss.total);
        try {
            opt.step();
        } catch (const ad::NonFiniteGradient& e) {
            throw DivergenceError(step, e.what());
        }
        for (const auto& [name, t] : model.params().items())
            for (double v : t.storage())
                if (!std::isfinite(v)) throw DivergenceError(step, "parameter " + name + " is no longer finite");
        log.push_back(row);
        if (on_step) on_step(row);
    }
    return log;
}

}  // namespace p4d::sup
