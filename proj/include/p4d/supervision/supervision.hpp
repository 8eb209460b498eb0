#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/decoder/decoder.hpp"
#include "p4d/synthworld/scene.hpp"

namespace p4d::sup {

// Ground-truth segments of one clip: every thing track present and one
// segment per stuff class present, each a hard mask over all clip points.
struct Target {
    std::uint16_t cls = 0;
    std::uint32_t track = 0;  // 0 for stuff segments
    std::vector<std::uint32_t> points;
};

struct TargetSet {
    std::size_t points = 0;
    std::vector<Target> targets;
    ad::Tensor masks;  // G x N, 0/1

    std::size_t size() const { return targets.size(); }
};

TargetSet build_targets(std::span<const std::uint16_t> cls, std::span<const std::uint32_t> track,
                        const std::vector<bool>& thing);

// |a & b| / |a | b| with `a` thresholded at 0.5; 0 when both are empty.
double mask_iou(std::span<const double> a, std::span<const double> b);

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, target), sorted by query
    std::vector<std::size_t> unmatched_queries, unmatched_targets;
    double cost = 0;
};

// Minimum-cost assignment of rows to columns (rectangular allowed).
MatchResult hungarian_match(const ad::Tensor& cost);

// cost[q, g] = -p_q(class_g) - IoU(mask_q > 0.5, target_g). `mask_probs` is
// N x T, `class_probs` T x (1 + C).
ad::Tensor build_cost(const ad::Tensor& mask_probs, const ad::Tensor& class_probs, const TargetSet& targets);

// Mean over rows of 1 - 2 sum(p t) / (sum p + sum t + 1e-6); `probs` and
// `targets` are K x N.
ad::Var dice_loss(ad::Graph& g, ad::Var probs, const ad::Tensor& targets);
// Mean of softplus(x) - x t over all entries.
ad::Var bce_mask_loss(ad::Graph& g, ad::Var logits, const ad::Tensor& targets);
// Weighted mean cross-entropy of T x (1 + C) logits against per-row labels.
ad::Var cls_loss(ad::Graph& g, ad::Var logits, std::span<const std::size_t> labels, std::span<const double> weights);
// Mean squared difference between MLP_fusion([Z+, Z_img]) and MLP_pseudo(Z+),
// with the fused side and Z+ treated as constants.
ad::Var pseudo_fusion_loss(ad::Graph& g, ad::Var projectable, ad::Var image, const ad::Mlp& fusion,
                           const ad::Mlp& pseudo);

struct LossWeights {
    double ce = 5.0, dice = 2.0, cls = 2.0, pf = 1.0;
};

struct BlockLoss {
    double ce = 0, dice = 0, cls = 0;
};

struct LossReport {
    std::vector<BlockLoss> blocks;
    double pf = 0;
    double total = 0;
    double sum_ce() const;
    double sum_dice() const;
    double sum_cls() const;
};

// total = w_pf * L_pf + sum_b (w_ce L_ce^b + w_dice L_dice^b + w_cls L_cls^b).
double total_loss(const std::vector<BlockLoss>& blocks, double pf, const LossWeights& w = {});

struct SupervisionConfig {
    LossWeights weights;
    double no_object_weight = 0.1;  // class-loss weight of unmatched queries
};

// Builds the full stage-1 loss on the tape for one forward pass, matching
// each block independently.
struct ClipLoss {
    ad::Var total;
    LossReport report;
    std::vector<MatchResult> matches;
};
ClipLoss clip_loss(ad::Graph& g, const dec::PanopticModel& model, const dec::PanopticModel::Forward& fwd,
                   const TargetSet& targets, const SupervisionConfig& config);

struct TrainConfig {
    std::int64_t steps = 500;
    double lr_lidar = 3e-3;
    double lr_rest = 1e-4;
    double weight_decay = 0.0;
    std::vector<int> decay_epochs{30, 60};
    double decay_gamma = 0.1;
    bool augment = false;
    synth::AugmentParams augment_params;
    std::uint64_t seed = 0;
    SupervisionConfig supervision;
    std::size_t geometry_cache = 256;  // clips whose geometry is kept between steps
};

struct TrainLogRow {
    std::int64_t step = 0;
    double ce = 0, dice = 0, cls = 0, pf = 0, total = 0;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::int64_t step, const std::string& what)
        : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    std::int64_t step() const { return step_; }

private:
    std::int64_t step_;
};

// A training sample: clip (t-1, t) of a scene.
struct ClipRef {
    std::size_t scene = 0;
    std::size_t frame = 1;
};
std::vector<ClipRef> enumerate_clips(const std::vector<synth::Scene>& scenes);

// Stage-1 loop: sample clip, augment, forward, match, backward, AdamW step.
// Clips are visited in a seeded shuffled order, one epoch per pass.
std::vector<TrainLogRow> train_stage1(dec::PanopticModel& model, const std::vector<synth::Scene>& scenes,
                                      const TrainConfig& config,
                                      const std::function<void(const TrainLogRow&)>& on_step = {});

}  // namespace p4d::sup
