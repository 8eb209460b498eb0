#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "p4d/autodiff/nn.hpp"
#include "p4d/autodiff/optim.hpp"
#include "p4d/decoder/decoder.hpp"
#include "p4d/metrics/metrics.hpp"
#include "p4d/synthworld/scene.hpp"

namespace p4d::track {

inline constexpr std::size_t kAttributeWidth = 64;  // width of each centroid and gap encoding

// A tracklet lifted out of its clip: frame-local point indices instead of
// clip indices, and absolute frame numbers.
struct SeqTracklet {
    std::vector<double> query;
    geom::Vec3 centroid{0, 0, 0};
    std::int64_t first_frame = 0, last_frame = 0;
    std::map<std::int64_t, std::vector<std::uint32_t>> points;  // frame -> source point indices, sorted
    std::uint16_t cls = 0;
};

// `clip_end` is the frame number of the clip's second slot.
std::vector<SeqTracklet> lift_tracklets(const dec::PanopticAssembly& assembly, const synth::PointCloudClip& clip,
                                        std::int64_t clip_end);

struct BankEntry {
    std::uint32_t id = 0;
    std::vector<double> query;
    geom::Vec3 centroid{0, 0, 0};
    std::int64_t last_frame = 0;
    std::vector<std::uint32_t> last_points;  // mask at `last_frame`, sorted source indices
};

// IoU of two sorted index sets; 0 when both are empty.
double index_iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

// Mask IoU on the frame shared by a bank entry and a new tracklet; 0 when
// the entry's last frame is not covered by the tracklet.
double overlap_iou(const BankEntry& entry, const SeqTracklet& tracklet);

std::size_t tam_feature_length(std::size_t dim);
// [enc(centroid a), enc(centroid b), query a, query b, enc(gap), IoU].
std::vector<double> tam_features(const BankEntry& entry, const SeqTracklet& tracklet, std::int64_t gap, double iou);

// 4-layer scoring MLP with a sigmoid output.
class Tam {
public:
    Tam() = default;
    Tam(ad::ParameterSet& params, std::size_t dim, std::uint64_t seed);

    std::size_t input_width() const { return mlp_.in_features(); }
    ad::Var logits(ad::Graph& g, ad::Var features) const;  // K x 1
    double score(std::span<const double> features) const;
    const ad::Mlp& mlp() const { return mlp_; }

private:
    ad::Mlp mlp_;
};

struct TrackingConfig {
    double tau = 0.5;
    int history = 4;  // frames an unseen track is kept in the bank
    // Mask-IoU association instead of the TAM: pairs are accepted when their
    // overlap IoU exceeds `iou_threshold`.
    bool baseline_iou = false;
    double iou_threshold = 0.5;
};

class MemoryBank {
public:
    explicit MemoryBank(int history = 4) : history_(history) {}

    // Drops entries last seen before `frame - history`.
    void prune(std::int64_t frame);
    const std::vector<BankEntry>& entries() const { return entries_; }
    std::uint32_t next_id() const { return next_id_; }
    int history() const { return history_; }

    // Refreshes or inserts one entry per tracklet; ids[k] == 0 requests a new id.
    // Returns the final ids.
    std::vector<std::uint32_t> update(const std::vector<SeqTracklet>& tracklets, std::vector<std::uint32_t> ids,
                                      std::int64_t frame);

private:
    int history_;
    std::vector<BankEntry> entries_;  // sorted by id
    std::uint32_t next_id_ = 1;
};

struct ScoredPair {
    std::size_t entry, tracklet;
    double score;
};

// Greedy acceptance in descending score order; ties go to the lower
// tracklet index, then the lower entry index. Returns the matched bank id
// per tracklet, or 0.
std::vector<std::uint32_t> greedy_accept(std::vector<ScoredPair> pairs, const MemoryBank& bank,
                                         std::size_t tracklets, double threshold, bool strict);

// Scores every (bank entry, tracklet) pair at `frame` and returns matched ids (0 = new).
std::vector<std::uint32_t> associate(const MemoryBank& bank, const std::vector<SeqTracklet>& tracklets,
                                     std::int64_t frame, const Tam* tam, const TrackingConfig& config);

// Per-frame predictions over a whole scene.
using SequenceLabels = metrics::PanopticLabeling;

// Frozen-model outputs for every clip (t-1, t), t = 1..F-1, of a scene.
struct SceneInference {
    std::vector<std::size_t> frame_points;
    std::vector<synth::PointCloudClip> clips;
    std::vector<dec::PanopticAssembly> assemblies;
};
SceneInference infer_scene(const dec::PanopticModel& model, const synth::Scene& scene);

// Sliding-window association over precomputed clip outputs.
SequenceLabels track_scene(const SceneInference& inference, const Tam* tam, const TrackingConfig& config);
SequenceLabels run_sequence(const dec::PanopticModel& model, const Tam* tam, const synth::Scene& scene,
                            const TrackingConfig& config);

// Writes pred_<t>.bin (u16 class, u32 track per point, after a magic and
// count header) and pred_manifest.json into `dir`.
void write_predictions(const SequenceLabels& labels, const std::filesystem::path& dir, const nlohmann::json& extra = {});
SequenceLabels read_predictions(const std::filesystem::path& dir);

struct TamTrainConfig {
    std::int64_t steps = 300;
    std::size_t batch = 64;
    double lr = 1e-3;
    std::vector<int> gaps{1, 2, 3, 4};
    std::uint64_t seed = 0;
};

struct TamSample {
    std::vector<double> features;
    double label = 0;
};

// Ground-truth track owning a strict majority of the tracklet's points, if any.
std::optional<std::uint32_t> majority_track(const SeqTracklet& tracklet, const synth::Scene& scene);

// All labelled pairs between clips ending `gap` frames apart.
std::vector<TamSample> tam_samples(const SceneInference& inference, const synth::Scene& scene,
                                   const std::vector<int>& gaps);

struct TamLogRow {
    std::int64_t step = 0;
    double loss = 0;
};

// BCE training of the TAM with the panoptic model frozen. Scenes that yield
// no pairs are skipped; `skipped` receives their indices.
std::vector<TamLogRow> train_stage2(const dec::PanopticModel& model, Tam& tam, ad::ParameterSet& tam_params,
                                    const std::vector<synth::Scene>& scenes, const TamTrainConfig& config,
                                    std::vector<std::size_t>* skipped = nullptr,
                                    const std::function<void(const TamLogRow&)>& on_step = {});

}  // namespace p4d::track
