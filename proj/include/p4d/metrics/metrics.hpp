#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace p4d::metrics {

// Per frame, per point class and track id (0 = no instance).
struct PanopticLabeling {
    std::vector<std::vector<std::uint16_t>> cls;
    std::vector<std::vector<std::uint32_t>> track;

    std::size_t frames() const { return cls.size(); }
    bool operator==(const PanopticLabeling&) const = default;
};

class MisalignedInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct MetricConfig {
    std::vector<bool> thing;  // per class
    std::optional<std::uint16_t> ignore_class;
    std::vector<std::string> names;  // optional, for reports
};

struct ClassMetrics {
    bool thing = false;
    bool present = false;      // TP + FP + FN > 0
    bool iou_defined = false;  // union > 0
    std::int64_t tp = 0, fp = 0, fn = 0, ids = 0;
    double iou = 0, pq = 0, sq = 0, rq = 0, pq_dagger = 0, ptq = 0, sptq = 0;
};

struct MetricReport {
    std::vector<ClassMetrics> per_class;
    double miou = 0, pq = 0, sq = 0, rq = 0, pq_dagger = 0, ptq = 0, sptq = 0;
    double s_assoc = 0, s_cls = 0, lstq = 0, tq = 0, pat = 0;

    nlohmann::json to_json(const std::vector<std::string>& names = {}) const;
    static std::string csv_header();
    std::string csv_row() const;
};

// Sums values in ascending order so the result does not depend on the
// order in which they were collected.
double ordered_sum(std::vector<double> values);

// Frame-at-a-time accumulation of every metric family.
class Evaluator {
public:
    explicit Evaluator(MetricConfig config);

    void add_frame(std::span<const std::uint16_t> pred_cls, std::span<const std::uint32_t> pred_track,
                   std::span<const std::uint16_t> gt_cls, std::span<const std::uint32_t> gt_track);
    MetricReport report() const;

private:
    struct ClassAcc {
        std::int64_t tp = 0, fp = 0, fn = 0, ids = 0;
        std::vector<double> tp_iou, ids_iou;
        std::int64_t inter = 0, uni = 0;
    };
    struct Trajectory {
        std::optional<std::uint32_t> last_pred;
        std::int64_t frames = 0, ids = 0;
    };
    MetricConfig config_;
    std::vector<ClassAcc> classes_;
    std::map<std::uint32_t, Trajectory> trajectories_;  // by ground-truth track
    // Class-agnostic 4D volumes for association scores.
    std::map<std::uint32_t, std::int64_t> gt_volume_, pred_volume_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::int64_t> overlap_;  // (gt, pred)
};

MetricReport evaluate(const PanopticLabeling& pred, const PanopticLabeling& gt, const MetricConfig& config);

// Exhaustive recomputation through an independent code path; meant for
// tiny instances only.
MetricReport oracle_evaluate(const PanopticLabeling& pred, const PanopticLabeling& gt, const MetricConfig& config);

// Largest absolute difference over every scalar of two reports.
double max_discrepancy(const MetricReport& a, const MetricReport& b);

double harmonic_mean(double a, double b);

}  // namespace p4d::metrics
