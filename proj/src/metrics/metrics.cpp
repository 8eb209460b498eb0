#include "p4d/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace p4d::metrics {

namespace {

using SegKey = std::pair<std::uint16_t, std::uint32_t>;

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

double mean_if(const std::vector<ClassMetrics>& cs, double ClassMetrics::*field, bool ClassMetrics::*gate) {
    double s = 0;
    int n = 0;
    for (const auto& c : cs) {
        if (!(c.*gate)) continue;
        s += c.*field;
        ++n;
    }
    return n ? s / n : 0.0;
}

}  // namespace

double ordered_sum(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double s = 0;
    for (double v : values) s += v;
    return s;
}

double harmonic_mean(double a, double b) { return a + b > 0 ? 2 * a * b / (a + b) : 0.0; }

Evaluator::Evaluator(MetricConfig config) : config_(std::move(config)), classes_(config_.thing.size()) {
    if (config_.thing.empty()) throw std::invalid_argument("Evaluator: empty class list");
}

void Evaluator::add_frame(std::span<const std::uint16_t> pred_cls, std::span<const std::uint32_t> pred_track,
                          std::span<const std::uint16_t> gt_cls, std::span<const std::uint32_t> gt_track) {
    const std::size_t n = gt_cls.size();
    if (pred_cls.size() != n || pred_track.size() != n || gt_track.size() != n)
        throw MisalignedInput("frame point counts differ: prediction " + std::to_string(pred_cls.size()) +
                              ", ground truth " + std::to_string(n));
    const std::size_t nc = classes_.size();
    auto seg_key = [&](std::uint16_t c, std::uint32_t t) -> SegKey { return {c, config_.thing[c] ? t : 0}; };

    std::vector<std::int64_t> pred_count(nc, 0), gt_count(nc, 0), inter(nc, 0);
    std::map<SegKey, std::int64_t> gt_size, pred_size;
    std::map<std::pair<SegKey, SegKey>, std::int64_t> seg_inter;
    for (std::size_t i = 0; i < n; ++i) {
        if (config_.ignore_class && gt_cls[i] == *config_.ignore_class) continue;
        const auto gc = gt_cls[i], pc = pred_cls[i];
        if (gc >= nc || pc >= nc) throw std::out_of_range("Evaluator: class id outside the palette");
        ++gt_count[gc];
        ++pred_count[pc];
        if (gc == pc) ++inter[gc];
        const SegKey gk = seg_key(gc, gt_track[i]), pk = seg_key(pc, pred_track[i]);
        ++gt_size[gk];
        ++pred_size[pk];
        ++seg_inter[{gk, pk}];

        const bool gt_inst = config_.thing[gc] && gt_track[i] > 0;
        if (gt_inst) ++gt_volume_[gt_track[i]];
        if (pred_track[i] > 0) ++pred_volume_[pred_track[i]];
        if (gt_inst && pred_track[i] > 0) ++overlap_[{gt_track[i], pred_track[i]}];
    }
    for (std::size_t c = 0; c < nc; ++c) {
        classes_[c].inter += inter[c];
        classes_[c].uni += pred_count[c] + gt_count[c] - inter[c];
    }

    std::map<SegKey, bool> gt_matched, pred_matched;
    for (const auto& [keys, in] : seg_inter) {
        const auto& [gk, pk] = keys;
        if (gk.first != pk.first) continue;
        const double iou = static_cast<double>(in) / static_cast<double>(gt_size[gk] + pred_size[pk] - in);
        if (!(iou > 0.5)) continue;
        gt_matched[gk] = pred_matched[pk] = true;
        auto& acc = classes_[gk.first];
        ++acc.tp;
        acc.tp_iou.push_back(iou);
        if (config_.thing[gk.first] && gk.second > 0) {
            auto& traj = trajectories_[gk.second];
            if (traj.last_pred && *traj.last_pred != pk.second) {
                ++acc.ids;
                ++traj.ids;
                acc.ids_iou.push_back(iou);
            }
            traj.last_pred = pk.second;
        }
    }
    for (const auto& [gk, _] : gt_size) {
        if (!gt_matched.count(gk)) ++classes_[gk.first].fn;
        if (config_.thing[gk.first] && gk.second > 0) ++trajectories_[gk.second].frames;
    }
    for (const auto& [pk, _] : pred_size)
        if (!pred_matched.count(pk)) ++classes_[pk.first].fp;
}

MetricReport Evaluator::report() const {
    MetricReport r;
    for (std::size_t c = 0; c < classes_.size(); ++c) {
        const auto& a = classes_[c];
        ClassMetrics m;
        m.thing = config_.thing[c];
        m.tp = a.tp;
        m.fp = a.fp;
        m.fn = a.fn;
        m.ids = a.ids;
        m.iou_defined = a.uni > 0;
        m.iou = ratio(static_cast<double>(a.inter), static_cast<double>(a.uni));
        m.present = a.tp + a.fp + a.fn > 0;
        const double den = static_cast<double>(a.tp) + 0.5 * static_cast<double>(a.fp + a.fn);
        const double sum_iou = ordered_sum(a.tp_iou);
        m.pq = ratio(sum_iou, den);
        m.sq = ratio(sum_iou, static_cast<double>(a.tp));
        m.rq = ratio(static_cast<double>(a.tp), den);
        // A run of switches can push the numerator below zero; scores are clamped at 0.
        m.ptq = std::max(0.0, ratio(sum_iou - static_cast<double>(a.ids), den));
        m.sptq = std::max(0.0, ratio(sum_iou - ordered_sum(a.ids_iou), den));
        m.pq_dagger = m.thing ? m.pq : m.iou;
        r.per_class.push_back(m);
    }
    r.miou = mean_if(r.per_class, &ClassMetrics::iou, &ClassMetrics::iou_defined);
    r.pq = mean_if(r.per_class, &ClassMetrics::pq, &ClassMetrics::present);
    r.sq = mean_if(r.per_class, &ClassMetrics::sq, &ClassMetrics::present);
    r.rq = mean_if(r.per_class, &ClassMetrics::rq, &ClassMetrics::present);
    r.pq_dagger = mean_if(r.per_class, &ClassMetrics::pq_dagger, &ClassMetrics::present);
    r.ptq = mean_if(r.per_class, &ClassMetrics::ptq, &ClassMetrics::present);
    r.sptq = mean_if(r.per_class, &ClassMetrics::sptq, &ClassMetrics::present);
    r.s_cls = r.miou;

    // Association over class-agnostic 4D volumes. With no ground-truth
    // instances the score is 1 when the prediction has none either, else 0.
    if (gt_volume_.empty()) {
        r.s_assoc = r.tq = pred_volume_.empty() ? 1.0 : 0.0;
    } else {
        std::vector<double> assoc, tq;
        for (const auto& [gt, size] : gt_volume_) {
            std::vector<double> terms;
            for (auto it = overlap_.lower_bound({gt, 0}); it != overlap_.end() && it->first.first == gt; ++it) {
                const auto in = static_cast<double>(it->second);
                const auto uni = static_cast<double>(size + pred_volume_.at(it->first.second)) - in;
                terms.push_back(in * in / uni);
            }
            const double aq = ordered_sum(std::move(terms)) / static_cast<double>(size);
            assoc.push_back(aq);
            const auto& traj = trajectories_.at(gt);
            const double switch_free =
                1.0 - static_cast<double>(traj.ids) / static_cast<double>(std::max<std::int64_t>(1, traj.frames - 1));
            tq.push_back(std::sqrt(aq * switch_free));
        }
        r.s_assoc = ordered_sum(assoc) / static_cast<double>(assoc.size());
        r.tq = ordered_sum(tq) / static_cast<double>(tq.size());
    }
    r.lstq = std::sqrt(r.s_assoc * r.s_cls);
    r.pat = harmonic_mean(r.pq, r.tq);
    return r;
}

MetricReport evaluate(const PanopticLabeling& pred, const PanopticLabeling& gt, const MetricConfig& config) {
    if (pred.frames() != gt.frames() || pred.track.size() != pred.cls.size() || gt.track.size() != gt.cls.size())
        throw MisalignedInput("frame counts differ: prediction " + std::to_string(pred.frames()) + ", ground truth " +
                              std::to_string(gt.frames()));
    Evaluator ev(config);
    for (std::size_t f = 0; f < gt.frames(); ++f) ev.add_frame(pred.cls[f], pred.track[f], gt.cls[f], gt.track[f]);
    return ev.report();
}

double max_discrepancy(const MetricReport& a, const MetricReport& b) {
    if (a.per_class.size() != b.per_class.size()) return std::numeric_limits<double>::infinity();
    double worst = 0;
    auto cmp = [&](double x, double y) { worst = std::max(worst, std::abs(x - y)); };
    for (double MetricReport::*f : {&MetricReport::miou, &MetricReport::pq, &MetricReport::sq, &MetricReport::rq,
                                    &MetricReport::pq_dagger, &MetricReport::ptq, &MetricReport::sptq,
                                    &MetricReport::s_assoc, &MetricReport::s_cls, &MetricReport::lstq,
                                    &MetricReport::tq, &MetricReport::pat})
        cmp(a.*f, b.*f);
    for (std::size_t c = 0; c < a.per_class.size(); ++c) {
        const auto &x = a.per_class[c], &y = b.per_class[c];
        for (double ClassMetrics::*f : {&ClassMetrics::iou, &ClassMetrics::pq, &ClassMetrics::sq, &ClassMetrics::rq,
                                        &ClassMetrics::pq_dagger, &ClassMetrics::ptq, &ClassMetrics::sptq})
            cmp(x.*f, y.*f);
        for (std::int64_t ClassMetrics::*f : {&ClassMetrics::tp, &ClassMetrics::fp, &ClassMetrics::fn, &ClassMetrics::ids})
            cmp(static_cast<double>(x.*f), static_cast<double>(y.*f));
        if (x.present != y.present || x.iou_defined != y.iou_defined) worst = std::numeric_limits<double>::infinity();
    }
    return worst;
}

nlohmann::json MetricReport::to_json(const std::vector<std::string>& names) const {
    nlohmann::json j;
    j["mean"] = {{"miou", miou}, {"pq", pq},       {"sq", sq},     {"rq", rq},     {"pq_dagger", pq_dagger},
                 {"ptq", ptq},   {"sptq", sptq},   {"s_assoc", s_assoc}, {"s_cls", s_cls}, {"lstq", lstq},
                 {"tq", tq},     {"pat", pat}};
    j["classes"] = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        const auto& m = per_class[c];
        j["classes"].push_back({{"id", c},
                                {"name", c < names.size() ? names[c] : std::to_string(c)},
                                {"thing", m.thing},
                                {"present", m.present},
                                {"tp", m.tp},
                                {"fp", m.fp},
                                {"fn", m.fn},
                                {"ids", m.ids},
                                {"iou", m.iou},
                                {"pq", m.pq},
                                {"sq", m.sq},
                                {"rq", m.rq},
                                {"pq_dagger", m.pq_dagger},
                                {"ptq", m.ptq},
                                {"sptq", m.sptq}});
    }
    return j;
}

std::string MetricReport::csv_header() { return "miou,pq,sq,rq,pq_dagger,ptq,sptq,s_assoc,s_cls,lstq,tq,pat"; }

std::string MetricReport::csv_row() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << miou << ',' << pq << ',' << sq << ',' << rq << ',' << pq_dagger << ',' << ptq << ',' << sptq << ','
       << s_assoc << ',' << s_cls << ',' << lstq << ',' << tq << ',' << pat;
    return os.str();
}

}  // namespace p4d::metrics
