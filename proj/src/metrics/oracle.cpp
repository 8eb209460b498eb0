// Brute-force reference evaluation. Segments are explicit point lists and
// every overlap is recounted by scanning, so nothing is shared with the
// streaming evaluator beyond the formulas themselves.
#include <algorithm>
#include <cmath>

#include "p4d/metrics/metrics.hpp"

namespace p4d::metrics {

namespace {

struct Segment {
    std::uint16_t cls = 0;
    std::uint32_t id = 0;
    std::vector<std::size_t> points;
};

struct Match {
    std::size_t frame;
    std::uint32_t gt_track, pred_track;
    double iou;
};

std::size_t count_common(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t n = 0;
    for (auto x : a)
        for (auto y : b) n += x == y;
    return n;
}

std::vector<Segment> segments_of(const std::vector<std::uint16_t>& cls, const std::vector<std::uint32_t>& track,
                                 const std::vector<bool>& keep, const std::vector<bool>& thing) {
    std::vector<Segment> segs;
    for (std::size_t i = 0; i < cls.size(); ++i) {
        if (!keep[i]) continue;
        const std::uint32_t id = thing[cls[i]] ? track[i] : 0;
        auto it = std::find_if(segs.begin(), segs.end(), [&](const Segment& s) { return s.cls == cls[i] && s.id == id; });
        if (it == segs.end()) {
            segs.push_back({cls[i], id, {}});
            it = std::prev(segs.end());
        }
        it->points.push_back(i);
    }
    return segs;
}

}  // namespace

MetricReport oracle_evaluate(const PanopticLabeling& pred, const PanopticLabeling& gt, const MetricConfig& config) {
    if (pred.frames() != gt.frames()) throw MisalignedInput("oracle: frame counts differ");
    const std::size_t nc = config.thing.size();
    std::vector<double> iou_sum(nc, 0), ids_iou(nc, 0);
    std::vector<std::int64_t> tp(nc, 0), fp(nc, 0), fn(nc, 0), ids(nc, 0), inter(nc, 0), uni(nc, 0);
    std::vector<Match> matches;
    // 4D volumes as (frame, point) lists.
    std::vector<std::pair<std::uint32_t, std::vector<std::size_t>>> gt_inst, pred_inst;
    std::vector<std::pair<std::uint32_t, std::size_t>> gt_frames;  // (track, frames present)
    std::size_t offset = 0;

    for (std::size_t f = 0; f < gt.frames(); ++f) {
        const std::size_t n = gt.cls[f].size();
        if (pred.cls[f].size() != n) throw MisalignedInput("oracle: point counts differ");
        std::vector<bool> keep(n);
        for (std::size_t i = 0; i < n; ++i) keep[i] = !(config.ignore_class && gt.cls[f][i] == *config.ignore_class);

        for (std::size_t c = 0; c < nc; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                if (!keep[i]) continue;
                const bool g = gt.cls[f][i] == c, p = pred.cls[f][i] == c;
                inter[c] += g && p;
                uni[c] += g || p;
            }
        }

        const auto gs = segments_of(gt.cls[f], gt.track[f], keep, config.thing);
        const auto ps = segments_of(pred.cls[f], pred.track[f], keep, config.thing);
        std::vector<bool> gm(gs.size(), false), pm(ps.size(), false);
        for (std::size_t a = 0; a < gs.size(); ++a) {
            for (std::size_t b = 0; b < ps.size(); ++b) {
                if (gs[a].cls != ps[b].cls) continue;
                const auto common = count_common(gs[a].points, ps[b].points);
                const double iou = static_cast<double>(common) /
                                   static_cast<double>(gs[a].points.size() + ps[b].points.size() - common);
                if (iou <= 0.5) continue;
                gm[a] = pm[b] = true;
                ++tp[gs[a].cls];
                iou_sum[gs[a].cls] += iou;
                if (config.thing[gs[a].cls] && gs[a].id > 0) matches.push_back({f, gs[a].id, ps[b].id, iou});
            }
        }
        for (std::size_t a = 0; a < gs.size(); ++a) {
            if (!gm[a]) ++fn[gs[a].cls];
            if (!config.thing[gs[a].cls] || gs[a].id == 0) continue;
            auto it = std::find_if(gt_frames.begin(), gt_frames.end(), [&](const auto& e) { return e.first == gs[a].id; });
            if (it == gt_frames.end()) gt_frames.push_back({gs[a].id, 1});
            else ++it->second;
        }
        for (std::size_t b = 0; b < ps.size(); ++b)
            if (!pm[b]) ++fp[ps[b].cls];

        for (std::size_t i = 0; i < n; ++i) {
            if (!keep[i]) continue;
            auto add = [&](auto& list, std::uint32_t id) {
                auto it = std::find_if(list.begin(), list.end(), [&](const auto& e) { return e.first == id; });
                if (it == list.end()) {
                    list.push_back({id, {}});
                    it = std::prev(list.end());
                }
                it->second.push_back(offset + i);
            };
            if (config.thing[gt.cls[f][i]] && gt.track[f][i] > 0) add(gt_inst, gt.track[f][i]);
            if (pred.track[f][i] > 0) add(pred_inst, pred.track[f][i]);
        }
        offset += n;
    }

    // Switch events: walk each ground-truth track's matches in frame order.
    std::vector<std::pair<std::uint32_t, std::int64_t>> track_ids;
    for (const auto& [track, _] : gt_frames) {
        std::vector<Match> mine;
        for (const auto& m : matches)
            if (m.gt_track == track) mine.push_back(m);
        std::sort(mine.begin(), mine.end(), [](const Match& a, const Match& b) { return a.frame < b.frame; });
        std::int64_t switches = 0;
        for (std::size_t k = 1; k < mine.size(); ++k) {
            if (mine[k].pred_track == mine[k - 1].pred_track) continue;
            ++switches;
            // The class of a track is read from the frame of the event.
            const auto& cls = gt.cls[mine[k].frame];
            const auto& trk = gt.track[mine[k].frame];
            std::size_t c = 0;
            for (std::size_t i = 0; i < cls.size(); ++i)
                if (trk[i] == track && config.thing[cls[i]]) c = cls[i];
            ++ids[c];
            ids_iou[c] += mine[k].iou;
        }
        track_ids.push_back({track, switches});
    }

    MetricReport r;
    double pq_sum = 0, sq_sum = 0, rq_sum = 0, pqd_sum = 0, ptq_sum = 0, sptq_sum = 0, iou_total = 0;
    int present = 0, defined = 0;
    for (std::size_t c = 0; c < nc; ++c) {
        ClassMetrics m;
        m.thing = config.thing[c];
        m.tp = tp[c];
        m.fp = fp[c];
        m.fn = fn[c];
        m.ids = ids[c];
        m.iou_defined = uni[c] > 0;
        m.iou = m.iou_defined ? static_cast<double>(inter[c]) / static_cast<double>(uni[c]) : 0.0;
        m.present = tp[c] + fp[c] + fn[c] > 0;
        const double den = static_cast<double>(tp[c]) + 0.5 * static_cast<double>(fp[c]) + 0.5 * static_cast<double>(fn[c]);
        if (den > 0) {
            m.pq = iou_sum[c] / den;
            m.rq = static_cast<double>(tp[c]) / den;
            m.ptq = std::max(0.0, (iou_sum[c] - static_cast<double>(ids[c])) / den);
            m.sptq = std::max(0.0, (iou_sum[c] - ids_iou[c]) / den);
        }
        if (tp[c] > 0) m.sq = iou_sum[c] / static_cast<double>(tp[c]);
        m.pq_dagger = m.thing ? m.pq : m.iou;
        if (m.present) {
            ++present;
            pq_sum += m.pq;
            sq_sum += m.sq;
            rq_sum += m.rq;
            pqd_sum += m.pq_dagger;
            ptq_sum += m.ptq;
            sptq_sum += m.sptq;
        }
        if (m.iou_defined) {
            ++defined;
            iou_total += m.iou;
        }
        r.per_class.push_back(m);
    }
    if (present) {
        r.pq = pq_sum / present;
        r.sq = sq_sum / present;
        r.rq = rq_sum / present;
        r.pq_dagger = pqd_sum / present;
        r.ptq = ptq_sum / present;
        r.sptq = sptq_sum / present;
    }
    if (defined) r.miou = iou_total / defined;
    r.s_cls = r.miou;

    if (gt_inst.empty()) {
        r.s_assoc = r.tq = pred_inst.empty() ? 1.0 : 0.0;
    } else {
        double assoc = 0, tq = 0;
        for (const auto& [track, pts] : gt_inst) {
            double aq = 0;
            for (const auto& [pid, ppts] : pred_inst) {
                const auto common = static_cast<double>(count_common(pts, ppts));
                if (common == 0) continue;
                aq += common * common / (static_cast<double>(pts.size() + ppts.size()) - common);
            }
            aq /= static_cast<double>(pts.size());
            assoc += aq;
            std::size_t frames = 0;
            std::int64_t sw = 0;
            for (const auto& [t, n] : gt_frames)
                if (t == track) frames = n;
            for (const auto& [t, n] : track_ids)
                if (t == track) sw = n;
            const double denom = frames > 1 ? static_cast<double>(frames - 1) : 1.0;
            tq += std::sqrt(aq * (1.0 - static_cast<double>(sw) / denom));
        }
        r.s_assoc = assoc / static_cast<double>(gt_inst.size());
        r.tq = tq / static_cast<double>(gt_inst.size());
    }
    r.lstq = std::sqrt(r.s_assoc * r.s_cls);
    r.pat = r.pq + r.tq > 0 ? 2 * r.pq * r.tq / (r.pq + r.tq) : 0.0;
    return r;
}

}  // namespace p4d::metrics
