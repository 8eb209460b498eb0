#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "p4d/supervision/supervision.hpp"

namespace p4d::sup {

using ad::Graph;
using ad::Tensor;
using ad::Var;

TargetSet build_targets(std::span<const std::uint16_t> cls, std::span<const std::uint32_t> track,
                        const std::vector<bool>& thing) {
    if (cls.size() != track.size()) throw ad::ShapeError("build_targets: label arrays differ in length");
    // Stuff segments first (by class), then thing tracks (by id).
    std::map<std::pair<int, std::uint64_t>, std::size_t> index;
    TargetSet ts;
    ts.points = cls.size();
    for (std::uint32_t i = 0; i < cls.size(); ++i) {
        if (cls[i] >= thing.size()) throw std::out_of_range("build_targets: class id outside the palette");
        const bool is_thing = thing[cls[i]] && track[i] > 0;
        const std::pair<int, std::uint64_t> key = is_thing ? std::pair<int, std::uint64_t>{1, track[i]}
                                                           : std::pair<int, std::uint64_t>{0, cls[i]};
        index.try_emplace(key, 0);
    }
    for (auto& [key, slot] : index) {
        slot = ts.targets.size();
        Target t;
        t.track = key.first == 1 ? static_cast<std::uint32_t>(key.second) : 0;
        ts.targets.push_back(t);
    }
    for (std::uint32_t i = 0; i < cls.size(); ++i) {
        const bool is_thing = thing[cls[i]] && track[i] > 0;
        const auto key = is_thing ? std::pair<int, std::uint64_t>{1, track[i]} : std::pair<int, std::uint64_t>{0, cls[i]};
        auto& t = ts.targets[index.at(key)];
        t.cls = cls[i];
        t.points.push_back(i);
    }
    ts.masks = Tensor::matrix(ts.targets.size(), ts.points);
    for (std::size_t g = 0; g < ts.targets.size(); ++g)
        for (auto i : ts.targets[g].points) ts.masks(g, i) = 1.0;
    return ts;
}

double mask_iou(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ad::ShapeError("mask_iou: masks differ in length");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] > 0.5, y = b[i] > 0.5;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MatchResult hungarian_match(const Tensor& cost) {
    const std::size_t rows = cost.rows(), cols = cost.cols();
    MatchResult res;
    if (cost.numel() == 0 || rows == 0 || cols == 0) {
        for (std::size_t q = 0; q < rows; ++q) res.unmatched_queries.push_back(q);
        for (std::size_t t = 0; t < cols; ++t) res.unmatched_targets.push_back(t);
        return res;
    }
    for (double c : cost.storage())
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian_match: non-finite cost");

    // Shortest augmenting paths with potentials over an n x m matrix, n <= m.
    const bool flip = rows > cols;
    const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
    auto a = [&](std::size_t i, std::size_t j) { return flip ? cost(j - 1, i - 1) : cost(i - 1, j - 1); };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::int64_t> target_of(rows, -1);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        const std::size_t r = flip ? j - 1 : p[j] - 1;
        const std::size_t c = flip ? p[j] - 1 : j - 1;
        target_of[r] = static_cast<std::int64_t>(c);
    }
    std::vector<bool> target_used(cols, false);
    for (std::size_t q = 0; q < rows; ++q) {
        if (target_of[q] < 0) {
            res.unmatched_queries.push_back(q);
            continue;
        }
        const auto t = static_cast<std::size_t>(target_of[q]);
        res.pairs.emplace_back(q, t);
        res.cost += cost(q, t);
        target_used[t] = true;
    }
    for (std::size_t t = 0; t < cols; ++t)
        if (!target_used[t]) res.unmatched_targets.push_back(t);
    return res;
}

Tensor build_cost(const Tensor& mask_probs, const Tensor& class_probs, const TargetSet& targets) {
    const std::size_t n = mask_probs.rows(), t = mask_probs.cols(), g = targets.size();
    if (n != targets.points) throw ad::ShapeError("build_cost: mask rows do not match target points");
    if (class_probs.rows() != t) throw ad::ShapeError("build_cost: class rows do not match queries");
    // Hard intersection/union counts per (query, target).
    std::vector<std::size_t> pred_count(t, 0);
    std::vector<std::size_t> inter(t * g, 0);
    std::vector<std::size_t> target_of(n, g);
    for (std::size_t k = 0; k < g; ++k)
        for (auto i : targets.targets[k].points) target_of[i] = k;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = mask_probs.row(i);
        const std::size_t k = target_of[i];
        for (std::size_t q = 0; q < t; ++q) {
            if (!(row[q] > 0.5)) continue;
            ++pred_count[q];
            if (k < g) ++inter[q * g + k];
        }
    }
    Tensor cost = Tensor::matrix(t, g);
    for (std::size_t q = 0; q < t; ++q) {
        for (std::size_t k = 0; k < g; ++k) {
            const std::size_t in = inter[q * g + k];
            const std::size_t un = pred_count[q] + targets.targets[k].points.size() - in;
            const double iou = un == 0 ? 0.0 : static_cast<double>(in) / static_cast<double>(un);
            cost(q, k) = -class_probs(q, targets.targets[k].cls) - iou;
        }
    }
    return cost;
}

Var dice_loss(Graph& g, Var probs, const Tensor& targets) {
    const Tensor& p = g.value(probs);
    if (p.rows() != targets.rows() || p.cols() != targets.cols())
        throw ad::ShapeError("dice_loss: probabilities and targets differ in shape");
    const std::size_t k = p.rows();
    Tensor tsum = Tensor::matrix(1, k);
    for (std::size_t r = 0; r < k; ++r) {
        double s = 0;
        for (double x : targets.row(r)) s += x;
        tsum[r] = s + 1e-6;
    }
    Var inter = g.sum_rows(g.transpose(g.mul(probs, g.constant(targets))));  // 1 x K
    Var denom = g.add(g.sum_rows(g.transpose(probs)), g.constant(std::move(tsum)));
    Var ratio = g.mul(inter, g.reciprocal(denom));
    return g.add_scalar(g.scale(g.mean(ratio), -2.0), 1.0);
}

Var bce_mask_loss(Graph& g, Var logits, const Tensor& targets) {
    const Tensor& x = g.value(logits);
    if (x.rows() != targets.rows() || x.cols() != targets.cols())
        throw ad::ShapeError("bce_mask_loss: logits and targets differ in shape");
    return g.mean(g.sub(g.softplus(logits), g.mul(logits, g.constant(targets))));
}

Var cls_loss(Graph& g, Var logits, std::span<const std::size_t> labels, std::span<const double> weights) {
    const Tensor& x = g.value(logits);
    if (labels.size() != x.rows() || weights.size() != x.rows())
        throw ad::ShapeError("cls_loss: one label and weight per row required");
    Tensor pick = Tensor::matrix(x.rows(), x.cols());
    double wsum = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (labels[r] >= x.cols()) throw std::out_of_range("cls_loss: label outside the logit range");
        pick(r, labels[r]) = weights[r];
        wsum += weights[r];
    }
    if (!(wsum > 0)) throw std::invalid_argument("cls_loss: weights must have a positive sum");
    return g.scale(g.sum(g.mul(g.log_softmax(logits), g.constant(std::move(pick)))), -1.0 / wsum);
}

Var pseudo_fusion_loss(Graph& g, Var projectable, Var image, const ad::Mlp& fusion, const ad::Mlp& pseudo) {
    if (!projectable.valid() || g.value(projectable).rows() == 0) return g.constant(Tensor::scalar(0.0));
    Var zp = g.detach(projectable);
    Var target = g.detach(fusion(g, g.concat_cols({zp, g.detach(image)})));
    Var diff = g.sub(pseudo(g, zp), target);
    return g.mean(g.mul(diff, diff));
}

double LossReport::sum_ce() const {
    double s = 0;
    for (const auto& b : blocks) s += b.ce;
    return s;
}
double LossReport::sum_dice() const {
    double s = 0;
    for (const auto& b : blocks) s += b.dice;
    return s;
}
double LossReport::sum_cls() const {
    double s = 0;
    for (const auto& b : blocks) s += b.cls;
    return s;
}

double total_loss(const std::vector<BlockLoss>& blocks, double pf, const LossWeights& w) {
    double t = w.pf * pf;
    for (const auto& b : blocks) t += w.ce * b.ce + w.dice * b.dice + w.cls * b.cls;
    return t;
}

ClipLoss clip_loss(Graph& g, const dec::PanopticModel& model, const dec::PanopticModel::Forward& fwd,
                   const TargetSet& targets, const SupervisionConfig& config) {
    const auto& w = config.weights;
    const std::size_t classes = model.config().thing.size();
    ClipLoss out;

    std::vector<Var> pf_terms;
    for (const auto& f : fwd.encoded.fusion)
        pf_terms.push_back(pseudo_fusion_loss(g, f.projectable, f.image, model.encoder().fusion_mlp(),
                                              model.encoder().pseudo_mlp()));
    Var pf = pf_terms.size() == 1 ? pf_terms[0] : g.scale(g.sum(g.concat_cols(pf_terms)), 1.0 / pf_terms.size());
    out.report.pf = g.value(pf).item();
    Var total = g.scale(pf, w.pf);

    for (std::size_t b = 0; b < fwd.mask_logits.size(); ++b) {
        Var logits = fwd.mask_logits[b];  // N x T
        Var cls_logits = fwd.class_logits[b];
        const std::size_t t = g.value(logits).cols();

        Tensor mask_probs = g.value(logits);
        for (auto& x : mask_probs.storage()) x = 1.0 / (1.0 + std::exp(-x));
        Tensor class_probs = g.value(cls_logits);
        for (std::size_t q = 0; q < t; ++q) {
            auto row = class_probs.row(q);
            const double mx = *std::max_element(row.begin(), row.end());
            double s = 0;
            for (auto& x : row) s += (x = std::exp(x - mx));
            for (auto& x : row) x /= s;
        }
        MatchResult match = hungarian_match(build_cost(mask_probs, class_probs, targets));

        BlockLoss bl;
        std::vector<std::size_t> labels(t, classes);
        std::vector<double> weights(t, config.no_object_weight);
        for (auto [q, k] : match.pairs) {
            labels[q] = targets.targets[k].cls;
            weights[q] = 1.0;
        }
        Var lcls = cls_loss(g, cls_logits, labels, weights);
        bl.cls = g.value(lcls).item();
        total = g.add(total, g.scale(lcls, w.cls));

        if (!match.pairs.empty()) {
            std::vector<std::uint32_t> qidx;
            Tensor tm = Tensor::matrix(match.pairs.size(), targets.points);
            for (std::size_t r = 0; r < match.pairs.size(); ++r) {
                qidx.push_back(static_cast<std::uint32_t>(match.pairs[r].first));
                const auto src = targets.masks.row(match.pairs[r].second);
                std::copy(src.begin(), src.end(), tm.row(r).begin());
            }
            auto sel = std::make_shared<const ad::SparseRows>(ad::SparseRows::gather(qidx, t));
            Var matched = g.sparse(g.transpose(logits), sel);  // K x N
            Var lce = bce_mask_loss(g, matched, tm);
            Var ldice = dice_loss(g, g.sigmoid(matched), tm);
            bl.ce = g.value(lce).item();
            bl.dice = g.value(ldice).item();
            total = g.add(total, g.add(g.scale(lce, w.ce), g.scale(ldice, w.dice)));
        }
        out.report.blocks.push_back(bl);
        out.matches.push_back(std::move(match));
    }
    out.total = total;
    out.report.total = g.value(total).item();
    return out;
}

}  // namespace p4d::sup
