#include "p4d/decoder/decoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "p4d/util/rng.hpp"

namespace p4d::dec {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

AttentionProj make_proj(ad::ParameterSet& params, const std::string& name, std::size_t d, std::uint64_t seed) {
    return {ad::Linear(params, name + ".q", d, d, util::mix_seed(seed, 0), false),
            ad::Linear(params, name + ".k", d, d, util::mix_seed(seed, 1), false),
            ad::Linear(params, name + ".v", d, d, util::mix_seed(seed, 2), false)};
}

Var attention_logits(Graph& g, Var q, Var features, Var encoding, Var mask_bias, Var alpha,
                     const AttentionProj& proj, bool use_mask_bias) {
    const Tensor& f = g.value(features);
    if (encoding.valid() && g.value(encoding).rows() != f.rows())
        throw ad::ShapeError("soft_masked_xattn: encoding rows do not match feature rows");
    if (use_mask_bias && mask_bias.valid() && g.value(mask_bias).rows() != f.rows())
        throw ad::ShapeError("soft_masked_xattn: mask bias rows do not match feature rows");
    Var keys = proj.k(g, features);
    if (encoding.valid()) keys = g.add(keys, encoding);
    Var logits = g.matmul_nt(proj.q(g, q), keys);
    if (use_mask_bias && mask_bias.valid()) logits = g.add(logits, g.mul(g.transpose(mask_bias), alpha));
    const double d = static_cast<double>(g.value(q).cols());
    return g.scale(logits, 1.0 / std::sqrt(d));
}

}  // namespace

Var attention_weights(Graph& g, Var q, Var features, Var encoding, Var mask_bias, Var alpha,
                      const AttentionProj& proj, bool use_mask_bias) {
    return g.softmax(attention_logits(g, q, features, encoding, mask_bias, alpha, proj, use_mask_bias));
}

Var soft_masked_xattn(Graph& g, Var q, Var features, Var encoding, Var mask_bias, Var alpha,
                      const AttentionProj& proj, bool use_mask_bias) {
    Var attn = attention_weights(g, q, features, encoding, mask_bias, alpha, proj, use_mask_bias);
    return g.layer_norm(g.add(q, g.matmul(attn, proj.v(g, features))));
}

Var self_attention(Graph& g, Var q, const AttentionProj& proj) {
    const double d = static_cast<double>(g.value(q).cols());
    Var logits = g.scale(g.matmul_nt(proj.q(g, q), proj.k(g, q)), 1.0 / std::sqrt(d));
    return g.layer_norm(g.add(q, g.matmul(g.softmax(logits), proj.v(g, q))));
}

Var feed_forward(Graph& g, Var q, const ad::Mlp& ffn) { return g.layer_norm(g.add(q, ffn(g, q))); }

Var predict_masks(Graph& g, Var q, Var z) { return g.matmul_nt(z, q); }

Var voxel_mask_bias(Graph& g, Var point_masks, const enc::ClipGeometry& geo, std::size_t level) {
    if (level > 3) throw std::out_of_range("voxel_mask_bias: level must be 0..3");
    Var mv = g.sparse(point_masks, geo.p2v);
    for (std::size_t l = 0; l < level; ++l) mv = g.sparse(mv, geo.pool[l]);
    return mv;
}

Var gather_image_features(Graph& g, const enc::ImagePyramid& images, const enc::ClipGeometry& geo,
                          std::size_t level) {
    const auto& lev = geo.levels.at(level);
    return g.sparse(g.concat_rows({images.i4.features, images.i8.features}), lev.image_sample);
}

Decoder::Decoder(ad::ParameterSet& params, const DecoderConfig& config, std::uint64_t seed) : config_(config) {
    const std::size_t d = config.dim;
    queries_ = &params.add("decoder.queries", {config.queries, d});
    ad::init_normal(*queries_, 1.0, util::mix_seed(seed, 1000));
    for (std::size_t b = 0; b < kBlocks; ++b) {
        const std::string p = "decoder.block" + std::to_string(b);
        const std::uint64_t s = util::mix_seed(seed, 2000 + b);
        auto& blk = blocks_[b];
        blk.voxel = make_proj(params, p + ".voxel", d, util::mix_seed(s, 0));
        blk.image = make_proj(params, p + ".image", d, util::mix_seed(s, 1));
        blk.self1 = make_proj(params, p + ".self1", d, util::mix_seed(s, 2));
        blk.self2 = make_proj(params, p + ".self2", d, util::mix_seed(s, 3));
        blk.ffn1 = ad::Mlp(params, p + ".ffn1", {d, 2 * d, d}, util::mix_seed(s, 4));
        blk.ffn2 = ad::Mlp(params, p + ".ffn2", {d, 2 * d, d}, util::mix_seed(s, 5));
        blk.alpha = &params.add(p + ".alpha", {1, 1}, 1.0);
    }
    class_head_ = ad::Linear(params, "decoder.class_head", d, config.classes + 1, util::mix_seed(seed, 3000));
}

Var Decoder::fusion_block(Graph& g, Var q, std::size_t block, Var z, Var voxels, const enc::ImagePyramid& images,
                          const enc::ClipGeometry& geo, std::size_t level) const {
    const auto& blk = blocks_.at(block);
    const bool masked = config_.use_mask_bias;
    Var alpha = g.param(*blk.alpha);
    const auto& lev = geo.levels[level];

    Var mv;
    if (masked) mv = voxel_mask_bias(g, predict_masks(g, q, z), geo, level);
    q = soft_masked_xattn(g, q, voxels, g.constant(lev.encoding), mv, alpha, blk.voxel, masked);
    q = self_attention(g, q, blk.self1);
    q = feed_forward(g, q, blk.ffn1);

    // With no projectable voxels the image cross-attention is a pass-through.
    if (!lev.image_voxel.empty()) {
        Var mf;
        if (masked) mf = g.sparse(voxel_mask_bias(g, predict_masks(g, q, z), geo, level), lev.image_gather);
        Var feats = gather_image_features(g, images, geo, level);
        q = soft_masked_xattn(g, q, feats, g.constant(lev.image_encoding), mf, alpha, blk.image, masked);
    }
    q = self_attention(g, q, blk.self2);
    return feed_forward(g, q, blk.ffn2);
}

Decoder::Output Decoder::decode(Graph& g, Var z, const std::array<Var, 4>& voxels, const enc::ImagePyramid& images,
                                const enc::ClipGeometry& geo) const {
    for (const auto& v : voxels)
        if (!v.valid()) throw std::invalid_argument("decode: every stride must be present");
    Output out;
    Var q = g.param(*queries_);
    for (std::size_t b = 0; b < kBlocks; ++b) {
        const std::size_t level = kBlocks - 1 - b;
        q = fusion_block(g, q, b, z, voxels[level], images, geo, level);
        out.queries.push_back(q);
    }
    return out;
}

Var Decoder::predict_classes(Graph& g, Var q) const { return class_head_(g, q); }

PanopticAssembly assemble_panoptic(const Tensor& mask_logits, const Tensor& class_logits, const Tensor& queries,
                                   const std::vector<bool>& thing, std::uint16_t fallback_class,
                                   std::span<const geom::Vec3> xyz, std::span<const int> slot) {
    const std::size_t n = mask_logits.rows(), t = mask_logits.cols(), c = thing.size();
    if (class_logits.rows() != t || class_logits.cols() != c + 1)
        throw ad::ShapeError("assemble_panoptic: class logits must be T x (1 + C)");
    if (xyz.size() != n || slot.size() != n) throw ad::ShapeError("assemble_panoptic: point count mismatch");

    struct Active {
        std::size_t query;
        std::uint16_t cls;
        double prob;
    };
    std::vector<Active> active;
    for (std::size_t q = 0; q < t; ++q) {
        const auto row = class_logits.row(q);
        std::size_t best = 0;
        for (std::size_t k = 1; k <= c; ++k)
            if (row[k] > row[best]) best = k;
        if (best == c) continue;
        double denom = 0;
        for (std::size_t k = 0; k <= c; ++k) denom += std::exp(row[k] - row[best]);
        active.push_back({q, static_cast<std::uint16_t>(best), 1.0 / denom});
    }

    PanopticAssembly out;
    out.cls.assign(n, fallback_class);
    out.tracklet.assign(n, -1);
    if (active.empty()) return out;

    std::vector<std::int32_t> tracklet_of(active.size(), -1);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_score = -1;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const double s = active[a].prob / (1.0 + std::exp(-mask_logits(i, active[a].query)));
            if (s > best_score) {
                best_score = s;
                best = a;
            }
        }
        const auto& win = active[best];
        out.cls[i] = win.cls;
        if (!thing[win.cls]) continue;
        if (tracklet_of[best] < 0) {
            tracklet_of[best] = static_cast<std::int32_t>(out.tracklets.size());
            Tracklet tr;
            tr.query_index = win.query;
            const auto qrow = queries.row(win.query);
            tr.query.assign(qrow.begin(), qrow.end());
            tr.cls = win.cls;
            tr.score = win.prob;
            out.tracklets.push_back(std::move(tr));
        }
        out.tracklet[i] = tracklet_of[best];
        out.tracklets[static_cast<std::size_t>(tracklet_of[best])].points[static_cast<std::size_t>(slot[i])].push_back(
            static_cast<std::uint32_t>(i));
    }
    for (auto& tr : out.tracklets) {
        tr.first_slot = tr.points[0].empty() ? 1 : 0;
        tr.last_slot = tr.points[1].empty() ? 0 : 1;
        const auto& pts = tr.points[static_cast<std::size_t>(tr.last_slot)];
        geom::Vec3 sum{0, 0, 0};
        for (auto i : pts)
            for (int k = 0; k < 3; ++k) sum[k] += xyz[i][k];
        for (int k = 0; k < 3; ++k) tr.centroid[k] = sum[k] / static_cast<double>(pts.size());
    }
    return out;
}

PanopticModel::PanopticModel(const ModelConfig& config) : config_(config) {
    if (config.thing.empty()) throw std::invalid_argument("model needs at least one class");
    if (config.fallback_class >= config.thing.size() || config.thing[config.fallback_class])
        throw std::invalid_argument("fallback class must be a stuff class");
    encoder_ = enc::Encoder(params_, {config.dim, config.voxel_size, config.use_images}, util::mix_seed(config.seed, 1));
    decoder_ = Decoder(params_, {config.dim, config.queries, config.thing.size(), config.use_mask_bias},
                       util::mix_seed(config.seed, 2));
}

enc::ClipGeometry PanopticModel::prepare(const synth::PointCloudClip& clip) const {
    return enc::prepare_clip(clip, encoder_.config());
}

PanopticModel::Forward PanopticModel::forward(Graph& g, const enc::ClipGeometry& geo,
                                              const std::vector<synth::Image>& images) const {
    Forward f;
    f.encoded = encoder_.forward(g, geo, images);
    f.queries = decoder_.decode(g, f.encoded.z, f.encoded.voxels, f.encoded.images, geo).queries;
    for (Var q : f.queries) {
        f.mask_logits.push_back(predict_masks(g, q, f.encoded.z));
        f.class_logits.push_back(decoder_.predict_classes(g, q));
    }
    return f;
}

PanopticAssembly PanopticModel::infer(const synth::PointCloudClip& clip) const { return infer(clip, prepare(clip)); }

PanopticAssembly PanopticModel::infer(const synth::PointCloudClip& clip, const enc::ClipGeometry& geo) const {
    Graph g;
    const auto f = forward(g, geo, clip.images);
    std::vector<int> slot(clip.size());
    for (std::size_t i = 0; i < clip.size(); ++i) slot[i] = clip.slot(i);
    return assemble_panoptic(g.value(f.mask_logits.back()), g.value(f.class_logits.back()), g.value(f.queries.back()),
                             config_.thing, config_.fallback_class, clip.xyz, slot);
}

}  // namespace p4d::dec
