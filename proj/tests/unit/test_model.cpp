#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <type_traits>

#include "p4d/autodiff/optim.hpp"
#include "p4d/decoder/decoder.hpp"
#include "p4d/encoder/encoder.hpp"
#include "p4d/util/rng.hpp"

using namespace p4d;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    util::Rng rng(seed);
    for (auto& v : t.storage()) v = scale * rng.uniform(-1.0, 1.0);
    return t;
}

Var weighted_sum(Graph& g, Var y, std::uint64_t seed) {
    const auto& v = g.value(y);
    return g.sum(g.mul(y, g.constant(random_tensor(v.rows(), v.cols(), seed))));
}

synth::SceneConfig small_config() {
    synth::SceneConfig cfg;
    cfg.frames = 3;
    cfg.lidar.points_per_frame = 120;
    cfg.lidar.max_points_per_actor = 30;
    for (auto& cam : cfg.cameras) {
        cam.height = 32;
        cam.width = 64;
    }
    return cfg;
}

const synth::Scene& small_scene() {
    static const synth::Scene scene = synth::generate_scene(small_config(), 11);
    return scene;
}

std::vector<bool> palette_things() {
    std::vector<bool> thing;
    for (const auto& c : synth::default_palette()) thing.push_back(c.thing());
    return thing;
}

dec::ModelConfig small_model(std::size_t dim = 8, std::size_t queries = 6) {
    dec::ModelConfig mc;
    mc.dim = dim;
    mc.queries = queries;
    mc.thing = palette_things();
    mc.seed = 5;
    return mc;
}

// Reorders the points of a clip; images and cameras are unchanged.
synth::PointCloudClip permute_points(const synth::PointCloudClip& c, const std::vector<std::size_t>& perm) {
    synth::PointCloudClip out = c;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.xyz[i] = c.xyz[perm[i]];
        out.intensity[i] = c.intensity[perm[i]];
        out.timestamp[i] = c.timestamp[perm[i]];
        out.cls[i] = c.cls[perm[i]];
        out.track[i] = c.track[perm[i]];
        out.source_index[i] = c.source_index[perm[i]];
    }
    return out;
}

}  // namespace

TEST(Encoder, ProjectionPrefersFirstValidCamera) {
    const auto front = geom::make_yaw_camera(0.0, 1.5707963267948966, 32, 64);
    const auto left = geom::make_yaw_camera(1.5707963267948966, 1.5707963267948966, 32, 64);
    const std::vector<geom::Vec3> pts{{6, 0.5, 0.2}, {0.5, 6, 0.2}, {-6, 0.1, 0.0}};
    const auto both = enc::project_points(pts, {front, front});
    EXPECT_EQ(both[0].camera, 0);
    const auto rig = enc::project_points(pts, {front, left});
    EXPECT_EQ(rig[0].camera, 0);
    EXPECT_EQ(rig[1].camera, 1);
    EXPECT_EQ(rig[2].camera, -1);
}

TEST(Encoder, FusionPartitionCoversEveryPointOnce) {
    const auto clip = synth::make_clip(small_scene(), 1);
    const auto geo = enc::prepare_clip(clip, {8, 0.1, true});
    ASSERT_EQ(geo.projectable.size() + geo.non_projectable.size(), clip.size());
    std::vector<int> seen(clip.size(), 0);
    for (auto i : geo.projectable) {
        ++seen[i];
        EXPECT_GE(geo.projection[i].camera, 0);
    }
    for (auto i : geo.non_projectable) {
        ++seen[i];
        EXPECT_EQ(geo.projection[i].camera, -1);
    }
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    EXPECT_FALSE(geo.projectable.empty());
    EXPECT_FALSE(geo.non_projectable.empty());
}

TEST(Encoder, OutputShapes) {
    const auto clip = synth::make_clip(small_scene(), 1);
    ad::ParameterSet params;
    enc::Encoder encoder(params, {8, 0.1, true}, 3);
    const auto geo = enc::prepare_clip(clip, encoder.config());
    Graph g;
    const auto out = encoder.forward(g, geo, clip.images);
    EXPECT_EQ(g.value(out.z).rows(), clip.size());
    EXPECT_EQ(g.value(out.z).cols(), 8u);
    for (std::size_t l = 0; l < 4; ++l) {
        EXPECT_EQ(g.value(out.voxels[l]).rows(), geo.voxel_count(l));
        EXPECT_EQ(g.value(out.voxels[l]).cols(), 8u);
    }
    EXPECT_EQ(g.value(out.images.i4.features).rows(), 3u * 8 * 16);
    EXPECT_EQ(g.value(out.images.i8.features).rows(), 3u * 4 * 8);
    ASSERT_EQ(out.fusion.size(), 2u);
    EXPECT_EQ(g.value(out.fusion[0].projectable).rows(), geo.projectable.size());
    EXPECT_EQ(g.value(out.fusion[1].image).rows(), geo.projectable.size());
}

TEST(Encoder, LidarOnlyZeroesImageFeatures) {
    const auto clip = synth::make_clip(small_scene(), 1);
    ad::ParameterSet params;
    enc::Encoder encoder(params, {8, 0.1, false}, 3);
    Graph g;
    const auto imgs = encoder.encode_images(g, clip.images);
    for (double v : g.value(imgs.i4.features).storage()) EXPECT_EQ(v, 0.0);
    for (double v : g.value(imgs.i8.features).storage()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, ConstantImagesGiveConstantFeatureMaps) {
    auto clip = synth::make_clip(small_scene(), 1);
    for (auto& img : clip.images) std::fill(img.rgb.begin(), img.rgb.end(), std::uint8_t{77});
    ad::ParameterSet params;
    enc::Encoder encoder(params, {8, 0.1, true}, 3);
    Graph g;
    const auto imgs = encoder.encode_images(g, clip.images);
    for (const Tensor* t : {&g.value(imgs.i4.features), &g.value(imgs.i8.features)})
        for (std::size_t r = 1; r < t->rows(); ++r)
            for (std::size_t c = 0; c < t->cols(); ++c) EXPECT_EQ((*t)(r, c), (*t)(0, c));
}

TEST(Encoder, PointPermutationPermutesFeatures) {
    const auto clip = synth::make_clip(small_scene(), 1);
    std::vector<std::size_t> perm(clip.size());
    std::iota(perm.begin(), perm.end(), 0);
    util::Rng rng(4);
    rng.shuffle(perm);
    const auto shuffled = permute_points(clip, perm);
    ad::ParameterSet params;
    enc::Encoder encoder(params, {8, 0.1, true}, 3);
    Graph g1, g2;
    const auto a = encoder.forward(g1, enc::prepare_clip(clip, encoder.config()), clip.images);
    const auto b = encoder.forward(g2, enc::prepare_clip(shuffled, encoder.config()), shuffled.images);
    const Tensor& za = g1.value(a.z);
    const Tensor& zb = g2.value(b.z);
    double worst = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t c = 0; c < za.cols(); ++c) worst = std::max(worst, std::abs(zb(i, c) - za(perm[i], c)));
    EXPECT_LT(worst, 1e-9);
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
    synth::SceneConfig cfg = small_config();
    cfg.lidar.points_per_frame = 24;
    cfg.lidar.max_points_per_actor = 6;
    const auto scene = synth::generate_scene(cfg, 2);
    const auto clip = synth::make_clip(scene, 1);
    ad::ParameterSet params;
    enc::Encoder encoder(params, {4, 0.1, true}, 9);
    const auto geo = enc::prepare_clip(clip, encoder.config());
    auto loss = [&](Graph& g) { return weighted_sum(g, encoder.forward(g, geo, clip.images).z, 17); };
    for (const char* name : {"lidar.point.0.w", "lidar.stem.1.w", "lidar.fusion.0.w", "lidar.pseudo.2.b",
                             "lidar.down0.0.w", "lidar.up2.1.w", "image.patch.b", "image.i4.0.w"}) {
        SCOPED_TRACE(name);
        EXPECT_LT(ad::finite_diff_check(loss, params.at(name)), 1e-4);
    }
}

TEST(Attention, RowsSumToOne) {
    ad::ParameterSet params;
    dec::Decoder decoder(params, {8, 5, 3, true}, 1);
    const auto& blk = decoder.block(0);
    Graph g;
    Var q = g.constant(random_tensor(5, 8, 1));
    Var f = g.constant(random_tensor(11, 8, 2));
    Var e = g.constant(random_tensor(11, 8, 3, 0.1));
    Var m = g.constant(random_tensor(11, 5, 4, 3.0));
    Var w = dec::attention_weights(g, q, f, e, m, g.param(*blk.alpha), blk.voxel);
    const Tensor& a = g.value(w);
    ASSERT_EQ(a.rows(), 5u);
    ASSERT_EQ(a.cols(), 11u);
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0;
        for (double x : a.row(r)) {
            EXPECT_GE(x, 0.0);
            s += x;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Attention, SingleKeyReducesToValueProjection) {
    ad::ParameterSet params;
    dec::Decoder decoder(params, {8, 3, 3, true}, 1);
    const auto& blk = decoder.block(1);
    const Tensor q = random_tensor(3, 8, 5), f = random_tensor(1, 8, 6);
    Graph g;
    Var out = dec::soft_masked_xattn(g, g.constant(q), g.constant(f), Var{}, g.constant(random_tensor(1, 3, 7)),
                                     g.param(*blk.alpha), blk.voxel);
    // Expected: layer_norm(q + f Wv) per row.
    const Tensor& wv = blk.voxel.v.weight();
    for (std::size_t r = 0; r < 3; ++r) {
        std::vector<double> row(8);
        for (std::size_t c = 0; c < 8; ++c) {
            double s = 0;
            for (std::size_t k = 0; k < 8; ++k) s += f(0, k) * wv(k, c);
            row[c] = q(r, c) + s;
        }
        const double mean = std::accumulate(row.begin(), row.end(), 0.0) / 8;
        double var = 0;
        for (double x : row) var += (x - mean) * (x - mean);
        var /= 8;
        for (std::size_t c = 0; c < 8; ++c)
            EXPECT_NEAR(g.value(out)(r, c), (row[c] - mean) / std::sqrt(var + 1e-5), 1e-12);
    }
}

TEST(Attention, LargeAlphaSelectsMaskedRow) {
    ad::ParameterSet params;
    dec::Decoder decoder(params, {8, 4, 3, true}, 2);
    const auto& blk = decoder.block(2);
    const std::size_t n = 9;
    Tensor onehot = Tensor::matrix(n, 4);
    const std::size_t pick[4] = {3, 0, 8, 5};
    for (std::size_t t = 0; t < 4; ++t) onehot(pick[t], t) = 1.0;
    Tensor alpha = Tensor::from_rows({{1000.0}});
    Graph g;
    Var q = g.constant(random_tensor(4, 8, 8, 0.5));
    Var f = g.constant(random_tensor(n, 8, 9, 0.5));
    Var w = dec::attention_weights(g, q, f, Var{}, g.constant(onehot), g.constant(alpha), blk.voxel);
    const Tensor attended = g.value(g.matmul(w, blk.voxel.v(g, f)));
    const Tensor values = g.value(blk.voxel.v(g, f));
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(attended(t, c), values(pick[t], c), 1e-6);
}

TEST(Attention, SelfAttentionIsQueryPermutationEquivariant) {
    ad::ParameterSet params;
    dec::Decoder decoder(params, {8, 6, 3, true}, 3);
    const Tensor q = random_tensor(6, 8, 10);
    const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
    Tensor qp = Tensor::matrix(6, 8);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t c = 0; c < 8; ++c) qp(i, c) = q(perm[i], c);
    Graph g;
    const Tensor a = g.value(dec::self_attention(g, g.constant(q), decoder.block(0).self1));
    const Tensor b = g.value(dec::self_attention(g, g.constant(qp), decoder.block(0).self1));
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b(i, c), a(perm[i], c), 1e-12);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
    util::Rng rng(12);
    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t d = 4 + 4 * static_cast<std::size_t>(rng.uniform_int(0, 1));
        const auto t = static_cast<std::size_t>(rng.uniform_int(2, 5));
        const auto n = static_cast<std::size_t>(rng.uniform_int(3, 9));
        ad::ParameterSet params;
        dec::Decoder decoder(params, {d, t, 3, true}, 20 + static_cast<std::uint64_t>(trial));
        const auto& blk = decoder.block(0);
        Tensor q = random_tensor(t, d, 30 + trial);
        Tensor f = random_tensor(n, d, 40 + trial);
        Tensor e = random_tensor(n, d, 50 + trial, 0.2);
        Tensor m = random_tensor(n, t, 60 + trial, 2.0);
        q.requires_grad = f.requires_grad = m.requires_grad = true;
        auto loss = [&](Graph& g) {
            return weighted_sum(g,
                                dec::soft_masked_xattn(g, g.param(q), g.param(f), g.constant(e), g.param(m),
                                                       g.param(*blk.alpha), blk.voxel),
                                70);
        };
        for (Tensor* p : {&q, &f, &m, blk.alpha, &blk.voxel.q.weight(), &blk.voxel.k.weight(), &blk.voxel.v.weight()})
            EXPECT_LT(ad::finite_diff_check(loss, *p), 1e-4);
    }
}

TEST(Decoder, ZeroAlphaMatchesDisabledMaskBias) {
    const auto clip = synth::make_clip(small_scene(), 1);
    auto with = small_model();
    auto without = small_model();
    without.use_mask_bias = false;
    dec::PanopticModel a(with), b(without);
    for (std::size_t blk = 0; blk < dec::kBlocks; ++blk) a.decoder().block(blk).alpha->storage()[0] = 0.0;
    const auto geo = a.prepare(clip);
    Graph ga, gb;
    const auto fa = a.forward(ga, geo, clip.images);
    const auto fb = b.forward(gb, geo, clip.images);
    for (std::size_t blk = 0; blk < dec::kBlocks; ++blk) {
        EXPECT_TRUE(ad::same_values(ga.value(fa.queries[blk]), gb.value(fb.queries[blk])));
        EXPECT_TRUE(ad::same_values(ga.value(fa.mask_logits[blk]), gb.value(fb.mask_logits[blk])));
    }
}

TEST(Decoder, OutputShapesPerBlock) {
    const auto clip = synth::make_clip(small_scene(), 2);
    dec::PanopticModel model(small_model(8, 6));
    const auto geo = model.prepare(clip);
    Graph g;
    const auto f = model.forward(g, geo, clip.images);
    ASSERT_EQ(f.queries.size(), dec::kBlocks);
    for (std::size_t b = 0; b < dec::kBlocks; ++b) {
        EXPECT_EQ(g.value(f.mask_logits[b]).rows(), clip.size());
        EXPECT_EQ(g.value(f.mask_logits[b]).cols(), 6u);
        EXPECT_EQ(g.value(f.class_logits[b]).rows(), 6u);
        EXPECT_EQ(g.value(f.class_logits[b]).cols(), synth::default_palette().size() + 1);
    }
}

TEST(Decoder, ImageCrossAttentionSkippedWithoutProjectablePoints) {
    auto clip = synth::make_clip(small_scene(), 1);
    // Moving every point behind the rig leaves no projections.
    for (auto& cam : clip.cameras) cam = geom::make_yaw_camera(0.0, 0.2, 32, 64, {0, 0, 100});
    dec::PanopticModel model(small_model());
    const auto geo = model.prepare(clip);
    EXPECT_TRUE(geo.projectable.empty());
    for (const auto& lev : geo.levels) EXPECT_TRUE(lev.image_voxel.empty());
    Graph g;
    const auto f = model.forward(g, geo, clip.images);
    EXPECT_FALSE(f.encoded.fusion[0].projectable.valid());
    for (double v : g.value(f.mask_logits.back()).storage()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Decoder, ModelIsNotCopyable) {
    static_assert(!std::is_copy_constructible_v<dec::PanopticModel>);
    static_assert(!std::is_copy_assignable_v<dec::PanopticModel>);
}

TEST(Decoder, InferenceIsDeterministic) {
    const auto clip = synth::make_clip(small_scene(), 1);
    dec::PanopticModel a(small_model()), b(small_model());
    const auto ra = a.infer(clip), rb = b.infer(clip);
    EXPECT_EQ(ra.cls, rb.cls);
    EXPECT_EQ(ra.tracklet, rb.tracklet);
}

namespace {

struct AssemblyCase {
    Tensor masks, classes, queries;
    std::vector<geom::Vec3> xyz;
    std::vector<int> slot;
};

// Classes: 0 stuff, 1 thing; column 2 is no-object.
AssemblyCase assembly_case() {
    AssemblyCase c;
    c.classes = Tensor::from_rows({{0.0, 4.0, 0.0}, {3.0, 0.0, 0.0}, {0.0, 0.0, 5.0}});
    c.masks = Tensor::from_rows({{5, -5, 9}, {5, -5, 9}, {-5, 5, 9}, {-5, 5, 9}, {5, -5, 9}});
    c.queries = random_tensor(3, 4, 1);
    c.xyz = {{0, 0, 0}, {2, 0, 0}, {9, 9, 9}, {8, 8, 8}, {4, 2, 0}};
    c.slot = {0, 1, 0, 1, 1};
    return c;
}

}  // namespace

TEST(Assembly, InactiveQueriesNeverWinPoints) {
    auto c = assembly_case();
    const auto out = dec::assemble_panoptic(c.masks, c.classes, c.queries, {false, true}, 0, c.xyz, c.slot);
    EXPECT_EQ(out.cls, (std::vector<std::uint16_t>{1, 1, 0, 0, 1}));
    EXPECT_EQ(out.tracklet, (std::vector<std::int32_t>{0, 0, -1, -1, 0}));
    ASSERT_EQ(out.tracklets.size(), 1u);
    const auto& tr = out.tracklets[0];
    EXPECT_EQ(tr.query_index, 0u);
    EXPECT_EQ(tr.first_slot, 0);
    EXPECT_EQ(tr.last_slot, 1);
    EXPECT_EQ(tr.points[0], (std::vector<std::uint32_t>{0}));
    EXPECT_EQ(tr.points[1], (std::vector<std::uint32_t>{1, 4}));
    EXPECT_DOUBLE_EQ(tr.centroid[0], 3.0);
    EXPECT_DOUBLE_EQ(tr.centroid[1], 1.0);
    EXPECT_NEAR(tr.score, std::exp(4.0) / (std::exp(4.0) + 2.0), 1e-12);
    EXPECT_EQ(tr.query, std::vector<double>(c.queries.row(0).begin(), c.queries.row(0).end()));
}

TEST(Assembly, AllQueriesInactiveFallsBack) {
    auto c = assembly_case();
    c.classes = Tensor::from_rows({{0, 0, 1}, {0, 0, 1}, {0, 0, 1}});
    const auto out = dec::assemble_panoptic(c.masks, c.classes, c.queries, {false, true}, 0, c.xyz, c.slot);
    EXPECT_EQ(out.cls, std::vector<std::uint16_t>(5, 0));
    EXPECT_EQ(out.tracklet, std::vector<std::int32_t>(5, -1));
    EXPECT_TRUE(out.tracklets.empty());
}

TEST(Assembly, TiesGoToTheFirstQuery) {
    AssemblyCase c;
    c.classes = Tensor::from_rows({{0.0, 2.0, 0.0}, {0.0, 2.0, 0.0}});
    c.masks = Tensor::from_rows({{1.0, 1.0}, {1.0, 1.0}});
    c.queries = random_tensor(2, 4, 2);
    c.xyz = {{0, 0, 0}, {1, 0, 0}};
    c.slot = {1, 1};
    const auto out = dec::assemble_panoptic(c.masks, c.classes, c.queries, {false, true}, 0, c.xyz, c.slot);
    ASSERT_EQ(out.tracklets.size(), 1u);
    EXPECT_EQ(out.tracklets[0].query_index, 0u);
    EXPECT_EQ(out.tracklets[0].first_slot, 1);
}

TEST(Assembly, RejectsMismatchedShapes) {
    auto c = assembly_case();
    EXPECT_THROW(dec::assemble_panoptic(c.masks, c.classes, c.queries, {false, true, true}, 0, c.xyz, c.slot),
                 ad::ShapeError);
    c.slot.pop_back();
    EXPECT_THROW(dec::assemble_panoptic(c.masks, c.classes, c.queries, {false, true}, 0, c.xyz, c.slot),
                 ad::ShapeError);
}
