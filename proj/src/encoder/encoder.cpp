#include "p4d/encoder/encoder.hpp"

#include <stdexcept>
#include <string>

#include "p4d/util/rng.hpp"

namespace p4d::enc {

using ad::Graph;
using ad::SparseRows;
using ad::Tensor;
using ad::Var;

namespace {

std::shared_ptr<const SparseRows> share(SparseRows m) { return std::make_shared<const SparseRows>(std::move(m)); }

void append_taps(SparseRows& m, const PointProjection& pr, const std::vector<std::size_t>& height,
                 const std::vector<std::size_t>& width, const std::vector<std::size_t>& offset, int stride,
                 std::size_t base) {
    const auto c = static_cast<std::size_t>(pr.camera);
    for (const auto& tap : geom::bilinear_taps(pr.u, pr.v, stride, height[c], width[c])) {
        if (tap.weight == 0.0) continue;
        m.add(static_cast<std::uint32_t>(base + offset[c] + tap.cell), tap.weight);
    }
    m.end_row();
}

struct LevelLayout {
    std::vector<std::size_t> height, width, offset;
    std::size_t rows = 0;
};

LevelLayout layout_for(const std::vector<geom::CameraModel>& cams, int stride) {
    LevelLayout l;
    for (const auto& c : cams) {
        l.height.push_back(static_cast<std::size_t>(c.height / stride));
        l.width.push_back(static_cast<std::size_t>(c.width / stride));
        l.offset.push_back(l.rows);
        l.rows += l.height.back() * l.width.back();
    }
    return l;
}

}  // namespace

std::vector<PointProjection> project_points(std::span<const geom::Vec3> xyz,
                                            const std::vector<geom::CameraModel>& cameras) {
    std::vector<PointProjection> out(xyz.size());
    for (std::size_t i = 0; i < xyz.size(); ++i) {
        for (std::size_t k = 0; k < cameras.size(); ++k) {
            const auto pr = geom::project_point(xyz[i], cameras[k]);
            if (!pr.valid) continue;
            out[i] = {static_cast<int>(k), pr.u, pr.v};
            break;
        }
    }
    return out;
}

Tensor init_point_features(const synth::PointCloudClip& clip, const geom::SparseVoxelGrid& grid) {
    if (grid.point_to_voxel.size() != clip.size())
        throw std::invalid_argument("init_point_features: grid was not built from this clip");
    Tensor f = Tensor::matrix(clip.size(), 8);
    for (std::size_t i = 0; i < clip.size(); ++i) {
        const auto& p = clip.xyz[i];
        const auto c = grid.center(grid.point_to_voxel[i]);
        const double row[8] = {p[0], p[1], p[2], clip.timestamp[i], clip.intensity[i],
                               p[0] - c[0], p[1] - c[1], p[2] - c[2]};
        std::copy(row, row + 8, f.row(i).begin());
    }
    return f;
}

ClipGeometry prepare_clip(const synth::PointCloudClip& clip, const EncoderConfig& config) {
    if (clip.size() == 0) throw std::invalid_argument("prepare_clip: empty clip");
    for (const auto& cam : clip.cameras)
        if (cam.height % 8 != 0 || cam.width % 8 != 0)
            throw std::invalid_argument("prepare_clip: image size must be divisible by 8");
    ClipGeometry geo;
    geo.points = clip.size();
    geo.pyramid = geom::build_pyramid(clip.xyz, config.voxel_size);
    const auto& base = geo.pyramid.levels[0];
    geo.point_input = init_point_features(clip, base);
    geo.p2v = share(SparseRows::group_mean(base.point_to_voxel, base.size()));
    geo.v2p = share(SparseRows::gather(base.point_to_voxel, base.size()));
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& parent = geo.pyramid.parent[l];
        const std::size_t coarse = geo.pyramid.levels[l + 1].size();
        geo.pool[l] = share(SparseRows::group_mean(parent, coarse));
        geo.unpool[l] = share(SparseRows::gather(parent, coarse));
    }

    // Point-level fusion maps.
    geo.projection = project_points(clip.xyz, clip.cameras);
    for (std::uint32_t i = 0; i < geo.points; ++i)
        (geo.projection[i].camera >= 0 ? geo.projectable : geo.non_projectable).push_back(i);
    geo.select_projectable = share(SparseRows::gather(geo.projectable, geo.points));
    geo.select_other = share(SparseRows::gather(geo.non_projectable, geo.points));
    std::vector<std::uint32_t> placement;
    placement.reserve(geo.points);
    for (auto i : geo.projectable) placement.push_back(i);
    for (auto i : geo.non_projectable) placement.push_back(i);
    geo.merge = share(SparseRows::scatter(placement, geo.points));

    const LevelLayout l4 = layout_for(clip.cameras, 4);
    const LevelLayout l8 = layout_for(clip.cameras, 8);
    SparseRows sample;
    sample.in_rows = l4.rows;
    for (auto i : geo.projectable) append_taps(sample, geo.projection[i], l4.height, l4.width, l4.offset, 4, 0);
    geo.point_image_sample = share(std::move(sample));

    // Voxel encodings and image rows per stride.
    for (std::size_t l = 0; l < 4; ++l) {
        auto& lev = geo.levels[l];
        const auto centers = geo.pyramid.levels[l].centers();
        lev.encoding = geom::positional_encoding(centers, {0, 0, 0}, config.dim);
        const auto proj = project_points(centers, clip.cameras);
        SparseRows s;
        s.in_rows = l4.rows + l8.rows;
        for (std::uint32_t v = 0; v < centers.size(); ++v) {
            if (proj[v].camera < 0) continue;
            append_taps(s, proj[v], l4.height, l4.width, l4.offset, 4, 0);
            lev.image_voxel.push_back(v);
            append_taps(s, proj[v], l8.height, l8.width, l8.offset, 8, l4.rows);
            lev.image_voxel.push_back(v);
        }
        lev.image_sample = share(std::move(s));
        lev.image_gather = share(SparseRows::gather(lev.image_voxel, centers.size()));
        lev.image_encoding = ad::apply(*lev.image_gather, lev.encoding);
    }
    return geo;
}

Encoder::Encoder(ad::ParameterSet& params, const EncoderConfig& config, std::uint64_t seed) : config_(config) {
    const std::size_t d = config.dim;
    if (d == 0 || d % 4 != 0) throw std::invalid_argument("encoder dimension must be a positive multiple of 4");
    std::uint64_t tag = 0;
    auto next = [&] { return util::mix_seed(seed, tag++); };
    patch_embed_ = ad::Linear(params, "image.patch", 48, d, next());
    image4_ = ad::Mlp(params, "image.i4", {d, d, d}, next());
    image8_ = ad::Mlp(params, "image.i8", {d, d, d}, next());
    point_ = ad::Mlp(params, "lidar.point", {8, d, d}, next());
    stem_ = ad::Mlp(params, "lidar.stem", {d, d, d}, next());
    exchange1_ = ad::Mlp(params, "lidar.v2p1", {d, d, d}, next());
    exchange2_ = ad::Mlp(params, "lidar.v2p2", {d, d, d}, next());
    for (std::size_t l = 0; l < 3; ++l) {
        down_[l] = ad::Mlp(params, "lidar.down" + std::to_string(l), {d, d, d}, next());
        up_[l] = ad::Mlp(params, "lidar.up" + std::to_string(l), {d, d, d}, next());
    }
    fusion_ = ad::Mlp(params, "lidar.fusion", {2 * d, d, d, d}, next());
    pseudo_ = ad::Mlp(params, "lidar.pseudo", {d, d, d, d}, next());
}

ImagePyramid Encoder::encode_images(Graph& g, const std::vector<synth::Image>& images) const {
    ImagePyramid out;
    out.i4.stride = 4;
    out.i8.stride = 8;
    std::size_t rows4 = 0, rows8 = 0;
    for (const auto& img : images) {
        if (img.height % 8 != 0 || img.width % 8 != 0)
            throw std::invalid_argument("encode_images: image size " + std::to_string(img.height) + "x" +
                                        std::to_string(img.width) + " is not divisible by 8");
        const auto h4 = static_cast<std::size_t>(img.height / 4), w4 = static_cast<std::size_t>(img.width / 4);
        out.i4.height.push_back(h4);
        out.i4.width.push_back(w4);
        out.i4.offset.push_back(rows4);
        out.i8.height.push_back(h4 / 2);
        out.i8.width.push_back(w4 / 2);
        out.i8.offset.push_back(rows8);
        rows4 += h4 * w4;
        rows8 += (h4 / 2) * (w4 / 2);
    }
    const std::size_t d = config_.dim;
    if (!config_.use_images || images.empty()) {
        out.i4.features = g.constant(Tensor::matrix(rows4, d));
        out.i8.features = g.constant(Tensor::matrix(rows8, d));
        return out;
    }

    // Non-overlapping 4x4 patches, pixels scaled to [-0.5, 0.5].
    Tensor patches = Tensor::matrix(rows4, 48);
    SparseRows pool;
    pool.in_rows = rows4;
    for (std::size_t k = 0; k < images.size(); ++k) {
        const auto& img = images[k];
        const std::size_t h4 = out.i4.height[k], w4 = out.i4.width[k];
        for (std::size_t r = 0; r < h4; ++r) {
            for (std::size_t c = 0; c < w4; ++c) {
                auto row = patches.row(out.i4.offset[k] + r * w4 + c);
                std::size_t j = 0;
                for (std::size_t y = 0; y < 4; ++y)
                    for (std::size_t x = 0; x < 4; ++x)
                        for (std::size_t ch = 0; ch < 3; ++ch)
                            row[j++] = img.rgb[((r * 4 + y) * static_cast<std::size_t>(img.width) + c * 4 + x) * 3 + ch] /
                                           255.0 -
                                       0.5;
            }
        }
        for (std::size_t r = 0; r < h4 / 2; ++r) {
            for (std::size_t c = 0; c < w4 / 2; ++c) {
                for (std::size_t y = 0; y < 2; ++y)
                    for (std::size_t x = 0; x < 2; ++x)
                        pool.add(static_cast<std::uint32_t>(out.i4.offset[k] + (2 * r + y) * w4 + 2 * c + x), 0.25);
                pool.end_row();
            }
        }
    }
    Var embedded = g.relu(patch_embed_(g, g.constant(std::move(patches))));
    out.i4.features = image4_(g, embedded);
    Var pooled = g.sparse(out.i4.features, std::make_shared<const SparseRows>(std::move(pool)));
    out.i8.features = image8_(g, pooled);
    return out;
}

Var Encoder::point_level_fusion(Graph& g, Var z, const ImagePyramid& images, const ClipGeometry& geo,
                                FusionInputs* inputs) const {
    std::vector<Var> parts;
    if (!geo.projectable.empty()) {
        Var zp = g.sparse(z, geo.select_projectable);
        Var zi = g.sparse(images.i4.features, geo.point_image_sample);
        if (inputs) *inputs = {zp, zi};
        parts.push_back(fusion_(g, g.concat_cols({zp, zi})));
    } else if (inputs) {
        *inputs = {};
    }
    if (!geo.non_projectable.empty()) parts.push_back(pseudo_(g, g.sparse(z, geo.select_other)));
    return g.sparse(g.concat_rows(parts), geo.merge);
}

Encoder::Output Encoder::forward(Graph& g, const ClipGeometry& geo, const std::vector<synth::Image>& images) const {
    if (geo.voxel_count(0) == 0) throw std::invalid_argument("encoder: empty voxel grid");
    Output out;
    out.images = encode_images(g, images);
    out.fusion.resize(2);

    Var z = point_(g, g.constant(geo.point_input));
    Var v1 = g.sparse(z, geo.p2v);
    v1 = g.layer_norm(g.add(v1, stem_(g, v1)));
    z = g.add(z, exchange1_(g, g.sparse(v1, geo.v2p)));
    z = point_level_fusion(g, z, out.images, geo, &out.fusion[0]);
    v1 = g.add(v1, g.sparse(z, geo.p2v));

    std::array<Var, 4> down{v1, {}, {}, {}};
    for (std::size_t l = 0; l < 3; ++l) {
        Var pooled = g.sparse(down[l], geo.pool[l]);
        down[l + 1] = g.layer_norm(g.add(pooled, down_[l](g, pooled)));
    }
    out.voxels[3] = down[3];
    for (std::size_t l = 3; l-- > 0;) {
        Var up = g.add(g.sparse(out.voxels[l + 1], geo.unpool[l]), down[l]);
        out.voxels[l] = g.layer_norm(g.add(up, up_[l](g, up)));
    }
    z = g.add(z, exchange2_(g, g.sparse(out.voxels[0], geo.v2p)));
    out.z = point_level_fusion(g, z, out.images, geo, &out.fusion[1]);
    return out;
}

}  // namespace p4d::enc
