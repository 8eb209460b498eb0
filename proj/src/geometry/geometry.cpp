#include "p4d/geometry/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <string>

#include "p4d/util/rng.hpp"

namespace p4d::geom {

namespace {

std::int32_t floor_div2(std::int32_t v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

}  // namespace

VoxelKey voxel_of(const Vec3& p, double voxel_size) {
    return {static_cast<std::int32_t>(std::floor(p[0] / voxel_size)),
            static_cast<std::int32_t>(std::floor(p[1] / voxel_size)),
            static_cast<std::int32_t>(std::floor(p[2] / voxel_size))};
}

VoxelKey parent_of(const VoxelKey& k) { return {floor_div2(k.x), floor_div2(k.y), floor_div2(k.z)}; }

Vec3 SparseVoxelGrid::center(std::size_t i) const {
    const double s = voxel_size * stride;
    const auto& k = coords[i];
    return {(k.x + 0.5) * s, (k.y + 0.5) * s, (k.z + 0.5) * s};
}

std::vector<Vec3> SparseVoxelGrid::centers() const {
    std::vector<Vec3> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = center(i);
    return out;
}

SparseVoxelGrid voxelize(std::span<const Vec3> points, double voxel_size) {
    if (!(voxel_size > 0)) throw std::invalid_argument("voxel size must be positive");
    SparseVoxelGrid grid;
    grid.stride = 1;
    grid.voxel_size = voxel_size;
    std::vector<VoxelKey> keys(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (double c : points[i])
            if (!std::isfinite(c)) throw std::invalid_argument("voxelize: non-finite coordinate at point " + std::to_string(i));
        keys[i] = voxel_of(points[i], voxel_size);
    }
    grid.coords = keys;
    std::sort(grid.coords.begin(), grid.coords.end());
    grid.coords.erase(std::unique(grid.coords.begin(), grid.coords.end()), grid.coords.end());
    grid.point_to_voxel.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        auto it = std::lower_bound(grid.coords.begin(), grid.coords.end(), keys[i]);
        grid.point_to_voxel[i] = static_cast<std::uint32_t>(it - grid.coords.begin());
    }
    return grid;
}

Downsampled downsample(const SparseVoxelGrid& fine) {
    Downsampled out;
    out.coarse.stride = fine.stride * 2;
    out.coarse.voxel_size = fine.voxel_size;
    std::vector<VoxelKey> parents(fine.size());
    for (std::size_t i = 0; i < fine.size(); ++i) parents[i] = parent_of(fine.coords[i]);
    out.coarse.coords = parents;
    std::sort(out.coarse.coords.begin(), out.coarse.coords.end());
    out.coarse.coords.erase(std::unique(out.coarse.coords.begin(), out.coarse.coords.end()), out.coarse.coords.end());
    out.parent.resize(fine.size());
    for (std::size_t i = 0; i < fine.size(); ++i) {
        auto it = std::lower_bound(out.coarse.coords.begin(), out.coarse.coords.end(), parents[i]);
        out.parent[i] = static_cast<std::uint32_t>(it - out.coarse.coords.begin());
    }
    return out;
}

std::vector<std::uint32_t> VoxelPyramid::point_to_level(std::size_t level) const {
    std::vector<std::uint32_t> m = levels[0].point_to_voxel;
    for (std::size_t l = 0; l < level; ++l)
        for (auto& v : m) v = parent[l][v];
    return m;
}

VoxelPyramid build_pyramid(std::span<const Vec3> points, double voxel_size) {
    VoxelPyramid p;
    p.levels[0] = voxelize(points, voxel_size);
    for (std::size_t l = 0; l < 3; ++l) {
        auto d = downsample(p.levels[l]);
        p.levels[l + 1] = std::move(d.coarse);
        p.parent[l] = std::move(d.parent);
    }
    return p;
}

ad::Tensor p2v_scatter_mean(const ad::Tensor& point_features, std::span<const std::uint32_t> point_to_voxel,
                            std::size_t voxel_count) {
    if (point_features.rows() != point_to_voxel.size()) {
        throw ad::ShapeError("p2v_scatter_mean: map length differs from point count");
    }
    return ad::apply(ad::SparseRows::group_mean(point_to_voxel, voxel_count), point_features);
}

ad::Tensor v2p_gather(const ad::Tensor& voxel_features, std::span<const std::uint32_t> point_to_voxel) {
    return ad::apply(ad::SparseRows::gather(point_to_voxel, voxel_features.rows()), voxel_features);
}

void CameraModel::validate() const {
    if (!(fx > 0) || !(fy > 0)) throw CalibrationError("camera focal lengths must be positive");
    if (height <= 0 || width <= 0) throw CalibrationError("camera image extent must be positive");
    const auto& r = rotation;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double d = 0;
            for (int k = 0; k < 3; ++k) d += r[k * 3 + i] * r[k * 3 + j];
            if (std::abs(d - (i == j ? 1.0 : 0.0)) > 1e-9) throw CalibrationError("extrinsic rotation is not orthonormal");
        }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (std::abs(det - 1.0) > 1e-9) throw CalibrationError("extrinsic rotation must have determinant +1");
}

Vec3 CameraModel::to_camera(const Vec3& p) const {
    const auto& r = rotation;
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
}

Vec3 CameraModel::to_sensor(const Vec3& pc) const {
    const Vec3 d{pc[0] - translation[0], pc[1] - translation[1], pc[2] - translation[2]};
    const auto& r = rotation;
    return {r[0] * d[0] + r[3] * d[1] + r[6] * d[2], r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2]};
}

std::array<double, 9> CameraModel::intrinsic_matrix() const { return {fx, 0, cx, 0, fy, cy, 0, 0, 1}; }

std::array<double, 16> CameraModel::extrinsic_matrix() const {
    const auto& r = rotation;
    const auto& t = translation;
    return {r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2], 0, 0, 0, 1};
}

CameraModel CameraModel::from_matrices(std::span<const double> k, std::span<const double> rt, int height,
                                       int width) {
    if (k.size() != 9 || rt.size() != 16) throw CalibrationError("calibration needs 3x3 intrinsics and 4x4 extrinsics");
    CameraModel cam;
    cam.fx = k[0];
    cam.cx = k[2];
    cam.fy = k[4];
    cam.cy = k[5];
    cam.rotation = {rt[0], rt[1], rt[2], rt[4], rt[5], rt[6], rt[8], rt[9], rt[10]};
    cam.translation = {rt[3], rt[7], rt[11]};
    cam.height = height;
    cam.width = width;
    cam.validate();
    return cam;
}

CameraModel make_yaw_camera(double yaw, double hfov, int height, int width, const Vec3& position) {
    CameraModel cam;
    const double c = std::cos(yaw), s = std::sin(yaw);
    // rows: camera x (right), y (down), z (forward) in sensor coordinates
    cam.rotation = {s, -c, 0, 0, 0, -1, c, s, 0};
    const Vec3 rp = {cam.rotation[0] * position[0] + cam.rotation[1] * position[1] + cam.rotation[2] * position[2],
                     cam.rotation[3] * position[0] + cam.rotation[4] * position[1] + cam.rotation[5] * position[2],
                     cam.rotation[6] * position[0] + cam.rotation[7] * position[1] + cam.rotation[8] * position[2]};
    cam.translation = {-rp[0], -rp[1], -rp[2]};
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = (width / 2.0) / std::tan(hfov / 2.0);
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    return cam;
}

Projection project_point(const Vec3& p_sensor, const CameraModel& cam) {
    const Vec3 pc = cam.to_camera(p_sensor);
    Projection pr;
    pr.depth = pc[2];
    if (!(pc[2] > 0)) return pr;
    pr.u = cam.fx * pc[0] / pc[2] + cam.cx;
    pr.v = cam.fy * pc[1] / pc[2] + cam.cy;
    pr.valid = pr.u >= 0 && pr.u < cam.width && pr.v >= 0 && pr.v < cam.height;
    return pr;
}

std::vector<Projection> project(std::span<const Vec3> points, const CameraModel& cam) {
    std::vector<Projection> out(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) out[i] = project_point(points[i], cam);
    return out;
}

Vec3 unproject(double u, double v, double depth, const CameraModel& cam) {
    return {(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth};
}

std::array<BilinearTap, 4> bilinear_taps(double u, double v, int stride, std::size_t height, std::size_t width) {
    const double fx = std::clamp(u / stride - 0.5, 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(v / stride - 0.5, 0.0, static_cast<double>(height - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(fx));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t x1 = std::min(x0 + 1, width - 1);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - static_cast<double>(x0);
    const double ay = fy - static_cast<double>(y0);
    auto cell = [width](std::size_t y, std::size_t x) { return static_cast<std::uint32_t>(y * width + x); };
    return {{{cell(y0, x0), (1 - ax) * (1 - ay)},
             {cell(y0, x1), ax * (1 - ay)},
             {cell(y1, x0), (1 - ax) * ay},
             {cell(y1, x1), ax * ay}}};
}

std::vector<double> sample_image_features(const FeatureMap& map, double u, double v) {
    const std::size_t d = map.features.cols();
    std::vector<double> out(d, 0.0);
    for (const auto& tap : bilinear_taps(u, v, map.stride, map.height, map.width)) {
        if (tap.weight == 0.0) continue;
        const auto row = map.features.row(tap.cell);
        for (std::size_t j = 0; j < d; ++j) out[j] += tap.weight * row[j];
    }
    return out;
}

namespace {

constexpr double kLowestFrequency = 2.0 * std::numbers::pi / 64.0;  // one period over 64 m
constexpr double kOctaves = 8.0;

void check_dim(std::size_t dim) {
    if (dim == 0 || dim % 4 != 0) throw std::invalid_argument("positional encoding dimension must be divisible by 4");
}

}  // namespace

std::vector<double> xyz_frequencies(std::size_t dim) {
    check_dim(dim);
    const std::size_t pairs = dim / 4;
    const std::size_t per_axis = (pairs + 2) / 3;
    std::vector<double> f(pairs);
    for (std::size_t k = 0; k < pairs; ++k) {
        const double j = static_cast<double>(k / 3);
        f[k] = kLowestFrequency * std::exp2(kOctaves * j / static_cast<double>(per_axis));
    }
    return f;
}

std::vector<double> depth_frequencies(std::size_t dim) {
    check_dim(dim);
    const std::size_t pairs = dim / 4;
    std::vector<double> f(pairs);
    for (std::size_t k = 0; k < pairs; ++k)
        f[k] = kLowestFrequency * std::exp2(kOctaves * static_cast<double>(k) / static_cast<double>(pairs));
    return f;
}

double depth_encoding_lipschitz(std::size_t dim) {
    double s = 0;
    for (double f : depth_frequencies(dim)) s += f * f;
    return std::sqrt(s);
}

std::vector<double> positional_encoding(const Vec3& xyz, const Vec3& origin, std::size_t dim, bool depth_component) {
    const auto fx = xyz_frequencies(dim);
    const auto fd = depth_frequencies(dim);
    std::vector<double> e(dim, 0.0);
    for (std::size_t k = 0; k < fx.size(); ++k) {
        const double a = fx[k] * xyz[k % 3];
        e[2 * k] = std::sin(a);
        e[2 * k + 1] = std::cos(a);
    }
    if (depth_component) {
        const double r = std::hypot(xyz[0] - origin[0], xyz[1] - origin[1], xyz[2] - origin[2]);
        const std::size_t half = dim / 2;
        for (std::size_t k = 0; k < fd.size(); ++k) {
            e[half + 2 * k] = std::sin(fd[k] * r);
            e[half + 2 * k + 1] = std::cos(fd[k] * r);
        }
    }
    return e;
}

ad::Tensor positional_encoding(std::span<const Vec3> xyz, const Vec3& origin, std::size_t dim,
                               bool depth_component) {
    ad::Tensor out = ad::Tensor::matrix(xyz.size(), dim);
    for (std::size_t i = 0; i < xyz.size(); ++i) {
        const auto e = positional_encoding(xyz[i], origin, dim, depth_component);
        std::copy(e.begin(), e.end(), out.row(i).begin());
    }
    return out;
}

std::vector<double> sinusoidal_expand(std::span<const double> values, std::size_t out_dim, double scale) {
    if (out_dim == 0 || out_dim % 2 != 0) throw std::invalid_argument("sinusoidal_expand: out_dim must be even");
    const std::size_t k = values.size();
    const std::size_t half = out_dim / 2;
    util::Rng rng(util::mix_seed(0x7A11E5ULL, k * 4096 + out_dim));
    std::vector<double> out(out_dim);
    for (std::size_t f = 0; f < half; ++f) {
        double a = 0;
        for (std::size_t i = 0; i < k; ++i) a += scale * rng.normal() * values[i];
        out[f] = std::sin(a);
        out[half + f] = std::cos(a);
    }
    return out;
}

}  // namespace p4d::geom
