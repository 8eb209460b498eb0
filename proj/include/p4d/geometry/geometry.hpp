#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/autodiff/tensor.hpp"

namespace p4d::geom {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

struct VoxelKey {
    std::int32_t x = 0, y = 0, z = 0;
    auto operator<=>(const VoxelKey&) const = default;
};

VoxelKey voxel_of(const Vec3& p, double voxel_size);
// Floor halving, so negative coordinates round toward -inf.
VoxelKey parent_of(const VoxelKey& k);

// Sparse grid at one stride. `point_to_voxel` is populated for stride 1 only;
// voxels are stored in lexicographic key order.
struct SparseVoxelGrid {
    int stride = 1;
    double voxel_size = 0.1;  // base (stride-1) size in metres
    std::vector<VoxelKey> coords;
    ad::Tensor features;
    std::vector<std::uint32_t> point_to_voxel;

    std::size_t size() const { return coords.size(); }
    Vec3 center(std::size_t i) const;
    std::vector<Vec3> centers() const;
};

SparseVoxelGrid voxelize(std::span<const Vec3> points, double voxel_size);

struct Downsampled {
    SparseVoxelGrid coarse;
    std::vector<std::uint32_t> parent;  // fine voxel -> coarse voxel
};
Downsampled downsample(const SparseVoxelGrid& fine);

// Strides 1, 2, 4, 8 plus the parent maps between consecutive levels.
struct VoxelPyramid {
    static constexpr std::array<int, 4> kStrides{1, 2, 4, 8};
    std::array<SparseVoxelGrid, 4> levels;
    std::array<std::vector<std::uint32_t>, 3> parent;

    // Maps each point to its voxel at `level` by composing parent maps.
    std::vector<std::uint32_t> point_to_level(std::size_t level) const;
};
VoxelPyramid build_pyramid(std::span<const Vec3> points, double voxel_size);

ad::Tensor p2v_scatter_mean(const ad::Tensor& point_features, std::span<const std::uint32_t> point_to_voxel,
                            std::size_t voxel_count);
ad::Tensor v2p_gather(const ad::Tensor& voxel_features, std::span<const std::uint32_t> point_to_voxel);

class CalibrationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Pinhole camera. Extrinsics map sensor coordinates to camera coordinates:
// p_cam = R p_sensor + t, with camera z pointing forward.
struct CameraModel {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 translation{0, 0, 0};
    int height = 0, width = 0;

    void validate() const;
    Vec3 to_camera(const Vec3& p) const;
    Vec3 to_sensor(const Vec3& pc) const;
    std::array<double, 9> intrinsic_matrix() const;
    std::array<double, 16> extrinsic_matrix() const;
    static CameraModel from_matrices(std::span<const double> k3x3, std::span<const double> rt4x4, int height,
                                     int width);
};

// Camera looking along yaw (radians, counter-clockwise from sensor +x) from
// `position`, with a horizontal field of view `hfov`.
CameraModel make_yaw_camera(double yaw, double hfov, int height, int width, const Vec3& position = {0, 0, 0});

struct Projection {
    double u = 0, v = 0, depth = 0;
    bool valid = false;
};
Projection project_point(const Vec3& p_sensor, const CameraModel& cam);
std::vector<Projection> project(std::span<const Vec3> points, const CameraModel& cam);
// Inverse pinhole: pixel (u, v) at camera depth z -> camera-frame point.
Vec3 unproject(double u, double v, double depth, const CameraModel& cam);

// H_s x W_s grid of D-dim features, stored as (H_s * W_s) x D rows.
struct FeatureMap {
    std::size_t height = 0, width = 0;
    int stride = 1;
    ad::Tensor features;
};

struct BilinearTap {
    std::uint32_t cell;
    double weight;
};
// Cell (r, c) is centred at pixel ((c + 0.5) s, (r + 0.5) s); positions are
// clamped to the outermost centres.
std::array<BilinearTap, 4> bilinear_taps(double u, double v, int stride, std::size_t height, std::size_t width);
std::vector<double> sample_image_features(const FeatureMap& map, double u, double v);

// Fourier features of xyz (first D/2) followed by interleaved sin/cos of the
// range to `origin` (last D/2). D must be divisible by 4.
std::vector<double> positional_encoding(const Vec3& xyz, const Vec3& origin, std::size_t dim,
                                        bool depth_component = true);
ad::Tensor positional_encoding(std::span<const Vec3> xyz, const Vec3& origin, std::size_t dim,
                               bool depth_component = true);
std::vector<double> xyz_frequencies(std::size_t dim);
std::vector<double> depth_frequencies(std::size_t dim);
// Euclidean Lipschitz constant of the depth half with respect to range.
double depth_encoding_lipschitz(std::size_t dim);

// Frozen random-Fourier projection of k values to out_dim/2 frequencies,
// returned as [sin(Bx), cos(Bx)]. `scale` is the std-dev of B's entries.
std::vector<double> sinusoidal_expand(std::span<const double> values, std::size_t out_dim, double scale = 1.0);

}  // namespace p4d::geom
