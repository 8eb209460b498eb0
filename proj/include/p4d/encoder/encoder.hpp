#pragma once

#include <array>
#include <memory>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/autodiff/nn.hpp"
#include "p4d/geometry/geometry.hpp"
#include "p4d/synthworld/scene.hpp"

namespace p4d::enc {

struct EncoderConfig {
    std::size_t dim = 32;
    double voxel_size = 0.1;
    // LiDAR-only ablation: image feature maps are replaced by zeros.
    bool use_images = true;
};

// One image-feature level for all cameras, stacked camera-major into a
// single (sum_k H_k/s * W_k/s) x D matrix.
struct ImageLevel {
    int stride = 4;
    std::vector<std::size_t> height, width, offset;
    ad::Var features;
    std::size_t rows() const { return offset.empty() ? 0 : offset.back() + height.back() * width.back(); }
};

struct ImagePyramid {
    ImageLevel i4, i8;
    std::size_t cameras() const { return i4.height.size(); }
};

// Per-point camera projection; the first valid camera in rig order wins.
struct PointProjection {
    int camera = -1;
    double u = 0, v = 0;
};

// Everything about a clip that does not depend on parameters: voxel
// pyramid, sparse exchange maps, projections and positional encodings.
// Building it once lets repeated forward passes on the same clip skip the
// geometry work.
struct ClipGeometry {
    std::size_t points = 0;
    geom::VoxelPyramid pyramid;
    ad::Tensor point_input;  // N x 8
    std::vector<PointProjection> projection;
    std::vector<std::uint32_t> projectable, non_projectable;

    std::shared_ptr<const ad::SparseRows> p2v, v2p;
    std::array<std::shared_ptr<const ad::SparseRows>, 3> pool;    // level l -> l+1 mean
    std::array<std::shared_ptr<const ad::SparseRows>, 3> unpool;  // level l+1 -> l copy
    std::shared_ptr<const ad::SparseRows> select_projectable, select_other, merge;
    std::shared_ptr<const ad::SparseRows> point_image_sample;  // projectable points <- I4 rows

    struct Level {
        ad::Tensor encoding;  // N_l x D
        // F_l rows: bilinear samples from [I4 rows; I8 rows] of every voxel
        // that projects, tagged with the voxel they came from.
        std::shared_ptr<const ad::SparseRows> image_sample;
        std::vector<std::uint32_t> image_voxel;
        std::shared_ptr<const ad::SparseRows> image_gather;  // voxel rows -> F_l rows
        ad::Tensor image_encoding;                           // M_l x D
    };
    std::array<Level, 4> levels;

    std::size_t voxel_count(std::size_t level) const { return pyramid.levels[level].size(); }
};

ClipGeometry prepare_clip(const synth::PointCloudClip& clip, const EncoderConfig& config);

// xyz, timestamp, intensity, offset to the voxel centre.
ad::Tensor init_point_features(const synth::PointCloudClip& clip, const geom::SparseVoxelGrid& grid);

std::vector<PointProjection> project_points(std::span<const geom::Vec3> xyz,
                                            const std::vector<geom::CameraModel>& cameras);

class Encoder {
public:
    Encoder() = default;
    Encoder(ad::ParameterSet& params, const EncoderConfig& config, std::uint64_t seed);

    struct FusionInputs {
        ad::Var projectable;  // Z+ (M x D); invalid when M = 0
        ad::Var image;        // Z_img (M x D)
    };
    struct Output {
        ad::Var z;                    // N x D
        std::array<ad::Var, 4> voxels;  // strides 1, 2, 4, 8
        ImagePyramid images;
        std::vector<FusionInputs> fusion;  // one entry per fusion stage
    };

    ImagePyramid encode_images(ad::Graph& g, const std::vector<synth::Image>& images) const;
    // Point-level fusion of `z` (N x D) with I4 features.
    ad::Var point_level_fusion(ad::Graph& g, ad::Var z, const ImagePyramid& images, const ClipGeometry& geo,
                               FusionInputs* inputs = nullptr) const;
    Output forward(ad::Graph& g, const ClipGeometry& geo, const std::vector<synth::Image>& images) const;

    const EncoderConfig& config() const { return config_; }
    const ad::Mlp& fusion_mlp() const { return fusion_; }
    const ad::Mlp& pseudo_mlp() const { return pseudo_; }

private:
    EncoderConfig config_;
    ad::Linear patch_embed_;
    ad::Mlp image4_, image8_;
    ad::Mlp point_, stem_, exchange1_, exchange2_;
    std::array<ad::Mlp, 3> down_, up_;
    ad::Mlp fusion_, pseudo_;
};

}  // namespace p4d::enc
