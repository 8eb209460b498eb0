#pragma once

#include <array>
#include <vector>

#include "p4d/autodiff/graph.hpp"
#include "p4d/autodiff/nn.hpp"
#include "p4d/encoder/encoder.hpp"

namespace p4d::dec {

struct DecoderConfig {
    std::size_t dim = 32;
    std::size_t queries = 32;
    std::size_t classes = 5;  // excluding the no-object column
    // When false the mask bias term is left out of the attention logits.
    bool use_mask_bias = true;
};

inline constexpr std::size_t kBlocks = 4;

struct AttentionProj {
    ad::Linear q, k, v;
};

struct BlockParams {
    AttentionProj voxel, image, self1, self2;
    ad::Mlp ffn1, ffn2;
    ad::Tensor* alpha = nullptr;  // 1 x 1, mask-bias weight
};

// softmax((Q Wq (F Wk + E)^T + alpha M_v^T) / sqrt(D)) F Wv, followed by a
// residual add and layer norm. `mask_bias` is N_i x T (row-aligned with
// `features`) and is skipped when invalid or when `use_mask_bias` is off.
ad::Var soft_masked_xattn(ad::Graph& g, ad::Var q, ad::Var features, ad::Var encoding, ad::Var mask_bias,
                          ad::Var alpha, const AttentionProj& proj, bool use_mask_bias = true);
// Attention weights (T x N_i) of the same computation; for inspection.
ad::Var attention_weights(ad::Graph& g, ad::Var q, ad::Var features, ad::Var encoding, ad::Var mask_bias,
                          ad::Var alpha, const AttentionProj& proj, bool use_mask_bias = true);
ad::Var self_attention(ad::Graph& g, ad::Var q, const AttentionProj& proj);
ad::Var feed_forward(ad::Graph& g, ad::Var q, const ad::Mlp& ffn);

// M_p = Z Q^T (N x T).
ad::Var predict_masks(ad::Graph& g, ad::Var q, ad::Var z);
// Scatter-mean of M_p to stride-1 voxels, then mean pooling up to `level`.
ad::Var voxel_mask_bias(ad::Graph& g, ad::Var point_masks, const enc::ClipGeometry& geo, std::size_t level);

// Image rows F_l gathered from the pyramid for every voxel that projects.
ad::Var gather_image_features(ad::Graph& g, const enc::ImagePyramid& images, const enc::ClipGeometry& geo,
                              std::size_t level);

class Decoder {
public:
    Decoder() = default;
    Decoder(ad::ParameterSet& params, const DecoderConfig& config, std::uint64_t seed);

    struct Output {
        std::vector<ad::Var> queries;  // one per block; the last is Q'
    };

    ad::Var fusion_block(ad::Graph& g, ad::Var q, std::size_t block, ad::Var z, ad::Var voxels,
                         const enc::ImagePyramid& images, const enc::ClipGeometry& geo, std::size_t level) const;
    // Blocks run coarse to fine over strides 8, 4, 2, 1.
    Output decode(ad::Graph& g, ad::Var z, const std::array<ad::Var, 4>& voxels, const enc::ImagePyramid& images,
                  const enc::ClipGeometry& geo) const;
    ad::Var predict_classes(ad::Graph& g, ad::Var q) const;  // T x (1 + C)

    const DecoderConfig& config() const { return config_; }
    ad::Tensor& queries() const { return *queries_; }
    const BlockParams& block(std::size_t b) const { return blocks_[b]; }
    const ad::Linear& class_head() const { return class_head_; }

private:
    DecoderConfig config_;
    ad::Tensor* queries_ = nullptr;
    std::array<BlockParams, kBlocks> blocks_;
    ad::Linear class_head_;
};

// A clip-level instance: one active thing query and the points it won.
struct Tracklet {
    std::size_t query_index = 0;
    std::vector<double> query;                    // Q' row
    std::array<std::vector<std::uint32_t>, 2> points;  // clip point indices per frame slot
    geom::Vec3 centroid{0, 0, 0};                  // mean xyz at the latest frame with points
    int first_slot = 0, last_slot = 0;
    std::uint16_t cls = 0;
    double score = 0;  // class probability
};

struct PanopticAssembly {
    std::vector<std::uint16_t> cls;        // per clip point
    std::vector<std::int32_t> tracklet;    // index into `tracklets`, -1 for stuff
    std::vector<Tracklet> tracklets;
};

// Each point takes the active query maximising p_q(c_q) * sigmoid(M_p[n, q]);
// queries whose argmax is the no-object column are inactive.
PanopticAssembly assemble_panoptic(const ad::Tensor& mask_logits, const ad::Tensor& class_logits,
                                   const ad::Tensor& queries, const std::vector<bool>& thing,
                                   std::uint16_t fallback_class, std::span<const geom::Vec3> xyz,
                                   std::span<const int> slot);

struct ModelConfig {
    std::size_t dim = 32;
    std::size_t queries = 32;
    double voxel_size = 0.1;
    bool use_images = true;
    bool use_mask_bias = true;
    std::vector<bool> thing;  // per class
    std::uint16_t fallback_class = 0;
    std::uint64_t seed = 0;
};

// Encoder, decoder and heads sharing one parameter set.
class PanopticModel {
public:
    explicit PanopticModel(const ModelConfig& config);
    PanopticModel(const PanopticModel&) = delete;
    PanopticModel& operator=(const PanopticModel&) = delete;

    struct Forward {
        enc::Encoder::Output encoded;
        std::vector<ad::Var> queries;        // per block
        std::vector<ad::Var> mask_logits;    // per block, N x T
        std::vector<ad::Var> class_logits;   // per block, T x (1 + C)
    };

    enc::ClipGeometry prepare(const synth::PointCloudClip& clip) const;
    Forward forward(ad::Graph& g, const enc::ClipGeometry& geo, const std::vector<synth::Image>& images) const;
    PanopticAssembly infer(const synth::PointCloudClip& clip) const;
    PanopticAssembly infer(const synth::PointCloudClip& clip, const enc::ClipGeometry& geo) const;

    const ModelConfig& config() const { return config_; }
    ad::ParameterSet& params() { return params_; }
    const ad::ParameterSet& params() const { return params_; }
    const enc::Encoder& encoder() const { return encoder_; }
    const Decoder& decoder() const { return decoder_; }

private:
    ModelConfig config_;
    ad::ParameterSet params_;
    enc::Encoder encoder_;
    Decoder decoder_;
};

}  // namespace p4d::dec
