#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "partmim/geometry.hpp"
#include "partmim/layers.hpp"
#include "partmim/mask_sampling.hpp"
#include "partmim/rng.hpp"
#include "partmim/tensor.hpp"

namespace partmim {

struct ModelConfig {
    int embed_dim = 32;
    int depth = 2;
    int n_heads = 2;
    int mlp_ratio = 4;
    int decoder_dim = 16;
    int decoder_depth = 1;
    int decoder_heads = 2;
    int patch_size = 8;
    int grid_h = 8;
    int grid_w = 4;
    /// Two-layer MLP between the class token and its normalization.
    bool projection_head = false;

    void validate() const;
    PatchGrid grid() const { return PatchGrid{grid_h, grid_w, patch_size}; }

    bool operator==(const ModelConfig&) const = default;
};

struct LinearRef {
    std::size_t weight = 0;
    std::size_t bias = 0;
};

struct NormRef {
    std::size_t gamma = 0;
    std::size_t beta = 0;
};

struct BlockRef {
    NormRef ln1;
    LinearRef qkv;
    LinearRef proj;
    NormRef ln2;
    LinearRef fc1;
    LinearRef fc2;
};

/// Positions of every parameter group inside ModelParams::tensors.
struct ParamLayout {
    LinearRef patch_embed;
    std::size_t cls_token = 0;
    std::vector<BlockRef> encoder;
    NormRef encoder_norm;
    bool has_projection = false;
    LinearRef proj_fc1;
    LinearRef proj_fc2;
    LinearRef decoder_embed;
    std::size_t mask_token = 0;
    std::vector<BlockRef> decoder;
    NormRef decoder_norm;
    LinearRef prediction;
};

struct ParamInfo {
    std::string name;
    int rank = 2;        // 1 for vectors (stored as 1 x n)
    bool decay = false;  // weight matrices receive weight decay
};

/// All learnable arrays of the encoder/decoder, in a fixed order. The same
/// type holds gradients and optimizer moments.
struct ModelParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<ParamInfo> info;
    std::vector<Mat> tensors;
    Mat encoder_pos;  // fixed sine-cosine tables, not learnable
    Mat decoder_pos;

    std::size_t size() const { return tensors.size(); }
    std::size_t scalar_count() const;
    std::size_t index_of(const std::string& name) const;
    Mat& operator[](std::size_t i) { return tensors[i]; }
    const Mat& operator[](std::size_t i) const { return tensors[i]; }

    /// Same structure, all values zero.
    ModelParams zeros_like() const;
    void set_zero();
    /// this += scale * other
    void add_scaled(const ModelParams& other, double scale);
    bool all_finite() const;
};

/// Allocates every group with the configured shapes, zero-filled.
ModelParams make_params(const ModelConfig& cfg);

/// Truncated normal (std 0.02) weights and tokens, zero biases, unit norms.
ModelParams init_params(Rng& rng, const ModelConfig& cfg);

/// 2-D sine-cosine table: first half of the columns encodes the row index,
/// second half the column index; each half is [sin | cos] over dim/4
/// frequencies 10000^(-k / (dim/4)).
Mat sincos_pos_embed(const PatchGrid& grid, int dim);

struct BlockCache {
    layers::NormCache ln1;
    layers::AttentionCache attn;
    layers::NormCache ln2;
    Mat h2;
    Mat pre_act;
    Mat act;
};

struct EncoderCache {
    Mat patches;  // visible patch rows in token order
    std::vector<BlockCache> blocks;
    layers::NormCache final_norm;
    Mat cls_raw;  // (1 x dim) token 0 after the final norm
    Mat proj_pre_act;
    Mat proj_act;
    Mat cls_unnormalized;  // input to the L2 normalization
};

struct EncoderOutput {
    RowVec cls;           // unit L2 norm
    Mat visible_tokens;   // (n_visible x embed_dim), in `visible` order
    std::vector<int> visible;
};

struct DecoderCache {
    Mat encoder_tokens;
    std::vector<int> visible;
    std::vector<bool> masked;
    std::vector<BlockCache> blocks;
    layers::NormCache norm;
    Mat normed;
};

struct DecoderOutput {
    Mat predictions;  // (n_patches x patch_dim), raster order
};

/// Encodes the given visible patches, in the given token order.
EncoderOutput encode_visible(const ModelParams& params, const Mat& patches,
                             std::span<const int> visible, EncoderCache* cache = nullptr);

/// Encodes the patches left visible by `plan` (ascending raster order).
EncoderOutput encode(const ModelParams& params, const Mat& patches, const MaskPlan& plan,
                     EncoderCache* cache = nullptr);

/// Decodes with an explicit decoder position table (n_patches x decoder_dim).
DecoderOutput decode_with_pos(const ModelParams& params, const EncoderOutput& enc, int n_patches,
                              const Mat& decoder_pos, DecoderCache* cache = nullptr);

DecoderOutput decode(const ModelParams& params, const EncoderOutput& enc, const MaskPlan& plan,
                     DecoderCache* cache = nullptr);

struct ViewOutput {
    EncoderOutput encoded;
    DecoderOutput decoded;
};

std::pair<ViewOutput, ViewOutput> forward_two_views(const ModelParams& params, const Mat& patches,
                                                    const MaskPlan& plan_a,
                                                    const MaskPlan& plan_b);

/// Accumulates decoder gradients into `grads`; returns d(visible_tokens).
Mat decoder_backward(const ModelParams& params, const DecoderCache& cache, const Mat& d_pred,
                     ModelParams& grads);

/// Accumulates encoder gradients into `grads`.
void encoder_backward(const ModelParams& params, const EncoderCache& cache,
                      const Mat& d_visible_tokens, const RowVec& d_cls, ModelParams& grads);

/// Last encoder block's attention weights averaged over heads, (n x n) with
/// the class token at position 0.
Mat last_block_attention(const EncoderCache& cache);

}  // namespace partmim
