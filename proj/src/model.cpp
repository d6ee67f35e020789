#include "partmim/model.hpp"

#include <cmath>
#include <string>

#include "partmim/error.hpp"

namespace partmim {

using namespace layers;

namespace {

class ParamBuilder {
public:
    explicit ParamBuilder(ModelParams& p) : p_(p) {}

    std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols, int rank,
                    bool decay) {
        p_.info.push_back({name, rank, decay});
        p_.tensors.push_back(Mat::Zero(rows, cols));
        return p_.tensors.size() - 1;
    }

    LinearRef linear(const std::string& name, int in, int out) {
        return {add(name + ".weight", in, out, 2, true), add(name + ".bias", 1, out, 1, false)};
    }

    NormRef norm(const std::string& name, int dim) {
        NormRef r{add(name + ".weight", 1, dim, 1, false), add(name + ".bias", 1, dim, 1, false)};
        p_.tensors[r.gamma].setOnes();
        return r;
    }

    BlockRef block(const std::string& prefix, int dim, int hidden) {
        BlockRef b;
        b.ln1 = norm(prefix + ".norm1", dim);
        b.qkv = linear(prefix + ".attn.qkv", dim, 3 * dim);
        b.proj = linear(prefix + ".attn.proj", dim, dim);
        b.ln2 = norm(prefix + ".norm2", dim);
        b.fc1 = linear(prefix + ".mlp.fc1", dim, hidden);
        b.fc2 = linear(prefix + ".mlp.fc2", hidden, dim);
        return b;
    }

private:
    ModelParams& p_;
};

AttentionParams attn_params(const ModelParams& p, const BlockRef& b) {
    return {p[b.qkv.weight], p[b.qkv.bias], p[b.proj.weight], p[b.proj.bias]};
}

Mat block_forward(const ModelParams& p, const BlockRef& b, int heads, const Mat& x,
                  BlockCache& c) {
    const Mat h1 = layer_norm(x, p[b.ln1.gamma], p[b.ln1.beta], c.ln1);
    Mat x1 = x + attention(h1, attn_params(p, b), heads, c.attn);
    c.h2 = layer_norm(x1, p[b.ln2.gamma], p[b.ln2.beta], c.ln2);
    c.pre_act = linear(c.h2, p[b.fc1.weight], p[b.fc1.bias]);
    c.act = gelu(c.pre_act);
    x1 += linear(c.act, p[b.fc2.weight], p[b.fc2.bias]);
    return x1;
}

Mat block_backward(const ModelParams& p, const BlockRef& b, int heads, const BlockCache& c,
                   const Mat& dout, ModelParams& g) {
    const Mat dact = linear_backward(c.act, p[b.fc2.weight], dout, g[b.fc2.weight], g[b.fc2.bias]);
    const Mat dpre = gelu_backward(c.pre_act, dact);
    const Mat dh2 = linear_backward(c.h2, p[b.fc1.weight], dpre, g[b.fc1.weight], g[b.fc1.bias]);
    Mat dx1 = dout + layer_norm_backward(c.ln2, p[b.ln2.gamma], dh2, g[b.ln2.gamma], g[b.ln2.beta]);
    AttentionGrads ag{g[b.qkv.weight], g[b.qkv.bias], g[b.proj.weight], g[b.proj.bias]};
    const Mat dh1 = attention_backward(c.attn, attn_params(p, b), heads, dx1, ag);
    dx1 += layer_norm_backward(c.ln1, p[b.ln1.gamma], dh1, g[b.ln1.gamma], g[b.ln1.beta]);
    return dx1;
}

}  // namespace

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(n_heads, "n_heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(decoder_dim, "decoder_dim");
    positive(decoder_heads, "decoder_heads");
    positive(patch_size, "patch_size");
    positive(grid_h, "grid_h");
    positive(grid_w, "grid_w");
    if (decoder_depth < 0) throw ConfigError("model.decoder_depth must be non-negative");
    if (embed_dim % n_heads != 0)
        throw ConfigError("model.embed_dim must be divisible by model.n_heads");
    if (decoder_dim % decoder_heads != 0)
        throw ConfigError("model.decoder_dim must be divisible by model.decoder_heads");
    if (embed_dim % 4 != 0 || decoder_dim % 4 != 0)
        throw ConfigError("model.embed_dim and model.decoder_dim must be divisible by 4");
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
}

std::size_t ModelParams::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < info.size(); ++i)
        if (info[i].name == name) return i;
    throw ConfigError("unknown parameter group '" + name + "'");
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    z.set_zero();
    return z;
}

void ModelParams::set_zero() {
    for (auto& t : tensors) t.setZero();
}

void ModelParams::add_scaled(const ModelParams& other, double scale) {
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += scale * other.tensors[i];
}

bool ModelParams::all_finite() const {
    for (const auto& t : tensors)
        if (!t.allFinite()) return false;
    return true;
}

Mat sincos_pos_embed(const PatchGrid& grid, int dim) {
    if (dim <= 0 || dim % 4 != 0)
        throw ConfigError("positional embedding dim must be a positive multiple of 4, got " +
                          std::to_string(dim));
    const int quarter = dim / 4;
    Mat table(grid.n_patches(), dim);
    for (int idx = 0; idx < grid.n_patches(); ++idx) {
        const double row = grid.row_of(idx);
        const double col = grid.col_of(idx);
        for (int k = 0; k < quarter; ++k) {
            const double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
            table(idx, k) = std::sin(row * omega);
            table(idx, quarter + k) = std::cos(row * omega);
            table(idx, 2 * quarter + k) = std::sin(col * omega);
            table(idx, 3 * quarter + k) = std::cos(col * omega);
        }
    }
    return table;
}

ModelParams make_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    ParamBuilder b(p);
    const int patch_dim = cfg.grid().patch_dim();
    const int dim = cfg.embed_dim;
    const int ddim = cfg.decoder_dim;
    ParamLayout& L = p.layout;
    L.patch_embed = b.linear("patch_embed", patch_dim, dim);
    L.cls_token = b.add("cls_token", 1, dim, 2, false);
    for (int i = 0; i < cfg.depth; ++i)
        L.encoder.push_back(b.block("encoder.blocks." + std::to_string(i), dim, dim * cfg.mlp_ratio));
    L.encoder_norm = b.norm("encoder.norm", dim);
    L.has_projection = cfg.projection_head;
    if (cfg.projection_head) {
        L.proj_fc1 = b.linear("projection.fc1", dim, dim);
        L.proj_fc2 = b.linear("projection.fc2", dim, dim);
    }
    L.decoder_embed = b.linear("decoder.embed", dim, ddim);
    L.mask_token = b.add("mask_token", 1, ddim, 2, false);
    for (int i = 0; i < cfg.decoder_depth; ++i)
        L.decoder.push_back(
            b.block("decoder.blocks." + std::to_string(i), ddim, ddim * cfg.mlp_ratio));
    L.decoder_norm = b.norm("decoder.norm", ddim);
    L.prediction = b.linear("decoder.pred", ddim, patch_dim);
    p.encoder_pos = sincos_pos_embed(cfg.grid(), dim);
    p.decoder_pos = sincos_pos_embed(cfg.grid(), ddim);
    return p;
}

ModelParams init_params(Rng& rng, const ModelConfig& cfg) {
    ModelParams p = make_params(cfg);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool is_token = i == p.layout.cls_token || i == p.layout.mask_token;
        if (!p.info[i].decay && !is_token) continue;  // biases and norms keep 0 / 1
        for (Eigen::Index k = 0; k < p[i].size(); ++k)
            p[i].data()[k] = rng.truncated_normal(0.02);
    }
    return p;
}

EncoderOutput encode_visible(const ModelParams& params, const Mat& patches,
                             std::span<const int> visible, EncoderCache* cache) {
    const ModelConfig& cfg = params.config;
    const PatchGrid grid = cfg.grid();
    if (patches.rows() != grid.n_patches() || patches.cols() != grid.patch_dim())
        throw ConfigError("encode: patch matrix is " + std::to_string(patches.rows()) + "x" +
                          std::to_string(patches.cols()) + ", model expects " +
                          std::to_string(grid.n_patches()) + "x" +
                          std::to_string(grid.patch_dim()));
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    const auto& L = params.layout;
    const auto n_vis = static_cast<Eigen::Index>(visible.size());

    c.patches.resize(n_vis, grid.patch_dim());
    Mat pos(n_vis, cfg.embed_dim);
    for (Eigen::Index k = 0; k < n_vis; ++k) {
        const int idx = visible[static_cast<std::size_t>(k)];
        if (idx < 0 || idx >= grid.n_patches())
            throw ConfigError("encode: visible index " + std::to_string(idx) + " outside the grid");
        c.patches.row(k) = patches.row(idx);
        pos.row(k) = params.encoder_pos.row(idx);
    }
    Mat tokens(n_vis + 1, cfg.embed_dim);
    tokens.row(0) = params[L.cls_token].row(0);
    tokens.bottomRows(n_vis) =
        linear(c.patches, params[L.patch_embed.weight], params[L.patch_embed.bias]) + pos;

    c.blocks.resize(L.encoder.size());
    for (std::size_t i = 0; i < L.encoder.size(); ++i)
        tokens = block_forward(params, L.encoder[i], cfg.n_heads, tokens, c.blocks[i]);
    const Mat normed = layer_norm(tokens, params[L.encoder_norm.gamma],
                                  params[L.encoder_norm.beta], c.final_norm);

    c.cls_raw = normed.topRows(1);
    if (L.has_projection) {
        c.proj_pre_act = linear(c.cls_raw, params[L.proj_fc1.weight], params[L.proj_fc1.bias]);
        c.proj_act = gelu(c.proj_pre_act);
        c.cls_unnormalized = linear(c.proj_act, params[L.proj_fc2.weight], params[L.proj_fc2.bias]);
    } else {
        c.cls_unnormalized = c.cls_raw;
    }

    EncoderOutput out;
    out.cls = c.cls_unnormalized.row(0) / c.cls_unnormalized.row(0).norm();
    out.visible_tokens = normed.bottomRows(n_vis);
    out.visible.assign(visible.begin(), visible.end());
    return out;
}

EncoderOutput encode(const ModelParams& params, const Mat& patches, const MaskPlan& plan,
                     EncoderCache* cache) {
    if (!(plan.grid == params.config.grid()))
        throw ConfigError("encode: mask plan grid does not match the model grid");
    const auto visible = plan.visible();
    return encode_visible(params, patches, visible, cache);
}

DecoderOutput decode_with_pos(const ModelParams& params, const EncoderOutput& enc, int n_patches,
                              const Mat& decoder_pos, DecoderCache* cache) {
    const ModelConfig& cfg = params.config;
    const auto& L = params.layout;
    if (decoder_pos.rows() != n_patches || decoder_pos.cols() != cfg.decoder_dim)
        throw ConfigError("decode: decoder position table has the wrong shape");
    if (enc.visible_tokens.rows() != static_cast<Eigen::Index>(enc.visible.size()) ||
        enc.visible_tokens.cols() != cfg.embed_dim)
        throw ConfigError("decode: encoder output shape is inconsistent");
    DecoderCache local;
    DecoderCache& c = cache ? *cache : local;
    c.encoder_tokens = enc.visible_tokens;
    c.visible = enc.visible;
    c.masked.assign(static_cast<std::size_t>(n_patches), true);

    const Mat embedded =
        linear(enc.visible_tokens, params[L.decoder_embed.weight], params[L.decoder_embed.bias]);
    Mat tokens(n_patches, cfg.decoder_dim);
    tokens.rowwise() = params[L.mask_token].row(0);
    for (std::size_t k = 0; k < enc.visible.size(); ++k) {
        const int idx = enc.visible[k];
        if (idx < 0 || idx >= n_patches || !c.masked[static_cast<std::size_t>(idx)])
            throw ConfigError("decode: invalid or repeated visible index");
        c.masked[static_cast<std::size_t>(idx)] = false;
        tokens.row(idx) = embedded.row(static_cast<Eigen::Index>(k));
    }
    tokens += decoder_pos;

    c.blocks.resize(L.decoder.size());
    for (std::size_t i = 0; i < L.decoder.size(); ++i)
        tokens = block_forward(params, L.decoder[i], cfg.decoder_heads, tokens, c.blocks[i]);
    c.normed = layer_norm(tokens, params[L.decoder_norm.gamma], params[L.decoder_norm.beta], c.norm);

    DecoderOutput out;
    out.predictions = linear(c.normed, params[L.prediction.weight], params[L.prediction.bias]);
    return out;
}

DecoderOutput decode(const ModelParams& params, const EncoderOutput& enc, const MaskPlan& plan,
                     DecoderCache* cache) {
    const PatchGrid grid = params.config.grid();
    if (!(plan.grid == grid))
        throw ConfigError("decode: mask plan grid does not match the model grid");
    if (enc.visible.size() + plan.masked.size() != static_cast<std::size_t>(grid.n_patches()))
        throw ConfigError("decode: encoder output does not match the mask plan");
    return decode_with_pos(params, enc, grid.n_patches(), params.decoder_pos, cache);
}

std::pair<ViewOutput, ViewOutput> forward_two_views(const ModelParams& params, const Mat& patches,
                                                    const MaskPlan& plan_a,
                                                    const MaskPlan& plan_b) {
    if (!(plan_a.grid == plan_b.grid))
        throw ConfigError("forward_two_views: plans use different grids");
    auto run = [&](const MaskPlan& plan) {
        ViewOutput v;
        v.encoded = encode(params, patches, plan);
        v.decoded = decode(params, v.encoded, plan);
        return v;
    };
    return {run(plan_a), run(plan_b)};
}

Mat decoder_backward(const ModelParams& params, const DecoderCache& c, const Mat& d_pred,
                     ModelParams& g) {
    const auto& L = params.layout;
    const ModelConfig& cfg = params.config;
    const Mat dnormed = linear_backward(c.normed, params[L.prediction.weight], d_pred,
                                        g[L.prediction.weight], g[L.prediction.bias]);
    Mat dtokens = layer_norm_backward(c.norm, params[L.decoder_norm.gamma], dnormed,
                                      g[L.decoder_norm.gamma], g[L.decoder_norm.beta]);
    for (std::size_t i = L.decoder.size(); i-- > 0;)
        dtokens = block_backward(params, L.decoder[i], cfg.decoder_heads, c.blocks[i], dtokens, g);

    Mat dembedded(static_cast<Eigen::Index>(c.visible.size()), cfg.decoder_dim);
    for (std::size_t k = 0; k < c.visible.size(); ++k)
        dembedded.row(static_cast<Eigen::Index>(k)) = dtokens.row(c.visible[k]);
    for (std::size_t idx = 0; idx < c.masked.size(); ++idx)
        if (c.masked[idx]) g[L.mask_token].row(0) += dtokens.row(static_cast<Eigen::Index>(idx));
    return linear_backward(c.encoder_tokens, params[L.decoder_embed.weight], dembedded,
                           g[L.decoder_embed.weight], g[L.decoder_embed.bias]);
}

void encoder_backward(const ModelParams& params, const EncoderCache& c,
                      const Mat& d_visible_tokens, const RowVec& d_cls, ModelParams& g) {
    const auto& L = params.layout;
    const ModelConfig& cfg = params.config;
    const auto n_vis = c.patches.rows();

    // d/du of u / |u|
    const RowVec u = c.cls_unnormalized.row(0);
    const double norm = u.norm();
    const RowVec z = u / norm;
    Mat du = ((d_cls - z * z.dot(d_cls)) / norm);

    Mat dcls_raw;
    if (L.has_projection) {
        const Mat dact = linear_backward(c.proj_act, params[L.proj_fc2.weight], du,
                                         g[L.proj_fc2.weight], g[L.proj_fc2.bias]);
        const Mat dpre = gelu_backward(c.proj_pre_act, dact);
        dcls_raw = linear_backward(c.cls_raw, params[L.proj_fc1.weight], dpre,
                                   g[L.proj_fc1.weight], g[L.proj_fc1.bias]);
    } else {
        dcls_raw = du;
    }

    Mat dnormed(n_vis + 1, cfg.embed_dim);
    dnormed.row(0) = dcls_raw.row(0);
    dnormed.bottomRows(n_vis) = d_visible_tokens;
    Mat dtokens = layer_norm_backward(c.final_norm, params[L.encoder_norm.gamma], dnormed,
                                      g[L.encoder_norm.gamma], g[L.encoder_norm.beta]);
    for (std::size_t i = L.encoder.size(); i-- > 0;)
        dtokens = block_backward(params, L.encoder[i], cfg.n_heads, c.blocks[i], dtokens, g);

    g[L.cls_token].row(0) += dtokens.row(0);
    const Mat dembed = dtokens.bottomRows(n_vis);
    linear_backward(c.patches, params[L.patch_embed.weight], dembed, g[L.patch_embed.weight],
                    g[L.patch_embed.bias]);
}

Mat last_block_attention(const EncoderCache& cache) {
    if (cache.blocks.empty()) throw ConfigError("encoder has no blocks");
    const auto& weights = cache.blocks.back().attn.weights;
    Mat avg = Mat::Zero(weights.front().rows(), weights.front().cols());
    for (const auto& w : weights) avg += w;
    return avg / static_cast<double>(weights.size());
}

}  // namespace partmim
