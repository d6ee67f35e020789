#include "partmim/layers.hpp"

#include <cmath>

namespace partmim::layers {

Mat linear(const Mat& x, const Mat& weight, const Mat& bias) {
    Mat y = x * weight;
    y.rowwise() += bias.row(0);
    return y;
}

Mat linear_backward(const Mat& x, const Mat& weight, const Mat& dy, Mat& dweight, Mat& dbias) {
    dweight.noalias() += x.transpose() * dy;
    dbias.row(0) += dy.colwise().sum();
    return dy * weight.transpose();
}

Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, NormCache& cache) {
    const auto n = x.rows();
    const double d = static_cast<double>(x.cols());
    cache.xhat.resize(n, x.cols());
    cache.rstd.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).sum() / d;
        const double var = (x.row(r).array() - mean).square().sum() / d;
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd(r) = rstd;
        cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    }
    Mat y = cache.xhat.array().rowwise() * gamma.row(0).array();
    y.rowwise() += beta.row(0);
    return y;
}

Mat layer_norm_backward(const NormCache& cache, const Mat& gamma, const Mat& dy, Mat& dgamma,
                        Mat& dbeta) {
    dgamma.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    dbeta.row(0) += dy.colwise().sum();
    const Mat dxhat = dy.array().rowwise() * gamma.row(0).array();
    const double d = static_cast<double>(dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_g = dxhat.row(r).sum() / d;
        const double mean_gx = dxhat.row(r).dot(cache.xhat.row(r)) / d;
        dx.row(r) = cache.rstd(r) *
                    (dxhat.row(r).array() - mean_g - cache.xhat.row(r).array() * mean_gx);
    }
    return dx;
}

Mat gelu(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
    const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
    const Mat deriv = x.unaryExpr([inv_sqrt_2pi](double v) {
        return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    return dy.cwiseProduct(deriv);
}

Mat softmax_rows(const Mat& scores) {
    Mat out(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        out.row(r) = (scores.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

Mat attention(const Mat& x, const AttentionParams& p, int n_heads, AttentionCache& cache) {
    const auto n = x.rows();
    const auto dim = x.cols();
    const auto head_dim = dim / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    cache.input = x;
    cache.qkv = linear(x, p.qkv_w, p.qkv_b);
    cache.context.resize(n, dim);
    cache.weights.resize(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const auto q = cache.qkv.middleCols(h * head_dim, head_dim);
        const auto k = cache.qkv.middleCols(dim + h * head_dim, head_dim);
        const auto v = cache.qkv.middleCols(2 * dim + h * head_dim, head_dim);
        Mat& a = cache.weights[static_cast<std::size_t>(h)];
        a = softmax_rows((q * k.transpose()) * scale);
        cache.context.middleCols(h * head_dim, head_dim).noalias() = a * v;
    }
    return linear(cache.context, p.proj_w, p.proj_b);
}

Mat attention_backward(const AttentionCache& cache, const AttentionParams& p, int n_heads,
                       const Mat& dy, AttentionGrads& g) {
    const auto n = cache.input.rows();
    const auto dim = cache.input.cols();
    const auto head_dim = dim / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const Mat dcontext = linear_backward(cache.context, p.proj_w, dy, g.proj_w, g.proj_b);
    Mat dqkv = Mat::Zero(n, 3 * dim);
    for (int h = 0; h < n_heads; ++h) {
        const auto q = cache.qkv.middleCols(h * head_dim, head_dim);
        const auto k = cache.qkv.middleCols(dim + h * head_dim, head_dim);
        const auto v = cache.qkv.middleCols(2 * dim + h * head_dim, head_dim);
        const Mat& a = cache.weights[static_cast<std::size_t>(h)];
        const auto dout = dcontext.middleCols(h * head_dim, head_dim);
        const Mat da = dout * v.transpose();
        dqkv.middleCols(2 * dim + h * head_dim, head_dim).noalias() = a.transpose() * dout;
        const Vec row_dot = (da.array() * a.array()).rowwise().sum();
        const Mat ds = a.array() * (da.colwise() - row_dot).array();
        dqkv.middleCols(h * head_dim, head_dim).noalias() = (ds * k) * scale;
        dqkv.middleCols(dim + h * head_dim, head_dim).noalias() = (ds.transpose() * q) * scale;
    }
    return linear_backward(cache.input, p.qkv_w, dqkv, g.qkv_w, g.qkv_b);
}

}  // namespace partmim::layers
