#pragma once

#include <vector>

#include "partmim/tensor.hpp"

// Forward/backward primitives for the transformer. Each forward records what
// its backward needs; backward functions accumulate into parameter gradients
// and return the gradient with respect to the layer input.
namespace partmim::layers {

inline constexpr double kLayerNormEps = 1e-6;

/// y = x W + b, W is (in x out), b is (1 x out).
Mat linear(const Mat& x, const Mat& weight, const Mat& bias);
Mat linear_backward(const Mat& x, const Mat& weight, const Mat& dy, Mat& dweight, Mat& dbias);

struct NormCache {
    Mat xhat;
    Vec rstd;
};

Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, NormCache& cache);
Mat layer_norm_backward(const NormCache& cache, const Mat& gamma, const Mat& dy, Mat& dgamma,
                        Mat& dbeta);

/// Exact (erf) GELU.
Mat gelu(const Mat& x);
Mat gelu_backward(const Mat& x, const Mat& dy);

struct AttentionCache {
    Mat input;                 // (n x dim), input to the qkv projection
    Mat qkv;                   // (n x 3 dim)
    std::vector<Mat> weights;  // per head (n x n) softmax rows
    Mat context;               // (n x dim), concatenated head outputs
};

struct AttentionParams {
    const Mat& qkv_w;
    const Mat& qkv_b;
    const Mat& proj_w;
    const Mat& proj_b;
};

struct AttentionGrads {
    Mat& qkv_w;
    Mat& qkv_b;
    Mat& proj_w;
    Mat& proj_b;
};

Mat attention(const Mat& x, const AttentionParams& p, int n_heads, AttentionCache& cache);
Mat attention_backward(const AttentionCache& cache, const AttentionParams& p, int n_heads,
                       const Mat& dy, AttentionGrads& g);

/// Row-wise softmax with max subtraction.
Mat softmax_rows(const Mat& scores);

}  // namespace partmim::layers
