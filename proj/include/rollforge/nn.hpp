#pragma once

#include <span>
#include <vector>

#include "rollforge/types.hpp"

// Dense building blocks with hand-written reverse passes. Activations are
// token-major (one row per token); weights map rows as y = x W + b.
namespace rollforge::nn {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat linear(const RowMat& x, const Mat& w, const Mat& b);
// Accumulates into dw/db; writes dx when non-null.
void linear_backward(const RowMat& x, const Mat& w, const RowMat& dy, RowMat* dx, Mat& dw, Mat& db);
void linear_backward(const RowMat& x, const Mat& w, const RowMat& dy, RowMat* dx, Mat& dw);

struct LayerNormCache {
    RowMat normalized;
    Vec inv_std;
};
// Affine-free layer norm over the feature axis.
RowMat layer_norm(const RowMat& x, LayerNormCache& cache, double eps = 1e-6);
RowMat layer_norm_backward(const LayerNormCache& cache, const RowMat& dy);

// tanh-approximated GELU.
RowMat gelu(const RowMat& x);
RowMat gelu_backward(const RowMat& x, const RowMat& dy);
RowMat silu(const RowMat& x);
RowMat silu_backward(const RowMat& x, const RowMat& dy);

// Rotates every consecutive feature pair of each head by position * base^(-2i/head_dim).
// `inverse` applies the transpose rotation (used by the reverse pass).
void apply_rope(RowMat& x, std::span<const long> positions, int num_heads, double base,
                bool inverse = false);

struct AttentionCache {
    RowMat q;  // rotated queries, n x d
    RowMat k;  // rotated keys, m x d
    RowMat v;  // m x d
    std::vector<RowMat> probs;  // per head, n x m
};

// Multi-head softmax attention of n queries over m keys; mask(r, c) true means
// query r may attend to key c. Every row must admit at least one key.
RowMat attention(const RowMat& q, const RowMat& k, const RowMat& v, const Mask& mask,
                 int num_heads, AttentionCache* cache);
void attention_backward(const AttentionCache& cache, const RowMat& dout, int num_heads, RowMat& dq,
                        RowMat& dk, RowMat& dv);

// [cos(t f_0..f_{h-1}), sin(t f_0..f_{h-1})] with f_i = 10000^(-i/h), h = dim/2.
Vec sinusoidal_embedding(double t, int dim);

}  // namespace rollforge::nn
