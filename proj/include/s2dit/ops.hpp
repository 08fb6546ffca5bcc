#pragma once

#include <optional>

#include "s2dit/grid.hpp"
#include "s2dit/tensor.hpp"

namespace s2dit {
namespace ops {

// Elementwise / broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowwise(const Tensor& x, const Tensor& bias);   // bias [C] over last dim
Tensor mul_rowwise(const Tensor& x, const Tensor& scale);  // scale [C] over last dim
Tensor scale(const Tensor& x, double s);
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);  // s is a 1-element tensor

// Nonlinearities.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);

// Linear algebra / shape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<size_t> shape);
Tensor slice_lastdim(const Tensor& x, size_t offset, size_t len);
Tensor concat_lastdim(const std::vector<Tensor>& parts);

// Row i of a [Lq x Lk] score matrix may attend to columns j <= i + q_offset
// in causal mode; masked entries get probability exactly zero.
Tensor softmax_lastdim(const Tensor& x, bool causal = false, size_t q_offset = 0);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor layer_norm_noaffine(const Tensor& x, double eps = 1e-5);

// Reductions.
Tensor mean_all(const Tensor& x);
Tensor mean_square(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Per-frame conditioning: rows of x are per-frame vectors; output row i is
// x[frame_of_token[i]].
Tensor expand_frames(const Tensor& x, const std::vector<size_t>& frame_of_token);

// Depthwise 3D convolution on a token grid; temporal left padding (causal),
// spatial zero same-padding. weights [C, kt, kh, kw]. `history` optionally
// prepends frames (streaming ring buffer) that receive no output.
Tensor depthwise_conv3d(const Tensor& x, const TokenGrid& grid, const Tensor& weights,
                        const Tensor* history = nullptr, size_t history_frames = 0);

// Block-diagonal rotary embedding over (t, h, w) positions. Pairs split
// 1:1:1 across axes, remainder to the temporal axis. Norm-preserving.
Tensor rope3d(const Tensor& x, const TokenGrid& grid, size_t t_offset = 0, double base = 10000.0);

// Linear-attention building blocks (the O(L) associativity form).
// numer_i = a_i^T (sum_{j<=i} b_j v_j^T) in causal mode, full sum otherwise.
Tensor lin_attn_numerator(const Tensor& a, const Tensor& b, const Tensor& v, bool causal);
// denom_i = a_i . (sum_{j<=i} b_j), full sum otherwise. Output [L].
Tensor lin_attn_denominator(const Tensor& a, const Tensor& b, bool causal);
// y_ij = n_ij / (den_i + eps).
Tensor rowwise_div(const Tensor& numer, const Tensor& denom, double eps);

// Space-to-channel and back; out channel layout c' = (dy*s + dx)*C + c.
Tensor pixel_unshuffle(const Tensor& x, const TokenGrid& grid, size_t s);
Tensor pixel_shuffle(const Tensor& x, const TokenGrid& grid_low, size_t s);
Tensor spatial_avg_pool(const Tensor& x, const TokenGrid& grid, size_t s);

// Straight-through threshold: forward (p > 0.5) ? 1 : 0, backward identity.
Tensor ste_hard(const Tensor& p);

}  // namespace ops
}  // namespace s2dit
