#pragma once

#include <span>
#include <vector>

#include "psm/nn/tensor.hpp"

namespace psm::nn {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// x + b where b's shape equals the trailing dimensions of x (bias, or a
/// positional table added to every batch item).
Tensor add_bias(const Tensor& x, const Tensor& b);

/// (..., k) x (k, n) -> (..., n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x W^T + b with W stored (out, in); `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Batched (B, m, k) x (B, k, n), or x (B, n, k)^T when transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // 2-D

/// Normalizes over the last dimension, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
/// Over the last dimension.
Tensor softmax(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Rows [start, start + count) along dimension 0.
Tensor slice_rows(const Tensor& x, int start, int count);
/// Tokens [start, start + count) of a (B, T, D) tensor.
Tensor slice_tokens(const Tensor& x, int start, int count);
/// (B, T1, D) ++ (B, T2, D) along the token axis.
Tensor cat_tokens(const Tensor& a, const Tensor& b);
/// (T, D) -> (B, T, D).
Tensor expand_batch(const Tensor& t, int batch);

/// Patch gather: out[b][k] = x[b][idx[b][k]].
Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx);
/// Patch scatter: a (B, total, D) sequence holding x[b][k] at idx[b][k] and
/// `fill` (D) everywhere else.
Tensor scatter_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx, int total, const Tensor& fill);

/// (B, T, 3D) fused q|k|v -> (B*H, T, D/H) for part `which` in {0, 1, 2}.
Tensor split_heads(const Tensor& qkv, int heads, int which);
/// (B*H, T, Dh) -> (B, T, H*Dh).
Tensor merge_heads(const Tensor& x, int heads);

/// Causal unfold of (B, L, C): for each of the last `steps` positions t, the
/// K frames t-K+1..t (zeros before the start) flattened to K*C.
Tensor unfold_causal(const Tensor& x, int kernel, int steps);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean squared error over the patches flagged in `mask` only; pred/target
/// are (B, T, P) and mask is B x T.
Tensor masked_mse(const Tensor& pred, const Tensor& target, const std::vector<std::vector<bool>>& mask);

}  // namespace psm::nn
