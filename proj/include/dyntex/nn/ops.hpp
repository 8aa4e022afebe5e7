#pragma once

// Differentiable operators. Every op validates shapes, checks its forward
// output for NaN/Inf, and records a backward rule when any input requires a
// gradient. All ops are instantiated for float and double.

#include <span>
#include <vector>

#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

// ---- elementwise -----------------------------------------------------------
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
/// x[..., n] + bias[n]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// tanh approximation
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// ---- reductions ------------------------------------------------------------
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// mean((a - b)^2)
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// ---- layout ----------------------------------------------------------------
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// out.shape[i] = a.shape[perm[i]]
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm);
/// Identity forward, zero gradient backward.
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& a);
/// Forward value of `b`, gradient routed to `a` unchanged: a + sg(b - a)
/// without the rounding of the explicit sum.
template <typename T> Tensor<T> straight_through(const Tensor<T>& a, const Tensor<T>& b);

// ---- linear algebra --------------------------------------------------------
/// [M,K] x [K,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., in] * w[in, out] (+ b[out]); `b` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Rows of table[V, D] selected by `indices` -> [n, D].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> indices);

// ---- normalization / probabilities ----------------------------------------
template <typename T> Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
/// Mean next-token cross-entropy over rows whose target is >= 0.
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

// ---- convolution -----------------------------------------------------------
/// input [N,Ci,H,W], kernel [Co,Ci,k,k], bias [Co] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride, int padding);
/// input [N,Ci,H,W], kernel [Ci,Co,k,k]; output extent (H-1)*stride - 2*padding + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                           int padding);

// ---- attention -------------------------------------------------------------
/// Scaled dot-product attention over pre-projected q, k, v of shape [N,T,d],
/// split into `heads` slices of width d/heads. Causal masks keys after the query.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads, bool causal);

}  // namespace dyntex::nn
