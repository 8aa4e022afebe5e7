#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// Bias-corrected Adam update of every parameter from its accumulated grad
/// (a parameter without a grad buffer counts as zero gradient). Throws
/// Error(NonFiniteGradient) before touching any parameter if a grad is NaN/Inf.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

template <typename T>
void zero_grads(std::span<Tensor<T>> params);

/// Rescales all grads so their joint L2 norm is at most max_norm; returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm);

}  // namespace dyntex::nn
