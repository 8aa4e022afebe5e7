#pragma once

// Sums and dot products with a fixed association order. Eigen's vectorized
// reductions start at the first aligned address, so their rounding depends
// on where a buffer was allocated.

#include <cstddef>

namespace dyntex::nn::detail {

inline constexpr int kLanes = 16;

template <typename T>
T ordered_sum(const T* x, std::ptrdiff_t n) {
  T acc[kLanes] = {};
  std::ptrdiff_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int j = 0; j < kLanes; ++j) acc[j] += x[i + j];
  T s = 0;
  for (int j = 0; j < kLanes; ++j) s += acc[j];
  for (; i < n; ++i) s += x[i];
  return s;
}

template <typename T>
T ordered_dot(const T* a, const T* b, std::ptrdiff_t n) {
  T acc[kLanes] = {};
  std::ptrdiff_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int j = 0; j < kLanes; ++j) acc[j] += a[i + j] * b[i + j];
  T s = 0;
  for (int j = 0; j < kLanes; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace dyntex::nn::detail
