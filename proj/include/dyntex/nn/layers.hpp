#pragma once

// Parameter bookkeeping and initializers shared by the VQ-VAE and the
// forecaster.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dyntex/nn/checkpoint.hpp"
#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

using Rng = std::mt19937_64;

enum class Init {
  Zeros,
  Ones,
  Normal,      // N(0, scale^2)
  KaimingUniform,  // U(-b, b), b = scale / sqrt(fan_in); fan_in = numel / shape[0] or shape[1]
};

/// Ordered list of named trainable tensors. Registration order fixes both the
/// RNG draw order at init and the optimizer slot order.
class ParameterStore {
public:
  Tensor<float> create(std::string name, Shape shape, Init init, Rng& rng, double scale = 1.0,
                       int fan_in = 0);

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor<float>> tensors() const;
  std::size_t parameter_count() const;

  /// Named copies prefixed with `tag` (e.g. "vqvae/").
  std::vector<NamedTensor> export_tensors(std::string_view tag) const;
  /// Overwrites values from a checkpoint, matching names under `tag`.
  void import_tensors(const std::vector<NamedTensor>& tensors, std::string_view tag);

private:
  std::vector<NamedTensor> entries_;
};

}  // namespace dyntex::nn
