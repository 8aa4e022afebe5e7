#pragma once

// "DYTX" tensor checkpoints: magic, u16 version, u32 tensor count, then per
// tensor u32 name length + UTF-8 name, u8 rank, u32 dims, f32 values (LE).

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Looks up `name`; throws Error(NotFound) if absent.
const Tensor<float>& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name);

}  // namespace dyntex::nn
