#pragma once

// Patch codec: convolutional encoder, nearest-entry vector quantizer and
// decoder mapping each 16x16 patch to a 4x4 grid of codebook indices.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "dyntex/nn/layers.hpp"
#include "dyntex/nn/tensor.hpp"

namespace dyntex::vqvae {

using nn::Tensor;

inline constexpr int kPatchSize = 16;
inline constexpr int kLatentSize = 4;
inline constexpr int kGridLen = kLatentSize * kLatentSize;

struct VqvaeConfig {
  int channels = 3;
  int hidden = 64;
  int res_hidden = 32;
  int res_blocks = 3;
  int embed_dim = 64;
  int codebook_size = 256;
  double beta = 0.25;
  int steps = 1000;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Row-major 4x4 codebook indices of one patch.
using LatentGrid = std::array<std::uint16_t, kGridLen>;

struct Quantized {
  /// [N,4,4,D]; forward value equals the selected entries, gradient flows to Z_e.
  Tensor<float> z_q;
  /// Selected entries as a function of the codebook only.
  Tensor<float> entries;
  std::vector<int> indices;
};

struct LossTerms {
  Tensor<float> total;
  Tensor<float> recon;
  Tensor<float> codebook;
  Tensor<float> commit;
  Tensor<float> reconstruction;
  std::vector<int> indices;
};

class VqvaeModel {
public:
  explicit VqvaeModel(const VqvaeConfig& cfg);

  const VqvaeConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }
  const Tensor<float>& codebook() const { return codebook_; }

  /// [N,16,16,C] -> Z_e [N,4,4,D]
  Tensor<float> encode(const Tensor<float>& patches) const;
  /// Z_q [N,4,4,D] -> [N,16,16,C]
  Tensor<float> decode(const Tensor<float>& z_q) const;
  Quantized quantize(const Tensor<float>& z_e) const;
  /// Mean-squared reconstruction + codebook + beta * commitment.
  LossTerms loss(const Tensor<float>& patches) const;

  std::vector<LatentGrid> encode_indices(const Tensor<float>& patches) const;
  /// Codebook lookup of each grid -> [N,4,4,D]; throws OutOfVocabulary.
  Tensor<float> lookup(std::span<const LatentGrid> grids) const;
  /// decode(lookup(grids)) -> [N,16,16,C]
  Tensor<float> indices_to_patch(std::span<const LatentGrid> grids) const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

private:
  struct Conv {
    Tensor<float> w, b;
  };
  struct ResBlock {
    Conv c3, c1;
  };
  Conv make_conv(const std::string& name, int co, int ci, int k, nn::Rng& rng);
  Conv make_conv_t(const std::string& name, int ci, int co, int k, nn::Rng& rng);
  Tensor<float> res_stack(Tensor<float> x, const std::vector<ResBlock>& blocks) const;

  VqvaeConfig cfg_;
  nn::ParameterStore store_;
  Conv enc1_, enc2_, enc3_, enc_out_;
  std::vector<ResBlock> enc_res_;
  Conv dec_in_, dec_t1_, dec_t2_;
  std::vector<ResBlock> dec_res_;
  Tensor<float> codebook_;
};

/// Nearest codebook row per row of z [M,D] in double precision; ties resolve
/// to the lowest index.
std::vector<int> nearest_entries(std::span<const float> z, std::span<const float> codebook, int entries, int dim);

/// Patches of count x 16 x 16 x C floats, as cut by patchgrid.
struct PatchBank {
  int channels = 3;
  std::vector<float> values;
  std::size_t size() const { return values.size() / (static_cast<std::size_t>(kPatchSize) * kPatchSize * channels); }
  void append(std::span<const float> patch_values) { values.insert(values.end(), patch_values.begin(), patch_values.end()); }
  /// [n,16,16,C] tensor of the listed patches.
  Tensor<float> gather(std::span<const std::size_t> which) const;
};

struct StepLog {
  int step = 0;
  double total = 0, recon = 0, codebook = 0, commit = 0;
};

struct TrainReport {
  std::vector<StepLog> log;
  /// How often each codebook entry was selected over the final epoch's worth of batches.
  std::vector<std::int64_t> usage;
};

/// Adam minimization over seeded reshuffled epochs. Throws
/// Error(NonFiniteGradient) naming the step on a NaN/Inf gradient.
TrainReport train_vqvae(VqvaeModel& model, const PatchBank& patches,
                        const std::function<void(const StepLog&)>& on_step = {});

/// Mean per-element squared error of decode(quantize(encode(x))) over the bank.
double reconstruction_mse(const VqvaeModel& model, const PatchBank& patches, int batch = 64);

}  // namespace dyntex::vqvae
