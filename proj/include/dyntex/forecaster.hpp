#pragma once

// Causal transformer over concatenated per-location latent grids. Frame 0's
// 16 indices condition the model; indices of every later frame are predicted
// autoregressively.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dyntex/nn/layers.hpp"
#include "dyntex/nn/tensor.hpp"
#include "dyntex/token_io.hpp"
#include "dyntex/vqvae.hpp"

namespace dyntex::forecaster {

using nn::Tensor;
using vqvae::LatentGrid;

inline constexpr int kGridLen = vqvae::kGridLen;

struct ForecasterConfig {
  int vocab = 256;
  int d_model = 128;
  int layers = 6;
  int heads = 8;
  int ff_mult = 4;
  int max_len = 128;
  int steps = 1000;
  int batch = 32;
  double lr = 2.5e-6;
  /// Joint gradient norm cap; 0 disables clipping.
  double grad_clip = 1.0;
  /// Share of locations held out for validation, chosen by seed.
  double val_fraction = 0.1;
  /// Validation accuracy is measured every this many steps (0: only at the end).
  int eval_every = 100;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Frame-major index sequence of one patch location: tokens[f*16 .. f*16+15]
/// is frame f's grid.
struct TokenSequence {
  int location = 0;
  std::vector<int> tokens;
  int frames() const { return static_cast<int>(tokens.size()) / kGridLen; }
};

struct LocatedGrid {
  int location = 0;
  int frame = 0;
  LatentGrid grid{};
};

/// One sequence per location, ordered by location, frames in order. Throws
/// RaggedCoverage unless every location has exactly the same frames 0..F.
std::vector<TokenSequence> build_dataset(std::span<const LocatedGrid> stream);
std::vector<TokenSequence> build_dataset(const tokens::TokenFile& file);

struct Split {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> validation;
};

/// Seeded split by location. A non-zero fraction keeps at least one sequence
/// on each side when there are two or more.
Split split_dataset(std::vector<TokenSequence> data, double val_fraction, std::uint64_t seed);

class Forecaster {
public:
  explicit Forecaster(const ForecasterConfig& cfg);

  const ForecasterConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }

  /// Equal-length token rows -> logits [N*T, vocab]; row t predicts token t+1.
  Tensor<float> forward_logits(std::span<const std::vector<int>> batch) const;
  Tensor<float> forward_logits(const std::vector<int>& tokens) const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  struct Block {
    Tensor<float> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  const std::vector<Block>& blocks() const { return blocks_; }
  const Tensor<float>& token_embedding() const { return tok_emb_; }
  const Tensor<float>& position_embedding() const { return pos_emb_; }
  const Tensor<float>& final_gamma() const { return lnf_g_; }
  const Tensor<float>& final_beta() const { return lnf_b_; }
  const Tensor<float>& head_weight() const { return head_w_; }
  const Tensor<float>& head_bias() const { return head_b_; }

private:
  ForecasterConfig cfg_;
  nn::ParameterStore store_;
  Tensor<float> tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor<float> lnf_g_, lnf_b_, head_w_, head_b_;
};

/// Targets for the logits rows of one sequence: row t -> tokens[t+1] when
/// t+1 is past the conditioning frame, -1 otherwise.
std::vector<int> shifted_targets(const std::vector<int>& tokens);

/// Mean cross-entropy over subsequent-frame positions of the batch.
Tensor<float> sequence_loss(const Forecaster& model, std::span<const std::vector<int>> batch);

/// Percentage of subsequent-frame positions whose teacher-forced argmax equals
/// the ground truth.
double accuracy(const Forecaster& model, std::span<const TokenSequence> validation);

struct StepLog {
  int step = 0;
  double loss = 0;
  /// Teacher-forced accuracy (percent) on the step's batch.
  double batch_accuracy = 0;
};

struct EvalLog {
  int step = 0;
  double accuracy = 0;
};

struct TrainReport {
  std::vector<StepLog> steps;
  std::vector<EvalLog> evals;
  /// Validation accuracy after the final step, or training-set accuracy when
  /// there is no validation data.
  double final_accuracy = 0;
};

TrainReport train_forecaster(Forecaster& model, std::span<const TokenSequence> train,
                             std::span<const TokenSequence> validation,
                             const std::function<void(const StepLog&)>& on_step = {},
                             const std::function<void(const EvalLog&)>& on_eval = {});

/// `step <n> loss <f> acc <f>` per training step; `eval <n> acc <f>` per validation pass.
void write_training_log(const std::filesystem::path& path, const TrainReport& report);

struct SamplerConfig {
  enum class Mode { Greedy, Sampled };
  Mode mode = Mode::Greedy;
  double temperature = 1.0;
  std::uint64_t rng_seed = 0;
  void validate() const;
};

/// Continues each initial grid by frame_count frames. Sequences are decoded
/// together with a key/value cache; sampled mode seeds sequence i with
/// (rng_seed, first_location + i), so splitting a batch does not change results.
std::vector<TokenSequence> predict(const Forecaster& model, std::span<const LatentGrid> initial, int frame_count,
                                   const SamplerConfig& sampler, int first_location = 0);
TokenSequence predict(const Forecaster& model, const LatentGrid& initial, int frame_count,
                      const SamplerConfig& sampler);

/// Logits for every prefix position computed through the key/value cache;
/// [T, vocab] row-major. Used to check the cached path against forward_logits.
std::vector<float> cached_logits(const Forecaster& model, const std::vector<int>& tokens);

}  // namespace dyntex::forecaster
