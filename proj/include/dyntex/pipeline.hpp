#pragma once

// End-to-end transfer: guidance maps, PatchMatch initial frame, VQ-VAE patch
// codec, per-location token forecasting and Gaussian patch merging.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dyntex/config.hpp"
#include "dyntex/forecaster.hpp"
#include "dyntex/imagery.hpp"
#include "dyntex/patch_grid.hpp"
#include "dyntex/patchmatch.hpp"
#include "dyntex/vqvae.hpp"

namespace dyntex::pipeline {

namespace fs = std::filesystem;

struct Paths {
  fs::path source_dir;
  fs::path source_mask;
  fs::path target_mask;
  fs::path output_dir;
  std::string frame_pattern = "frame_%04d.png";
};

struct PipelineConfig {
  Paths paths;
  patchmatch::PatchMatchConfig patchmatch;
  patchgrid::PatchSpec patch{16, 4};
  patchgrid::MergeConfig merge;
  vqvae::VqvaeConfig vqvae;
  /// Share of source patches kept out of VQ-VAE training for evaluation.
  double vqvae_holdout = 0.1;
  forecaster::ForecasterConfig forecaster;
  forecaster::SamplerConfig sampler;
  std::uint64_t seed = 0;
  /// 1 = reference mode (single-threaded, bit-deterministic).
  int threads = 1;
  std::string padding = "reflect";

  /// Range checks; with check_paths, input files must exist and an output
  /// directory must be set. Throws Error(ConfigError).
  void validate(bool check_paths) const;
};

/// Reads `[section] key = value` text. Unknown sections or keys are errors.
PipelineConfig parse_config(const std::vector<config::IniEntry>& entries);
PipelineConfig load_config(const fs::path& path);
/// Ordered (section.key, value) pairs covering every configurable field.
std::vector<std::pair<std::string, std::string>> config_entries(const PipelineConfig& cfg);
std::string config_text(const PipelineConfig& cfg);

/// Stage seeds derived from the global seed.
struct StageSeeds {
  std::uint64_t patchmatch, vqvae, vqvae_split, forecaster, forecaster_split, sampler;
};
StageSeeds derive_seeds(std::uint64_t global);

// ---- padding ----------------------------------------------------------------

struct CropRecord {
  int height = 0;
  int width = 0;
};

struct PaddedImage {
  imagery::RasterImage image;
  CropRecord crop;
};

/// Smallest size >= max(extent, p) with (size - p) divisible by the stride.
int padded_extent(int extent, const patchgrid::PatchSpec& spec);
/// Mirror padding on the right and bottom edges up to the next valid grid size.
PaddedImage pad_to_grid(const imagery::RasterImage& image, const patchgrid::PatchSpec& spec);
imagery::RasterImage crop(const imagery::RasterImage& image, const CropRecord& record);

// ---- manifest ---------------------------------------------------------------

/// Ordered UTF-8 key/value record written as `key=value` lines.
class RunManifest {
public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  void write(const fs::path& path) const;
  static RunManifest read(const fs::path& path);
  /// Text of all entries except wall-clock timings (`time.*`).
  std::string stable_text() const;

private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_digest(const fs::path& path);

// ---- artifacts --------------------------------------------------------------

/// File names inside the output directory.
struct Artifacts {
  fs::path root;
  fs::path source_distance() const { return root / "source_distance.png"; }
  fs::path target_distance() const { return root / "target_distance.png"; }
  fs::path nnf() const { return root / "nnf.dxnf"; }
  fs::path initial_frame() const { return root / "initial_frame.png"; }
  fs::path vqvae_checkpoint() const { return root / "vqvae.dytx"; }
  fs::path vqvae_log() const { return root / "vqvae_log.txt"; }
  fs::path source_tokens() const { return root / "source_tokens.dxtk"; }
  fs::path forecaster_checkpoint() const { return root / "gpt.dytx"; }
  fs::path forecaster_log() const { return root / "forecaster_log.txt"; }
  fs::path target_tokens() const { return root / "target_tokens.dxtk"; }
  fs::path frames_dir() const { return root / "frames"; }
  fs::path manifest() const { return root / "manifest.txt"; }
};

// ---- stages -----------------------------------------------------------------

enum class Stage {
  Guidance = 1,
  InitialFrame = 2,
  TrainVqvae = 3,
  TrainForecaster = 4,
  Predict = 5,
  Merge = 6,
};

const char* stage_name(Stage s);

struct RunOptions {
  /// Stages before `first` are skipped; their artifacts are read from the
  /// output directory and their manifest entries carried over.
  Stage first = Stage::Guidance;
  Stage last = Stage::Merge;
  std::function<void(const std::string&)> log;
};

struct TransferResult {
  imagery::FrameSequence frames;
  RunManifest manifest;
};

/// Runs the selected stages in order and writes manifest.txt. A failing stage
/// is recorded in the manifest and rethrown as Error(StageFailed) naming the
/// stage and its cause; Error(NeedSubsequentFrames) and config errors pass
/// through unchanged.
TransferResult run_transfer(const PipelineConfig& cfg, const RunOptions& options = {});

/// Source patches of every frame (after grid padding), frame-major.
struct SourcePatches {
  vqvae::PatchBank bank;
  int frames = 0;
  int patches_per_frame = 0;
  std::vector<patchgrid::PatchOrigin> origins;
};
SourcePatches cut_source_patches(const imagery::FrameSequence& frames, const patchgrid::PatchSpec& spec);

/// Seeded hold-out indices into a bank of n patches (sorted).
std::vector<std::size_t> holdout_indices(std::size_t n, double fraction, std::uint64_t seed);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers; each index is
/// handled exactly once and results must be written by index.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ---- evaluation -------------------------------------------------------------

struct EvalReport {
  double forecaster_accuracy = 0;
  /// Where the accuracy was measured: "validation" or "train".
  std::string accuracy_split;
  double vqvae_mse = 0;
  /// "holdout" or "train".
  std::string mse_split;
  double nnf_mean_cost = 0;
  double output_temporal_delta = 0;
  double source_temporal_delta = 0;

  std::string text() const;
};

/// Recomputes metrics from the artifacts of a completed run. Throws
/// Error(NotFound) for missing artifacts.
EvalReport evaluate(const fs::path& run_dir);

/// Mean absolute per-pixel difference between consecutive frames.
double temporal_delta(const imagery::FrameSequence& frames);

}  // namespace dyntex::pipeline
