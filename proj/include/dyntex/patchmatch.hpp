#pragma once

// Guidance-driven PatchMatch: randomized nearest-neighbour field search over
// (semantic mask, distance field) stacks, and synthesis of the stylized
// initial frame by Gaussian-weighted voting of the matched source patches.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "dyntex/imagery.hpp"

namespace dyntex::patchmatch {

using imagery::DistanceField;
using imagery::RasterImage;
using imagery::SemanticMask;

struct ChannelWeights {
  double semantic = 1.0;
  double distance = 1.0;
  bool operator==(const ChannelWeights&) const = default;
};

struct GuidanceStack {
  SemanticMask semantic;
  DistanceField distance;
  ChannelWeights weights;

  int height() const { return semantic.height; }
  int width() const { return semantic.width; }
  void validate() const;
};

/// Mask plus its contour distance map.
GuidanceStack make_guidance(const SemanticMask& mask, ChannelWeights weights = {});

struct PatchMatchConfig {
  int patch_size = 16;
  int iterations = 5;
  double random_search_decay = 0.5;
  std::uint64_t rng_seed = 0;
  ChannelWeights weights;

  void validate() const;
};

struct Offset {
  int dx = 0;
  int dy = 0;
  bool operator==(const Offset&) const = default;
};

/// Correspondence from every target patch origin to a source patch origin
/// (source = target + offset), with the cost of that match cached.
struct NearestNeighborField {
  int height = 0;  // target patch-origin grid
  int width = 0;
  int patch_size = 0;
  int source_height = 0;  // source pixel extent
  int source_width = 0;
  int iterations_done = 0;
  std::vector<Offset> offsets;
  std::vector<float> costs;

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  int target_height() const { return height + patch_size - 1; }
  int target_width() const { return width + patch_size - 1; }
  int source_grid_height() const { return source_height - patch_size + 1; }
  int source_grid_width() const { return source_width - patch_size + 1; }
  double total_cost() const;
  double mean_cost() const { return costs.empty() ? 0.0 : total_cost() / costs.size(); }
};

/// w_sem * SSD(semantic windows) + w_dist * SSD(distance windows).
float patch_cost(const GuidanceStack& source, const GuidanceStack& target, int src_x, int src_y, int tgt_x,
                 int tgt_y, int patch_size);

NearestNeighborField nnf_random_init(const GuidanceStack& source, const GuidanceStack& target,
                                     const PatchMatchConfig& config);

/// One propagation sweep (forward on odd iteration numbers, reverse on even)
/// with exponential random search. Replacement only on strictly lower cost.
NearestNeighborField nnf_iterate(NearestNeighborField nnf, const GuidanceStack& source,
                                 const GuidanceStack& target, const PatchMatchConfig& config);

/// Random init followed by config.iterations sweeps. `on_iteration` (optional)
/// sees the field after init (iteration 0) and after every sweep.
NearestNeighborField run_patchmatch(const GuidanceStack& source, const GuidanceStack& target,
                                    const PatchMatchConfig& config,
                                    const std::function<void(const NearestNeighborField&)>& on_iteration = {});

/// Copies the matched source texture patch for every target origin and merges
/// all copies with the Gaussian-weighted average.
RasterImage synthesize_initial(const RasterImage& source_style_frame0, const NearestNeighborField& nnf,
                               double merge_sigma);

void write_nnf(const std::filesystem::path& path, const NearestNeighborField& nnf);
NearestNeighborField read_nnf(const std::filesystem::path& path);

}  // namespace dyntex::patchmatch
