#pragma once

// Overlapping patch extraction and Gaussian-weighted patch merging.

#include <cstddef>
#include <span>
#include <vector>

#include "dyntex/imagery.hpp"

namespace dyntex::patchgrid {

using imagery::RasterImage;

struct PatchSpec {
  int patch_size = 16;
  int stride = 1;

  /// 1 <= stride <= patch_size, patch_size >= 1.
  void validate() const;
};

struct MergeConfig {
  double sigma = 4.0;
};

struct PatchOrigin {
  int x = 0;
  int y = 0;
  bool operator==(const PatchOrigin&) const = default;
};

/// Patches of one frame. Patch i occupies values[i*patch_len() ...] laid out
/// row-major with interleaved channels, like RasterImage.
struct PatchSet {
  int patch_size = 0;
  int channels = 0;
  int frame_index = 0;
  int source_height = 0;
  int source_width = 0;
  std::vector<PatchOrigin> origins;
  std::vector<float> values;

  std::size_t size() const { return origins.size(); }
  std::size_t patch_len() const { return static_cast<std::size_t>(patch_size) * patch_size * channels; }
  std::span<float> patch(std::size_t i) { return {values.data() + i * patch_len(), patch_len()}; }
  std::span<const float> patch(std::size_t i) const { return {values.data() + i * patch_len(), patch_len()}; }
};

/// Number of grid positions along one axis; throws unless (extent - p) % s == 0.
int grid_extent(int extent, const PatchSpec& spec);
std::size_t patch_count(int height, int width, const PatchSpec& spec);
/// Row-major origins of the cutting grid.
std::vector<PatchOrigin> grid_origins(int height, int width, const PatchSpec& spec);

PatchSet cut_patches(const RasterImage& image, const PatchSpec& spec, int frame_index = 0);

/// Isotropic 2D Gaussian density at (px) around (center).
double gaussian_weight(double px_x, double px_y, double center_x, double center_y, double sigma);

/// p x p table of gaussian_weight around the continuous patch centre (p-1)/2.
std::vector<double> gaussian_kernel(int patch_size, double sigma);

/// Each output pixel is the Gaussian-weighted mean of every patch covering it.
RasterImage merge_patches(const PatchSet& patches, const PatchSpec& spec, const MergeConfig& cfg);

}  // namespace dyntex::patchgrid
