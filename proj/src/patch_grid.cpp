#include "dyntex/patch_grid.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dyntex/error.hpp"

namespace dyntex::patchgrid {

void PatchSpec::validate() const {
  if (patch_size < 1) throw Error(Errc::InvalidArgument, "patch_size must be >= 1");
  if (stride < 1 || stride > patch_size)
    throw Error(Errc::InvalidArgument, "stride must lie in [1, patch_size]");
}

int grid_extent(int extent, const PatchSpec& spec) {
  spec.validate();
  if (extent < spec.patch_size)
    throw Error(Errc::SourceTooSmall,
                "extent " + std::to_string(extent) + " smaller than patch " + std::to_string(spec.patch_size));
  if ((extent - spec.patch_size) % spec.stride != 0)
    throw Error(Errc::NonDivisible, "extent " + std::to_string(extent) + " leaves a remainder for stride " +
                                        std::to_string(spec.stride));
  return (extent - spec.patch_size) / spec.stride + 1;
}

std::size_t patch_count(int height, int width, const PatchSpec& spec) {
  return static_cast<std::size_t>(grid_extent(height, spec)) * grid_extent(width, spec);
}

std::vector<PatchOrigin> grid_origins(int height, int width, const PatchSpec& spec) {
  const int gh = grid_extent(height, spec);
  const int gw = grid_extent(width, spec);
  std::vector<PatchOrigin> out;
  out.reserve(static_cast<std::size_t>(gh) * gw);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) out.push_back({gx * spec.stride, gy * spec.stride});
  return out;
}

PatchSet cut_patches(const RasterImage& image, const PatchSpec& spec, int frame_index) {
  PatchSet set;
  set.patch_size = spec.patch_size;
  set.channels = image.channels;
  set.frame_index = frame_index;
  set.source_height = image.height;
  set.source_width = image.width;
  set.origins = grid_origins(image.height, image.width, spec);
  set.values.resize(set.origins.size() * set.patch_len());

  const std::size_t row_len = static_cast<std::size_t>(spec.patch_size) * image.channels;
  for (std::size_t i = 0; i < set.origins.size(); ++i) {
    const auto [ox, oy] = set.origins[i];
    float* dst = set.values.data() + i * set.patch_len();
    for (int py = 0; py < spec.patch_size; ++py) {
      const float* src = &image.data[(static_cast<std::size_t>(oy + py) * image.width + ox) * image.channels];
      std::copy_n(src, row_len, dst + py * row_len);
    }
  }
  return set;
}

double gaussian_weight(double px_x, double px_y, double center_x, double center_y, double sigma) {
  const double dx = px_x - center_x;
  const double dy = px_y - center_y;
  const double s2 = sigma * sigma;
  return std::exp(-(dx * dx + dy * dy) / (2.0 * s2)) / (2.0 * std::numbers::pi * s2);
}

std::vector<double> gaussian_kernel(int patch_size, double sigma) {
  const double c = (patch_size - 1) / 2.0;
  std::vector<double> k(static_cast<std::size_t>(patch_size) * patch_size);
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x) k[static_cast<std::size_t>(y) * patch_size + x] = gaussian_weight(x, y, c, c, sigma);
  return k;
}

RasterImage merge_patches(const PatchSet& patches, const PatchSpec& spec, const MergeConfig& cfg) {
  spec.validate();
  if (!(cfg.sigma > 0.0) || !std::isfinite(cfg.sigma))
    throw Error(Errc::InvalidArgument, "sigma must be finite and positive");
  if (patches.patch_size != spec.patch_size)
    throw Error(Errc::DimensionMismatch, "patch set size differs from spec");
  const int p = spec.patch_size;
  const int c = patches.channels;
  const int h = patches.source_height;
  const int w = patches.source_width;
  if (patches.values.size() != patches.size() * patches.patch_len())
    throw Error(Errc::DimensionMismatch, "patch values do not match origin count");

  const auto kernel = gaussian_kernel(p, cfg.sigma);
  std::vector<double> num(static_cast<std::size_t>(h) * w * c, 0.0);
  std::vector<double> den(static_cast<std::size_t>(h) * w, 0.0);

  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto [ox, oy] = patches.origins[i];
    if (ox < 0 || oy < 0 || ox + p > w || oy + p > h)
      throw Error(Errc::OutOfBounds, "patch origin outside the source frame");
    const auto patch = patches.patch(i);
    for (int py = 0; py < p; ++py) {
      for (int px = 0; px < p; ++px) {
        const double wgt = kernel[static_cast<std::size_t>(py) * p + px];
        const std::size_t pix = static_cast<std::size_t>(oy + py) * w + (ox + px);
        den[pix] += wgt;
        const float* v = &patch[(static_cast<std::size_t>(py) * p + px) * c];
        for (int ch = 0; ch < c; ++ch) num[pix * c + ch] += wgt * v[ch];
      }
    }
  }

  RasterImage out(h, w, c);
  for (std::size_t pix = 0; pix < den.size(); ++pix) {
    if (den[pix] <= 0.0) {
      throw Error(Errc::CoverageGap, "pixel (" + std::to_string(pix % w) + "," + std::to_string(pix / w) +
                                         ") is not covered by any patch");
    }
    for (int ch = 0; ch < c; ++ch) out.data[pix * c + ch] = static_cast<float>(num[pix * c + ch] / den[pix]);
  }
  return out;
}

}  // namespace dyntex::patchgrid
