#pragma once

// Frame and mask I/O, semantic mask extraction, and the normalized contour
// distance transform used as PatchMatch guidance.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dyntex::imagery {

/// H x W x C floating image, row-major with interleaved channels, values in [0,1].
struct RasterImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  RasterImage() = default;
  RasterImage(int h, int w, int c, float fill = 0.0f);

  float& at(int y, int x, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const RasterImage& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  /// Throws if the length, channel count, or value range is off.
  void validate() const;
};

struct FrameSequence {
  std::vector<RasterImage> frames;

  std::size_t frame_count() const { return frames.size(); }
  const RasterImage& operator[](std::size_t i) const { return frames[i]; }
  void validate() const;
};

/// Binary structure map; 1 = foreground.
struct SemanticMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  SemanticMask() = default;
  SemanticMask(int h, int w, std::uint8_t fill = 0);

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const SemanticMask&) const = default;

  /// Single-channel RasterImage with values 0.0 / 1.0.
  RasterImage to_raster() const;
};

/// Normalized distance to the nearest contour pixel, in [0,1].
struct DistanceField {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

constexpr double kLumaR = 0.299;
constexpr double kLumaG = 0.587;
constexpr double kLumaB = 0.114;

SemanticMask binarize(const RasterImage& image, float threshold);

/// Foreground pixels with a 4-neighbour in the background, plus foreground
/// pixels on the image border.
bool is_contour(const SemanticMask& mask, int y, int x);

/// Exact squared Euclidean distance (in pixels^2) from every pixel to the
/// nearest contour pixel. Separable two-pass transform, integer arithmetic.
std::vector<std::int64_t> contour_distance_squared(const SemanticMask& mask);

/// Euclidean contour distance divided by its per-image maximum.
DistanceField distance_map(const SemanticMask& mask);

// ---- file I/O --------------------------------------------------------------

/// Decodes an 8- or 16-bit PNG. Gray/gray+alpha load as 1 channel, RGB/RGBA as 3.
RasterImage read_png(const std::filesystem::path& path);
/// Writes 8-bit PNG, value = round(255 * v).
void write_png(const std::filesystem::path& path, const RasterImage& image);
/// Single-channel 16-bit PNG, value = round(65535 * d).
void write_distance_png(const std::filesystem::path& path, const DistanceField& field);

SemanticMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const SemanticMask& mask);

/// `pattern` is a printf-style template with exactly one zero-padded integer
/// conversion, e.g. "frame_%04d.png".
FrameSequence load_frame_sequence(const std::filesystem::path& directory,
                                  std::string_view pattern = "frame_%04d.png");
void save_frame_sequence(const std::filesystem::path& directory, const FrameSequence& frames,
                         std::string_view pattern = "frame_%04d.png");

std::string format_frame_name(std::string_view pattern, int index);

}  // namespace dyntex::imagery
