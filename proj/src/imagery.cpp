#include "dyntex/imagery.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <regex>

#include "dyntex/error.hpp"

namespace dyntex::imagery {

RasterImage::RasterImage(int h, int w, int c, float fill)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

void RasterImage::validate() const {
  if (height <= 0 || width <= 0) throw Error(Errc::DimensionMismatch, "empty image");
  if (channels != 1 && channels != 3)
    throw Error(Errc::DimensionMismatch, "channels must be 1 or 3, got " + std::to_string(channels));
  if (data.size() != pixel_count() * channels)
    throw Error(Errc::DimensionMismatch, "data length does not match height*width*channels");
  for (float v : data) {
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "non-finite pixel value");
    if (v < 0.0f || v > 1.0f) throw Error(Errc::InvalidArgument, "pixel value outside [0,1]");
  }
}

void FrameSequence::validate() const {
  if (frames.empty()) throw Error(Errc::NoFrames, "frame sequence is empty");
  for (const auto& f : frames) {
    f.validate();
    if (!f.same_shape(frames.front()))
      throw Error(Errc::DimensionMismatch, "frames differ in height/width/channels");
  }
}

SemanticMask::SemanticMask(int h, int w, std::uint8_t fill)
    : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

RasterImage SemanticMask::to_raster() const {
  RasterImage out(height, width, 1);
  for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = data[i] ? 1.0f : 0.0f;
  return out;
}

SemanticMask binarize(const RasterImage& image, float threshold) {
  if (image.channels != 1 && image.channels != 3)
    throw Error(Errc::DimensionMismatch, "binarize expects 1 or 3 channels");
  if (!(threshold > 0.0f && threshold < 1.0f))
    throw Error(Errc::InvalidArgument, "threshold must lie in (0,1)");
  SemanticMask mask(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double luma;
      if (image.channels == 1) {
        luma = image.at(y, x);
      } else {
        luma = kLumaR * image.at(y, x, 0) + kLumaG * image.at(y, x, 1) + kLumaB * image.at(y, x, 2);
      }
      if (!std::isfinite(luma)) throw Error(Errc::NonFinite, "non-finite pixel value");
      mask.at(y, x) = luma >= threshold ? 1 : 0;
    }
  }
  return mask;
}

bool is_contour(const SemanticMask& mask, int y, int x) {
  if (!mask.at(y, x)) return false;
  if (y == 0 || x == 0 || y == mask.height - 1 || x == mask.width - 1) return true;
  return !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1);
}

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

std::vector<std::int64_t> contour_distance_squared(const SemanticMask& mask) {
  const int h = mask.height;
  const int w = mask.width;
  if (h <= 0 || w <= 0) throw Error(Errc::DimensionMismatch, "empty mask");

  // Column pass: vertical distance to the nearest contour pixel in the column.
  const std::int64_t inf = static_cast<std::int64_t>(h) + w + 1;
  std::vector<std::int64_t> g(static_cast<std::size_t>(h) * w);
  bool any = false;
  for (int x = 0; x < w; ++x) {
    const auto idx = [&](int y) { return static_cast<std::size_t>(y) * w + x; };
    g[idx(0)] = is_contour(mask, 0, x) ? 0 : inf;
    for (int y = 1; y < h; ++y) g[idx(y)] = is_contour(mask, y, x) ? 0 : g[idx(y - 1)] + 1;
    for (int y = h - 2; y >= 0; --y)
      if (g[idx(y + 1)] < g[idx(y)]) g[idx(y)] = g[idx(y + 1)] + 1;
    any = any || g[idx(0)] < inf;
  }
  if (!any) throw Error(Errc::NoContour, "mask has no contour pixel");

  // Row pass: lower envelope of parabolas (Meijster et al.).
  std::vector<std::int64_t> out(g.size());
  std::vector<int> s(w), t(w);
  for (int y = 0; y < h; ++y) {
    const std::int64_t* row = &g[static_cast<std::size_t>(y) * w];
    const auto f = [&](std::int64_t x, int i) { return (x - i) * (x - i) + row[i] * row[i]; };
    const auto sep = [&](int i, int u) {
      return floor_div(static_cast<std::int64_t>(u) * u - static_cast<std::int64_t>(i) * i + row[u] * row[u] -
                           row[i] * row[i],
                       2 * static_cast<std::int64_t>(u - i));
    };
    int q = 0;
    s[0] = 0;
    t[0] = 0;
    for (int u = 1; u < w; ++u) {
      while (q >= 0 && f(t[q], s[q]) > f(t[q], u)) --q;
      if (q < 0) {
        q = 0;
        s[0] = u;
      } else {
        const std::int64_t sepv = 1 + sep(s[q], u);
        if (sepv < w) {
          ++q;
          s[q] = u;
          t[q] = static_cast<int>(sepv);
        }
      }
    }
    for (int u = w - 1; u >= 0; --u) {
      out[static_cast<std::size_t>(y) * w + u] = f(u, s[q]);
      if (u == t[q]) --q;
    }
  }
  return out;
}

DistanceField distance_map(const SemanticMask& mask) {
  const auto d2 = contour_distance_squared(mask);
  const std::int64_t max_d2 = *std::max_element(d2.begin(), d2.end());
  DistanceField field{mask.height, mask.width, std::vector<float>(d2.size(), 0.0f)};
  if (max_d2 == 0) return field;
  const double denom = std::sqrt(static_cast<double>(max_d2));
  for (std::size_t i = 0; i < d2.size(); ++i)
    field.data[i] = static_cast<float>(std::sqrt(static_cast<double>(d2[i])) / denom);
  return field;
}

// ---- PNG -------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;  // as stored: 1,2,3,4
  int bit_depth = 0;
  std::vector<unsigned char> bytes;
};

// Plain C-style body so no C++ destructors live across setjmp/longjmp.
bool decode_png(std::FILE* fp, Decoded& out) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_png(png, info, PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_PACKING, nullptr);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  png_bytepp rows = png_get_rows(png, info);
  out.bytes.resize(rowbytes * out.height);
  for (int y = 0; y < out.height; ++y) std::copy_n(rows[y], rowbytes, out.bytes.data() + rowbytes * y);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode_png(std::FILE* fp, int width, int height, int color_type, int bit_depth,
                const std::vector<unsigned char>& bytes, std::size_t rowbytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(bytes.data() + rowbytes * y);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr fp(std::fopen(path.c_str(), mode));
  if (!fp) {
    throw Error(mode[0] == 'r' ? Errc::NotFound : Errc::IoFailed, "cannot open " + path.string());
  }
  return fp;
}

}  // namespace

RasterImage read_png(const std::filesystem::path& path) {
  auto fp = open_file(path, "rb");
  Decoded d;
  if (!decode_png(fp.get(), d)) throw Error(Errc::DecodeFailed, "cannot decode " + path.string());
  const int out_channels = d.channels <= 2 ? 1 : 3;
  RasterImage img(d.height, d.width, out_channels);
  const std::size_t bps = d.bit_depth == 16 ? 2 : 1;
  const double scale = d.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      for (int c = 0; c < out_channels; ++c) {
        const std::size_t off = ((static_cast<std::size_t>(y) * d.width + x) * d.channels + c) * bps;
        const unsigned v = bps == 2 ? (unsigned(d.bytes[off]) << 8) | d.bytes[off + 1] : d.bytes[off];
        img.at(y, x, c) = static_cast<float>(v / scale);
      }
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const RasterImage& image) {
  if (image.channels != 1 && image.channels != 3)
    throw Error(Errc::DimensionMismatch, "write_png expects 1 or 3 channels");
  std::vector<unsigned char> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  auto fp = open_file(path, "wb");
  const int color = image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  if (!encode_png(fp.get(), image.width, image.height, color, 8, bytes,
                  static_cast<std::size_t>(image.width) * image.channels))
    throw Error(Errc::IoFailed, "cannot encode " + path.string());
}

void write_distance_png(const std::filesystem::path& path, const DistanceField& field) {
  std::vector<unsigned char> bytes(field.data.size() * 2);
  for (std::size_t i = 0; i < field.data.size(); ++i) {
    const auto v = static_cast<unsigned>(std::lround(std::clamp(field.data[i], 0.0f, 1.0f) * 65535.0));
    bytes[2 * i] = static_cast<unsigned char>(v >> 8);
    bytes[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
  }
  auto fp = open_file(path, "wb");
  if (!encode_png(fp.get(), field.width, field.height, PNG_COLOR_TYPE_GRAY, 16, bytes,
                  static_cast<std::size_t>(field.width) * 2))
    throw Error(Errc::IoFailed, "cannot encode " + path.string());
}

SemanticMask read_mask(const std::filesystem::path& path) {
  return binarize(read_png(path), 0.5f);
}

void write_mask(const std::filesystem::path& path, const SemanticMask& mask) {
  write_png(path, mask.to_raster());
}

// ---- frame sequences -------------------------------------------------------

namespace {

struct FramePattern {
  std::string prefix;
  std::string suffix;
  int width = 0;  // zero-padded digits, 0 = unpadded
};

FramePattern parse_pattern(std::string_view pattern) {
  static const std::regex conv(R"(%0?(\d*)d)");
  const std::string p(pattern);
  std::smatch m;
  if (!std::regex_search(p, m, conv))
    throw Error(Errc::InvalidArgument, "frame pattern needs one %d conversion: " + p);
  FramePattern fp;
  fp.prefix = m.prefix().str();
  fp.suffix = m.suffix().str();
  fp.width = m[1].length() ? std::stoi(m[1].str()) : 0;
  if (fp.suffix.find('%') != std::string::npos || fp.prefix.find('%') != std::string::npos)
    throw Error(Errc::InvalidArgument, "frame pattern has more than one conversion: " + p);
  return fp;
}

std::string regex_escape(const std::string& s) {
  static const std::regex special(R"([.^$|()\[\]{}*+?\\])");
  return std::regex_replace(s, special, R"(\$&)");
}

}  // namespace

std::string format_frame_name(std::string_view pattern, int index) {
  const auto fp = parse_pattern(pattern);
  std::string digits = std::to_string(index);
  if (static_cast<int>(digits.size()) < fp.width) digits.insert(0, fp.width - digits.size(), '0');
  return fp.prefix + digits + fp.suffix;
}

FrameSequence load_frame_sequence(const std::filesystem::path& directory, std::string_view pattern) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(directory)) throw Error(Errc::NotFound, "no such directory " + directory.string());
  const auto fp = parse_pattern(pattern);
  const std::string digits = fp.width > 0 ? "(\\d{" + std::to_string(fp.width) + ",})" : "(\\d+)";
  const std::regex name_re(regex_escape(fp.prefix) + digits + regex_escape(fp.suffix));

  std::map<long, fs::path> numbered;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (!entry.is_regular_file()) continue;
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, name_re)) numbered.emplace(std::stol(m[1].str()), entry.path());
  }
  if (numbered.empty())
    throw Error(Errc::NoFrames, "no files matching " + std::string(pattern) + " in " + directory.string());

  FrameSequence seq;
  for (const auto& [index, path] : numbered) {
    seq.frames.push_back(read_png(path));
    if (!seq.frames.back().same_shape(seq.frames.front()))
      throw Error(Errc::DimensionMismatch, path.filename().string() + " differs in size from the first frame");
  }
  return seq;
}

void save_frame_sequence(const std::filesystem::path& directory, const FrameSequence& frames,
                         std::string_view pattern) {
  std::filesystem::create_directories(directory);
  for (std::size_t i = 0; i < frames.frames.size(); ++i)
    write_png(directory / format_frame_name(pattern, static_cast<int>(i)), frames.frames[i]);
}

}  // namespace dyntex::imagery
