#pragma once

// Independent brute-force reference implementations used only by tests.
// Each one follows the defining formula directly and shares no code path
// with the library routine it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "dyntex/imagery.hpp"
#include "dyntex/patch_grid.hpp"
#include "dyntex/patchmatch.hpp"

namespace oracle {

using dyntex::imagery::DistanceField;
using dyntex::imagery::RasterImage;
using dyntex::imagery::SemanticMask;

inline bool contour_pixel(const SemanticMask& m, int y, int x) {
  if (!m.at(y, x)) return false;
  const int dy[] = {-1, 1, 0, 0};
  const int dx[] = {0, 0, -1, 1};
  for (int k = 0; k < 4; ++k) {
    const int ny = y + dy[k], nx = x + dx[k];
    if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) return true;
    if (!m.at(ny, nx)) return true;
  }
  return false;
}

/// O(N^2) scan over all (pixel, contour pixel) pairs.
inline std::vector<std::int64_t> brute_force_d2(const SemanticMask& m) {
  std::vector<std::pair<int, int>> contour;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (contour_pixel(m, y, x)) contour.emplace_back(y, x);
  std::vector<std::int64_t> d2(static_cast<std::size_t>(m.height) * m.width,
                               std::numeric_limits<std::int64_t>::max());
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (auto [cy, cx] : contour) {
        const std::int64_t d = std::int64_t(y - cy) * (y - cy) + std::int64_t(x - cx) * (x - cx);
        auto& slot = d2[static_cast<std::size_t>(y) * m.width + x];
        slot = std::min(slot, d);
      }
  return d2;
}

inline DistanceField brute_force_distance_map(const SemanticMask& m) {
  const auto d2 = brute_force_d2(m);
  std::int64_t mx = 0;
  for (auto v : d2) mx = std::max(mx, v);
  DistanceField f{m.height, m.width, std::vector<float>(d2.size(), 0.0f)};
  if (mx == 0) return f;
  for (std::size_t i = 0; i < d2.size(); ++i)
    f.data[i] = static_cast<float>(std::sqrt(static_cast<double>(d2[i])) / std::sqrt(static_cast<double>(mx)));
  return f;
}

inline SemanticMask random_mask(std::mt19937_64& rng, int h, int w, double density) {
  SemanticMask m(h, w);
  std::bernoulli_distribution b(density);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

/// Union of random discs and rectangles; smooth structure like a glyph map.
inline SemanticMask random_blob_mask(std::mt19937_64& rng, int h, int w, int shapes = 4) {
  SemanticMask m(h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int s = 0; s < shapes; ++s) {
    const double cy = u(rng) * h, cx = u(rng) * w;
    const double r = (0.08 + 0.17 * u(rng)) * std::min(h, w);
    const bool disc = u(rng) < 0.5;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dy = y - cy, dx = x - cx;
        const bool in = disc ? dy * dy + dx * dx <= r * r : std::abs(dy) <= r && std::abs(dx) <= 0.6 * r;
        if (in) m.at(y, x) = 1;
      }
  }
  return m;
}

inline double naive_patch_cost(const dyntex::patchmatch::GuidanceStack& s, const dyntex::patchmatch::GuidanceStack& t,
                               int sx, int sy, int tx, int ty, int p) {
  double total = 0.0;
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x) {
      const double a = s.semantic.at(sy + y, sx + x);
      const double b = t.semantic.at(ty + y, tx + x);
      const double c = s.distance.at(sy + y, sx + x);
      const double d = t.distance.at(ty + y, tx + x);
      total += s.weights.semantic * (a - b) * (a - b) + s.weights.distance * (c - d) * (c - d);
    }
  return total;
}

/// Minimum cost over every source origin, per target origin.
inline std::vector<double> exhaustive_min_costs(const dyntex::patchmatch::GuidanceStack& s,
                                                const dyntex::patchmatch::GuidanceStack& t, int p) {
  const int th = t.height() - p + 1, tw = t.width() - p + 1;
  const int sh = s.height() - p + 1, sw = s.width() - p + 1;
  std::vector<double> best(static_cast<std::size_t>(th) * tw, std::numeric_limits<double>::infinity());
  for (int ty = 0; ty < th; ++ty)
    for (int tx = 0; tx < tw; ++tx)
      for (int sy = 0; sy < sh; ++sy)
        for (int sx = 0; sx < sw; ++sx) {
          // float rounding mirrors the cached cost type
          const double c = static_cast<float>(naive_patch_cost(s, t, sx, sy, tx, ty, p));
          auto& b = best[static_cast<std::size_t>(ty) * tw + tx];
          b = std::min(b, c);
        }
  return best;
}

/// Per-pixel loop over all patches, evaluating the Gaussian from its formula.
inline std::vector<double> naive_merge(const dyntex::patchgrid::PatchSet& set, double sigma) {
  const int h = set.source_height, w = set.source_width, c = set.channels, p = set.patch_size;
  std::vector<double> out(static_cast<std::size_t>(h) * w * c, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::vector<double> num(c, 0.0);
      double den = 0.0;
      for (std::size_t i = 0; i < set.size(); ++i) {
        const auto o = set.origins[i];
        if (x < o.x || y < o.y || x >= o.x + p || y >= o.y + p) continue;
        const double m = o.x + (p - 1) / 2.0, n = o.y + (p - 1) / 2.0;
        const double wgt = 1.0 / (2.0 * std::numbers::pi * sigma * sigma) *
                           std::exp(-((x - m) * (x - m) + (y - n) * (y - n)) / (2.0 * sigma * sigma));
        den += wgt;
        for (int ch = 0; ch < c; ++ch)
          num[ch] += wgt * set.values[i * set.patch_len() + (static_cast<std::size_t>(y - o.y) * p + (x - o.x)) * c + ch];
      }
      for (int ch = 0; ch < c; ++ch) out[(static_cast<std::size_t>(y) * w + x) * c + ch] = num[ch] / den;
    }
  return out;
}

inline RasterImage random_image(std::mt19937_64& rng, int h, int w, int c) {
  RasterImage img(h, w, c);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// ---- neural oracles (plain double loops) -----------------------------------

/// input [N,Ci,H,W], kernel [Co,Ci,k,k]
inline std::vector<double> naive_conv2d(const std::vector<double>& in, int n, int ci, int h, int w,
                                        const std::vector<double>& ker, int co, int k, int stride, int pad,
                                        int& oh, int& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n) * co * oh * ow, 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
                out[((static_cast<std::size_t>(b) * co + o) * oh + y) * ow + x] +=
                    in[((static_cast<std::size_t>(b) * ci + c) * h + iy) * w + ix] *
                    ker[((static_cast<std::size_t>(o) * ci + c) * k + ky) * k + kx];
              }
  return out;
}

/// softmax(Q K^T / sqrt(dh)) V computed one head at a time; x layout [T,d].
inline std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                           const std::vector<double>& v, int t, int d, int heads, bool causal) {
  const int dh = d / heads;
  std::vector<double> out(static_cast<std::size_t>(t) * d, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < t; ++i) {
      std::vector<double> s(t, -std::numeric_limits<double>::infinity());
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < t; ++j) {
        if (causal && j > i) continue;
        double dot = 0.0;
        for (int e = 0; e < dh; ++e) dot += q[i * d + h * dh + e] * k[j * d + h * dh + e];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (int j = 0; j < t; ++j) z += (causal && j > i) ? 0.0 : std::exp(s[j] - mx);
      for (int j = 0; j < t; ++j) {
        if (causal && j > i) continue;
        const double p = std::exp(s[j] - mx) / z;
        for (int e = 0; e < dh; ++e) out[i * d + h * dh + e] += p * v[j * d + h * dh + e];
      }
    }
  return out;
}

/// Linear scan; first minimum wins.
inline int nearest_entry(const float* z, const std::vector<float>& codebook, int entries, int dim) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int e = 0; e < entries; ++e) {
    double d = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double diff = static_cast<double>(z[j]) - codebook[static_cast<std::size_t>(e) * dim + j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  return best;
}

}  // namespace oracle
