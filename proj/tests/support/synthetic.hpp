#pragma once

// Seeded procedural test data: smooth value-noise textures with linear
// gradients, animated frame sequences built from them, and permutation-cycle
// token data.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "dyntex/forecaster.hpp"
#include "dyntex/imagery.hpp"
#include "dyntex/vqvae.hpp"

namespace synth {

using dyntex::imagery::RasterImage;

inline double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

/// Lattice value noise sampled at continuous coordinates; wraps with period `cells`.
struct ValueNoise {
  int cells = 4;
  std::vector<double> lattice;

  ValueNoise(std::mt19937_64& rng, int cells_) : cells(cells_), lattice(static_cast<std::size_t>(cells_) * cells_) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : lattice) v = u(rng);
  }
  double at(double y, double x) const {
    const double fy = std::floor(y), fx = std::floor(x);
    const int y0 = ((static_cast<int>(fy) % cells) + cells) % cells, x0 = ((static_cast<int>(fx) % cells) + cells) % cells;
    const int y1 = (y0 + 1) % cells, x1 = (x0 + 1) % cells;
    const double ty = smooth(y - fy), tx = smooth(x - fx);
    auto l = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * cells + xx]; };
    const double a = l(y0, x0) + (l(y0, x1) - l(y0, x0)) * tx;
    const double b = l(y1, x0) + (l(y1, x1) - l(y1, x0)) * tx;
    return a + (b - a) * ty;
  }
};

/// One 16x16 patch: value noise at a random scale plus a linear ramp, tinted per channel.
inline std::vector<float> texture_patch(std::mt19937_64& rng, int channels) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int cells = 2 + static_cast<int>(u(rng) * 3);  // 2..4
  ValueNoise noise(rng, 8);
  const double period = 16.0 / cells;
  const double angle = u(rng) * 2 * std::numbers::pi, slope = 0.5 * u(rng);
  const double mix = 0.3 + 0.5 * u(rng);
  std::vector<double> lo(channels), hi(channels);
  for (int c = 0; c < channels; ++c) {
    lo[c] = 0.1 + 0.4 * u(rng);
    hi[c] = lo[c] + 0.2 + 0.3 * u(rng);
  }
  std::vector<float> out(16 * 16 * channels);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double n = noise.at(y / period, x / period);
      const double g = 0.5 + slope * ((x - 7.5) * std::cos(angle) + (y - 7.5) * std::sin(angle)) / 16.0;
      const double t = std::clamp(mix * n + (1 - mix) * g, 0.0, 1.0);
      for (int c = 0; c < channels; ++c) out[(y * 16 + x) * channels + c] = static_cast<float>(lo[c] + (hi[c] - lo[c]) * t);
    }
  return out;
}

inline dyntex::vqvae::PatchBank texture_bank(std::uint64_t seed, std::size_t count, int channels = 3) {
  std::mt19937_64 rng(seed);
  dyntex::vqvae::PatchBank bank;
  bank.channels = channels;
  for (std::size_t i = 0; i < count; ++i) bank.append(texture_patch(rng, channels));
  return bank;
}

/// Drifting flame-like texture: value noise advected upward with a per-frame
/// phase shift, brighter inside the mask.
inline std::vector<RasterImage> animated_texture(std::uint64_t seed, int h, int w, int frames,
                                                 const dyntex::imagery::SemanticMask& mask) {
  std::mt19937_64 rng(seed);
  ValueNoise coarse(rng, 8), fine(rng, 8);
  std::vector<RasterImage> out;
  for (int f = 0; f < frames; ++f) {
    RasterImage img(h, w, 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double a = coarse.at((y + 2.0 * f) / 12.0, x / 12.0);
        const double b = fine.at((y + 3.0 * f) / 6.0, (x + 0.5 * f) / 6.0);
        const double t = 0.6 * a + 0.4 * b;
        const double in = mask.at(y, x) ? 1.0 : 0.0;
        img.at(y, x, 0) = static_cast<float>(0.15 + 0.35 * in + 0.4 * t);
        img.at(y, x, 1) = static_cast<float>(0.1 + 0.2 * in + 0.3 * t);
        img.at(y, x, 2) = static_cast<float>(0.2 + 0.1 * in + 0.2 * t);
      }
    out.push_back(std::move(img));
  }
  return out;
}

/// Token sequences where frame f is frame f-1 gathered through one fixed
/// permutation of the 16 grid slots; frame 0 is uniform random per location.
inline std::vector<dyntex::forecaster::TokenSequence> permutation_cycle(std::uint64_t seed, int locations, int frames,
                                                                        int vocab = 256) {
  std::mt19937_64 rng(seed);
  std::array<int, 16> perm;
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<dyntex::forecaster::TokenSequence> out(locations);
  for (int l = 0; l < locations; ++l) {
    auto& t = out[l].tokens;
    out[l].location = l;
    t.resize(static_cast<std::size_t>(frames) * 16);
    for (int k = 0; k < 16; ++k) t[k] = tok(rng);
    for (int f = 1; f < frames; ++f)
      for (int k = 0; k < 16; ++k) t[f * 16 + k] = t[(f - 1) * 16 + perm[k]];
  }
  return out;
}

}  // namespace synth
