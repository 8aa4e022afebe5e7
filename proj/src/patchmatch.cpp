#include "dyntex/patchmatch.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dyntex/binary_io.hpp"
#include "dyntex/error.hpp"
#include "dyntex/patch_grid.hpp"

namespace dyntex::patchmatch {

void GuidanceStack::validate() const {
  if (semantic.height != distance.height || semantic.width != distance.width)
    throw Error(Errc::DimensionMismatch, "semantic and distance channels differ in size");
  if (semantic.data.size() != static_cast<std::size_t>(semantic.height) * semantic.width ||
      distance.data.size() != semantic.data.size())
    throw Error(Errc::DimensionMismatch, "guidance buffers have the wrong length");
  if (weights.semantic < 0 || weights.distance < 0 || !(weights.semantic + weights.distance > 0))
    throw Error(Errc::InvalidArgument, "channel weights must be >= 0 with a positive sum");
}

GuidanceStack make_guidance(const SemanticMask& mask, ChannelWeights weights) {
  GuidanceStack g{mask, imagery::distance_map(mask), weights};
  g.validate();
  return g;
}

void PatchMatchConfig::validate() const {
  if (patch_size < 2) throw Error(Errc::InvalidArgument, "patch_size must be >= 2");
  if (iterations < 1) throw Error(Errc::InvalidArgument, "iterations must be >= 1");
  if (!(random_search_decay > 0.0 && random_search_decay < 1.0))
    throw Error(Errc::InvalidArgument, "random_search_decay must lie in (0,1)");
}

double NearestNeighborField::total_cost() const {
  double t = 0.0;
  for (float c : costs) t += c;
  return t;
}

namespace {

// Unchecked kernel; callers guarantee the windows are in bounds.
float window_cost(const GuidanceStack& s, const GuidanceStack& t, int sx, int sy, int tx, int ty, int p) {
  double sem = 0.0;
  double dist = 0.0;
  for (int y = 0; y < p; ++y) {
    const std::size_t srow = static_cast<std::size_t>(sy + y) * s.width() + sx;
    const std::size_t trow = static_cast<std::size_t>(ty + y) * t.width() + tx;
    const std::uint8_t* sm = &s.semantic.data[srow];
    const std::uint8_t* tm = &t.semantic.data[trow];
    const float* sd = &s.distance.data[srow];
    const float* td = &t.distance.data[trow];
    for (int x = 0; x < p; ++x) {
      const double dm = static_cast<double>(sm[x]) - tm[x];
      const double dd = static_cast<double>(sd[x]) - td[x];
      sem += dm * dm;
      dist += dd * dd;
    }
  }
  return static_cast<float>(s.weights.semantic * sem + s.weights.distance * dist);
}

void check_pair(const GuidanceStack& source, const GuidanceStack& target) {
  source.validate();
  target.validate();
  if (!(source.weights == target.weights))
    throw Error(Errc::InvalidArgument, "source and target guidance use different channel weights");
}

}  // namespace

float patch_cost(const GuidanceStack& source, const GuidanceStack& target, int src_x, int src_y, int tgt_x,
                 int tgt_y, int patch_size) {
  check_pair(source, target);
  const auto inside = [&](const GuidanceStack& g, int x, int y) {
    return x >= 0 && y >= 0 && x + patch_size <= g.width() && y + patch_size <= g.height();
  };
  if (patch_size < 1 || !inside(source, src_x, src_y) || !inside(target, tgt_x, tgt_y))
    throw Error(Errc::OutOfBounds, "patch window outside guidance bounds");
  return window_cost(source, target, src_x, src_y, tgt_x, tgt_y, patch_size);
}

NearestNeighborField nnf_random_init(const GuidanceStack& source, const GuidanceStack& target,
                                     const PatchMatchConfig& config) {
  config.validate();
  check_pair(source, target);
  const int p = config.patch_size;
  if (source.height() < p || source.width() < p)
    throw Error(Errc::SourceTooSmall, "source guidance smaller than patch_size");
  if (target.height() < p || target.width() < p)
    throw Error(Errc::SourceTooSmall, "target guidance smaller than patch_size");

  NearestNeighborField nnf;
  nnf.patch_size = p;
  nnf.height = target.height() - p + 1;
  nnf.width = target.width() - p + 1;
  nnf.source_height = source.height();
  nnf.source_width = source.width();
  nnf.offsets.resize(static_cast<std::size_t>(nnf.height) * nnf.width);
  nnf.costs.resize(nnf.offsets.size());

  std::mt19937_64 rng(config.rng_seed);
  std::uniform_int_distribution<int> pick_x(0, nnf.source_grid_width() - 1);
  std::uniform_int_distribution<int> pick_y(0, nnf.source_grid_height() - 1);
  for (int y = 0; y < nnf.height; ++y) {
    for (int x = 0; x < nnf.width; ++x) {
      const int sx = pick_x(rng);
      const int sy = pick_y(rng);
      const auto i = nnf.index(x, y);
      nnf.offsets[i] = {sx - x, sy - y};
      nnf.costs[i] = window_cost(source, target, sx, sy, x, y, p);
    }
  }
  return nnf;
}

NearestNeighborField nnf_iterate(NearestNeighborField nnf, const GuidanceStack& source,
                                 const GuidanceStack& target, const PatchMatchConfig& config) {
  config.validate();
  check_pair(source, target);
  const int p = nnf.patch_size;
  if (p != config.patch_size) throw Error(Errc::InvalidArgument, "nnf patch_size differs from config");
  if (nnf.source_height != source.height() || nnf.source_width != source.width() ||
      nnf.target_height() != target.height() || nnf.target_width() != target.width())
    throw Error(Errc::DimensionMismatch, "nnf was built for different guidance dimensions");

  const int sgw = nnf.source_grid_width();
  const int sgh = nnf.source_grid_height();
  const int iteration = ++nnf.iterations_done;
  const bool forward = iteration % 2 == 1;
  // Seeded per sweep so a sweep can be replayed from a checkpointed field.
  std::mt19937_64 rng(config.rng_seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(iteration)));

  const auto try_candidate = [&](int x, int y, int sx, int sy) {
    if (sx < 0 || sy < 0 || sx >= sgw || sy >= sgh) return;
    const auto i = nnf.index(x, y);
    if (nnf.offsets[i] == Offset{sx - x, sy - y}) return;
    const float c = window_cost(source, target, sx, sy, x, y, p);
    if (c < nnf.costs[i]) {
      nnf.costs[i] = c;
      nnf.offsets[i] = {sx - x, sy - y};
    }
  };

  const int step = forward ? 1 : -1;
  const int y0 = forward ? 0 : nnf.height - 1;
  const int x0 = forward ? 0 : nnf.width - 1;
  for (int y = y0; y >= 0 && y < nnf.height; y += step) {
    for (int x = x0; x >= 0 && x < nnf.width; x += step) {
      // Propagation: adopt the neighbour's offset (already visited this sweep).
      const int nx = x - step;
      const int ny = y - step;
      if (nx >= 0 && nx < nnf.width) {
        const Offset o = nnf.offsets[nnf.index(nx, y)];
        try_candidate(x, y, x + o.dx, y + o.dy);
      }
      if (ny >= 0 && ny < nnf.height) {
        const Offset o = nnf.offsets[nnf.index(x, ny)];
        try_candidate(x, y, x + o.dx, y + o.dy);
      }

      // Random search in shrinking windows around the current best.
      double radius = std::max(sgw, sgh);
      while (radius >= 1.0) {
        const Offset best = nnf.offsets[nnf.index(x, y)];
        const int bx = x + best.dx;
        const int by = y + best.dy;
        const int r = static_cast<int>(radius);
        const int lo_x = std::max(0, bx - r), hi_x = std::min(sgw - 1, bx + r);
        const int lo_y = std::max(0, by - r), hi_y = std::min(sgh - 1, by + r);
        const int sx = std::uniform_int_distribution<int>(lo_x, hi_x)(rng);
        const int sy = std::uniform_int_distribution<int>(lo_y, hi_y)(rng);
        try_candidate(x, y, sx, sy);
        radius *= config.random_search_decay;
      }
    }
  }
  return nnf;
}

NearestNeighborField run_patchmatch(const GuidanceStack& source, const GuidanceStack& target,
                                    const PatchMatchConfig& config,
                                    const std::function<void(const NearestNeighborField&)>& on_iteration) {
  auto nnf = nnf_random_init(source, target, config);
  if (on_iteration) on_iteration(nnf);
  for (int it = 0; it < config.iterations; ++it) {
    nnf = nnf_iterate(std::move(nnf), source, target, config);
    if (on_iteration) on_iteration(nnf);
  }
  return nnf;
}

RasterImage synthesize_initial(const RasterImage& source_style_frame0, const NearestNeighborField& nnf,
                               double merge_sigma) {
  const auto& style = source_style_frame0;
  if (style.height != nnf.source_height || style.width != nnf.source_width)
    throw Error(Errc::DimensionMismatch, "style frame differs from the nnf source guidance size");
  const int p = nnf.patch_size;

  patchgrid::PatchSet set;
  set.patch_size = p;
  set.channels = style.channels;
  set.source_height = nnf.target_height();
  set.source_width = nnf.target_width();
  set.origins.reserve(nnf.offsets.size());
  set.values.resize(nnf.offsets.size() * set.patch_len());
  const std::size_t row_len = static_cast<std::size_t>(p) * style.channels;
  for (int y = 0; y < nnf.height; ++y) {
    for (int x = 0; x < nnf.width; ++x) {
      const auto i = nnf.index(x, y);
      const int sx = x + nnf.offsets[i].dx;
      const int sy = y + nnf.offsets[i].dy;
      if (sx < 0 || sy < 0 || sx >= nnf.source_grid_width() || sy >= nnf.source_grid_height())
        throw Error(Errc::OutOfBounds, "nnf offset points outside the source frame");
      set.origins.push_back({x, y});
      float* dst = set.values.data() + i * set.patch_len();
      for (int py = 0; py < p; ++py) {
        const float* src = &style.data[(static_cast<std::size_t>(sy + py) * style.width + sx) * style.channels];
        std::copy_n(src, row_len, dst + py * row_len);
      }
    }
  }
  return patchgrid::merge_patches(set, {p, 1}, {merge_sigma});
}

namespace {
constexpr std::string_view kNnfMagic = "DXNF";
constexpr std::uint16_t kNnfVersion = 1;
}  // namespace

void write_nnf(const std::filesystem::path& path, const NearestNeighborField& nnf) {
  binio::Writer w(path);
  w.magic(kNnfMagic);
  w.put<std::uint16_t>(kNnfVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nnf.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nnf.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nnf.patch_size));
  for (std::size_t i = 0; i < nnf.offsets.size(); ++i) {
    w.put<std::int32_t>(nnf.offsets[i].dx);
    w.put<std::int32_t>(nnf.offsets[i].dy);
    w.put<float>(nnf.costs[i]);
  }
  w.close();
}

NearestNeighborField read_nnf(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic(kNnfMagic);
  const auto version = r.get<std::uint16_t>();
  if (version != kNnfVersion) throw Error(Errc::BadFormat, "unsupported DXNF version " + std::to_string(version));
  NearestNeighborField nnf;
  nnf.height = static_cast<int>(r.get<std::uint32_t>());
  nnf.width = static_cast<int>(r.get<std::uint32_t>());
  nnf.patch_size = static_cast<int>(r.get<std::uint32_t>());
  const std::size_t n = static_cast<std::size_t>(nnf.height) * nnf.width;
  nnf.offsets.resize(n);
  nnf.costs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    nnf.offsets[i].dx = r.get<std::int32_t>();
    nnf.offsets[i].dy = r.get<std::int32_t>();
    nnf.costs[i] = r.get<float>();
  }
  return nnf;
}

}  // namespace dyntex::patchmatch
