#include "dyntex/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "dyntex/error.hpp"
#include "dyntex/token_io.hpp"

namespace dyntex::pipeline {

using imagery::FrameSequence;
using imagery::RasterImage;

// ---- configuration ----------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Binding {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

Binding bind_int(const char* section, const char* key, int& field) {
  const std::string what = std::string(section) + "." + key;
  return {section, key, [&field] { return std::to_string(field); },
          [&field, what](const std::string& v) { field = config::parse_int(v, what); }};
}

Binding bind_u64(const char* section, const char* key, std::uint64_t& field) {
  const std::string what = std::string(section) + "." + key;
  return {section, key, [&field] { return std::to_string(field); },
          [&field, what](const std::string& v) { field = config::parse_u64(v, what); }};
}

Binding bind_double(const char* section, const char* key, double& field) {
  const std::string what = std::string(section) + "." + key;
  return {section, key, [&field] { return fmt_double(field); },
          [&field, what](const std::string& v) { field = config::parse_double(v, what); }};
}

Binding bind_string(const char* section, const char* key, std::string& field) {
  return {section, key, [&field] { return field; }, [&field](const std::string& v) { field = v; }};
}

Binding bind_path(const char* section, const char* key, fs::path& field) {
  return {section, key, [&field] { return field.string(); }, [&field](const std::string& v) { field = v; }};
}

std::vector<Binding> bindings(PipelineConfig& c, bool with_output_dir) {
  std::vector<Binding> b{
      bind_path("paths", "source_dir", c.paths.source_dir),
      bind_path("paths", "source_mask", c.paths.source_mask),
      bind_path("paths", "target_mask", c.paths.target_mask),
  };
  if (with_output_dir) b.push_back(bind_path("paths", "output_dir", c.paths.output_dir));
  b.insert(b.end(), {
      bind_string("paths", "frame_pattern", c.paths.frame_pattern),
      bind_int("patchmatch", "patch_size", c.patchmatch.patch_size),
      bind_int("patchmatch", "iterations", c.patchmatch.iterations),
      bind_double("patchmatch", "random_search_decay", c.patchmatch.random_search_decay),
      bind_double("patchmatch", "semantic_weight", c.patchmatch.weights.semantic),
      bind_double("patchmatch", "distance_weight", c.patchmatch.weights.distance),
      bind_int("patch", "size", c.patch.patch_size),
      bind_int("patch", "stride", c.patch.stride),
      bind_double("merge", "sigma", c.merge.sigma),
      bind_int("vqvae", "codebook_size", c.vqvae.codebook_size),
      bind_int("vqvae", "embed_dim", c.vqvae.embed_dim),
      bind_int("vqvae", "hidden", c.vqvae.hidden),
      bind_int("vqvae", "res_hidden", c.vqvae.res_hidden),
      bind_int("vqvae", "res_blocks", c.vqvae.res_blocks),
      bind_double("vqvae", "beta", c.vqvae.beta),
      bind_int("vqvae", "steps", c.vqvae.steps),
      bind_int("vqvae", "batch", c.vqvae.batch),
      bind_double("vqvae", "lr", c.vqvae.lr),
      bind_double("vqvae", "holdout", c.vqvae_holdout),
      bind_int("forecaster", "layers", c.forecaster.layers),
      bind_int("forecaster", "heads", c.forecaster.heads),
      bind_int("forecaster", "d_model", c.forecaster.d_model),
      bind_int("forecaster", "ff_mult", c.forecaster.ff_mult),
      bind_int("forecaster", "steps", c.forecaster.steps),
      bind_int("forecaster", "batch", c.forecaster.batch),
      bind_double("forecaster", "lr", c.forecaster.lr),
      bind_double("forecaster", "grad_clip", c.forecaster.grad_clip),
      bind_double("forecaster", "val_fraction", c.forecaster.val_fraction),
      bind_int("forecaster", "eval_every", c.forecaster.eval_every),
      {"sampler", "mode",
       [&c] { return std::string(c.sampler.mode == forecaster::SamplerConfig::Mode::Greedy ? "greedy" : "sampled"); },
       [&c](const std::string& v) {
         if (v == "greedy")
           c.sampler.mode = forecaster::SamplerConfig::Mode::Greedy;
         else if (v == "sampled")
           c.sampler.mode = forecaster::SamplerConfig::Mode::Sampled;
         else
           throw Error(Errc::ConfigError, "sampler.mode: expected greedy or sampled, got '" + v + "'");
       }},
      bind_double("sampler", "temperature", c.sampler.temperature),
      bind_u64("run", "seed", c.seed),
      bind_int("run", "threads", c.threads),
      bind_string("run", "padding", c.padding),
  });
  return b;
}

void config_need(bool ok, const std::string& msg) {
  if (!ok) throw Error(Errc::ConfigError, msg);
}

template <typename F>
void as_config_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigError) throw;
    throw Error(Errc::ConfigError, e.what());
  }
}

}  // namespace

void PipelineConfig::validate(bool check_paths) const {
  config_need(patch.patch_size == vqvae::kPatchSize, "patch.size must be 16 (the patch codec works on 16x16 patches)");
  as_config_error([&] {
    patch.validate();
    patchmatch.validate();
    vqvae.validate();
    forecaster.validate();
    sampler.validate();
  });
  config_need(merge.sigma > 0, "merge.sigma must be > 0");
  config_need(vqvae_holdout >= 0 && vqvae_holdout < 1, "vqvae.holdout must lie in [0, 1)");
  config_need(threads >= 1, "run.threads must be >= 1");
  config_need(padding == "reflect", "run.padding: only 'reflect' is supported");
  if (!check_paths) return;
  config_need(fs::is_directory(paths.source_dir), "paths.source_dir is not a directory: " + paths.source_dir.string());
  config_need(fs::is_regular_file(paths.source_mask), "paths.source_mask not found: " + paths.source_mask.string());
  config_need(fs::is_regular_file(paths.target_mask), "paths.target_mask not found: " + paths.target_mask.string());
  config_need(!paths.output_dir.empty(), "paths.output_dir is not set");
}

PipelineConfig parse_config(const std::vector<config::IniEntry>& entries) {
  PipelineConfig cfg;
  auto table = bindings(cfg, true);
  for (const auto& e : entries) {
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Binding& b) { return b.section == e.section && b.key == e.key; });
    if (it == table.end())
      throw Error(Errc::ConfigError, "line " + std::to_string(e.line) + ": unknown key " +
                                         (e.section.empty() ? e.key : e.section + "." + e.key));
    it->set(e.value);
  }
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  auto cfg = parse_config(config::read_ini(path));
  const auto base = path.parent_path();
  for (auto* p : {&cfg.paths.source_dir, &cfg.paths.source_mask, &cfg.paths.target_mask, &cfg.paths.output_dir})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_entries(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& b : bindings(copy, true)) out.emplace_back(b.section + "." + b.key, b.get());
  return out;
}

std::string config_text(const PipelineConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [k, v] : config_entries(cfg)) {
    const auto dot = k.find('.');
    if (k.substr(0, dot) != section) {
      section = k.substr(0, dot);
      out << (out.tellp() > 0 ? "\n" : "") << "[" << section << "]\n";
    }
    out << k.substr(dot + 1) << " = " << v << "\n";
  }
  return out.str();
}

StageSeeds derive_seeds(std::uint64_t global) {
  auto mix = [global](std::uint64_t k) {
    std::uint64_t z = global + 0x9E3779B97F4A7C15ULL * (k + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return {mix(1), mix(2), mix(3), mix(4), mix(5), mix(6)};
}

// ---- padding ----------------------------------------------------------------

int padded_extent(int extent, const patchgrid::PatchSpec& spec) {
  spec.validate();
  int n = std::max(extent, spec.patch_size);
  while ((n - spec.patch_size) % spec.stride != 0) ++n;
  return n;
}

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

PaddedImage pad_to_grid(const RasterImage& image, const patchgrid::PatchSpec& spec) {
  image.validate();
  const int h = padded_extent(image.height, spec), w = padded_extent(image.width, spec);
  PaddedImage out{RasterImage(h, w, image.channels), {image.height, image.width}};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < image.channels; ++c)
        out.image.at(y, x, c) = image.at(mirror(y, image.height), mirror(x, image.width), c);
  return out;
}

RasterImage crop(const RasterImage& image, const CropRecord& record) {
  if (record.height > image.height || record.width > image.width || record.height < 1 || record.width < 1)
    throw Error(Errc::OutOfBounds, "crop record exceeds the image");
  RasterImage out(record.height, record.width, image.channels);
  for (int y = 0; y < record.height; ++y)
    for (int x = 0; x < record.width; ++x)
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y, x, c);
  return out;
}

// ---- manifest ---------------------------------------------------------------

void RunManifest::set(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
    throw Error(Errc::InvalidArgument, "manifest key/value may not contain '=' in keys or newlines: " + key);
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

void RunManifest::set(const std::string& key, double value) {
  set(key, fmt_double(value));
}

bool RunManifest::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& RunManifest::get(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  throw Error(Errc::NotFound, "manifest has no key " + key);
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailed, "cannot write " + path.string());
  for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
  if (!out) throw Error(Errc::IoFailed, "write failed for " + path.string());
}

RunManifest RunManifest::read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::NotFound, "cannot open manifest " + path.string());
  RunManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::BadFormat, path.string() + ": malformed line '" + line + "'");
    m.entries_.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return m;
}

std::string RunManifest::stable_text() const {
  std::string out;
  for (const auto& [k, v] : entries_)
    if (k.rfind("time.", 0) != 0) out += k + "=" + v + "\n";
  return out;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::NotFound, "cannot open " + path.string());
  std::uint64_t h = 0xCBF29CE484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

// ---- helpers ----------------------------------------------------------------

SourcePatches cut_source_patches(const FrameSequence& frames, const patchgrid::PatchSpec& spec) {
  frames.validate();
  SourcePatches out;
  out.bank.channels = frames[0].channels;
  out.frames = static_cast<int>(frames.frame_count());
  for (std::size_t f = 0; f < frames.frame_count(); ++f) {
    const auto padded = pad_to_grid(frames[f], spec);
    const auto set = patchgrid::cut_patches(padded.image, spec, static_cast<int>(f));
    if (f == 0) {
      out.origins = set.origins;
      out.patches_per_frame = static_cast<int>(set.size());
    }
    out.bank.append(set.values);
  }
  return out;
}

std::vector<std::size_t> holdout_indices(std::size_t n, double fraction, std::uint64_t seed) {
  std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (fraction > 0 && n >= 2) k = std::clamp<std::size_t>(k, 1, n - 1);
  if (n < 2) k = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double temporal_delta(const FrameSequence& frames) {
  if (frames.frame_count() < 2) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t f = 1; f < frames.frame_count(); ++f) {
    const auto& a = frames[f - 1].data;
    const auto& b = frames[f].data;
    if (a.size() != b.size()) throw Error(Errc::DimensionMismatch, "frames differ in size");
    for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(static_cast<double>(b[i]) - a[i]);
    count += a.size();
  }
  return total / static_cast<double>(count);
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Guidance: return "guidance";
    case Stage::InitialFrame: return "initial";
    case Stage::TrainVqvae: return "vqvae";
    case Stage::TrainForecaster: return "forecaster";
    case Stage::Predict: return "predict";
    case Stage::Merge: return "output";
  }
  return "unknown";
}

namespace {

constexpr Stage kStages[] = {Stage::Guidance,        Stage::InitialFrame, Stage::TrainVqvae,
                             Stage::TrainForecaster, Stage::Predict,      Stage::Merge};

/// Stage whose manifest keys start with `key`'s first component, or 0.
int key_stage(const std::string& key) {
  const std::string head = key.substr(0, key.find('.'));
  const std::string tail = key.substr(key.find('.') + 1);
  const std::string& name = head == "time" || head == "stage" ? tail : head;
  for (Stage s : kStages)
    if (name == stage_name(s)) return static_cast<int>(s);
  return 0;
}

vqvae::VqvaeConfig vqvae_config(const PipelineConfig& cfg, int channels, const StageSeeds& seeds) {
  auto v = cfg.vqvae;
  v.channels = channels;
  v.seed = seeds.vqvae;
  return v;
}

forecaster::ForecasterConfig forecaster_config(const PipelineConfig& cfg, int frames, const StageSeeds& seeds) {
  auto f = cfg.forecaster;
  f.vocab = cfg.vqvae.codebook_size;
  f.max_len = frames * vqvae::kGridLen;
  f.seed = seeds.forecaster;
  return f;
}

/// Encodes `count` patches of `values` in chunks of 64.
std::vector<vqvae::LatentGrid> encode_all(const vqvae::VqvaeModel& model, const vqvae::PatchBank& bank, int threads) {
  const std::size_t n = bank.size(), chunk = 64;
  std::vector<vqvae::LatentGrid> out(n);
  nn::NoGradGuard outer;
  parallel_for((n + chunk - 1) / chunk, threads, [&](std::size_t c) {
    nn::NoGradGuard no_grad;
    std::vector<std::size_t> pick;
    for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) pick.push_back(i);
    const auto grids = model.encode_indices(bank.gather(pick));
    std::copy(grids.begin(), grids.end(), out.begin() + c * chunk);
  });
  return out;
}

std::string join_existing(const Artifacts& a) {
  std::string out;
  for (const auto& p : {a.source_distance(), a.target_distance(), a.nnf(), a.initial_frame(), a.vqvae_checkpoint(),
                        a.source_tokens(), a.forecaster_checkpoint(), a.target_tokens(), a.frames_dir()}) {
    if (!fs::exists(p)) continue;
    if (!out.empty()) out += ",";
    out += p.filename().string();
  }
  return out;
}

}  // namespace

// ---- run --------------------------------------------------------------------

TransferResult run_transfer(const PipelineConfig& cfg_in, const RunOptions& options) {
  cfg_in.validate(true);
  PipelineConfig cfg = cfg_in;
  for (auto* p : {&cfg.paths.source_dir, &cfg.paths.source_mask, &cfg.paths.target_mask})
    *p = fs::weakly_canonical(fs::absolute(*p));
  const Artifacts art{cfg.paths.output_dir};
  fs::create_directories(art.root);
  const auto seeds = derive_seeds(cfg.seed);
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };

  TransferResult result;
  RunManifest& man = result.manifest;
  man.set("format", "dyntex-manifest-1");
  for (const auto& [k, v] : config_entries(cfg))
    if (k != "paths.output_dir") man.set("config." + k, v);
  man.set("seed.global", std::to_string(cfg.seed));
  man.set("seed.patchmatch", std::to_string(seeds.patchmatch));
  man.set("seed.vqvae", std::to_string(seeds.vqvae));
  man.set("seed.vqvae_split", std::to_string(seeds.vqvae_split));
  man.set("seed.forecaster", std::to_string(seeds.forecaster));
  man.set("seed.forecaster_split", std::to_string(seeds.forecaster_split));
  man.set("seed.sampler", std::to_string(seeds.sampler));

  const int first = static_cast<int>(options.first), last = static_cast<int>(options.last);
  if (first < 1 || last > 6 || first > last) throw Error(Errc::InvalidArgument, "invalid stage range");
  if (first > 1) {
    const auto old = RunManifest::read(art.manifest());
    for (const auto& [k, v] : old.entries()) {
      const int s = key_stage(k);
      if (s >= 1 && s < first && k.rfind("stage.", 0) != 0) man.set(k, v);
    }
  }

  // inputs
  const auto source = imagery::load_frame_sequence(cfg.paths.source_dir, cfg.paths.frame_pattern);
  if (source.frame_count() < 2)
    throw Error(Errc::NeedSubsequentFrames, "source video has " + std::to_string(source.frame_count()) +
                                                " frame(s); at least 2 are needed");
  const int frames = static_cast<int>(source.frame_count());
  const int channels = source[0].channels;
  man.set("input.frames", std::to_string(frames));
  man.set("input.source_height", std::to_string(source[0].height));
  man.set("input.source_width", std::to_string(source[0].width));
  man.set("input.channels", std::to_string(channels));

  auto run_stage = [&](Stage s, const std::function<void()>& body) {
    const int id = static_cast<int>(s);
    const std::string name = stage_name(s);
    if (id < first) {
      man.set("stage." + name, "reused");
      return;
    }
    if (id > last) {
      man.set("stage." + name, "not-run");
      return;
    }
    log("stage " + std::to_string(id) + " (" + name + ")");
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const std::exception& e) {
      man.set("stage." + name, "failed");
      man.set("status", "failed");
      man.set("failed_stage", name);
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      man.set("error", msg);
      man.set("partial_outputs", join_existing(art));
      man.write(art.manifest());
      throw Error(Errc::StageFailed, "stage " + std::to_string(id) + " (" + name + ") failed: " + e.what());
    }
    man.set("stage." + name, "done");
    man.set("time." + name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  imagery::SemanticMask source_mask, target_mask;
  run_stage(Stage::Guidance, [&] {
    source_mask = imagery::read_mask(cfg.paths.source_mask);
    target_mask = imagery::read_mask(cfg.paths.target_mask);
    if (source_mask.height != source[0].height || source_mask.width != source[0].width)
      throw Error(Errc::DimensionMismatch, "source mask size differs from the source frames");
    imagery::write_distance_png(art.source_distance(), imagery::distance_map(source_mask));
    imagery::write_distance_png(art.target_distance(), imagery::distance_map(target_mask));
    man.set("guidance.target_height", std::to_string(target_mask.height));
    man.set("guidance.target_width", std::to_string(target_mask.width));
  });

  run_stage(Stage::InitialFrame, [&] {
    if (source_mask.data.empty()) {
      source_mask = imagery::read_mask(cfg.paths.source_mask);
      target_mask = imagery::read_mask(cfg.paths.target_mask);
    }
    auto pm = cfg.patchmatch;
    pm.rng_seed = seeds.patchmatch;
    const auto src_g = patchmatch::make_guidance(source_mask, pm.weights);
    const auto tgt_g = patchmatch::make_guidance(target_mask, pm.weights);
    const auto nnf = patchmatch::run_patchmatch(src_g, tgt_g, pm);
    patchmatch::write_nnf(art.nnf(), nnf);
    imagery::write_png(art.initial_frame(), patchmatch::synthesize_initial(source[0], nnf, cfg.merge.sigma));
    man.set("initial.nnf_total_cost", nnf.total_cost());
    man.set("initial.nnf_mean_cost", nnf.mean_cost());
    man.set("initial.nnf_digest", file_digest(art.nnf()));
    man.set("initial.frame_digest", file_digest(art.initial_frame()));
  });

  run_stage(Stage::TrainVqvae, [&] {
    const auto patches = cut_source_patches(source, cfg.patch);
    const auto held = holdout_indices(patches.bank.size(), cfg.vqvae_holdout, seeds.vqvae_split);
    vqvae::PatchBank train, test;
    train.channels = test.channels = channels;
    const std::size_t len = static_cast<std::size_t>(vqvae::kPatchSize) * vqvae::kPatchSize * channels;
    for (std::size_t i = 0, h = 0; i < patches.bank.size(); ++i) {
      const std::span<const float> p(patches.bank.values.data() + i * len, len);
      if (h < held.size() && held[h] == i) {
        test.append(p);
        ++h;
      } else {
        train.append(p);
      }
    }
    vqvae::VqvaeModel model(vqvae_config(cfg, channels, seeds));
    std::ofstream vlog(art.vqvae_log(), std::ios::trunc);
    const auto report = vqvae::train_vqvae(model, train, [&](const vqvae::StepLog& s) {
      char line[160];
      std::snprintf(line, sizeof line, "step %d total %.6f recon %.6f codebook %.6f commit %.6f\n", s.step, s.total,
                    s.recon, s.codebook, s.commit);
      vlog << line;
      if (s.step % 100 == 0) log(line);
    });
    model.save(art.vqvae_checkpoint());
    man.set("vqvae.train_patches", std::to_string(train.size()));
    man.set("vqvae.holdout_patches", std::to_string(test.size()));
    if (!report.log.empty()) {
      const auto& l = report.log.back();
      man.set("vqvae.final_total", l.total);
      man.set("vqvae.final_recon", l.recon);
      man.set("vqvae.final_codebook", l.codebook);
      man.set("vqvae.final_commit", l.commit);
    }
    const auto used = std::count_if(report.usage.begin(), report.usage.end(), [](auto u) { return u > 0; });
    man.set("vqvae.codebook_used", std::to_string(used));
    man.set("vqvae.train_mse", vqvae::reconstruction_mse(model, train));
    if (test.size() > 0) man.set("vqvae.holdout_mse", vqvae::reconstruction_mse(model, test));
    man.set("vqvae.digest", file_digest(art.vqvae_checkpoint()));
  });

  run_stage(Stage::TrainForecaster, [&] {
    vqvae::VqvaeModel codec(vqvae_config(cfg, channels, seeds));
    codec.load(art.vqvae_checkpoint());
    const auto patches = cut_source_patches(source, cfg.patch);
    const auto grids = encode_all(codec, patches.bank, cfg.threads);
    tokens::TokenFile file(cfg.vqvae.codebook_size, patches.patches_per_frame, frames);
    for (int f = 0; f < frames; ++f)
      for (int p = 0; p < patches.patches_per_frame; ++p)
        file.set_grid(p, f, grids[static_cast<std::size_t>(f) * patches.patches_per_frame + p]);
    tokens::write_tokens(art.source_tokens(), file);

    auto split = forecaster::split_dataset(forecaster::build_dataset(file), cfg.forecaster.val_fraction,
                                           seeds.forecaster_split);
    forecaster::Forecaster model(forecaster_config(cfg, frames, seeds));
    const auto report = forecaster::train_forecaster(
        model, split.train, split.validation,
        [&](const forecaster::StepLog& s) {
          if (s.step % 100 == 0)
            log("step " + std::to_string(s.step) + " loss " + fmt_double(s.loss) + " acc " + fmt_double(s.batch_accuracy));
        });
    forecaster::write_training_log(art.forecaster_log(), report);
    model.save(art.forecaster_checkpoint());
    man.set("forecaster.sequences", std::to_string(split.train.size() + split.validation.size()));
    man.set("forecaster.validation_sequences", std::to_string(split.validation.size()));
    if (!report.steps.empty()) man.set("forecaster.final_loss", report.steps.back().loss);
    man.set("forecaster.accuracy", report.final_accuracy);
    man.set("forecaster.accuracy_split", split.validation.empty() ? "train" : "validation");
    man.set("forecaster.tokens_digest", file_digest(art.source_tokens()));
    man.set("forecaster.digest", file_digest(art.forecaster_checkpoint()));
  });

  run_stage(Stage::Predict, [&] {
    vqvae::VqvaeModel codec(vqvae_config(cfg, channels, seeds));
    codec.load(art.vqvae_checkpoint());
    forecaster::Forecaster model(forecaster_config(cfg, frames, seeds));
    model.load(art.forecaster_checkpoint());
    const auto initial = imagery::read_png(art.initial_frame());
    const auto padded = pad_to_grid(initial, cfg.patch);
    const auto set = patchgrid::cut_patches(padded.image, cfg.patch, 0);
    vqvae::PatchBank bank;
    bank.channels = set.channels;
    bank.values = set.values;
    const auto grids = encode_all(codec, bank, cfg.threads);

    auto sampler = cfg.sampler;
    sampler.rng_seed = seeds.sampler;
    const int n = static_cast<int>(grids.size());
    const int chunks = std::max(1, std::min(cfg.threads, n));
    tokens::TokenFile out(cfg.vqvae.codebook_size, n, frames);
    parallel_for(static_cast<std::size_t>(chunks), cfg.threads, [&](std::size_t c) {
      const int lo = static_cast<int>(c * n / chunks), hi = static_cast<int>((c + 1) * n / chunks);
      const auto seqs = forecaster::predict(model, std::span(grids).subspan(lo, hi - lo), frames - 1, sampler, lo);
      for (int i = lo; i < hi; ++i)
        for (int f = 0; f < frames; ++f) {
          vqvae::LatentGrid g;
          for (int k = 0; k < vqvae::kGridLen; ++k)
            g[k] = static_cast<std::uint16_t>(seqs[i - lo].tokens[f * vqvae::kGridLen + k]);
          out.set_grid(i, f, g);
        }
    });
    tokens::write_tokens(art.target_tokens(), out);
    man.set("predict.locations", std::to_string(n));
    man.set("predict.digest", file_digest(art.target_tokens()));
  });

  run_stage(Stage::Merge, [&] {
    vqvae::VqvaeModel codec(vqvae_config(cfg, channels, seeds));
    codec.load(art.vqvae_checkpoint());
    const auto initial = imagery::read_png(art.initial_frame());
    const auto padded = pad_to_grid(initial, cfg.patch);
    const auto file = tokens::read_tokens(art.target_tokens());
    const auto origins = patchgrid::grid_origins(padded.image.height, padded.image.width, cfg.patch);
    if (file.patches_per_frame != static_cast<int>(origins.size()) || file.frame_count != frames)
      throw Error(Errc::DimensionMismatch, "target token file does not match the target patch grid");

    FrameSequence out;
    out.frames.resize(frames);
    out.frames[0] = initial;
    parallel_for(static_cast<std::size_t>(frames - 1), cfg.threads, [&](std::size_t k) {
      const int f = static_cast<int>(k) + 1;
      nn::NoGradGuard no_grad;
      patchgrid::PatchSet set;
      set.patch_size = vqvae::kPatchSize;
      set.channels = channels;
      set.frame_index = f;
      set.source_height = padded.image.height;
      set.source_width = padded.image.width;
      set.origins = origins;
      set.values.reserve(origins.size() * set.patch_len());
      const std::size_t chunk = 64;
      for (std::size_t s = 0; s < origins.size(); s += chunk) {
        std::vector<vqvae::LatentGrid> grids;
        for (std::size_t i = s; i < std::min(origins.size(), s + chunk); ++i)
          grids.push_back(file.grid(static_cast<int>(i), f));
        const auto patches = codec.indices_to_patch(grids);
        set.values.insert(set.values.end(), patches.values().begin(), patches.values().end());
      }
      auto merged = crop(patchgrid::merge_patches(set, cfg.patch, cfg.merge), padded.crop);
      for (auto& v : merged.data) v = std::clamp(v, 0.0f, 1.0f);
      out.frames[f] = std::move(merged);
    });
    fs::remove_all(art.frames_dir());
    fs::create_directories(art.frames_dir());
    imagery::save_frame_sequence(art.frames_dir(), out, cfg.paths.frame_pattern);
    std::string all;
    for (int f = 0; f < frames; ++f)
      all += file_digest(art.frames_dir() / imagery::format_frame_name(cfg.paths.frame_pattern, f));
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : all) h = (h ^ c) * 0x100000001B3ULL;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    man.set("output.frames", std::to_string(frames));
    man.set("output.height", std::to_string(initial.height));
    man.set("output.width", std::to_string(initial.width));
    man.set("output.frames_digest", hex);
    man.set("output.temporal_delta", temporal_delta(out));
    man.set("output.source_temporal_delta", temporal_delta(source));
    result.frames = std::move(out);
  });

  man.set("status", last == static_cast<int>(Stage::Merge) ? "complete" : "partial");
  man.write(art.manifest());
  return result;
}

// ---- evaluation -------------------------------------------------------------

std::string EvalReport::text() const {
  std::ostringstream out;
  out << "forecaster_accuracy " << fmt_double(forecaster_accuracy) << " (" << accuracy_split << ")\n";
  out << "vqvae_mse " << fmt_double(vqvae_mse) << " (" << mse_split << ")\n";
  out << "nnf_mean_cost " << fmt_double(nnf_mean_cost) << "\n";
  out << "temporal_delta output " << fmt_double(output_temporal_delta) << " source "
      << fmt_double(source_temporal_delta) << "\n";
  return out.str();
}

EvalReport evaluate(const fs::path& run_dir) {
  const Artifacts art{run_dir};
  for (const auto& p : {art.manifest(), art.nnf(), art.vqvae_checkpoint(), art.source_tokens(),
                        art.forecaster_checkpoint(), art.frames_dir()})
    if (!fs::exists(p)) throw Error(Errc::NotFound, "missing run artifact " + p.string());
  const auto man = RunManifest::read(art.manifest());
  std::vector<config::IniEntry> entries;
  for (const auto& [k, v] : man.entries()) {
    if (k.rfind("config.", 0) != 0) continue;
    const auto rest = k.substr(7);
    const auto dot = rest.find('.');
    entries.push_back({rest.substr(0, dot), rest.substr(dot + 1), v, 0});
  }
  const auto cfg = parse_config(entries);
  const auto seeds = derive_seeds(cfg.seed);

  EvalReport r;
  const auto source = imagery::load_frame_sequence(cfg.paths.source_dir, cfg.paths.frame_pattern);
  const int frames = static_cast<int>(source.frame_count());
  const int channels = source[0].channels;

  // patch codec on the same hold-out split as training
  const auto patches = cut_source_patches(source, cfg.patch);
  const auto held = holdout_indices(patches.bank.size(), cfg.vqvae_holdout, seeds.vqvae_split);
  vqvae::VqvaeModel codec(vqvae_config(cfg, channels, seeds));
  codec.load(art.vqvae_checkpoint());
  if (held.empty()) {
    r.vqvae_mse = vqvae::reconstruction_mse(codec, patches.bank);
    r.mse_split = "train";
  } else {
    vqvae::PatchBank test;
    test.channels = channels;
    const std::size_t len = static_cast<std::size_t>(vqvae::kPatchSize) * vqvae::kPatchSize * channels;
    for (auto i : held) test.append(std::span<const float>(patches.bank.values.data() + i * len, len));
    r.vqvae_mse = vqvae::reconstruction_mse(codec, test);
    r.mse_split = "holdout";
  }

  const auto file = tokens::read_tokens(art.source_tokens());
  auto split =
      forecaster::split_dataset(forecaster::build_dataset(file), cfg.forecaster.val_fraction, seeds.forecaster_split);
  forecaster::Forecaster model(forecaster_config(cfg, frames, seeds));
  model.load(art.forecaster_checkpoint());
  if (split.validation.empty()) {
    r.forecaster_accuracy = forecaster::accuracy(model, split.train);
    r.accuracy_split = "train";
  } else {
    r.forecaster_accuracy = forecaster::accuracy(model, split.validation);
    r.accuracy_split = "validation";
  }

  r.nnf_mean_cost = patchmatch::read_nnf(art.nnf()).mean_cost();
  r.output_temporal_delta = temporal_delta(imagery::load_frame_sequence(art.frames_dir(), cfg.paths.frame_pattern));
  r.source_temporal_delta = temporal_delta(source);
  return r;
}

}  // namespace dyntex::pipeline
