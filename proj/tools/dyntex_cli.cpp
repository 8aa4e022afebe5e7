// dyntex command-line front end.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "dyntex/error.hpp"
#include "dyntex/imagery.hpp"
#include "dyntex/patch_grid.hpp"
#include "dyntex/pipeline.hpp"
#include "dyntex/token_io.hpp"
#include "dyntex/vqvae.hpp"

namespace fs = std::filesystem;
using namespace dyntex;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

pipeline::PipelineConfig resolve(const Globals& g) {
  if (g.config.empty()) throw Error(Errc::ConfigError, "--config is required");
  auto cfg = pipeline::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  if (!g.out.empty()) cfg.paths.output_dir = g.out;
  return cfg;
}

void print_log(const std::string& line) {
  std::cerr << line;
  if (line.empty() || line.back() != '\n') std::cerr << '\n';
}

int run_stages(const Globals& g, pipeline::Stage first, pipeline::Stage last) {
  const auto cfg = resolve(g);
  pipeline::RunOptions opts{first, last, print_log};
  pipeline::run_transfer(cfg, opts);
  std::cout << "wrote " << pipeline::Artifacts{cfg.paths.output_dir}.manifest().string() << "\n";
  return 0;
}

// Encodes every frame of `input` (a PNG or a frame directory) with the
// trained patch codec of the run directory.
int encode(const Globals& g, const std::string& input, const std::string& output) {
  const auto cfg = resolve(g);
  imagery::FrameSequence frames;
  if (fs::is_directory(input))
    frames = imagery::load_frame_sequence(input, cfg.paths.frame_pattern);
  else
    frames.frames.push_back(imagery::read_png(input));
  const auto patches = pipeline::cut_source_patches(frames, cfg.patch);
  auto vcfg = cfg.vqvae;
  vcfg.channels = patches.bank.channels;
  vqvae::VqvaeModel model(vcfg);
  model.load(pipeline::Artifacts{cfg.paths.output_dir}.vqvae_checkpoint());
  tokens::TokenFile file(vcfg.codebook_size, patches.patches_per_frame, patches.frames);
  nn::NoGradGuard no_grad;
  for (int f = 0; f < patches.frames; ++f) {
    std::vector<std::size_t> pick(patches.patches_per_frame);
    for (int p = 0; p < patches.patches_per_frame; ++p)
      pick[p] = static_cast<std::size_t>(f) * patches.patches_per_frame + p;
    const auto grids = model.encode_indices(patches.bank.gather(pick));
    for (int p = 0; p < patches.patches_per_frame; ++p) file.set_grid(p, f, grids[p]);
  }
  tokens::write_tokens(output, file);
  std::cout << "encoded " << patches.frames << " frame(s), " << patches.patches_per_frame << " patches each -> "
            << output << "\n";
  return 0;
}

int distance_map(const Globals& g, const std::string& mask, const std::string& output) {
  if (mask.empty()) return run_stages(g, pipeline::Stage::Guidance, pipeline::Stage::Guidance);
  if (output.empty()) throw Error(Errc::ConfigError, "--output is required with --mask");
  imagery::write_distance_png(output, imagery::distance_map(imagery::read_mask(mask)));
  std::cout << "wrote " << output << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dyntex: one-shot dynamic texture transfer"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Pipeline config file");
  app.add_option("--seed", g.seed, "Global seed (overrides run.seed)");
  app.add_option("--threads", g.threads, "Worker threads; 1 = reference mode")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory (overrides paths.output_dir)");

  std::string mask, output, input;
  auto* dist = app.add_subcommand("distance-map", "Stage 1: distance maps of both masks, or of --mask alone");
  dist->add_option("--mask", mask, "Single mask PNG");
  dist->add_option("--output", output, "Distance map PNG for --mask");
  app.add_subcommand("transfer-initial", "Stage 2: PatchMatch and the initial target frame");
  app.add_subcommand("train-vqvae", "Stage 3: train the patch codec");
  auto* enc = app.add_subcommand("encode", "Encode a PNG or frame directory into a token file");
  enc->add_option("input", input, "PNG file or frame directory")->required();
  enc->add_option("output", output, "Token file to write")->required();
  app.add_subcommand("train-forecaster", "Stage 4: tokenize the source and train the forecaster");
  app.add_subcommand("predict", "Stage 5: predict the target tokens");
  app.add_subcommand("merge", "Stage 6: decode and merge the target frames");
  auto* run = app.add_subcommand("run", "Run stages in order");
  int from = 1, to = 6;
  run->add_option("--from", from, "First stage (1-6)")->check(CLI::Range(1, 6));
  run->add_option("--to", to, "Last stage (1-6)")->check(CLI::Range(1, 6));
  app.add_subcommand("eval", "Recompute metrics of a finished run in --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  using pipeline::Stage;
  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "distance-map") return distance_map(g, mask, output);
    if (name == "transfer-initial") return run_stages(g, Stage::InitialFrame, Stage::InitialFrame);
    if (name == "train-vqvae") return run_stages(g, Stage::TrainVqvae, Stage::TrainVqvae);
    if (name == "encode") return encode(g, input, output);
    if (name == "train-forecaster") return run_stages(g, Stage::TrainForecaster, Stage::TrainForecaster);
    if (name == "predict") return run_stages(g, Stage::Predict, Stage::Predict);
    if (name == "merge") return run_stages(g, Stage::Merge, Stage::Merge);
    if (name == "run") {
      if (from > to) throw Error(Errc::ConfigError, "--from must not exceed --to");
      return run_stages(g, static_cast<Stage>(from), static_cast<Stage>(to));
    }
    if (name == "eval") {
      fs::path dir = g.out;
      if (dir.empty()) dir = resolve(g).paths.output_dir;
      std::cout << pipeline::evaluate(dir).text();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::ConfigError ? kExitConfig : kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitConfig;
}
