#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "doctest.h"
#include "dyntex/pipeline.hpp"
#include "scene.hpp"
#include "test_util.hpp"

using namespace dyntex;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DYNTEX_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("cli stages, exit codes and eval") {
  TempDir dir("cli");
  const auto s = scene::make_scene(dir.path(), 36, 32, 3, false);
  const auto ini = dir.path() / "run.ini";
  std::ofstream(ini) << pipeline::config_text(s.config);
  const auto log = dir.path() / "log.txt";
  const std::string base = "--config " + ini.string();

  CHECK(run_cli(base + " run --to 3", log) == 0);
  CHECK(fs::exists(dir.path() / "out" / "vqvae.dytx"));
  CHECK_FALSE(fs::exists(dir.path() / "out" / "gpt.dytx"));
  CHECK(run_cli(base + " train-forecaster", log) == 0);
  CHECK(run_cli(base + " predict", log) == 0);
  CHECK(run_cli(base + " merge", log) == 0);
  CHECK(fs::exists(dir.path() / "out" / "frames" / "frame_0002.png"));
  CHECK(run_cli(base + " encode " + (dir.path() / "out" / "initial_frame.png").string() + " " +
                    (dir.path() / "t.dxtk").string(),
                log) == 0);
  CHECK(tokens::read_tokens(dir.path() / "t.dxtk").frame_count == 1);

  CHECK(run_cli("eval --out " + (dir.path() / "out").string(), log) == 0);
  const auto report = slurp(log);
  CHECK(report.find("forecaster_accuracy") != std::string::npos);
  CHECK(report.find("vqvae_mse") != std::string::npos);

  CHECK(run_cli("distance-map --mask " + (dir.path() / "source_mask.png").string() + " --output " +
                    (dir.path() / "d.png").string(),
                log) == 0);
  CHECK(imagery::read_png(dir.path() / "d.png").height == 36);

  std::ofstream(dir.path() / "bad.ini") << "[vqvae]\nstepz = 3\n";
  CHECK(run_cli("--config " + (dir.path() / "bad.ini").string() + " run", log) == 2);
  CHECK(run_cli("run", log) == 2);
  CHECK(run_cli("frobnicate", log) == 2);

  imagery::write_mask(s.config.paths.source_mask, imagery::SemanticMask(10, 10, 1));
  CHECK(run_cli(base + " run", log) == 3);
  CHECK(slurp(log).find("guidance") != std::string::npos);
}
