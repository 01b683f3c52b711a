#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "treemtl/experiment.hpp"
#include "treemtl/format.hpp"

using namespace treemtl;
namespace fs = std::filesystem;

namespace {

// A few-second configuration on 10 -> 4 synthetic tasks.
ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.setting = Setting::a;
  c.seeds = {1, 2};
  c.network.input_dim = 10;
  c.network.output_dim = 4;
  c.network.blocks = parse_blocks("1x3x8,3x3x8,3x15x4");
  c.train.epochs = 4;
  c.train.warmup_epochs = 2;
  c.train.batch_size = 50;
  c.train.lr_branch = 1e-2;
  c.train.tau0 = 5.0;
  c.n_train = 150;
  c.n_val = 40;
  c.out_dir = out;
  c.jobs = 2;
  return c;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TREEMTL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("block descriptions round trip") {
  const auto blocks = parse_blocks("1x3x100,3x3x100,3x15x100");
  REQUIRE(blocks.size() == 3);
  CHECK(blocks[2].children == 15);
  CHECK(describe_blocks(blocks) == "1x3x100,3x3x100,3x15x100");
  CHECK(parse_blocks("").empty());
  CHECK_THROWS_AS(parse_blocks("1x3"), SpecError);
  CHECK_THROWS_AS(parse_blocks("1xax3"), SpecError);
}

TEST_CASE("config validation names the field") {
  ExperimentConfig c;
  c.seeds.clear();
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("seeds"), SpecError);
  c = ExperimentConfig{};
  c.train.warmup_epochs = c.train.epochs + 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("train"), SpecError);
  c = ExperimentConfig{};
  c.network.blocks[1].parents = 2;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("network"), SpecError);
}

TEST_CASE("rendered headers describe the whole configuration") {
  testutil::TempDir dir("header");
  auto c = small_config(dir.path());
  c.train.st_mode = StraightThroughMode::soft_activations;
  c.train.clip_norm = 2.5;
  write_file(dir.path() / "x", comment_block(c.render(7), "# ") + "body\n");
  const auto [back, seed] = config_from_header(read_header(dir.path() / "x"));
  CHECK(seed == 7);
  CHECK(back.render(7) == c.render(7));
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(SpecError("x")) == kExitConfigError);
  CHECK(exit_code_for(NumericError("x")) == kExitNumericAbort);
  CHECK(exit_code_for(TrainingAborted("x", "y")) == kExitNumericAbort);
  CHECK(exit_code_for(MissingArtifact("p")) == kExitMissingArtifact);
  CHECK(exit_code_for(std::runtime_error("x")) == kExitFailure);
}

TEST_CASE("search, retrain and report") {
  testutil::TempDir dir("search");
  const auto config = small_config(dir.path());
  std::ostringstream out;
  const auto outcomes = cmd_search(config, out);
  REQUIRE(outcomes.size() == 2);
  for (std::uint64_t seed : {1, 2}) {
    const auto run = dir.path() / "a" / ("seed_" + std::to_string(seed));
    for (const char* f : {kLogFile, kLogitsFile, kArchFile, kDotFile, kGroupingFile}) {
      CHECK_MESSAGE(fs::exists(run / f), f);
      if (std::string(f) != kGroupingFile) {
        const auto header = read_header(run / f);
        CHECK(header.at("seed") == std::to_string(seed));
        CHECK(header.at("epochs") == "4");
      }
    }
  }

  SUBCASE("reruns are byte-identical") {
    testutil::TempDir again("search_again");
    auto c2 = config;
    c2.out_dir = again.path();
    c2.jobs = 1;
    std::ostringstream sink;
    cmd_search(c2, sink);
    for (const char* f : {kLogFile, kLogitsFile, kArchFile, kDotFile}) {
      const auto a = testutil::read_file_bytes(dir.path() / "a/seed_1" / f);
      const auto b = testutil::read_file_bytes(again.path() / "a/seed_1" / f);
      // Headers name the output root only through the run directory, so the
      // artifacts match byte for byte.
      CHECK_MESSAGE(a == b, f);
    }
  }

  SUBCASE("retrain writes reproducible metrics") {
    const auto run = dir.path() / "a/seed_1";
    std::ostringstream sink;
    const auto m = cmd_retrain(run, sink);
    CHECK(m.parameter_count == outcomes[0].arch.parameter_count());
    CHECK(m.val_tasks.size() == 15);
    const auto first = testutil::read_file_bytes(run / kMetricsFile);
    cmd_retrain(run, sink);
    CHECK(testutil::read_file_bytes(run / kMetricsFile) == first);
    const auto back = read_final_metrics(run / kMetricsFile);
    CHECK(back.val_total == m.val_total);
    CHECK(back.parameter_count == m.parameter_count);
  }

  SUBCASE("report aggregates runs") {
    std::ostringstream table;
    cmd_report({dir.path()}, table, dir.path() / "report.csv");
    const auto rows = collect_report({dir.path()});
    REQUIRE(rows.size() == 2);
    const auto summary = summarize(rows);
    REQUIRE(summary.size() == 1);
    CHECK(summary[0].runs == 2);
    CHECK(summary[0].mean_ari == doctest::Approx((rows[0].ari + rows[1].ari) / 2.0).epsilon(1e-15));
    CHECK(fs::exists(dir.path() / "report.csv"));
    CHECK(collect_report({dir.path() / "a/seed_2"}).size() == 1);
  }

  SUBCASE("missing artifacts") {
    std::ostringstream sink;
    CHECK_THROWS_AS(cmd_retrain(dir.path() / "nowhere", sink), MissingArtifact);
  }
}

TEST_CASE("warmup-only search emits the shared trunk") {
  testutil::TempDir dir("warmup");
  auto c = small_config(dir.path());
  c.seeds = {3};
  c.train.warmup_epochs = c.train.epochs;
  std::ostringstream out;
  const auto outcomes = cmd_search(c, out);
  for (const auto& col : outcomes[0].arch.chosen) for (std::size_t p : col) CHECK(p == 0);
  CHECK(outcomes[0].grouping.predicted.size() == 1);

  std::ostringstream sink;
  const auto m = cmd_retrain(outcomes[0].dir, sink);
  // One op per block plus 15 bias heads.
  CHECK(m.parameter_count == (10 * 8 + 8) + (8 * 8 + 8) + (8 * 4 + 4) + 15 * 4);
}

TEST_CASE("report on setting b trunks gives full match rate") {
  testutil::TempDir dir("report_b");
  auto c = small_config(dir.path());
  c.setting = Setting::b;
  c.seeds = {1, 2};
  c.train.warmup_epochs = c.train.epochs;
  std::ostringstream out;
  cmd_search(c, out);
  const auto summary = summarize(collect_report({dir.path()}));
  REQUIRE(summary.size() == 1);
  CHECK(summary[0].match_rate == 1.0);
}

TEST_CASE("command line") {
  testutil::TempDir dir("cli");
  const auto log = dir.path() / "log.txt";
  const std::string small = "--input-dim 10 --output-dim 4 --blocks 1x3x8,3x15x4 --epochs 2 --warmup 1 "
                            "--n-train 100 --n-val 20 --batch-size 50 --quiet";

  CHECK(run_cli("--help", log) == 0);
  CHECK(run_cli("search --setting z --out " + dir.path().string(), log) == kExitConfigError);
  CHECK(run_cli("search --epochs 1 --warmup 5 --out " + dir.path().string(), log) == kExitConfigError);
  CHECK(run_cli("search --no-such-flag", log) == kExitConfigError);
  CHECK(run_cli("retrain " + (dir.path() / "missing").string(), log) == kExitMissingArtifact);

  CHECK(run_cli("search --setting c --seeds 4,5 " + small + " --out " + dir.path().string(), log) == 0);
  CHECK(fs::exists(dir.path() / "c/seed_4" / kArchFile));
  CHECK(fs::exists(dir.path() / "c/seed_5" / kGroupingFile));
  CHECK(run_cli("retrain " + (dir.path() / "c/seed_4").string(), log) == 0);
  CHECK(fs::exists(dir.path() / "c/seed_4" / kMetricsFile));
  CHECK(run_cli("report " + dir.path().string(), log) == 0);
  CHECK(testutil::read_file_bytes(log).find("setting c") != std::string::npos);
  CHECK(run_cli("evaluate --baselines 1 " + (dir.path() / "c/seed_4").string(), log) == 0);
  CHECK(run_cli("export-suite --setting b --seed 2 --out " + (dir.path() / "suite.json").string(), log) == 0);
  CHECK(import_suite(dir.path() / "suite.json").setting == Setting::b);

  SUBCASE("config file values yield to flags") {
    const auto ini = dir.path() / "run.ini";
    std::ofstream(ini) << "[search]\nsetting = b\nseeds = 6\nepochs = 3\nwarmup = 1\ninput-dim = 10\noutput-dim = 4\n"
                          "blocks = 1x3x8,3x15x4\nn-train = 100\nn-val = 20\nbatch-size = 50\n";
    CHECK(run_cli("--config " + ini.string() + " search --epochs 2 --quiet --out " + dir.path().string(), log) == 0);
    const auto header = read_header(dir.path() / "b/seed_6" / kLogFile);
    CHECK(header.at("epochs") == "2");
    CHECK(header.at("setting") == "b");
  }
  SUBCASE("output root from the environment") {
    const auto root = dir.path() / "env_root";
    const std::string cmd = "TREEMTL_OUT=" + root.string() + " " + TREEMTL_CLI_PATH + " search --setting a --seeds 9 " +
                            small + " > " + log.string() + " 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(root / "a/seed_9" / kLogFile));
  }
}
