// Experiment driver: search, retrain, evaluate, report, export-suite.

#include <CLI11.hpp>
#include <iostream>

#include "treemtl/experiment.hpp"

namespace {

using namespace treemtl;

struct SearchFlags {
  std::string setting = "a";
  std::vector<std::uint64_t> seeds{1};
  std::string out = "runs";
  std::vector<std::string> blocks;
  std::size_t input_dim = 200;
  std::size_t output_dim = 100;
  std::string hidden_activation = "relu";
  std::string head = "bias_only";
  std::string st_mode = "hard_activations";
  TrainConfig train;
  std::size_t n_train = 10000;
  std::size_t n_val = 2000;
  std::size_t jobs = 1;
  bool quiet = false;
};

ExperimentConfig resolve(const SearchFlags& f) {
  ExperimentConfig c;
  c.setting = parse_setting(f.setting);
  c.seeds = f.seeds;
  c.out_dir = f.out;
  c.network.input_dim = f.input_dim;
  c.network.output_dim = f.output_dim;
  if (!f.blocks.empty()) {
    std::string joined;
    for (const auto& b : f.blocks) joined += (joined.empty() ? "" : ",") + b;
    c.network.blocks = parse_blocks(joined);
  }
  c.network.hidden_activation = parse_activation(f.hidden_activation);
  if (f.head == "dense") {
    c.network.head_kind = HeadKind::dense;
  } else if (f.head != "bias_only") {
    throw SpecError("head: expected bias_only or dense, got '" + f.head + "'");
  }
  c.train = f.train;
  if (f.st_mode == "soft_activations") {
    c.train.st_mode = StraightThroughMode::soft_activations;
  } else if (f.st_mode != "hard_activations") {
    throw SpecError("st-mode: expected hard_activations or soft_activations, got '" + f.st_mode + "'");
  }
  c.n_train = f.n_train;
  c.n_val = f.n_val;
  c.jobs = f.jobs;
  c.verbose = !f.quiet;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tree-structured multi-task branching search on synthetic regression suites"};
  app.set_config("--config", "", "Flat key/value config file with [section] headers; flags win");
  app.require_subcommand(1);

  SearchFlags sf;
  auto* search = app.add_subcommand("search", "Search branching structure for one setting and several seeds");
  search->add_option("--setting", sf.setting, "Synthetic setting: a, b or c")->capture_default_str();
  search->add_option("--seeds", sf.seeds, "Comma-separated seeds")->delimiter(',')->capture_default_str();
  search->add_option("--out", sf.out, "Output root")->envname("TREEMTL_OUT")->capture_default_str();
  search->add_option("--blocks", sf.blocks, "Blocks as PARENTSxCHILDRENxWIDTH,... (default 1x3x100,3x3x100,3x3x100,3x15x100)")
      ->delimiter(',');
  search->add_option("--input-dim", sf.input_dim, "Synthetic input width")->capture_default_str();
  search->add_option("--output-dim", sf.output_dim, "Synthetic output width")->capture_default_str();
  search->add_option("--hidden-activation", sf.hidden_activation, "Hidden activation")->capture_default_str();
  search->add_option("--head", sf.head, "Task heads: bias_only or dense")->capture_default_str();
  search->add_option("--st-mode", sf.st_mode, "Parent gradient: hard_activations or soft_activations")->capture_default_str();
  search->add_option("--lr-weights", sf.train.lr_weights, "Adam learning rate for weights")->capture_default_str();
  search->add_option("--lr-branch", sf.train.lr_branch, "Adam learning rate for branch logits")->capture_default_str();
  search->add_option("--batch-size", sf.train.batch_size, "Mini-batch size")->capture_default_str();
  search->add_option("--epochs", sf.train.epochs, "Training epochs")->capture_default_str();
  search->add_option("--warmup", sf.train.warmup_epochs, "Epochs with frozen logits")->capture_default_str();
  search->add_option("--tau0", sf.train.tau0, "Initial temperature")->capture_default_str();
  search->add_option("--tau-floor", sf.train.tau_floor, "Temperature floor")->capture_default_str();
  search->add_option("--val-samples", sf.train.val_samples, "Routings averaged per validation pass")->capture_default_str();
  search->add_option("--patience", sf.train.patience, "Early-stop patience in epochs (0 = off)")->capture_default_str();
  search->add_option("--clip-norm", sf.train.clip_norm, "Global gradient norm clip (0 = off)")->capture_default_str();
  search->add_option("--n-train", sf.n_train, "Training set size")->capture_default_str();
  search->add_option("--n-val", sf.n_val, "Validation set size")->capture_default_str();
  search->add_option("--jobs", sf.jobs, "Seeds run in parallel")->capture_default_str();
  search->add_flag("--quiet", sf.quiet, "Only print the per-seed summary");

  std::vector<std::string> retrain_dirs;
  auto* retrain = app.add_subcommand("retrain", "Retrain selected architectures from scratch");
  retrain->add_option("run_dirs", retrain_dirs, "Run directories")->required();

  std::string eval_dir;
  std::size_t baselines = 3;
  auto* evaluate = app.add_subcommand("evaluate", "Compare a retrained architecture with random trees");
  evaluate->add_option("run_dir", eval_dir, "Run directory")->required();
  evaluate->add_option("--baselines", baselines, "Random architectures to retrain")->capture_default_str();

  std::vector<std::string> report_roots;
  std::string report_csv;
  auto* report = app.add_subcommand("report", "Summarize grouping outcomes across runs");
  report->add_option("paths", report_roots, "Run directories or roots to scan")->required();
  report->add_option("--csv", report_csv, "Also write the table as CSV");

  std::string export_setting = "a";
  std::uint64_t export_seed = 1;
  std::string export_path;
  auto* export_cmd = app.add_subcommand("export-suite", "Write a task suite archive (JSON)");
  export_cmd->add_option("--setting", export_setting, "Synthetic setting")->capture_default_str();
  export_cmd->add_option("--seed", export_seed, "Suite seed")->capture_default_str();
  export_cmd->add_option("--out", export_path, "Archive path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfigError;
  }

  try {
    if (search->parsed()) {
      cmd_search(resolve(sf), std::cout);
    } else if (retrain->parsed()) {
      for (const auto& d : retrain_dirs) cmd_retrain(d, std::cout);
    } else if (evaluate->parsed()) {
      cmd_evaluate(eval_dir, baselines, std::cout);
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> roots(report_roots.begin(), report_roots.end());
      cmd_report(roots, std::cout, report_csv);
    } else if (export_cmd->parsed()) {
      cmd_export_suite(parse_setting(export_setting), export_seed, export_path);
    }
  } catch (const TrainingAborted& e) {
    std::cerr << "error: " << e.what() << '\n' << e.snapshot();
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}
