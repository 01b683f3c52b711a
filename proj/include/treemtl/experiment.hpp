#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "treemtl/error.hpp"
#include "treemtl/network.hpp"
#include "treemtl/selection.hpp"
#include "treemtl/synthetic.hpp"
#include "treemtl/training.hpp"

namespace treemtl {

// A run directory lacks a file a command needs.
class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::filesystem::path& path)
      : Error("missing artifact: " + path.string()), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitNumericAbort = 3,
  kExitMissingArtifact = 4,
};

// Maps an in-flight exception to the CLI exit code.
int exit_code_for(const std::exception& e);

struct ExperimentConfig {
  Setting setting = Setting::a;
  std::vector<std::uint64_t> seeds{1};
  NetworkSpec network = default_synthetic_spec();
  TrainConfig train;
  std::size_t n_train = 10000;
  std::size_t n_val = 2000;
  std::filesystem::path out_dir = "runs";
  std::size_t jobs = 1;
  bool verbose = false;

  // Throws SpecError naming the offending field.
  void validate() const;
  // Resolved `key = value` lines for one seed; written atop every artifact.
  std::string render(std::uint64_t seed) const;
  std::filesystem::path run_dir(std::uint64_t seed) const;
};

// Inverse of ExperimentConfig::render for the keys it writes. Returns the
// configuration and the seed.
std::pair<ExperimentConfig, std::uint64_t> config_from_header(
    const std::map<std::string, std::string>& header);

// `# key = value` lines at the top of an artifact file.
std::map<std::string, std::string> read_header(const std::filesystem::path& path);

std::string describe_blocks(const std::vector<BlockSpec>& blocks);
std::vector<BlockSpec> parse_blocks(const std::string& text);

inline constexpr const char* kLogFile = "log.csv";
inline constexpr const char* kLogitsFile = "logits_history";
inline constexpr const char* kArchFile = "arch.tree";
inline constexpr const char* kDotFile = "arch.dot";
inline constexpr const char* kGroupingFile = "grouping.json";
inline constexpr const char* kMetricsFile = "final_metrics";

struct SearchOutcome {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  ArchitectureTree arch;
  GroupingReport grouping;
  bool target_met = false;
  TrainLog log;
};

// Search, select, check pruning and write the five search artifacts.
SearchOutcome run_search(const ExperimentConfig& config, std::uint64_t seed, std::ostream* progress);

struct FinalMetrics {
  double val_total = 0.0;
  std::vector<double> val_tasks;
  std::size_t parameter_count = 0;
  std::size_t epochs = 0;
};

// Retrains a tree with the run's resolved configuration.
FinalMetrics retrain_metrics(const ArchitectureTree& arch, const ExperimentConfig& config,
                             std::uint64_t seed, std::ostream* progress);

std::vector<SearchOutcome> cmd_search(const ExperimentConfig& config, std::ostream& out);
FinalMetrics cmd_retrain(const std::filesystem::path& run_dir, std::ostream& out);
// Retrains `baselines` uniformly sampled trees from the run's search space
// and compares them with the run's retrained architecture.
void cmd_evaluate(const std::filesystem::path& run_dir, std::size_t baselines, std::ostream& out);

struct ReportRow {
  std::string setting;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  bool exact_match = false;
  bool target_met = false;
  double ari = 0.0;
  std::string partition;
  std::string depths;
  std::optional<double> final_val;
  std::optional<std::size_t> parameters;
};

struct SettingSummary {
  std::string setting;
  std::size_t runs = 0;
  double match_rate = 0.0;
  double mean_ari = 0.0;
};

std::vector<ReportRow> collect_report(const std::vector<std::filesystem::path>& roots);
std::vector<SettingSummary> summarize(const std::vector<ReportRow>& rows);
void cmd_report(const std::vector<std::filesystem::path>& roots, std::ostream& out,
                const std::filesystem::path& csv_path = {});

void cmd_export_suite(Setting setting, std::uint64_t seed, const std::filesystem::path& path);

void write_final_metrics(const FinalMetrics& m, const std::string& header,
                         const std::filesystem::path& path);
FinalMetrics read_final_metrics(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace treemtl
