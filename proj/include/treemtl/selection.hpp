#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "treemtl/network.hpp"
#include "treemtl/synthetic.hpp"
#include "treemtl/training.hpp"

namespace treemtl {

using Partition = std::vector<std::vector<std::size_t>>;

// Discrete tree picked from a searched network. Block b's child j takes its
// input from parent chosen[b][j]; the last block's children are the tasks.
struct ArchitectureTree {
  NetworkSpec spec;
  std::vector<std::vector<std::size_t>> chosen;
  std::vector<std::vector<bool>> kept;  // per block, per parent op

  std::size_t task_count() const { return spec.task_count; }
  // Op index at every block on task k's root-to-leaf path.
  std::vector<std::size_t> task_path(std::size_t task) const;
  // Tasks grouped by identical path, classes ordered by smallest task index.
  Partition partition() const;
  // Parameter count of the pruned network (kept ops plus heads).
  std::size_t parameter_count() const;

  // Throws ContractError unless the choices fit the spec and `kept` marks
  // exactly the ops that reach some task.
  void validate() const;
};

// Argmax of each logits column (no noise), lowest index on ties.
ArchitectureTree select_architecture(const TreeNetwork& net);
// Builds a tree from explicit choices, deriving the pruned flags.
ArchitectureTree make_architecture(const NetworkSpec& spec, std::vector<std::vector<std::size_t>> chosen);
// Every child picks a parent uniformly at random.
ArchitectureTree random_architecture(const NetworkSpec& spec, Rng& rng);

// Network holding only the kept ops of `arch`, with fixed routing. Weights
// are copied from `source` when given, freshly initialized from `rng` otherwise.
TreeNetwork build_compact(const ArchitectureTree& arch, const TreeNetwork* source, Rng& rng);

// Compares the compact network's outputs against the full network's
// noiseless forward. Returns true, or throws EquivalenceError naming the
// first task whose outputs differ by more than `tolerance`.
bool prune_and_forward_check(TreeNetwork& net, const ArchitectureTree& arch, const Tensor& inputs,
                             double tolerance = 1e-10);

struct RetrainResult {
  TreeNetwork net;
  TrainLog log;
};

// Fresh initialization and weights-only training of the pruned tree.
RetrainResult retrain(const ArchitectureTree& arch, const Splits& data, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

inline constexpr std::size_t kNeverDiverge = std::numeric_limits<std::size_t>::max();

struct GroupingReport {
  Partition predicted;
  Partition truth;
  bool exact_match = false;
  double ari = 0.0;
  // depth[k][l]: first block whose op differs on the two paths, kNeverDiverge if identical.
  std::vector<std::vector<std::size_t>> divergence_depths;
};

Partition partition_from_labels(std::span<const std::size_t> labels);
// Canonical form: members sorted, classes ordered by first member.
Partition canonical(Partition p);
double adjusted_rand_index(const Partition& a, const Partition& b, std::size_t elements);

GroupingReport grouping_report(const ArchitectureTree& arch, const SyntheticTaskSuite& suite);

// Shape the searched tree is expected to take for a setting: (a) the exact
// activation grouping, (b) one trunk, (c) square tasks split off before the
// cos and sinc tasks separate.
bool single_trunk(const GroupingReport& report);
bool square_branches_first(const GroupingReport& report, const SyntheticTaskSuite& suite);
bool setting_target_met(const GroupingReport& report, const SyntheticTaskSuite& suite);

std::string grouping_json(const GroupingReport& report, const std::string& extra_json_fields = {});

// Graphviz export. `groups` labels the task leaves (may be empty).
std::string tree_to_dot(const ArchitectureTree& arch, std::span<const std::size_t> groups,
                        const std::string& header = {});
void export_tree(const ArchitectureTree& arch, std::span<const std::size_t> groups,
                 const std::filesystem::path& path, const std::string& header = {});
// child node id -> parent node id, as drawn.
std::map<std::string, std::string> dot_parent_map(const ArchitectureTree& arch);
std::map<std::string, std::string> parse_dot_parent_map(const std::string& dot);

// Plain-text architecture file: commented header, then spec and choices.
std::string serialize_architecture(const ArchitectureTree& arch, const std::string& header = {});
ArchitectureTree parse_architecture(const std::string& text);

}  // namespace treemtl
