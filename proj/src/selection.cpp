#include "treemtl/selection.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <set>
#include <sstream>

#include "treemtl/error.hpp"
#include "treemtl/format.hpp"

namespace treemtl {

namespace {

enum Stream : std::uint64_t { kRetrainInitStream = 20 };

std::vector<std::vector<bool>> derive_kept(const NetworkSpec& spec,
                                           const std::vector<std::vector<std::size_t>>& chosen) {
  const std::size_t depth = spec.blocks.size();
  std::vector<std::vector<bool>> kept(depth);
  std::vector<bool> live_children(spec.task_count, true);
  for (std::size_t b = depth; b-- > 0;) {
    kept[b].assign(spec.blocks[b].parents, false);
    for (std::size_t j = 0; j < chosen[b].size(); ++j) {
      if (live_children[j]) kept[b][chosen[b][j]] = true;
    }
    live_children = kept[b];
  }
  return kept;
}

std::vector<std::size_t> kept_indices(const std::vector<bool>& flags) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) out.push_back(i);
  }
  return out;
}

std::string op_id(std::size_t block, std::size_t op) {
  return "b" + std::to_string(block) + "_op" + std::to_string(op);
}

std::string task_id(std::size_t task) { return "task_" + std::to_string(task); }

double choose2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

std::vector<std::size_t> ArchitectureTree::task_path(std::size_t task) const {
  const std::size_t depth = chosen.size();
  std::vector<std::size_t> path(depth);
  std::size_t child = task;
  for (std::size_t b = depth; b-- > 0;) {
    path[b] = chosen[b].at(child);
    child = path[b];
  }
  return path;
}

Partition ArchitectureTree::partition() const {
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> classes;
  for (std::size_t k = 0; k < task_count(); ++k) classes[task_path(k)].push_back(k);
  Partition p;
  for (auto& [path, members] : classes) p.push_back(std::move(members));
  return canonical(std::move(p));
}

std::size_t ArchitectureTree::parameter_count() const {
  std::size_t total = 0;
  std::size_t fan_in = spec.input_dim;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& bs = spec.blocks[b];
    const auto count = static_cast<std::size_t>(std::count(kept[b].begin(), kept[b].end(), true));
    total += count * (fan_in * bs.width + bs.width);
    fan_in = bs.width;
  }
  const std::size_t head = spec.output_dim + (spec.head_kind == HeadKind::dense ? fan_in * spec.output_dim : 0);
  return total + spec.task_count * head;
}

void ArchitectureTree::validate() const {
  spec.validate();
  if (chosen.size() != spec.blocks.size() || kept.size() != spec.blocks.size()) {
    throw ContractError("architecture: block count does not match its spec");
  }
  for (std::size_t b = 0; b < chosen.size(); ++b) {
    if (chosen[b].size() != spec.blocks[b].children) {
      throw ContractError("architecture: block " + std::to_string(b) + " has " +
                          std::to_string(chosen[b].size()) + " choices for " +
                          std::to_string(spec.blocks[b].children) + " children");
    }
    for (std::size_t p : chosen[b]) {
      if (p >= spec.blocks[b].parents) {
        throw ContractError("architecture: block " + std::to_string(b) + " selects parent " +
                            std::to_string(p) + " of " + std::to_string(spec.blocks[b].parents));
      }
    }
  }
  if (kept != derive_kept(spec, chosen)) {
    throw ContractError("architecture: pruned flags do not match the selected paths");
  }
}

ArchitectureTree make_architecture(const NetworkSpec& spec,
                                   std::vector<std::vector<std::size_t>> chosen) {
  ArchitectureTree arch;
  arch.spec = spec;
  arch.chosen = std::move(chosen);
  if (arch.chosen.size() != spec.blocks.size()) {
    throw ContractError("architecture: block count does not match its spec");
  }
  for (std::size_t b = 0; b < arch.chosen.size(); ++b) {
    for (std::size_t p : arch.chosen[b]) {
      if (p >= spec.blocks[b].parents) throw ContractError("architecture: parent index out of range");
    }
    if (arch.chosen[b].size() != spec.blocks[b].children) {
      throw ContractError("architecture: wrong number of choices in block " + std::to_string(b));
    }
  }
  arch.kept = derive_kept(spec, arch.chosen);
  return arch;
}

ArchitectureTree select_architecture(const TreeNetwork& net) {
  std::vector<std::vector<std::size_t>> chosen;
  for (const auto& blk : net.blocks) {
    if (blk.fixed_routing) {
      chosen.push_back(*blk.fixed_routing);
      continue;
    }
    std::vector<std::size_t> col_choice;
    for (std::size_t j = 0; j < blk.child_count; ++j) {
      const auto col = blk.logits.column(j);
      const std::vector<double> zero(col.size(), 0.0);
      col_choice.push_back(sample_hard(col, zero).chosen_parent);
    }
    chosen.push_back(std::move(col_choice));
  }
  return make_architecture(net.spec, std::move(chosen));
}

ArchitectureTree random_architecture(const NetworkSpec& spec, Rng& rng) {
  std::vector<std::vector<std::size_t>> chosen;
  for (const auto& bs : spec.blocks) {
    std::vector<std::size_t> c;
    for (std::size_t j = 0; j < bs.children; ++j) {
      const auto pick = static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(bs.parents));
      c.push_back(std::min(pick, bs.parents - 1));
    }
    chosen.push_back(std::move(c));
  }
  return make_architecture(spec, std::move(chosen));
}

TreeNetwork build_compact(const ArchitectureTree& arch, const TreeNetwork* source, Rng& rng) {
  arch.validate();
  const std::size_t depth = arch.spec.blocks.size();
  std::vector<std::vector<std::size_t>> keep(depth);
  for (std::size_t b = 0; b < depth; ++b) keep[b] = kept_indices(arch.kept[b]);

  NetworkSpec spec = arch.spec;
  for (std::size_t b = 0; b < depth; ++b) {
    spec.blocks[b].parents = keep[b].size();
    spec.blocks[b].children = b + 1 < depth ? keep[b + 1].size() : spec.task_count;
  }
  TreeNetwork net = build_network(spec, rng);

  for (std::size_t b = 0; b < depth; ++b) {
    std::vector<std::size_t> routing;
    const std::size_t children = spec.blocks[b].children;
    for (std::size_t c = 0; c < children; ++c) {
      const std::size_t original_child = b + 1 < depth ? keep[b + 1][c] : c;
      const std::size_t parent = arch.chosen[b][original_child];
      const auto pos = std::lower_bound(keep[b].begin(), keep[b].end(), parent) - keep[b].begin();
      routing.push_back(static_cast<std::size_t>(pos));
    }
    net.blocks[b].fixed_routing = std::move(routing);
    if (source) {
      for (std::size_t i = 0; i < keep[b].size(); ++i) {
        net.blocks[b].parent_ops[i] = source->blocks.at(b).parent_ops.at(keep[b][i]);
      }
    }
  }
  if (source) net.heads = source->heads;
  net.index_parameters();
  return net;
}

bool prune_and_forward_check(TreeNetwork& net, const ArchitectureTree& arch, const Tensor& inputs,
                             double tolerance) {
  Rng unused(0);
  TreeNetwork compact = build_compact(arch, &net, unused);
  const auto full = predict(net, inputs);
  const auto pruned = predict(compact, inputs);
  for (std::size_t k = 0; k < full.size(); ++k) {
    const double diff = max_abs_diff(full[k], pruned[k]);
    if (!(diff <= tolerance)) {
      throw EquivalenceError("pruned network differs from the full network on task " +
                                 std::to_string(k) + " by " + format_double(diff),
                             k);
    }
  }
  return true;
}

RetrainResult retrain(const ArchitectureTree& arch, const Splits& data, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  Rng init = make_rng(config.seed, kRetrainInitStream);
  RetrainResult result{build_compact(arch, nullptr, init), {}};
  result.log = train_fixed(result.net, data, config, on_epoch);
  return result;
}

Partition partition_from_labels(std::span<const std::size_t> labels) {
  std::map<std::size_t, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < labels.size(); ++i) classes[labels[i]].push_back(i);
  Partition p;
  for (auto& [label, members] : classes) p.push_back(std::move(members));
  return canonical(std::move(p));
}

Partition canonical(Partition p) {
  for (auto& cls : p) std::sort(cls.begin(), cls.end());
  p.erase(std::remove_if(p.begin(), p.end(), [](const auto& c) { return c.empty(); }), p.end());
  std::sort(p.begin(), p.end(), [](const auto& x, const auto& y) { return x.front() < y.front(); });
  return p;
}

double adjusted_rand_index(const Partition& a, const Partition& b, std::size_t elements) {
  auto labels = [elements](const Partition& p) {
    std::vector<std::size_t> out(elements, std::numeric_limits<std::size_t>::max());
    for (std::size_t c = 0; c < p.size(); ++c) {
      for (std::size_t e : p[c]) {
        if (e >= elements || out[e] != std::numeric_limits<std::size_t>::max()) {
          throw ContractError("adjusted_rand_index: not a partition of 0.." + std::to_string(elements - 1));
        }
        out[e] = c;
      }
    }
    for (std::size_t v : out) {
      if (v == std::numeric_limits<std::size_t>::max()) {
        throw ContractError("adjusted_rand_index: partition does not cover every element");
      }
    }
    return out;
  };
  const auto la = labels(a);
  const auto lb = labels(b);
  if (elements < 2) return 1.0;

  std::vector<std::vector<double>> table(a.size(), std::vector<double>(b.size(), 0.0));
  for (std::size_t e = 0; e < elements; ++e) table[la[e]][lb[e]] += 1.0;
  double index = 0.0;
  for (const auto& row : table) {
    for (double n : row) index += choose2(n);
  }
  double sum_a = 0.0;
  for (const auto& cls : a) sum_a += choose2(static_cast<double>(cls.size()));
  double sum_b = 0.0;
  for (const auto& cls : b) sum_b += choose2(static_cast<double>(cls.size()));
  const double expected = sum_a * sum_b / choose2(static_cast<double>(elements));
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) {
    // Both partitions are all-singletons or single-class: no chance correction possible.
    return canonical(a) == canonical(b) ? 1.0 : 0.0;
  }
  return (index - expected) / (max_index - expected);
}

GroupingReport grouping_report(const ArchitectureTree& arch, const SyntheticTaskSuite& suite) {
  if (suite.task_count() != arch.task_count()) {
    throw ContractError("grouping_report: suite has " + std::to_string(suite.task_count()) +
                        " tasks, architecture " + std::to_string(arch.task_count()));
  }
  GroupingReport r;
  r.predicted = arch.partition();
  const auto labels = suite.group_labels();
  r.truth = partition_from_labels(labels);
  r.exact_match = r.predicted == r.truth;
  r.ari = adjusted_rand_index(r.predicted, r.truth, arch.task_count());

  const std::size_t n = arch.task_count();
  std::vector<std::vector<std::size_t>> paths;
  for (std::size_t k = 0; k < n; ++k) paths.push_back(arch.task_path(k));
  r.divergence_depths.assign(n, std::vector<std::size_t>(n, kNeverDiverge));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < n; ++l) {
      for (std::size_t b = 0; b < paths[k].size(); ++b) {
        if (paths[k][b] != paths[l][b]) {
          r.divergence_depths[k][l] = b;
          break;
        }
      }
    }
  }
  return r;
}

bool single_trunk(const GroupingReport& report) { return report.predicted.size() == 1; }

bool square_branches_first(const GroupingReport& report, const SyntheticTaskSuite& suite) {
  std::vector<std::size_t> square, cos, sinc;
  for (std::size_t k = 0; k < suite.task_count(); ++k) {
    switch (suite.tasks[k].activation) {
      case ActivationKind::square: square.push_back(k); break;
      case ActivationKind::cos: cos.push_back(k); break;
      case ActivationKind::sinc: sinc.push_back(k); break;
      default: break;
    }
  }
  if (square.empty() || cos.empty() || sinc.empty()) return false;
  const auto& d = report.divergence_depths;
  // Latest depth at which any square task still shares a path with a cos or sinc task.
  std::size_t square_split = 0;
  for (std::size_t s : square) {
    for (const auto* others : {&cos, &sinc}) {
      for (std::size_t o : *others) square_split = std::max(square_split, d[s][o]);
    }
  }
  // Earliest depth at which some cos task and some sinc task part ways.
  std::size_t cos_sinc_split = kNeverDiverge;
  for (std::size_t c : cos) {
    for (std::size_t s : sinc) cos_sinc_split = std::min(cos_sinc_split, d[c][s]);
  }
  return square_split < cos_sinc_split;
}

bool setting_target_met(const GroupingReport& report, const SyntheticTaskSuite& suite) {
  switch (suite.setting) {
    case Setting::a: return report.exact_match;
    case Setting::b: return single_trunk(report);
    case Setting::c: return square_branches_first(report, suite);
  }
  return false;
}

std::string grouping_json(const GroupingReport& report, const std::string& extra_json_fields) {
  nlohmann::ordered_json doc;
  if (!extra_json_fields.empty()) {
    auto extra = nlohmann::ordered_json::parse(extra_json_fields);
    for (auto& [k, v] : extra.items()) doc[k] = v;
  }
  doc["partition"] = report.predicted;
  doc["truth"] = report.truth;
  doc["ari"] = report.ari;
  doc["exact_match"] = report.exact_match;
  auto depths = nlohmann::ordered_json::array();
  for (const auto& row : report.divergence_depths) {
    auto jr = nlohmann::ordered_json::array();
    for (std::size_t d : row) {
      if (d == kNeverDiverge) {
        jr.push_back(nullptr);
      } else {
        jr.push_back(d);
      }
    }
    depths.push_back(std::move(jr));
  }
  doc["divergence_depths"] = std::move(depths);
  return doc.dump(2) + "\n";
}

std::string tree_to_dot(const ArchitectureTree& arch, std::span<const std::size_t> groups,
                        const std::string& header) {
  arch.validate();
  std::ostringstream os;
  os << comment_block(header, "// ");
  os << "digraph architecture {\n  rankdir=TB;\n  node [shape=box];\n";
  os << "  \"input\" [label=\"input (" << arch.spec.input_dim << ")\"];\n";
  const std::size_t depth = arch.chosen.size();
  for (std::size_t b = 0; b < depth; ++b) {
    for (std::size_t i : kept_indices(arch.kept[b])) {
      os << "  \"" << op_id(b, i) << "\" [label=\"block " << b << " / op " << i << "\"];\n";
    }
  }
  for (std::size_t k = 0; k < arch.task_count(); ++k) {
    os << "  \"" << task_id(k) << "\" [shape=ellipse, label=\"task " << k;
    if (k < groups.size()) os << "\\ngroup " << groups[k];
    os << "\"];\n";
  }
  // Edges in block order for a stable, readable file.
  auto edge = [&os](const std::string& from, const std::string& to) {
    os << "  \"" << from << "\" -> \"" << to << "\";\n";
  };
  for (std::size_t b = 0; b < depth; ++b) {
    for (std::size_t i : kept_indices(arch.kept[b])) {
      edge(b == 0 ? "input" : op_id(b - 1, arch.chosen[b - 1][i]), op_id(b, i));
    }
  }
  for (std::size_t k = 0; k < arch.task_count(); ++k) {
    edge(depth == 0 ? "input" : op_id(depth - 1, arch.chosen[depth - 1][k]), task_id(k));
  }
  os << "}\n";
  return os.str();
}

void export_tree(const ArchitectureTree& arch, std::span<const std::size_t> groups,
                 const std::filesystem::path& path, const std::string& header) {
  const std::string dot = tree_to_dot(arch, groups, header);
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << dot;
  if (!f) throw IoError("failed writing " + path.string());
}

std::map<std::string, std::string> dot_parent_map(const ArchitectureTree& arch) {
  std::map<std::string, std::string> parents;
  const std::size_t depth = arch.chosen.size();
  for (std::size_t b = 0; b < depth; ++b) {
    for (std::size_t i : kept_indices(arch.kept[b])) {
      parents[op_id(b, i)] = b == 0 ? "input" : op_id(b - 1, arch.chosen[b - 1][i]);
    }
  }
  for (std::size_t k = 0; k < arch.task_count(); ++k) {
    parents[task_id(k)] = depth == 0 ? "input" : op_id(depth - 1, arch.chosen[depth - 1][k]);
  }
  return parents;
}

std::map<std::string, std::string> parse_dot_parent_map(const std::string& dot) {
  static const std::regex edge(R"re("([^"]+)"\s*->\s*"([^"]+)")re");
  std::map<std::string, std::string> parents;
  for (auto it = std::sregex_iterator(dot.begin(), dot.end(), edge); it != std::sregex_iterator(); ++it) {
    const std::string from = (*it)[1];
    const std::string to = (*it)[2];
    if (!parents.emplace(to, from).second) {
      throw Error("dot: node '" + to + "' has more than one parent");
    }
  }
  return parents;
}

std::string serialize_architecture(const ArchitectureTree& arch, const std::string& header) {
  std::ostringstream os;
  os << comment_block(header, "# ");
  os << "treemtl-architecture 1\n";
  os << "input_dim " << arch.spec.input_dim << '\n';
  os << "output_dim " << arch.spec.output_dim << '\n';
  os << "task_count " << arch.spec.task_count << '\n';
  os << "head " << (arch.spec.head_kind == HeadKind::dense ? "dense" : "bias_only") << '\n';
  os << "hidden_activation " << activation_name(arch.spec.hidden_activation) << '\n';
  os << "blocks " << arch.spec.blocks.size() << '\n';
  for (std::size_t b = 0; b < arch.spec.blocks.size(); ++b) {
    const auto& bs = arch.spec.blocks[b];
    os << "block " << b << " parents " << bs.parents << " children " << bs.children << " width "
       << bs.width << '\n';
    os << "choice";
    for (std::size_t p : arch.chosen[b]) os << ' ' << p;
    os << '\n';
  }
  return os.str();
}

ArchitectureTree parse_architecture(const std::string& text) {
  std::istringstream lines(text);
  std::string line;
  std::ostringstream body;
  while (std::getline(lines, line)) {
    if (!line.empty() && line[0] != '#') body << line << '\n';
  }
  std::istringstream in(body.str());
  auto expect = [&in](const std::string& word) {
    std::string got;
    if (!(in >> got) || got != word) {
      throw Error("architecture file: expected '" + word + "', found '" + got + "'");
    }
  };
  auto number = [&in]() {
    std::size_t v = 0;
    if (!(in >> v)) throw Error("architecture file: expected a number");
    return v;
  };
  expect("treemtl-architecture");
  if (number() != 1) throw Error("architecture file: unsupported version");
  NetworkSpec spec;
  expect("input_dim");
  spec.input_dim = number();
  expect("output_dim");
  spec.output_dim = number();
  expect("task_count");
  spec.task_count = number();
  expect("head");
  std::string head;
  in >> head;
  if (head == "dense") {
    spec.head_kind = HeadKind::dense;
  } else if (head == "bias_only") {
    spec.head_kind = HeadKind::bias_only;
  } else {
    throw Error("architecture file: unknown head kind '" + head + "'");
  }
  expect("hidden_activation");
  std::string act;
  in >> act;
  spec.hidden_activation = parse_activation(act);
  expect("blocks");
  const std::size_t depth = number();
  std::vector<std::vector<std::size_t>> chosen;
  for (std::size_t b = 0; b < depth; ++b) {
    expect("block");
    if (number() != b) throw Error("architecture file: blocks out of order");
    BlockSpec bs;
    expect("parents");
    bs.parents = number();
    expect("children");
    bs.children = number();
    expect("width");
    bs.width = number();
    spec.blocks.push_back(bs);
    expect("choice");
    std::vector<std::size_t> c;
    for (std::size_t j = 0; j < bs.children; ++j) c.push_back(number());
    chosen.push_back(std::move(c));
  }
  spec.validate();
  return make_architecture(spec, std::move(chosen));
}

}  // namespace treemtl
