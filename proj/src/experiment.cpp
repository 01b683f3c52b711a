#include "treemtl/experiment.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "treemtl/format.hpp"

namespace treemtl {

namespace fs = std::filesystem;

namespace {

enum Stream : std::uint64_t { kInitStream = 30, kBaselineStream = 40 };

std::string st_mode_name(StraightThroughMode m) {
  return m == StraightThroughMode::hard_activations ? "hard_activations" : "soft_activations";
}

StraightThroughMode parse_st_mode(const std::string& s) {
  if (s == "hard_activations") return StraightThroughMode::hard_activations;
  if (s == "soft_activations") return StraightThroughMode::soft_activations;
  throw SpecError("st_mode: expected hard_activations or soft_activations, got '" + s + "'");
}

const std::string& header_value(const std::map<std::string, std::string>& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw SpecError("artifact header lacks '" + key + "'");
  return it->second;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw SpecError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const Error&) {
    throw SpecError(key + ": expected a number, got '" + v + "'");
  }
}

std::string partition_string(const Partition& p) {
  std::string out;
  for (const auto& cls : p) {
    out += "[";
    for (std::size_t i = 0; i < cls.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(cls[i]);
    }
    out += "]";
  }
  return out;
}

// Block where each pair of predicted classes separates.
std::string class_depths(const Partition& p, const std::vector<std::vector<std::size_t>>& depths) {
  std::string out;
  for (std::size_t a = 0; a < p.size(); ++a) {
    for (std::size_t b = a + 1; b < p.size(); ++b) {
      if (!out.empty()) out += ' ';
      out += std::to_string(a) + "|" + std::to_string(b) + ":" +
             std::to_string(depths[p[a].front()][p[b].front()]);
    }
  }
  return out.empty() ? "-" : out;
}

std::string metrics_header(const ExperimentConfig& config, std::uint64_t seed, const std::string& kind) {
  return "treemtl " + kind + "\n" + config.render(seed);
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const MissingArtifact*>(&e)) return kExitMissingArtifact;
  if (dynamic_cast<const SpecError*>(&e)) return kExitConfigError;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumericAbort;
  return kExitFailure;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw SpecError("seeds: at least one seed is required");
  if (n_train == 0) throw SpecError("n_train: must be at least 1");
  if (n_val == 0) throw SpecError("n_val: must be at least 1");
  if (jobs == 0) throw SpecError("jobs: must be at least 1");
  try {
    network.validate();
  } catch (const SpecError& e) {
    throw SpecError(std::string("network: ") + e.what());
  }
  if (network.task_count != 3 * kSeedsPerActivation) {
    throw SpecError("network: synthetic suites have 15 tasks, spec has " +
                    std::to_string(network.task_count));
  }
  try {
    train.validate();
  } catch (const SpecError& e) {
    throw SpecError(std::string("train: ") + e.what());
  }
}

std::string ExperimentConfig::render(std::uint64_t seed) const {
  std::ostringstream os;
  os << "setting = " << setting_name(setting) << '\n'
     << "seed = " << seed << '\n'
     << "input_dim = " << network.input_dim << '\n'
     << "output_dim = " << network.output_dim << '\n'
     << "blocks = " << describe_blocks(network.blocks) << '\n'
     << "head = " << (network.head_kind == HeadKind::dense ? "dense" : "bias_only") << '\n'
     << "hidden_activation = " << activation_name(network.hidden_activation) << '\n'
     << "n_train = " << n_train << '\n'
     << "n_val = " << n_val << '\n'
     << "lr_weights = " << format_double(train.lr_weights) << '\n'
     << "lr_branch = " << format_double(train.lr_branch) << '\n'
     << "batch_size = " << train.batch_size << '\n'
     << "epochs = " << train.epochs << '\n'
     << "warmup_epochs = " << train.warmup_epochs << '\n'
     << "tau0 = " << format_double(train.tau0) << '\n'
     << "tau_floor = " << format_double(train.tau_floor) << '\n'
     << "adam_beta1 = " << format_double(train.adam.beta1) << '\n'
     << "adam_beta2 = " << format_double(train.adam.beta2) << '\n'
     << "adam_epsilon = " << format_double(train.adam.epsilon) << '\n'
     << "st_mode = " << st_mode_name(train.st_mode) << '\n'
     << "val_samples = " << train.val_samples << '\n'
     << "patience = " << train.patience << '\n'
     << "clip_norm = " << format_double(train.clip_norm) << '\n';
  return os.str();
}

fs::path ExperimentConfig::run_dir(std::uint64_t seed) const {
  return out_dir / setting_name(setting) / ("seed_" + std::to_string(seed));
}

std::pair<ExperimentConfig, std::uint64_t> config_from_header(
    const std::map<std::string, std::string>& h) {
  ExperimentConfig c;
  c.setting = parse_setting(header_value(h, "setting"));
  const std::uint64_t seed = to_size("seed", header_value(h, "seed"));
  c.seeds = {seed};
  c.network.input_dim = to_size("input_dim", header_value(h, "input_dim"));
  c.network.output_dim = to_size("output_dim", header_value(h, "output_dim"));
  c.network.blocks = parse_blocks(header_value(h, "blocks"));
  c.network.task_count = c.network.blocks.empty() ? 15 : c.network.blocks.back().children;
  const auto& head = header_value(h, "head");
  if (head != "dense" && head != "bias_only") throw SpecError("head: unknown kind '" + head + "'");
  c.network.head_kind = head == "dense" ? HeadKind::dense : HeadKind::bias_only;
  c.network.hidden_activation = parse_activation(header_value(h, "hidden_activation"));
  c.n_train = to_size("n_train", header_value(h, "n_train"));
  c.n_val = to_size("n_val", header_value(h, "n_val"));
  auto& t = c.train;
  t.seed = seed;
  t.lr_weights = to_real("lr_weights", header_value(h, "lr_weights"));
  t.lr_branch = to_real("lr_branch", header_value(h, "lr_branch"));
  t.batch_size = to_size("batch_size", header_value(h, "batch_size"));
  t.epochs = to_size("epochs", header_value(h, "epochs"));
  t.warmup_epochs = to_size("warmup_epochs", header_value(h, "warmup_epochs"));
  t.tau0 = to_real("tau0", header_value(h, "tau0"));
  t.tau_floor = to_real("tau_floor", header_value(h, "tau_floor"));
  t.adam.beta1 = to_real("adam_beta1", header_value(h, "adam_beta1"));
  t.adam.beta2 = to_real("adam_beta2", header_value(h, "adam_beta2"));
  t.adam.epsilon = to_real("adam_epsilon", header_value(h, "adam_epsilon"));
  t.st_mode = parse_st_mode(header_value(h, "st_mode"));
  t.val_samples = to_size("val_samples", header_value(h, "val_samples"));
  t.patience = to_size("patience", header_value(h, "patience"));
  t.clip_norm = to_real("clip_norm", header_value(h, "clip_norm"));
  return {c, seed};
}

std::map<std::string, std::string> read_header(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact(path);
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    std::string_view v = line;
    if (v.starts_with("# ")) {
      v.remove_prefix(2);
    } else if (v.starts_with("// ")) {
      v.remove_prefix(3);
    } else {
      break;
    }
    const auto eq = v.find(" = ");
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(v.substr(0, eq)), std::string(v.substr(eq + 3)));
  }
  return out;
}

std::string describe_blocks(const std::vector<BlockSpec>& blocks) {
  std::string out;
  for (const auto& b : blocks) {
    if (!out.empty()) out += ',';
    out += std::to_string(b.parents) + "x" + std::to_string(b.children) + "x" + std::to_string(b.width);
  }
  return out.empty() ? "none" : out;
}

std::vector<BlockSpec> parse_blocks(const std::string& text) {
  std::vector<BlockSpec> blocks;
  if (text == "none" || text.empty()) return blocks;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    BlockSpec b;
    char x1 = 0, x2 = 0;
    std::istringstream is(item);
    if (!(is >> b.parents >> x1 >> b.children >> x2 >> b.width) || x1 != 'x' || x2 != 'x' || !is.eof()) {
      throw SpecError("blocks: expected PARENTSxCHILDRENxWIDTH, got '" + item + "'");
    }
    blocks.push_back(b);
  }
  return blocks;
}

SearchOutcome run_search(const ExperimentConfig& config, std::uint64_t seed, std::ostream* progress) {
  SearchOutcome outcome;
  outcome.seed = seed;
  outcome.dir = config.run_dir(seed);
  fs::create_directories(outcome.dir);

  const SyntheticTaskSuite suite = make_suite(config.setting, seed, config.network.input_dim, config.network.output_dim);
  const Splits data = make_splits(suite, config.n_train, config.n_val, seed);
  Rng init = make_rng(seed, kInitStream);
  TreeNetwork net = build_network(config.network, init);
  TrainConfig train = config.train;
  train.seed = seed;

  const std::string tag = "[" + setting_name(config.setting) + "/seed " + std::to_string(seed) + "] ";
  outcome.log = train_search(net, data, train, [&](const EpochRecord& r) {
    if (progress && (r.epoch % 25 == 0 || r.epoch == train.epochs)) {
      *progress << tag << "epoch " << r.epoch << " tau " << format_double(r.tau) << " train "
                << format_double(r.train_total) << " val " << format_double(r.val_total) << '\n';
    }
  });

  outcome.arch = select_architecture(net);
  prune_and_forward_check(net, outcome.arch, data.val.inputs);
  outcome.grouping = grouping_report(outcome.arch, suite);
  outcome.target_met = setting_target_met(outcome.grouping, suite);

  const std::string header = config.render(seed);
  write_log_csv(outcome.log, suite.task_count(), "treemtl search log\n" + header, outcome.dir / kLogFile);
  write_logits_history(outcome.log, "treemtl logits history\n" + header, outcome.dir / kLogitsFile);
  write_file(outcome.dir / kArchFile, serialize_architecture(outcome.arch, "treemtl architecture\n" + header));
  export_tree(outcome.arch, suite.group_labels(), outcome.dir / kDotFile, "treemtl tree\n" + header);

  nlohmann::ordered_json extra;
  auto& cfg = extra["config"] = nlohmann::ordered_json::object();
  std::istringstream lines(header);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) cfg[line.substr(0, eq)] = line.substr(eq + 3);
  }
  extra["setting"] = setting_name(config.setting);
  extra["seed"] = seed;
  extra["target_met"] = outcome.target_met;
  write_file(outcome.dir / kGroupingFile, grouping_json(outcome.grouping, extra.dump()));
  return outcome;
}

FinalMetrics retrain_metrics(const ArchitectureTree& arch, const ExperimentConfig& config,
                             std::uint64_t seed, std::ostream* progress) {
  const SyntheticTaskSuite suite = make_suite(config.setting, seed, config.network.input_dim, config.network.output_dim);
  const Splits data = make_splits(suite, config.n_train, config.n_val, seed);
  TrainConfig train = config.train;
  train.seed = seed;
  train.warmup_epochs = 0;
  const std::string tag = "[" + setting_name(config.setting) + "/seed " + std::to_string(seed) + " retrain] ";
  auto result = retrain(arch, data, train, [&](const EpochRecord& r) {
    if (progress && (r.epoch % 25 == 0 || r.epoch == train.epochs)) {
      *progress << tag << "epoch " << r.epoch << " val " << format_double(r.val_total) << '\n';
    }
  });
  FinalMetrics m;
  const auto& last = result.log.epochs.back();
  m.val_total = last.val_total;
  m.val_tasks = last.val_tasks;
  m.parameter_count = result.net.weight_parameter_count();
  m.epochs = result.log.epochs.size();
  return m;
}

std::vector<SearchOutcome> cmd_search(const ExperimentConfig& config, std::ostream& out) {
  config.validate();
  std::vector<SearchOutcome> outcomes(config.seeds.size());
  std::vector<std::exception_ptr> errors(config.seeds.size());
  std::mutex print_mutex;

  // Buffered progress so that parallel seeds do not interleave lines.
  struct LockedStream : std::stringbuf {
    std::ostream* target;
    std::mutex* m;
    int sync() override {
      std::lock_guard lock(*m);
      *target << str();
      target->flush();
      str("");
      return 0;
    }
  };

  auto work = [&](std::size_t i) {
    LockedStream buf;
    buf.target = &out;
    buf.m = &print_mutex;
    std::ostream progress(&buf);
    progress << std::unitbuf;
    try {
      outcomes[i] = run_search(config, config.seeds[i], config.verbose ? &progress : nullptr);
      progress << "[" << setting_name(config.setting) << "/seed " << config.seeds[i] << "] partition "
               << partition_string(outcomes[i].grouping.predicted) << " ari "
               << format_double(outcomes[i].grouping.ari) << " target "
               << (outcomes[i].target_met ? "met" : "missed") << " -> "
               << outcomes[i].dir.string() << '\n';
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::min(config.jobs, config.seeds.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) work(i);
  } else {
    std::mutex queue_mutex;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(queue_mutex);
            if (next >= config.seeds.size()) return;
            i = next++;
          }
          work(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return outcomes;
}

FinalMetrics cmd_retrain(const fs::path& run_dir, std::ostream& out) {
  const fs::path arch_path = run_dir / kArchFile;
  if (!fs::exists(arch_path)) throw MissingArtifact(arch_path);
  const auto [config, seed] = config_from_header(read_header(arch_path));
  config.validate();
  const ArchitectureTree arch = parse_architecture(read_file(arch_path));
  const FinalMetrics m = retrain_metrics(arch, config, seed, &out);
  write_final_metrics(m, metrics_header(config, seed, "final metrics"), run_dir / kMetricsFile);
  out << "retrained " << run_dir.string() << ": val_total " << format_double(m.val_total)
      << " parameters " << m.parameter_count << '\n';
  return m;
}

void cmd_evaluate(const fs::path& run_dir, std::size_t baselines, std::ostream& out) {
  const fs::path arch_path = run_dir / kArchFile;
  const fs::path metrics_path = run_dir / kMetricsFile;
  if (!fs::exists(arch_path)) throw MissingArtifact(arch_path);
  if (!fs::exists(metrics_path)) throw MissingArtifact(metrics_path);
  const auto [config, seed] = config_from_header(read_header(arch_path));
  config.validate();
  const FinalMetrics selected = read_final_metrics(metrics_path);

  Rng rng = make_rng(seed, kBaselineStream);
  double total = 0.0;
  out << "selected architecture: val_total " << format_double(selected.val_total) << " parameters "
      << selected.parameter_count << '\n';
  for (std::size_t i = 0; i < baselines; ++i) {
    const ArchitectureTree arch = random_architecture(config.network, rng);
    const FinalMetrics m = retrain_metrics(arch, config, seed, nullptr);
    total += m.val_total;
    out << "random architecture " << i << ": val_total " << format_double(m.val_total)
        << " parameters " << m.parameter_count << " partition " << partition_string(arch.partition())
        << '\n';
  }
  if (baselines > 0) {
    const double mean = total / static_cast<double>(baselines);
    out << "mean random val_total " << format_double(mean) << "; selected "
        << (selected.val_total <= mean ? "<=" : ">") << " random\n";
  }
}

std::vector<ReportRow> collect_report(const std::vector<fs::path>& roots) {
  std::vector<fs::path> dirs;
  for (const auto& root : roots) {
    if (fs::exists(root / kGroupingFile)) {
      dirs.push_back(root);
      continue;
    }
    if (!fs::is_directory(root)) throw MissingArtifact(root / kGroupingFile);
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().filename() == kGroupingFile) {
        dirs.push_back(entry.path().parent_path());
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  dirs.erase(std::unique(dirs.begin(), dirs.end()), dirs.end());

  std::vector<ReportRow> rows;
  for (const auto& dir : dirs) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_file(dir / kGroupingFile));
    } catch (const nlohmann::json::exception& e) {
      throw Error((dir / kGroupingFile).string() + ": " + e.what());
    }
    ReportRow row;
    row.dir = dir;
    row.setting = doc.at("setting").get<std::string>();
    row.seed = doc.at("seed").get<std::uint64_t>();
    row.exact_match = doc.at("exact_match").get<bool>();
    row.target_met = doc.at("target_met").get<bool>();
    row.ari = doc.at("ari").get<double>();
    const auto partition = doc.at("partition").get<Partition>();
    row.partition = partition_string(partition);
    std::vector<std::vector<std::size_t>> depths;
    for (const auto& r : doc.at("divergence_depths")) {
      std::vector<std::size_t> d;
      for (const auto& v : r) d.push_back(v.is_null() ? kNeverDiverge : v.get<std::size_t>());
      depths.push_back(std::move(d));
    }
    row.depths = class_depths(partition, depths);
    if (fs::exists(dir / kMetricsFile)) {
      const auto m = read_final_metrics(dir / kMetricsFile);
      row.final_val = m.val_total;
      row.parameters = m.parameter_count;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SettingSummary> summarize(const std::vector<ReportRow>& rows) {
  std::map<std::string, std::vector<const ReportRow*>> by_setting;
  for (const auto& r : rows) by_setting[r.setting].push_back(&r);
  std::vector<SettingSummary> out;
  for (const auto& [setting, members] : by_setting) {
    SettingSummary s;
    s.setting = setting;
    s.runs = members.size();
    double met = 0.0;
    double ari = 0.0;
    for (const auto* r : members) {
      met += r->target_met ? 1.0 : 0.0;
      ari += r->ari;
    }
    s.match_rate = met / static_cast<double>(s.runs);
    s.mean_ari = ari / static_cast<double>(s.runs);
    out.push_back(s);
  }
  return out;
}

void cmd_report(const std::vector<fs::path>& roots, std::ostream& out, const fs::path& csv_path) {
  const auto rows = collect_report(roots);
  if (rows.empty()) throw MissingArtifact(roots.empty() ? fs::path(kGroupingFile) : roots.front() / kGroupingFile);

  out << std::left << std::setw(8) << "setting" << std::setw(6) << "seed" << std::setw(7) << "exact"
      << std::setw(7) << "target" << std::setw(10) << "ari" << std::setw(14) << "final_val"
      << std::setw(8) << "params" << "partition / class split blocks\n";
  for (const auto& r : rows) {
    std::ostringstream ari;
    ari << std::fixed << std::setprecision(4) << r.ari;
    std::ostringstream val;
    if (r.final_val) val << std::fixed << std::setprecision(6) << *r.final_val;
    else val << "-";
    out << std::left << std::setw(8) << r.setting << std::setw(6) << r.seed << std::setw(7)
        << (r.exact_match ? "yes" : "no") << std::setw(7) << (r.target_met ? "yes" : "no")
        << std::setw(10) << ari.str() << std::setw(14) << val.str() << std::setw(8)
        << (r.parameters ? std::to_string(*r.parameters) : "-") << r.partition << "  " << r.depths
        << '\n';
  }
  for (const auto& s : summarize(rows)) {
    out << "setting " << s.setting << ": runs " << s.runs << ", match rate "
        << format_double(s.match_rate) << ", mean ari " << format_double(s.mean_ari) << '\n';
  }

  if (!csv_path.empty()) {
    std::ostringstream csv;
    csv << "setting,seed,exact_match,target_met,ari,final_val,parameters,partition,class_split_blocks\n";
    for (const auto& r : rows) {
      csv << r.setting << ',' << r.seed << ',' << r.exact_match << ',' << r.target_met << ','
          << format_double(r.ari) << ',' << (r.final_val ? format_double(*r.final_val) : "") << ','
          << (r.parameters ? std::to_string(*r.parameters) : "") << ",\"" << r.partition << "\",\""
          << r.depths << "\"\n";
    }
    write_file(csv_path, csv.str());
  }
}

void cmd_export_suite(Setting setting, std::uint64_t seed, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  export_suite(make_suite(setting, seed), path);
}

void write_final_metrics(const FinalMetrics& m, const std::string& header, const fs::path& path) {
  std::ostringstream os;
  os << comment_block(header, "# ");
  os << "val_total " << format_double(m.val_total) << '\n';
  for (std::size_t k = 0; k < m.val_tasks.size(); ++k) {
    os << "val_task_" << k << ' ' << format_double(m.val_tasks[k]) << '\n';
  }
  os << "parameter_count " << m.parameter_count << '\n';
  os << "epochs " << m.epochs << '\n';
  write_file(path, os.str());
}

FinalMetrics read_final_metrics(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path);
  std::istringstream in(read_file(path));
  FinalMetrics m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, value;
    ls >> key >> value;
    if (key == "val_total") m.val_total = parse_double(value);
    else if (key.starts_with("val_task_")) m.val_tasks.push_back(parse_double(value));
    else if (key == "parameter_count") m.parameter_count = to_size(key, value);
    else if (key == "epochs") m.epochs = to_size(key, value);
  }
  return m;
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact(path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace treemtl
