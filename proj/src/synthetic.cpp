#include "treemtl/synthetic.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "treemtl/error.hpp"

namespace treemtl {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum Stream : std::uint64_t { kSuiteStream = 1, kValStream = 2, kTrainStream = 3, kShuffleStream = 4 };

struct TaskRecipe {
  ActivationKind activation;
  double multiplier;
  std::size_t group;
};

std::vector<TaskRecipe> recipes(Setting setting) {
  using A = ActivationKind;
  switch (setting) {
    case Setting::a: return {{A::bent, 1, 0}, {A::square, 1, 1}, {A::sinc, 1, 2}};
    case Setting::b: return {{A::sin, 1, 0}, {A::sin, 2, 0}, {A::sin, 3, 0}};
    case Setting::c: return {{A::cos, 1, 0}, {A::sinc, 1, 1}, {A::square, 1, 2}};
  }
  return {};
}

}  // namespace

std::string setting_name(Setting s) {
  switch (s) {
    case Setting::a: return "a";
    case Setting::b: return "b";
    case Setting::c: return "c";
  }
  return "?";
}

Setting parse_setting(std::string_view name) {
  if (name == "a") return Setting::a;
  if (name == "b") return Setting::b;
  if (name == "c") return Setting::c;
  throw SpecError("unknown setting '" + std::string(name) + "' (expected a, b or c)");
}

std::vector<std::size_t> SyntheticTaskSuite::group_labels() const {
  std::vector<std::size_t> labels;
  for (const auto& t : tasks) labels.push_back(t.group);
  return labels;
}

SyntheticTaskSuite make_suite(Setting setting, std::uint64_t seed, std::size_t input_dim,
                              std::size_t output_dim) {
  SyntheticTaskSuite suite;
  suite.setting = setting;
  suite.seed = seed;
  suite.input_dim = input_dim;
  suite.output_dim = output_dim;
  suite.phi = static_cast<double>(input_dim);

  Rng rng = make_rng(seed, kSuiteStream);
  suite.base = Tensor(Shape{output_dim, input_dim});
  fill_normal(suite.base.values(), kBaseSigma, rng);

  std::size_t noise_index = 0;
  for (const auto& r : recipes(setting)) {
    for (std::size_t s = 0; s < kSeedsPerActivation; ++s) {
      SyntheticTaskSpec task;
      task.activation = r.activation;
      task.multiplier = r.multiplier;
      task.group = r.group;
      task.noise_index = noise_index++;
      task.delta = Tensor(Shape{output_dim, input_dim});
      fill_normal(task.delta.values(), kDeltaSigma, rng);
      suite.tasks.push_back(std::move(task));
    }
  }
  return suite;
}

std::vector<Tensor> compute_targets(const SyntheticTaskSuite& suite, const Tensor& z) {
  if (z.rank() != 2 || z.cols() != suite.input_dim) {
    throw DimensionError("targets: inputs " + shape_string(z.shape()) + " do not have width " +
                         std::to_string(suite.input_dim));
  }
  const auto n = static_cast<Eigen::Index>(z.rows());
  const auto in = static_cast<Eigen::Index>(suite.input_dim);
  const auto out = static_cast<Eigen::Index>(suite.output_dim);
  Eigen::Map<const RowMatrix> zm(z.data(), n, in);
  Eigen::Map<const RowMatrix> bm(suite.base.data(), out, in);

  std::vector<Tensor> targets;
  targets.reserve(suite.tasks.size());
  for (const auto& task : suite.tasks) {
    Eigen::Map<const RowMatrix> dm(task.delta.data(), out, in);
    const RowMatrix mixing = bm + dm;
    Tensor t(Shape{z.rows(), suite.output_dim});
    Eigen::Map<RowMatrix> tm(t.data(), n, out);
    tm.noalias() = zm * mixing.transpose();
    const double factor = task.multiplier / suite.phi;
    for (auto& v : t.values()) v = activate(task.activation, factor * v);
    targets.push_back(std::move(t));
  }
  return targets;
}

Batch generate_batch(const SyntheticTaskSuite& suite, std::size_t n, Rng& rng) {
  if (n == 0) throw ContractError("generate_batch: batch size must be at least 1");
  Batch batch;
  batch.inputs = Tensor(Shape{n, suite.input_dim});
  fill_normal(batch.inputs.values(), 1.0, rng);
  batch.targets = compute_targets(suite, batch.inputs);
  return batch;
}

TrainStream::TrainStream(Batch pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {}

std::size_t TrainStream::batches_per_epoch(std::size_t batch_size) const {
  return (size() + batch_size - 1) / batch_size;
}

std::vector<std::size_t> TrainStream::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed_, kShuffleStream + (static_cast<std::uint64_t>(epoch) << 8));
  // Fisher-Yates with our own index draw; std::shuffle's draw pattern is
  // library-specific.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

Batch TrainStream::gather(std::span<const std::size_t> rows) const {
  auto take = [&rows](const Tensor& src) {
    const std::size_t width = src.cols();
    Tensor dst(Shape{rows.size(), width});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(src.data() + rows[r] * width, width, dst.data() + r * width);
    }
    return dst;
  };
  Batch out;
  out.inputs = take(pool_.inputs);
  for (const auto& t : pool_.targets) out.targets.push_back(take(t));
  return out;
}

Splits make_splits(const SyntheticTaskSuite& suite, std::size_t n_train, std::size_t n_val,
                   std::uint64_t seed) {
  if (n_train == 0 || n_val == 0) throw ContractError("make_splits: sizes must be at least 1");
  Rng val_rng = make_rng(seed, kValStream);
  Batch val = generate_batch(suite, n_val, val_rng);
  Rng train_rng = make_rng(seed, kTrainStream);
  return Splits{TrainStream(generate_batch(suite, n_train, train_rng), seed), std::move(val)};
}

void export_suite(const SyntheticTaskSuite& suite, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["format"] = "treemtl-suite";
  doc["version"] = 1;
  doc["setting"] = setting_name(suite.setting);
  doc["seed"] = suite.seed;
  doc["input_dim"] = suite.input_dim;
  doc["output_dim"] = suite.output_dim;
  doc["phi"] = suite.phi;
  doc["base_sigma"] = kBaseSigma;
  doc["delta_sigma"] = kDeltaSigma;
  doc["base"] = std::vector<double>(suite.base.values().begin(), suite.base.values().end());
  auto& tasks = doc["tasks"] = nlohmann::json::array();
  for (const auto& t : suite.tasks) {
    tasks.push_back({{"activation", activation_name(t.activation)},
                     {"multiplier", t.multiplier},
                     {"noise_index", t.noise_index},
                     {"group", t.group},
                     {"delta", std::vector<double>(t.delta.values().begin(), t.delta.values().end())}});
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << doc.dump() << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

SyntheticTaskSuite import_suite(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "treemtl-suite") throw IoError(path.string() + ": not a suite archive");
  SyntheticTaskSuite suite;
  suite.setting = parse_setting(doc.at("setting").get<std::string>());
  suite.seed = doc.at("seed").get<std::uint64_t>();
  suite.input_dim = doc.at("input_dim").get<std::size_t>();
  suite.output_dim = doc.at("output_dim").get<std::size_t>();
  suite.phi = doc.at("phi").get<double>();
  const Shape mat{suite.output_dim, suite.input_dim};
  suite.base = Tensor(mat, doc.at("base").get<std::vector<double>>());
  for (const auto& t : doc.at("tasks")) {
    SyntheticTaskSpec task;
    task.activation = parse_activation(t.at("activation").get<std::string>());
    task.multiplier = t.at("multiplier").get<double>();
    task.noise_index = t.at("noise_index").get<std::size_t>();
    task.group = t.at("group").get<std::size_t>();
    task.delta = Tensor(mat, t.at("delta").get<std::vector<double>>());
    suite.tasks.push_back(std::move(task));
  }
  return suite;
}

}  // namespace treemtl
