#include "treemtl/training.hpp"

#include <Eigen/Core>
#include <cmath>
#include <fstream>
#include <sstream>

#include "treemtl/error.hpp"
#include "treemtl/format.hpp"

namespace treemtl {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum Stream : std::uint64_t { kRouteStream = 10, kEvalStream = 11 };

std::string abort_snapshot(TreeNetwork& net, std::size_t epoch, std::size_t step, double tau,
                           double loss) {
  std::ostringstream os;
  os << "epoch=" << epoch << " step=" << step << " tau=" << format_double(tau)
     << " loss=" << format_double(loss) << '\n';
  for (auto& p : net.logits()) {
    os << p.name << ':';
    for (double v : p.tensor->values()) os << ' ' << format_double(v);
    os << '\n';
  }
  return os.str();
}

void clip_gradients(std::span<const NamedParameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (double g : p.tensor->grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double factor = max_norm / norm;
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (double& g : p.tensor->grad()) g *= factor;
  }
}

std::vector<Tensor> snapshot_logits(const TreeNetwork& net) {
  std::vector<Tensor> out;
  for (const auto& blk : net.blocks) out.push_back(blk.logits.tensor());
  return out;
}

double mse(const Tensor& pred, const Tensor& target) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    total += d * d;
  }
  return total / static_cast<double>(pred.size());
}

enum class Phase { search, fixed };

TrainLog run_training(TreeNetwork& net, const Splits& data, const TrainConfig& config,
                      const EpochCallback& on_epoch, Phase phase) {
  config.validate();
  net.index_parameters();
  auto weights = net.weights();
  auto logits = net.logits();
  AdamState weight_state = make_adam_state(weights);
  AdamState logit_state = make_adam_state(logits);

  Rng route_rng = make_rng(config.seed, kRouteStream);
  Rng eval_rng = make_rng(config.seed, kEvalStream);
  const TemperatureSchedule schedule{config.tau0, config.tau_floor};
  const LossSpec loss_spec = LossSpec::uniform(net.heads.size());
  const std::size_t warmup = phase == Phase::search ? config.warmup_epochs : 0;

  TrainLog log;
  std::size_t post_warmup_steps = 0;
  std::size_t global_step = 0;
  double best_val = INFINITY;
  std::size_t since_best = 0;
  double tau = config.tau0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const bool warming = epoch <= warmup;
    const auto order = data.train.epoch_order(epoch);
    double train_total = 0.0;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const Batch batch = data.train.gather(std::span(order).subspan(start, stop - start));
      ++global_step;
      if (phase == Phase::search && !warming) ++post_warmup_steps;
      tau = schedule.at(post_warmup_steps);

      Tape tape;
      ForwardOptions opts;
      opts.tau = tau;
      opts.mode = SampleMode::noisy;
      opts.st_mode = config.st_mode;
      opts.train_logits = phase == Phase::search && !warming;
      auto fr = forward(net, tape, tape.constant(batch.inputs), opts, route_rng);
      std::vector<Var> targets;
      for (const auto& t : batch.targets) targets.push_back(tape.constant(t));
      const Var loss = total_loss(tape, fr.task_outputs, targets, loss_spec);
      const double loss_value = tape.value(loss).item();
      if (!std::isfinite(loss_value)) {
        throw TrainingAborted("non-finite training loss at epoch " + std::to_string(epoch) +
                                  ", step " + std::to_string(global_step),
                              abort_snapshot(net, epoch, global_step, tau, loss_value));
      }

      net.zero_grad();
      backward(loss, tape);
      if (config.clip_norm > 0.0) clip_gradients(weights, config.clip_norm);
      adam_step(weights, weight_state, config.lr_weights, config.adam);
      if (phase == Phase::search && !warming) {
        adam_step(logits, logit_state, config.lr_branch, config.adam);
      }
      train_total += loss_value;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.tau = tau;
    rec.train_total = train_total / static_cast<double>(batches);
    rec.val_tasks = phase == Phase::search
                        ? evaluate(net, data.val, EvalMode::noisy_averaged, config.val_samples, eval_rng)
                        : evaluate(net, data.val, EvalMode::noiseless, 1, eval_rng);
    rec.val_total = 0.0;
    for (std::size_t k = 0; k < rec.val_tasks.size(); ++k) rec.val_total += loss_spec.alphas[k] * rec.val_tasks[k];
    if (!std::isfinite(rec.val_total)) {
      throw TrainingAborted("non-finite validation loss at epoch " + std::to_string(epoch),
                            abort_snapshot(net, epoch, global_step, tau, rec.val_total));
    }
    rec.logits = snapshot_logits(net);
    log.epochs.push_back(std::move(rec));
    if (on_epoch) on_epoch(log.epochs.back());

    if (config.patience > 0) {
      if (log.epochs.back().val_total < best_val) {
        best_val = log.epochs.back().val_total;
        since_best = 0;
      } else if (++since_best >= config.patience && epoch > warmup) {
        break;
      }
    }
  }
  return log;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_weights >= 0.0) || !(lr_branch >= 0.0)) throw SpecError("learning rates must be >= 0");
  if (batch_size == 0) throw SpecError("batch_size must be at least 1");
  if (warmup_epochs > epochs) throw SpecError("warmup_epochs must not exceed epochs");
  if (!(tau0 > 0.0) || !(tau_floor > 0.0)) throw SpecError("temperatures must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw SpecError("adam betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) throw SpecError("adam epsilon must be positive");
  if (val_samples == 0) throw SpecError("val_samples must be at least 1");
  if (!(clip_norm >= 0.0)) throw SpecError("clip_norm must be >= 0");
}

AdamState make_adam_state(std::span<const NamedParameter> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.tensor->size(), 0.0);
    state.v.emplace_back(p.tensor->size(), 0.0);
  }
  return state;
}

void adam_step(std::span<const NamedParameter> params, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state built for other parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.m[p].size() != params[p].tensor->size()) {
      throw ContractError("adam_step: moment shape mismatch for " + params[p].name);
    }
    if (params[p].tensor->has_grad() && !all_finite(params[p].tensor->grad())) {
      throw NumericError("adam_step: non-finite gradient in " + params[p].name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = *params[p].tensor;
    if (!param.has_grad()) continue;
    const auto g = std::as_const(param).grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

const Tensor* InferenceCache::find(const std::vector<std::size_t>& ancestry) const {
  auto it = entries_.find(ancestry);
  return it == entries_.end() ? nullptr : &it->second;
}

const Tensor& InferenceCache::insert(std::vector<std::size_t> ancestry, Tensor value) {
  return entries_.insert_or_assign(std::move(ancestry), std::move(value)).first->second;
}

Routing sample_routing(const TreeNetwork& net, SampleMode mode, Rng& rng) {
  Routing routing;
  for (const auto& blk : net.blocks) {
    if (blk.fixed_routing) {
      routing.push_back(*blk.fixed_routing);
      continue;
    }
    std::vector<std::size_t> choice;
    for (const auto& s : draw_samples(blk.logits, 1.0, mode, rng)) choice.push_back(s.chosen_parent);
    routing.push_back(std::move(choice));
  }
  return routing;
}

std::vector<Tensor> infer(const TreeNetwork& net, const Tensor& input, const Routing& routing,
                          InferenceCache* cache) {
  if (input.rank() != 2 || input.cols() != net.spec.input_dim) {
    throw DimensionError("infer: input shape " + shape_string(input.shape()) +
                         " does not have width " + std::to_string(net.spec.input_dim));
  }
  if (routing.size() != net.blocks.size()) throw ContractError("infer: routing has wrong block count");
  const std::size_t depth = net.blocks.size();
  const std::size_t tasks = net.heads.size();

  // Ancestry of each task back to the root: ancestry[k][b] = op index at block b.
  std::vector<std::vector<std::size_t>> ancestry(tasks, std::vector<std::size_t>(depth));
  for (std::size_t k = 0; k < tasks; ++k) {
    std::size_t child = k;
    for (std::size_t b = depth; b-- > 0;) {
      const auto& choice = routing[b];
      if (choice.size() != net.blocks[b].child_count) throw ContractError("infer: routing size mismatch");
      const std::size_t parent = choice[child];
      if (parent >= net.blocks[b].parent_count()) throw ContractError("infer: parent index out of range");
      ancestry[k][b] = parent;
      child = parent;
    }
  }

  InferenceCache local;
  InferenceCache& memo = cache ? *cache : local;
  const auto rows = static_cast<Eigen::Index>(input.rows());

  // Output of op `path.back()` at block path.size()-1 given its ancestors.
  std::function<const Tensor&(const std::vector<std::size_t>&)> op_output =
      [&](const std::vector<std::size_t>& path) -> const Tensor& {
    if (const Tensor* hit = memo.find(path)) return *hit;
    const std::size_t b = path.size() - 1;
    const Tensor* x = &input;
    if (b > 0) x = &op_output(std::vector<std::size_t>(path.begin(), path.end() - 1));
    const auto& op = net.blocks[b].parent_ops[path.back()];
    Tensor y(Shape{input.rows(), op.width()});
    Eigen::Map<RowMatrix> ym(y.data(), rows, static_cast<Eigen::Index>(op.width()));
    ym.noalias() = Eigen::Map<const RowMatrix>(x->data(), rows, static_cast<Eigen::Index>(x->cols())) *
                   Eigen::Map<const RowMatrix>(op.weight.data(), static_cast<Eigen::Index>(op.fan_in()),
                                               static_cast<Eigen::Index>(op.width()));
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(op.bias.data(),
                                                         static_cast<Eigen::Index>(op.width()));
    if (b + 1 < depth) {
      for (auto& v : y.values()) v = activate(net.spec.hidden_activation, v);
    }
    return memo.insert(path, std::move(y));
  };

  std::vector<Tensor> outputs;
  outputs.reserve(tasks);
  for (std::size_t k = 0; k < tasks; ++k) {
    const auto& head = net.heads[k];
    const Tensor& leaf = depth == 0 ? input : op_output(ancestry[k]);
    Tensor out = head.weight ? matmul(leaf, *head.weight) : leaf;
    const std::size_t width = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t c = 0; c < width; ++c) out[r * width + c] += head.bias[c];
    }
    outputs.push_back(std::move(out));
  }
  return outputs;
}

std::vector<double> evaluate(const TreeNetwork& net, const Batch& data, EvalMode mode,
                             std::size_t samples, Rng& rng) {
  const std::size_t tasks = net.heads.size();
  if (data.targets.size() != tasks) throw ContractError("evaluate: target count does not match tasks");
  std::vector<double> losses(tasks, 0.0);
  InferenceCache cache;
  const std::size_t runs = mode == EvalMode::noiseless ? 1 : samples;
  if (runs == 0) throw ContractError("evaluate: need at least one sample");
  for (std::size_t s = 0; s < runs; ++s) {
    const Routing routing = sample_routing(
        net, mode == EvalMode::noiseless ? SampleMode::noiseless : SampleMode::noisy, rng);
    const auto outputs = infer(net, data.inputs, routing, &cache);
    for (std::size_t k = 0; k < tasks; ++k) losses[k] += mse(outputs[k], data.targets[k]);
  }
  for (auto& l : losses) l /= static_cast<double>(runs);
  return losses;
}

TrainLog train_search(TreeNetwork& net, const Splits& data, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  return run_training(net, data, config, on_epoch, Phase::search);
}

TrainLog train_fixed(TreeNetwork& net, const Splits& data, const TrainConfig& config,
                     const EpochCallback& on_epoch) {
  for (const auto& blk : net.blocks) {
    if (!blk.fixed_routing) throw ContractError("train_fixed: every block needs a fixed routing");
  }
  return run_training(net, data, config, on_epoch, Phase::fixed);
}

void write_log_csv(const TrainLog& log, std::size_t task_count, const std::string& header,
                   const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << comment_block(header, "# ");
  f << "epoch,tau,train_total,val_total";
  for (std::size_t k = 0; k < task_count; ++k) f << ",val_task_" << k;
  f << '\n';
  for (const auto& r : log.epochs) {
    f << r.epoch << ',' << format_double(r.tau) << ',' << format_double(r.train_total) << ','
      << format_double(r.val_total);
    for (double v : r.val_tasks) f << ',' << format_double(v);
    f << '\n';
  }
  if (!f) throw IoError("failed writing " + path.string());
}

void write_logits_history(const TrainLog& log, const std::string& header,
                          const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << comment_block(header, "# ");
  f << "# epoch block rows cols values(row-major)\n";
  for (const auto& r : log.epochs) {
    for (std::size_t b = 0; b < r.logits.size(); ++b) {
      const auto& t = r.logits[b];
      f << r.epoch << ' ' << b << ' ' << t.rows() << ' ' << t.cols();
      for (double v : t.values()) f << ' ' << format_double(v);
      f << '\n';
    }
  }
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace treemtl
