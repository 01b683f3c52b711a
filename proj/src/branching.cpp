#include "treemtl/branching.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "treemtl/error.hpp"

namespace treemtl {

BranchLogits::BranchLogits(std::size_t parents, std::size_t children)
    : phi_(Shape{parents, children}, 0.0) {
  if (parents == 0 || children == 0) {
    throw SpecError("branch logits need at least one parent and one child");
  }
  phi_.set_requires_grad(true);
}

std::vector<double> BranchLogits::column(std::size_t child) const {
  std::vector<double> col(parents());
  for (std::size_t i = 0; i < col.size(); ++i) col[i] = phi_.at(i, child);
  return col;
}

double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

std::vector<double> sample_gumbel_noise(std::size_t count, Rng& rng) {
  std::vector<double> eps(count);
  for (auto& e : eps) e = gumbel_from_uniform(uniform_open(rng));
  return eps;
}

GumbelSample sample_hard(std::span<const double> logits_col, std::span<const double> noise) {
  if (logits_col.size() != noise.size() || logits_col.empty()) {
    throw DimensionError("sample_hard: " + std::to_string(logits_col.size()) + " logits vs " +
                         std::to_string(noise.size()) + " noise values");
  }
  if (!all_finite(logits_col)) throw NumericError("sample_hard: non-finite logits");
  GumbelSample s;
  s.noise.assign(noise.begin(), noise.end());
  double best = logits_col[0] + noise[0];
  for (std::size_t i = 1; i < logits_col.size(); ++i) {
    const double score = logits_col[i] + noise[i];
    if (score > best) {
      best = score;
      s.chosen_parent = i;
    }
  }
  s.hard.assign(logits_col.size(), 0.0);
  s.hard[s.chosen_parent] = 1.0;
  return s;
}

std::vector<double> soft_weights(std::span<const double> logits_col,
                                 std::span<const double> noise, double tau) {
  if (!(tau > 0.0)) throw ContractError("soft_weights: temperature must be positive");
  if (logits_col.size() != noise.size()) {
    throw DimensionError("soft_weights: logits and noise lengths differ");
  }
  std::vector<double> w(logits_col.size());
  double top = -INFINITY;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = (logits_col[i] + noise[i]) / tau;
    top = std::max(top, w[i]);
  }
  double total = 0.0;
  for (auto& v : w) {
    v = std::exp(v - top);
    total += v;
  }
  for (auto& v : w) v /= total;
  return w;
}

double TemperatureSchedule::at(std::size_t step) const {
  const double t = static_cast<double>(std::max<std::size_t>(1, step));
  return std::max(floor, tau0 / std::sqrt(t));
}

double temperature_at(const TemperatureSchedule& sched, std::size_t step) {
  return sched.at(step);
}

std::vector<GumbelSample> draw_samples(const BranchLogits& logits, double tau, SampleMode mode,
                                       Rng& rng) {
  const std::size_t parents = logits.parents();
  std::vector<GumbelSample> samples;
  samples.reserve(logits.children());
  for (std::size_t j = 0; j < logits.children(); ++j) {
    const auto col = logits.column(j);
    const auto noise = mode == SampleMode::noisy ? sample_gumbel_noise(parents, rng)
                                                 : std::vector<double>(parents, 0.0);
    GumbelSample s = sample_hard(col, noise);
    s.child_index = j;
    s.tau = tau;
    s.soft = soft_weights(col, noise, tau);
    samples.push_back(std::move(s));
  }
  return samples;
}

RouteResult route_forward(const BranchingBlock& block, std::span<const Tensor> parent_outputs,
                          double tau, Rng& rng, SampleMode mode) {
  if (parent_outputs.size() != block.parent_count()) {
    throw DimensionError("route_forward: block has " + std::to_string(block.parent_count()) +
                         " parents, got " + std::to_string(parent_outputs.size()) + " outputs");
  }
  for (const auto& y : parent_outputs) {
    if (y.shape() != parent_outputs[0].shape()) {
      throw DimensionError("route_forward: parent outputs disagree in shape (" +
                           shape_string(y.shape()) + " vs " +
                           shape_string(parent_outputs[0].shape()) + ")");
    }
  }
  RouteResult result;
  result.samples = draw_samples(block.logits, tau, mode, rng);
  result.child_inputs.reserve(result.samples.size());
  for (const auto& s : result.samples) result.child_inputs.push_back(parent_outputs[s.chosen_parent]);
  return result;
}

void accumulate_route_gradient(const GumbelSample& sample,
                               std::span<const Tensor* const> parent_outputs,
                               std::span<const double> upstream,
                               std::span<const std::span<double>> parent_grads,
                               std::span<double> logits_grad_column, StraightThroughMode mode) {
  const std::size_t parents = parent_outputs.size();

  if (!parent_grads.empty()) {
    if (mode == StraightThroughMode::hard_activations) {
      auto g = parent_grads[sample.chosen_parent];
      if (!g.empty()) {
        for (std::size_t e = 0; e < g.size(); ++e) g[e] += upstream[e];
      }
    } else {
      for (std::size_t i = 0; i < parents; ++i) {
        auto g = parent_grads[i];
        if (g.empty()) continue;
        const double w = sample.soft[i];
        for (std::size_t e = 0; e < g.size(); ++e) g[e] += w * upstream[e];
      }
    }
  }

  if (logits_grad_column.empty()) return;
  // dL/dphi_k = soft_k * (a_k - sum_i soft_i a_i) / tau, a_i = <upstream, y_i>.
  std::vector<double> align(parents, 0.0);
  double mean = 0.0;
  for (std::size_t i = 0; i < parents; ++i) {
    const auto y = parent_outputs[i]->values();
    double a = 0.0;
    for (std::size_t e = 0; e < y.size(); ++e) a += upstream[e] * y[e];
    align[i] = a;
    mean += sample.soft[i] * a;
  }
  for (std::size_t k = 0; k < parents; ++k) {
    logits_grad_column[k] += sample.soft[k] * (align[k] - mean) / sample.tau;
  }
}

RouteGradients route_backward(std::span<const GumbelSample> samples,
                              std::span<const Tensor> parent_outputs,
                              std::span<const Tensor> upstream_grads, StraightThroughMode mode) {
  const std::size_t parents = parent_outputs.size();
  if (upstream_grads.size() != samples.size()) {
    throw ContractError("route_backward: " + std::to_string(samples.size()) + " samples but " +
                        std::to_string(upstream_grads.size()) + " upstream gradients");
  }
  std::vector<const Tensor*> ys;
  for (const auto& y : parent_outputs) ys.push_back(&y);

  RouteGradients out;
  out.logits_grad = Tensor(Shape{parents, samples.size()});
  std::vector<std::span<double>> pg;
  for (const auto& y : parent_outputs) {
    out.parent_grads.emplace_back(y.shape());
    pg.push_back(out.parent_grads.back().values());
  }
  std::vector<double> column(parents);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& s = samples[j];
    if (s.hard.size() != parents || s.soft.size() != parents || s.chosen_parent >= parents) {
      throw ContractError("route_backward: sample for child " + std::to_string(j) +
                          " was drawn for a different block");
    }
    if (upstream_grads[j].shape() != parent_outputs[0].shape()) {
      throw ContractError("route_backward: upstream gradient shape " +
                          shape_string(upstream_grads[j].shape()) + " does not match " +
                          shape_string(parent_outputs[0].shape()));
    }
    std::fill(column.begin(), column.end(), 0.0);
    accumulate_route_gradient(s, ys, upstream_grads[j].values(), pg, column, mode);
    for (std::size_t i = 0; i < parents; ++i) out.logits_grad.at(i, j) = column[i];
  }
  return out;
}

Var route_child(Tape& tape, std::span<const Var> parents, Var logits, const GumbelSample& sample,
                StraightThroughMode mode) {
  if (sample.chosen_parent >= parents.size() || sample.soft.size() != parents.size()) {
    throw ContractError("route_child: sample does not match the parent list");
  }
  std::vector<Var> inputs(parents.begin(), parents.end());
  inputs.push_back(logits);
  Tensor out = tape.value(parents[sample.chosen_parent]);
  return tape.record(std::move(out), inputs, [inputs, sample, mode](Tape& t, Var o) {
    const std::size_t count = inputs.size() - 1;
    const Var logits_var = inputs.back();
    std::vector<const Tensor*> ys;
    std::vector<std::span<double>> pg;
    for (std::size_t i = 0; i < count; ++i) {
      ys.push_back(&t.value(inputs[i]));
      pg.push_back(t.needs_grad(inputs[i]) ? t.adjoint(inputs[i]) : std::span<double>{});
    }
    std::vector<double> column(count, 0.0);
    const bool want_logits = t.needs_grad(logits_var);
    accumulate_route_gradient(sample, ys, t.adjoint(o), pg,
                              want_logits ? std::span<double>(column) : std::span<double>{},
                              mode);
    if (want_logits) {
      auto lg = t.adjoint(logits_var);
      const std::size_t children = t.value(logits_var).cols();
      for (std::size_t i = 0; i < count; ++i) lg[i * children + sample.child_index] += column[i];
    }
  });
}

}  // namespace treemtl
