#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "treemtl/autodiff.hpp"
#include "treemtl/random.hpp"
#include "treemtl/tensor.hpp"

namespace treemtl {

// Unnormalized log-probabilities of parent→child connections: row i is a
// parent, column j a child. Zero-initialized, which is the uniform
// distribution over parents for every child.
class BranchLogits {
 public:
  BranchLogits() = default;
  BranchLogits(std::size_t parents, std::size_t children);

  std::size_t parents() const { return phi_.rows(); }
  std::size_t children() const { return phi_.cols(); }
  std::vector<double> column(std::size_t child) const;
  double at(std::size_t parent, std::size_t child) const { return phi_.at(parent, child); }

  Tensor& tensor() { return phi_; }
  const Tensor& tensor() const { return phi_; }

 private:
  Tensor phi_{Shape{1, 1}};
};

// One categorical draw for one child.
struct GumbelSample {
  std::size_t child_index = 0;
  std::size_t chosen_parent = 0;
  std::vector<double> hard;   // one-hot at chosen_parent
  std::vector<double> soft;   // relaxed weights softmax((phi + noise) / tau)
  std::vector<double> noise;  // epsilon used for both
  double tau = 1.0;
};

// Gumbel(0,1) draw from a uniform u in (0,1).
double gumbel_from_uniform(double u);
std::vector<double> sample_gumbel_noise(std::size_t count, Rng& rng);

// argmax(logits + noise), ties to the lowest index.
GumbelSample sample_hard(std::span<const double> logits_col, std::span<const double> noise);
std::vector<double> soft_weights(std::span<const double> logits_col,
                                 std::span<const double> noise, double tau);

struct TemperatureSchedule {
  double tau0 = 50.0;
  double floor = 0.1;

  // tau0 / sqrt(step), clamped below by floor. Steps 0 and 1 both give tau0.
  double at(std::size_t step) const;
};

double temperature_at(const TemperatureSchedule& sched, std::size_t step);

struct DenseLayer {
  Tensor weight;  // fan_in x width
  Tensor bias;    // width

  std::size_t fan_in() const { return weight.rows(); }
  std::size_t width() const { return weight.cols(); }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

// Which gradient reaches parent activations: only along the sampled edge,
// or spread by the relaxed weights.
enum class StraightThroughMode { hard_activations, soft_activations };

// I parent operations whose outputs are routed to J children. When
// `fixed_routing` is set the block is a discrete, already-selected tree
// level: no sampling and no logits gradient.
struct BranchingBlock {
  std::vector<DenseLayer> parent_ops;
  BranchLogits logits;
  std::size_t child_count = 0;
  std::optional<std::vector<std::size_t>> fixed_routing;

  std::size_t parent_count() const { return parent_ops.size(); }
};

enum class SampleMode { noisy, noiseless };

// Draws one sample per child. Noise is consumed child by child, parent by
// parent; noiseless mode uses zero noise (plain argmax selection).
std::vector<GumbelSample> draw_samples(const BranchLogits& logits, double tau,
                                       SampleMode mode, Rng& rng);

struct RouteResult {
  std::vector<Tensor> child_inputs;
  std::vector<GumbelSample> samples;
};

struct RouteGradients {
  std::vector<Tensor> parent_grads;
  Tensor logits_grad;  // parents x children
};

// Forward routing: child j receives a copy of its sampled parent's output.
RouteResult route_forward(const BranchingBlock& block, std::span<const Tensor> parent_outputs,
                          double tau, Rng& rng, SampleMode mode = SampleMode::noisy);

// Gradients for a routing produced by route_forward. Logits use the
// relaxed estimator; parent outputs follow `mode`.
RouteGradients route_backward(std::span<const GumbelSample> samples,
                              std::span<const Tensor> parent_outputs,
                              std::span<const Tensor> upstream_grads,
                              StraightThroughMode mode = StraightThroughMode::hard_activations);

// Accumulates one child's routing gradients into parent adjoints and one
// logits column. Shared by route_backward and the recorded routing op.
void accumulate_route_gradient(const GumbelSample& sample,
                               std::span<const Tensor* const> parent_outputs,
                               std::span<const double> upstream,
                               std::span<const std::span<double>> parent_grads,
                               std::span<double> logits_grad_column, StraightThroughMode mode);

// Recorded routing for one child. `logits` may be a constant when the
// logits are not being trained; parents and the child share one shape.
Var route_child(Tape& tape, std::span<const Var> parents, Var logits, const GumbelSample& sample,
                StraightThroughMode mode);

}  // namespace treemtl
