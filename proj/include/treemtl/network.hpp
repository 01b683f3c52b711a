#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "treemtl/autodiff.hpp"
#include "treemtl/branching.hpp"
#include "treemtl/random.hpp"

namespace treemtl {

struct BlockSpec {
  std::size_t parents = 1;   // I
  std::size_t children = 1;  // J
  std::size_t width = 100;   // output width of every parent op
};

enum class HeadKind { bias_only, dense };

struct NetworkSpec {
  std::size_t input_dim = 200;
  std::size_t output_dim = 100;
  std::vector<BlockSpec> blocks;
  std::size_t task_count = 15;
  HeadKind head_kind = HeadKind::bias_only;
  ActivationKind hidden_activation = ActivationKind::relu;

  // Throws SpecError naming the first broken invariant.
  void validate() const;
  // Width of the tensors that reach the task heads.
  std::size_t leaf_width() const;
};

// Four blocks of width 100: one root op fanning out to three children,
// two 3→3 blocks, and a final 3-parent block whose children are the tasks.
NetworkSpec default_synthetic_spec(std::size_t task_count = 15);

struct TaskHead {
  Tensor bias;                  // output_dim
  std::optional<Tensor> weight; // leaf_width x output_dim, dense heads only
};

struct NamedParameter {
  std::string name;
  Tensor* tensor;
};

class TreeNetwork {
 public:
  TreeNetwork() = default;
  TreeNetwork(const TreeNetwork& other);
  TreeNetwork& operator=(const TreeNetwork& other);
  TreeNetwork(TreeNetwork&&) noexcept = default;
  TreeNetwork& operator=(TreeNetwork&&) noexcept = default;

  NetworkSpec spec;
  std::vector<BranchingBlock> blocks;
  std::vector<TaskHead> heads;

  std::vector<NamedParameter> weights() { return weight_registry_; }
  std::vector<NamedParameter> logits() { return logits_registry_; }
  std::size_t weight_parameter_count() const;
  void zero_grad();

  // Rebuilds both registries; call after changing the block or head layout.
  void index_parameters();

 private:
  std::vector<NamedParameter> weight_registry_;
  std::vector<NamedParameter> logits_registry_;
};

TreeNetwork build_network(const NetworkSpec& spec, Rng& rng);

struct ForwardOptions {
  double tau = 1.0;
  SampleMode mode = SampleMode::noisy;
  StraightThroughMode st_mode = StraightThroughMode::hard_activations;
  // Record logits as trainable inputs. Off, the logits gradient is skipped.
  bool train_logits = true;
};

struct ForwardResult {
  std::vector<Var> task_outputs;
  std::vector<std::vector<GumbelSample>> samples;  // per block, per child
};

// Runs the tree on a batch. Each block applies its parent ops (dense layer,
// hidden activation except on the last block) to its inputs, then routes the
// outputs to the children. The last block's children are the task heads.
ForwardResult forward(TreeNetwork& net, Tape& tape, Var input, const ForwardOptions& options,
                      Rng& rng);

struct LossSpec {
  std::vector<double> alphas;

  static LossSpec uniform(std::size_t tasks) { return LossSpec{std::vector<double>(tasks, 1.0)}; }
  void validate(std::size_t tasks) const;
};

// sum_k alpha_k * MSE(output_k, target_k).
Var total_loss(Tape& tape, std::span<const Var> outputs, std::span<const Var> targets,
               const LossSpec& loss);

// Values of every task output of a noiseless (argmax) forward.
std::vector<Tensor> predict(TreeNetwork& net, const Tensor& input);

}  // namespace treemtl
