#include "treemtl/network.hpp"

#include <cmath>

#include "treemtl/error.hpp"

namespace treemtl {

void NetworkSpec::validate() const {
  if (input_dim == 0 || output_dim == 0) throw SpecError("input_dim and output_dim must be positive");
  if (task_count == 0) throw SpecError("task_count must be positive");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    if (blk.parents == 0 || blk.children == 0 || blk.width == 0) {
      throw SpecError("block " + std::to_string(b) + " has a zero parent/child count or width");
    }
    if (b + 1 < blocks.size() && blk.children != blocks[b + 1].parents) {
      throw SpecError("block " + std::to_string(b) + " has " + std::to_string(blk.children) +
                      " children but block " + std::to_string(b + 1) + " has " +
                      std::to_string(blocks[b + 1].parents) + " parents");
    }
  }
  if (!blocks.empty() && blocks.back().children != task_count) {
    throw SpecError("last block fans out to " + std::to_string(blocks.back().children) +
                    " children but there are " + std::to_string(task_count) + " tasks");
  }
  if (head_kind == HeadKind::bias_only && leaf_width() != output_dim) {
    throw SpecError("bias-only heads need leaf width " + std::to_string(leaf_width()) +
                    " to equal output_dim " + std::to_string(output_dim));
  }
}

std::size_t NetworkSpec::leaf_width() const {
  return blocks.empty() ? input_dim : blocks.back().width;
}

NetworkSpec default_synthetic_spec(std::size_t task_count) {
  NetworkSpec spec;
  spec.input_dim = 200;
  spec.output_dim = 100;
  spec.task_count = task_count;
  spec.blocks = {{1, 3, 100}, {3, 3, 100}, {3, 3, 100}, {3, task_count, 100}};
  return spec;
}

TreeNetwork::TreeNetwork(const TreeNetwork& other)
    : spec(other.spec), blocks(other.blocks), heads(other.heads) {
  index_parameters();
}

TreeNetwork& TreeNetwork::operator=(const TreeNetwork& other) {
  if (this != &other) {
    spec = other.spec;
    blocks = other.blocks;
    heads = other.heads;
    index_parameters();
  }
  return *this;
}

void TreeNetwork::index_parameters() {
  weight_registry_.clear();
  logits_registry_.clear();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b);
    auto& blk = blocks[b];
    for (std::size_t i = 0; i < blk.parent_ops.size(); ++i) {
      const std::string op = prefix + ".op" + std::to_string(i);
      weight_registry_.push_back({op + ".weight", &blk.parent_ops[i].weight});
      weight_registry_.push_back({op + ".bias", &blk.parent_ops[i].bias});
    }
    if (!blk.fixed_routing) logits_registry_.push_back({prefix + ".logits", &blk.logits.tensor()});
  }
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const std::string prefix = "head" + std::to_string(k);
    if (heads[k].weight) weight_registry_.push_back({prefix + ".weight", &*heads[k].weight});
    weight_registry_.push_back({prefix + ".bias", &heads[k].bias});
  }
}

std::size_t TreeNetwork::weight_parameter_count() const {
  std::size_t total = 0;
  for (const auto& blk : blocks) {
    for (const auto& op : blk.parent_ops) total += op.parameter_count();
  }
  for (const auto& h : heads) total += h.bias.size() + (h.weight ? h.weight->size() : 0);
  return total;
}

void TreeNetwork::zero_grad() {
  for (auto& p : weight_registry_) p.tensor->zero_grad();
  for (auto& p : logits_registry_) p.tensor->zero_grad();
}

namespace {

Tensor uniform_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w(Shape{fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.values()) v = (2.0 * uniform_open(rng) - 1.0) * bound;
  w.set_requires_grad(true);
  return w;
}

Tensor zero_bias(std::size_t n) {
  Tensor b(Shape{n}, 0.0);
  b.set_requires_grad(true);
  return b;
}

}  // namespace

TreeNetwork build_network(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  TreeNetwork net;
  net.spec = spec;
  std::size_t fan_in = spec.input_dim;
  for (const auto& bs : spec.blocks) {
    BranchingBlock blk;
    for (std::size_t i = 0; i < bs.parents; ++i) {
      blk.parent_ops.push_back(DenseLayer{uniform_weight(fan_in, bs.width, rng), zero_bias(bs.width)});
    }
    blk.logits = BranchLogits(bs.parents, bs.children);
    blk.child_count = bs.children;
    net.blocks.push_back(std::move(blk));
    fan_in = bs.width;
  }
  for (std::size_t k = 0; k < spec.task_count; ++k) {
    TaskHead head{zero_bias(spec.output_dim), std::nullopt};
    if (spec.head_kind == HeadKind::dense) head.weight = uniform_weight(fan_in, spec.output_dim, rng);
    net.heads.push_back(std::move(head));
  }
  net.index_parameters();
  return net;
}

ForwardResult forward(TreeNetwork& net, Tape& tape, Var input, const ForwardOptions& options,
                      Rng& rng) {
  const Tensor& z = tape.value(input);
  if (z.rank() != 2 || z.cols() != net.spec.input_dim) {
    throw DimensionError("forward: input shape " + shape_string(z.shape()) +
                         " does not have width " + std::to_string(net.spec.input_dim));
  }
  ForwardResult result;
  std::vector<Var> xs{input};
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    auto& blk = net.blocks[b];
    const bool last = b + 1 == net.blocks.size();
    std::vector<Var> ys;
    ys.reserve(blk.parent_count());
    for (std::size_t i = 0; i < blk.parent_count(); ++i) {
      auto& op = blk.parent_ops[i];
      const Var x = xs.size() == 1 ? xs[0] : xs.at(i);
      Var h = add_bias(tape, matmul(tape, x, tape.parameter(op.weight)), tape.parameter(op.bias));
      if (!last) h = apply_activation(tape, net.spec.hidden_activation, h);
      ys.push_back(h);
    }

    std::vector<Var> children;
    children.reserve(blk.child_count);
    if (blk.fixed_routing) {
      for (std::size_t parent : *blk.fixed_routing) children.push_back(ys.at(parent));
      result.samples.emplace_back();
    } else {
      auto samples = draw_samples(blk.logits, options.tau, options.mode, rng);
      const Var logits = options.train_logits ? tape.parameter(blk.logits.tensor())
                                              : tape.constant(blk.logits.tensor());
      for (const auto& s : samples) children.push_back(route_child(tape, ys, logits, s, options.st_mode));
      result.samples.push_back(std::move(samples));
    }
    xs = std::move(children);
  }

  for (std::size_t k = 0; k < net.heads.size(); ++k) {
    auto& head = net.heads[k];
    Var x = xs.size() == 1 ? xs[0] : xs.at(k);
    if (head.weight) x = matmul(tape, x, tape.parameter(*head.weight));
    result.task_outputs.push_back(add_bias(tape, x, tape.parameter(head.bias)));
  }
  return result;
}

void LossSpec::validate(std::size_t tasks) const {
  if (alphas.size() != tasks) {
    throw ContractError("loss spec has " + std::to_string(alphas.size()) + " weights for " +
                        std::to_string(tasks) + " tasks");
  }
  for (double a : alphas) {
    if (!(a >= 0.0)) throw ContractError("task weights must be nonnegative");
  }
}

Var total_loss(Tape& tape, std::span<const Var> outputs, std::span<const Var> targets,
               const LossSpec& loss) {
  if (outputs.size() != targets.size()) {
    throw ContractError("total_loss: " + std::to_string(outputs.size()) + " outputs vs " +
                        std::to_string(targets.size()) + " targets");
  }
  loss.validate(outputs.size());
  Var acc = tape.constant(Tensor::scalar(0.0));
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    acc = add(tape, acc, scale(tape, mse_loss(tape, outputs[k], targets[k]), loss.alphas[k]));
  }
  return acc;
}

std::vector<Tensor> predict(TreeNetwork& net, const Tensor& input) {
  Tape tape;
  Rng unused(0);
  ForwardOptions opts;
  opts.mode = SampleMode::noiseless;
  opts.train_logits = false;
  auto fr = forward(net, tape, tape.constant(input), opts, unused);
  std::vector<Tensor> out;
  for (Var v : fr.task_outputs) out.push_back(tape.value(v));
  return out;
}

}  // namespace treemtl
