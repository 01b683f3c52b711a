#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "treemtl/tensor.hpp"

namespace treemtl {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t index = 0;
};

class Tape;

// Local backward rule: reads the adjoint of `out` and accumulates into the
// adjoints of the node's inputs.
using BackwardRule = std::function<void(Tape& tape, Var out)>;

// Define-by-run record of a forward computation. Nodes are appended in
// execution order, so inputs always precede their consumers. A tape is
// single-use: build it, call backward once, discard it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A value that never receives gradients.
  Var constant(Tensor value);
  // A leaf bound to an external tensor. If the tensor requires grad, backward
  // accumulates into its gradient slot; the tensor must outlive the tape.
  Var parameter(Tensor& param);
  // Records an operation result. The rule runs only if some input needs grad.
  Var record(Tensor value, std::vector<Var> inputs, BackwardRule rule);

  const Tensor& value(Var v) const { return nodes_.at(v.index).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.index).needs_grad; }
  // Adjoint buffer of a node, zero-initialized on first access.
  std::span<double> adjoint(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }

  friend void backward(Var loss, Tape& tape);

 private:
  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    BackwardRule rule;
    Tensor* bound = nullptr;
    bool needs_grad = false;
    std::vector<double> adjoint;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once in reverse
// order. Gradients reaching bound parameters are added to their grad slot.
void backward(Var loss, Tape& tape);

enum class ActivationKind { sin, square, bent, cos, sinc, relu };

std::string_view activation_name(ActivationKind kind);
ActivationKind parse_activation(std::string_view name);
double activate(ActivationKind kind, double x);
double activate_derivative(ActivationKind kind, double x);

// Tensor-level kernels, no tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor apply_activation(ActivationKind kind, const Tensor& x);

// Recorded operations.
Var matmul(Tape& tape, Var a, Var b);
Var add_bias(Tape& tape, Var x, Var bias);
Var apply_activation(Tape& tape, ActivationKind kind, Var x);
Var mse_loss(Tape& tape, Var pred, Var target);
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double factor);
Var sum(Tape& tape, Var x);
// Elementwise product with a constant tensor of the same shape.
Var mul_constant(Tape& tape, Var x, const Tensor& weights);

// A scalar-valued function built on a tape from one input variable.
using ScalarFunction = std::function<Var(Tape& tape, Var x)>;

enum class Stencil { two_point, four_point };

// Largest relative error between the tape gradient of f at x and a central
// finite difference with the given step, over all components of x. The
// four-point stencil cancels the h^2 term, so a larger step keeps rounding
// noise well below small gradient components.
double grad_check(const ScalarFunction& f, const Tensor& x, double step,
                  Stencil stencil = Stencil::two_point);

}  // namespace treemtl
