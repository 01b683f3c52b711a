#include "treemtl/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "treemtl/error.hpp"

namespace treemtl {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

MatrixMap as_matrix(std::span<double> buffer, std::size_t rows, std::size_t cols) {
  return MatrixMap(buffer.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
  }
}

}  // namespace

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false, {}});
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Tensor& param) {
  nodes_.push_back(Node{param, {}, nullptr, &param, param.requires_grad(), {}});
  nodes_.back().value.clear_grad();
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardRule rule) {
  bool needs = false;
  for (Var in : inputs) {
    if (in.index >= nodes_.size()) throw ContractError("input not recorded on this tape");
    needs = needs || nodes_[in.index].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs),
                        needs ? std::move(rule) : BackwardRule{}, nullptr, needs, {}});
  return Var{nodes_.size() - 1};
}

std::span<double> Tape::adjoint(Var v) {
  Node& node = nodes_.at(v.index);
  if (node.adjoint.empty()) node.adjoint.assign(node.value.size(), 0.0);
  return node.adjoint;
}

void backward(Var loss, Tape& tape) {
  if (loss.index >= tape.nodes_.size()) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  if (tape.value(loss).rank() != 0) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(tape.value(loss).shape()));
  }
  if (tape.backward_done_) throw ContractError("backward: tape already consumed");
  tape.backward_done_ = true;

  tape.adjoint(loss)[0] = 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    auto& node = tape.nodes_[i];
    if (!node.needs_grad || node.adjoint.empty()) continue;
    if (node.rule) {
      node.rule(tape, Var{i});
    } else if (node.bound != nullptr) {
      auto grad = node.bound->grad();
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += node.adjoint[k];
    }
  }
}

std::string_view activation_name(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::sin: return "sin";
    case ActivationKind::square: return "square";
    case ActivationKind::bent: return "bent";
    case ActivationKind::cos: return "cos";
    case ActivationKind::sinc: return "sinc";
    case ActivationKind::relu: return "relu";
  }
  return "?";
}

ActivationKind parse_activation(std::string_view name) {
  for (auto kind : {ActivationKind::sin, ActivationKind::square, ActivationKind::bent,
                    ActivationKind::cos, ActivationKind::sinc, ActivationKind::relu}) {
    if (activation_name(kind) == name) return kind;
  }
  throw SpecError("unknown activation '" + std::string(name) + "'");
}

// Below this magnitude sinc and its derivative use Taylor series; the closed
// forms lose all precision to cancellation near zero.
constexpr double kSincSeriesCutoff = 1e-3;

double activate(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::sin: return std::sin(x);
    case ActivationKind::square: return x * x;
    case ActivationKind::bent: return (std::sqrt(x * x + 1.0) - 1.0) / 2.0 + x;
    case ActivationKind::cos: return std::cos(x);
    case ActivationKind::sinc: {
      if (std::abs(x) < kSincSeriesCutoff) {
        const double x2 = x * x;
        return 1.0 - x2 / 6.0 + x2 * x2 / 120.0;
      }
      return std::sin(x) / x;
    }
    case ActivationKind::relu: return x > 0.0 ? x : 0.0;
  }
  return 0.0;
}

double activate_derivative(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::sin: return std::cos(x);
    case ActivationKind::square: return 2.0 * x;
    case ActivationKind::bent: return x / (2.0 * std::sqrt(x * x + 1.0)) + 1.0;
    case ActivationKind::cos: return -std::sin(x);
    case ActivationKind::sinc: {
      if (std::abs(x) < kSincSeriesCutoff) {
        return -x / 3.0 + x * x * x / 30.0;
      }
      return (x * std::cos(x) - std::sin(x)) / (x * x);
    }
    case ActivationKind::relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  as_matrix(out.values(), a.rows(), b.cols()).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

Tensor apply_activation(ActivationKind kind, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activate(kind, x[i]);
  return out;
}

Var matmul(Tape& tape, Var a, Var b) {
  Tensor out = matmul(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    auto og = as_matrix(t.adjoint(o), av.rows(), bv.cols());
    if (t.needs_grad(a)) {
      as_matrix(t.adjoint(a), av.rows(), av.cols()).noalias() +=
          og * as_matrix(bv).transpose();
    }
    if (t.needs_grad(b)) {
      as_matrix(t.adjoint(b), bv.rows(), bv.cols()).noalias() +=
          as_matrix(av).transpose() * og;
    }
  });
}

Var add_bias(Tape& tape, Var x, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& bv = tape.value(bias);
  require_matrix(xv, "add_bias");
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias shape " + shape_string(bv.shape()) +
                         " does not match trailing dimension of " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return tape.record(std::move(out), {x, bias}, [x, bias, rows, cols](Tape& t, Var o) {
    auto og = t.adjoint(o);
    if (t.needs_grad(x)) {
      auto xg = t.adjoint(x);
      for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
    }
    if (t.needs_grad(bias)) {
      auto bg = t.adjoint(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) bg[c] += og[r * cols + c];
      }
    }
  });
}

Var apply_activation(Tape& tape, ActivationKind kind, Var x) {
  Tensor out = apply_activation(kind, tape.value(x));
  return tape.record(std::move(out), {x}, [kind, x](Tape& t, Var o) {
    const Tensor& xv = t.value(x);
    auto og = t.adjoint(o);
    auto xg = t.adjoint(x);
    for (std::size_t i = 0; i < og.size(); ++i) {
      xg[i] += og[i] * activate_derivative(kind, xv[i]);
    }
  });
}

Var mse_loss(Tape& tape, Var pred, Var target) {
  const Tensor& p = tape.value(pred);
  const Tensor& y = tape.value(target);
  if (p.shape() != y.shape()) {
    throw DimensionError("mse_loss: prediction " + shape_string(p.shape()) +
                         " vs target " + shape_string(y.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - y[i];
    total += d * d;
  }
  const double n = static_cast<double>(p.size());
  return tape.record(Tensor::scalar(total / n), {pred, target}, [pred, target, n](Tape& t, Var o) {
    const double g = t.adjoint(o)[0] * 2.0 / n;
    const Tensor& pv = t.value(pred);
    const Tensor& yv = t.value(target);
    if (t.needs_grad(pred)) {
      auto pg = t.adjoint(pred);
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g * (pv[i] - yv[i]);
    }
    if (t.needs_grad(target)) {
      auto yg = t.adjoint(target);
      for (std::size_t i = 0; i < yg.size(); ++i) yg[i] -= g * (pv[i] - yv[i]);
    }
  });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, Var o) {
    for (Var in : {a, b}) {
      if (!t.needs_grad(in)) continue;
      // Re-fetch per input: a == b is allowed and must accumulate twice.
      auto og = t.adjoint(o);
      auto g = t.adjoint(in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i];
    }
  });
}

Var scale(Tape& tape, Var x, double factor) {
  Tensor out = tape.value(x);
  for (auto& v : out.values()) v *= factor;
  return tape.record(std::move(out), {x}, [x, factor](Tape& t, Var o) {
    auto og = t.adjoint(o);
    auto g = t.adjoint(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * og[i];
  });
}

Var sum(Tape& tape, Var x) {
  double total = 0.0;
  for (double v : tape.value(x).values()) total += v;
  return tape.record(Tensor::scalar(total), {x}, [x](Tape& t, Var o) {
    const double og = t.adjoint(o)[0];
    for (auto& g : t.adjoint(x)) g += og;
  });
}

Var mul_constant(Tape& tape, Var x, const Tensor& weights) {
  const Tensor& xv = tape.value(x);
  if (xv.shape() != weights.shape()) {
    throw DimensionError("mul_constant: " + shape_string(xv.shape()) + " vs " +
                         shape_string(weights.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= weights[i];
  return tape.record(std::move(out), {x}, [x, weights](Tape& t, Var o) {
    auto og = t.adjoint(o);
    auto g = t.adjoint(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[i] * og[i];
  });
}

double grad_check(const ScalarFunction& f, const Tensor& x, double step, Stencil stencil) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");

  auto evaluate = [&f](const Tensor& at) {
    Tape tape;
    Tensor input = at;
    input.set_requires_grad(false);
    const double v = tape.value(f(tape, tape.constant(std::move(input)))).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return v;
  };

  Tensor param = x;
  param.set_requires_grad(true);
  param.clear_grad();
  {
    Tape tape;
    Var loss = f(tape, tape.parameter(param));
    if (!std::isfinite(tape.value(loss).item())) {
      throw NumericError("grad_check: function value is not finite");
    }
    backward(loss, tape);
  }
  const auto analytic = param.grad();

  double worst = 0.0;
  Tensor probe = x;
  auto at = [&](std::size_t i, double offset) {
    probe[i] = x[i] + offset;
    const double v = evaluate(probe);
    probe[i] = x[i];
    return v;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double near = (at(i, step) - at(i, -step)) / (2.0 * step);
    double numeric = near;
    if (stencil == Stencil::four_point) {
      const double far = (at(i, 2.0 * step) - at(i, -2.0 * step)) / (4.0 * step);
      numeric = (4.0 * near - far) / 3.0;
    }
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-12, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace treemtl
