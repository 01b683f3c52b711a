#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "treemtl/autodiff.hpp"
#include "treemtl/error.hpp"

using namespace treemtl;
using testutil::random_dim;
using testutil::random_tensor;
using testutil::weighted_sum;

TEST_CASE("matmul values") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(eye, m) == m);
  CHECK(matmul(Tensor(Shape{3, 2}), m) == Tensor(Shape{3, 2}));
  CHECK(matmul(m, Tensor::matrix({{5, 6}, {7, 8}})) == Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    (void)matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("add_bias broadcast and column-sum gradient") {
  Tape tape;
  Tensor x = Tensor(Shape{2, 3});
  Tensor b = Tensor::vector({1, 2, 3});
  b.set_requires_grad(true);
  Var out = add_bias(tape, tape.constant(x), tape.parameter(b));
  CHECK(tape.value(out) == Tensor::matrix({{1, 2, 3}, {1, 2, 3}}));
  backward(sum(tape, out), tape);
  CHECK(b.grad()[0] == 2.0);
  CHECK(b.grad()[1] == 2.0);
  CHECK(b.grad()[2] == 2.0);

  Tape t2;
  const Tensor y = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(t2.value(add_bias(t2, t2.constant(y), t2.constant(Tensor(Shape{2})))) == y);
  CHECK_THROWS_AS(add_bias(t2, t2.constant(y), t2.constant(Tensor(Shape{3}))), DimensionError);
}

TEST_CASE("activation values") {
  CHECK(activate(ActivationKind::sin, 0.0) == 0.0);
  CHECK(activate(ActivationKind::cos, 0.0) == 1.0);
  CHECK(activate(ActivationKind::sinc, 0.0) == 1.0);
  CHECK(activate(ActivationKind::bent, 0.0) == 0.0);
  CHECK(activate(ActivationKind::square, 3.0) == 9.0);
  CHECK(activate(ActivationKind::relu, -1.0) == 0.0);
  CHECK(activate_derivative(ActivationKind::relu, 0.0) == 0.0);
  CHECK(activate(ActivationKind::sinc, 2.0) == doctest::Approx(std::sin(2.0) / 2.0));
  // Series branch agrees with the closed form just past the switch point.
  CHECK(activate(ActivationKind::sinc, 1.1e-3) == doctest::Approx(std::sin(1.1e-3) / 1.1e-3).epsilon(1e-15));
  CHECK(activate(ActivationKind::sinc, 0.9e-3) == doctest::Approx(std::sin(0.9e-3) / 0.9e-3).epsilon(1e-15));
  for (auto k : {ActivationKind::sin, ActivationKind::square, ActivationKind::bent, ActivationKind::cos,
                 ActivationKind::sinc, ActivationKind::relu}) {
    CHECK(parse_activation(activation_name(k)) == k);
  }
  CHECK_THROWS_AS(parse_activation("tanh"), SpecError);
}

TEST_CASE("mse values") {
  Tape tape;
  const Tensor p = Tensor::matrix({{1, 1}, {1, 1}});
  CHECK(tape.value(mse_loss(tape, tape.constant(p), tape.constant(p))).item() == 0.0);
  CHECK(tape.value(mse_loss(tape, tape.constant(Tensor::vector({2})), tape.constant(Tensor::vector({0})))).item() == 4.0);
  CHECK(tape.value(mse_loss(tape, tape.constant(p), tape.constant(Tensor(Shape{2, 2})))).item() == 1.0);
  CHECK_THROWS_AS(mse_loss(tape, tape.constant(p), tape.constant(Tensor(Shape{4}))), DimensionError);
}

TEST_CASE("backward basics") {
  SUBCASE("x squared") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tape tape;
    Var v = tape.parameter(x);
    backward(sum(tape, mul_constant(tape, v, Tensor::scalar(3.0))), tape);
    CHECK(x.grad()[0] == 3.0);
    x.clear_grad();
    Tape t2;
    Var u = t2.parameter(x);
    Var sq = apply_activation(t2, ActivationKind::square, u);
    backward(sq, t2);
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("constant loss gives zero gradient") {
    Tensor x = Tensor::vector({1, 2});
    x.set_requires_grad(true);
    Tape tape;
    (void)tape.parameter(x);
    Var c = sum(tape, tape.constant(Tensor::vector({5, 6})));
    backward(c, tape);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
  }
  SUBCASE("x + x accumulates") {
    Tensor x = Tensor::scalar(1.5);
    x.set_requires_grad(true);
    Tape tape;
    Var v = tape.parameter(x);
    backward(add(tape, v, v), tape);
    CHECK(x.grad()[0] == 2.0);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tape tape;
    Var v = tape.constant(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(backward(v, tape), ContractError);
  }
  SUBCASE("tape is single-use") {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    Tape tape;
    Var l = apply_activation(tape, ActivationKind::square, tape.parameter(x));
    backward(l, tape);
    CHECK_THROWS_AS(backward(l, tape), ContractError);
  }
}

TEST_CASE("grad_check on simple functions") {
  const Tensor x = Tensor::vector({1, 2});
  CHECK(grad_check([](Tape& t, Var v) { return sum(t, v); }, x, 1e-6) < 1e-7);
  CHECK(grad_check([](Tape& t, Var v) { return sum(t, apply_activation(t, ActivationKind::square, v)); }, x,
                   1e-6) < 1e-7);
  CHECK_THROWS_AS(grad_check([](Tape& t, Var v) { return sum(t, v); }, x, 0.0), ContractError);
  CHECK_THROWS_AS(grad_check([](Tape& t, Var v) { return scale(t, sum(t, v), NAN); }, x, 1e-6),
                  NumericError);
}

TEST_CASE("primitive gradients match central differences over random cases") {
  Rng rng = make_rng(7, 0);
  constexpr int kTrials = 100;
  constexpr double kStep = 1e-6;
  constexpr double kTol = 1e-5;
  const ActivationKind kinds[] = {ActivationKind::sin, ActivationKind::square, ActivationKind::bent,
                                  ActivationKind::cos, ActivationKind::sinc, ActivationKind::relu};
  double worst = 0.0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t m = random_dim(rng), k = random_dim(rng), n = random_dim(rng);
    const Tensor a = random_tensor({m, k}, rng);
    const Tensor b = random_tensor({k, n}, rng);
    const Tensor w = random_tensor({m, n}, rng);
    const Tensor bias = random_tensor({n}, rng);
    const Tensor target = random_tensor({m, n}, rng);

    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, matmul(t, x, t.constant(b)), w); }, a, kStep));
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, matmul(t, t.constant(a), x), w); }, b, kStep));
    const Tensor xm = random_tensor({m, n}, rng);
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, add_bias(t, t.constant(xm), x), w); }, bias, kStep));
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, add_bias(t, x, t.constant(bias)), w); }, xm, kStep));
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return mse_loss(t, x, t.constant(target)); }, xm, kStep));
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, add(t, x, x), w); }, xm, kStep));
    worst = std::max(worst, grad_check([&](Tape& t, Var x) { return weighted_sum(t, scale(t, x, -2.5), w); }, xm, kStep));

    const ActivationKind kind = kinds[trial % 6];
    Tensor act_in = random_tensor({m, n}, rng, -2.0, 2.0);
    if (kind == ActivationKind::relu) {
      // Keep clear of the kink, where central differences are meaningless.
      for (auto& v : act_in.values()) v = v >= 0 ? v + 0.01 : v - 0.01;
    }
    const double err = grad_check(
        [&](Tape& t, Var x) { return weighted_sum(t, apply_activation(t, kind, x), w); }, act_in, kStep);
    CHECK_MESSAGE(err < kTol, activation_name(kind));
    worst = std::max(worst, err);
  }
  CHECK(worst < kTol);
}

TEST_CASE("two-layer network gradients match central differences") {
  Rng rng = make_rng(11, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t batch = random_dim(rng), in = random_dim(rng), hid = random_dim(rng), out = random_dim(rng);
    const Tensor x = random_tensor({batch, in}, rng);
    const Tensor w1 = random_tensor({in, hid}, rng);
    const Tensor b1 = random_tensor({hid}, rng);
    const Tensor w2 = random_tensor({hid, out}, rng);
    const Tensor target = random_tensor({batch, out}, rng);
    auto net = [&](Tape& t, Var first_weight) {
      Var h = apply_activation(t, ActivationKind::sin, add_bias(t, matmul(t, t.constant(x), first_weight), t.constant(b1)));
      return mse_loss(t, matmul(t, h, t.constant(w2)), t.constant(target));
    };
    // Rounding swamps two-point differences on tiny components here, so use
    // the four-point stencil with a coarser step.
    CHECK(grad_check(net, w1, 1e-3, Stencil::four_point) < 1e-5);
  }
}

TEST_CASE("tape results are bitwise deterministic") {
  Rng rng = make_rng(3, 0);
  const Tensor a = random_tensor({5, 4}, rng);
  const Tensor b = random_tensor({4, 6}, rng);
  auto run = [&] {
    Tensor p = a;
    p.set_requires_grad(true);
    Tape tape;
    Var out = apply_activation(tape, ActivationKind::bent, matmul(tape, tape.parameter(p), tape.constant(b)));
    const Tensor value = tape.value(out);
    backward(sum(tape, out), tape);
    return std::make_pair(value, std::vector<double>(p.grad().begin(), p.grad().end()));
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}
