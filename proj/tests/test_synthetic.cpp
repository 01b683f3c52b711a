#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "treemtl/error.hpp"
#include "treemtl/synthetic.hpp"

using namespace treemtl;

namespace {

double mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / a.size();
}

// Independent evaluation of one target entry straight from the formula.
double target_entry(const SyntheticTaskSuite& suite, std::size_t task, const Tensor& z, std::size_t row,
                    std::size_t col) {
  const auto& t = suite.tasks[task];
  double acc = 0.0;
  for (std::size_t i = 0; i < suite.input_dim; ++i) {
    acc += (suite.base.at(col, i) + t.delta.at(col, i)) * z.at(row, i);
  }
  const double x = t.multiplier * acc / suite.phi;
  switch (t.activation) {
    case ActivationKind::sin: return std::sin(x);
    case ActivationKind::cos: return std::cos(x);
    case ActivationKind::square: return x * x;
    case ActivationKind::bent: return (std::sqrt(x * x + 1.0) - 1.0) / 2.0 + x;
    case ActivationKind::sinc: return x == 0.0 ? 1.0 : std::sin(x) / x;
    case ActivationKind::relu: return std::max(0.0, x);
  }
  return NAN;
}

}  // namespace

TEST_CASE("suite composition") {
  SUBCASE("setting a") {
    const auto s = make_suite(Setting::a, 1);
    REQUIRE(s.task_count() == 15);
    const auto labels = s.group_labels();
    for (std::size_t k = 0; k < 15; ++k) CHECK(labels[k] == k / 5);
    CHECK(s.tasks[0].activation == ActivationKind::bent);
    CHECK(s.tasks[5].activation == ActivationKind::square);
    CHECK(s.tasks[10].activation == ActivationKind::sinc);
  }
  SUBCASE("setting b") {
    const auto s = make_suite(Setting::b, 1);
    REQUIRE(s.task_count() == 15);
    for (std::size_t k = 0; k < 15; ++k) {
      CHECK(s.tasks[k].activation == ActivationKind::sin);
      CHECK(s.tasks[k].multiplier == static_cast<double>(1 + k / 5));
      CHECK(s.tasks[k].group == 0);
    }
  }
  SUBCASE("setting c") {
    const auto s = make_suite(Setting::c, 1);
    CHECK(s.tasks[0].activation == ActivationKind::cos);
    CHECK(s.tasks[5].activation == ActivationKind::sinc);
    CHECK(s.tasks[10].activation == ActivationKind::square);
    CHECK(s.group_labels()[14] == 2);
  }
  CHECK(parse_setting(setting_name(Setting::c)) == Setting::c);
  CHECK_THROWS_AS(parse_setting("d"), SpecError);
}

TEST_CASE("suite determinism and seed sensitivity") {
  const auto a = make_suite(Setting::a, 3);
  const auto b = make_suite(Setting::a, 3);
  CHECK(a.base == b.base);
  for (std::size_t k = 0; k < a.task_count(); ++k) CHECK(a.tasks[k].delta == b.tasks[k].delta);
  const auto c = make_suite(Setting::a, 4);
  CHECK(!(a.base == c.base));
}

TEST_CASE("base and delta scales") {
  const auto s = make_suite(Setting::a, 2);
  auto sd = [](const Tensor& t) {
    double sum = 0.0, sq = 0.0;
    for (double v : t.values()) {
      sum += v;
      sq += v * v;
    }
    const double mean = sum / t.size();
    return std::sqrt(sq / t.size() - mean * mean);
  };
  CHECK(std::abs(sd(s.base) - kBaseSigma) < 0.3);
  CHECK(std::abs(sd(s.tasks[7].delta) - kDeltaSigma) < 0.06);
}

TEST_CASE("targets at zero input") {
  for (Setting setting : {Setting::a, Setting::b, Setting::c}) {
    const auto s = make_suite(setting, 1);
    const auto targets = compute_targets(s, Tensor(Shape{3, 200}));
    for (std::size_t k = 0; k < s.task_count(); ++k) {
      const auto kind = s.tasks[k].activation;
      const double expected = kind == ActivationKind::cos || kind == ActivationKind::sinc ? 1.0 : 0.0;
      for (double v : targets[k].values()) CHECK(v == expected);
    }
  }
}

TEST_CASE("targets match the formula") {
  Rng rng = make_rng(5, 0);
  for (Setting setting : {Setting::a, Setting::b, Setting::c}) {
    const auto s = make_suite(setting, 5);
    const auto batch = generate_batch(s, 4, rng);
    for (std::size_t k = 0; k < s.task_count(); k += 2) {
      for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 100; c += 9) {
          CHECK(batch.targets[k].at(r, c) == doctest::Approx(target_entry(s, k, batch.inputs, r, c)).epsilon(1e-10));
        }
      }
    }
  }
}

TEST_CASE("identical activation with zero delta gives identical targets") {
  auto s = make_suite(Setting::a, 6);
  s.tasks[1].delta = Tensor(Shape{100, 200});
  s.tasks[2].delta = Tensor(Shape{100, 200});
  Rng rng = make_rng(6, 0);
  const auto batch = generate_batch(s, 8, rng);
  CHECK(batch.targets[1] == batch.targets[2]);
}

TEST_CASE("batch shapes and bounds") {
  Rng rng = make_rng(7, 0);
  for (Setting setting : {Setting::a, Setting::b, Setting::c}) {
    const auto s = make_suite(setting, 7);
    const auto batch = generate_batch(s, 50, rng);
    CHECK(batch.inputs.shape() == Shape{50, 200});
    REQUIRE(batch.targets.size() == 15);
    for (std::size_t k = 0; k < 15; ++k) {
      CHECK(batch.targets[k].shape() == Shape{50, 100});
      const auto kind = s.tasks[k].activation;
      for (double v : batch.targets[k].values()) {
        if (kind == ActivationKind::sin || kind == ActivationKind::cos) {
          CHECK((v >= -1.0 && v <= 1.0));
        } else if (kind == ActivationKind::sinc) {
          CHECK((v > -0.218 && v <= 1.0));
        } else if (kind == ActivationKind::square) {
          CHECK(v >= 0.0);
        }
      }
    }
  }
  CHECK_THROWS_AS(generate_batch(make_suite(Setting::a, 1), 0, rng), ContractError);
}

TEST_CASE("same-activation tasks converge as delta shrinks") {
  Rng rng = make_rng(8, 0);
  const auto z = generate_batch(make_suite(Setting::a, 8), 64, rng).inputs;
  double prev_same = INFINITY;
  for (double scale : {1.0, 0.1, 0.01}) {
    auto s = make_suite(Setting::a, 8);
    for (auto& t : s.tasks) for (auto& v : t.delta.values()) v *= scale;
    const auto targets = compute_targets(s, z);
    const double same = mse(targets[0], targets[1]);
    const double different = mse(targets[0], targets[5]);
    CHECK(same < prev_same);
    CHECK(different > 10.0 * same);
    prev_same = same;
  }
  CHECK(prev_same < 1e-3);
}

TEST_CASE("splits") {
  const auto s = make_suite(Setting::a, 9);
  const auto splits = make_splits(s, 300, 2000, 9);
  CHECK(splits.val.inputs.shape() == Shape{2000, 200});
  CHECK(splits.val.targets[0].shape() == Shape{2000, 100});
  CHECK(splits.train.size() == 300);
  CHECK(splits.train.batches_per_epoch(100) == 3);
  CHECK(splits.train.batches_per_epoch(128) == 3);

  const auto again = make_splits(s, 300, 2000, 9);
  CHECK(again.val.inputs == splits.val.inputs);
  CHECK(again.train.pool().inputs == splits.train.pool().inputs);

  const auto bigger = make_splits(s, 700, 2000, 9);
  CHECK(bigger.val.inputs == splits.val.inputs);
  CHECK(bigger.val.targets[3] == splits.val.targets[3]);
  CHECK(!(make_splits(s, 300, 2000, 10).val.inputs == splits.val.inputs));
}

TEST_CASE("epoch order is a permutation fixed by seed and epoch") {
  const auto s = make_suite(Setting::b, 2);
  const auto splits = make_splits(s, 250, 10, 2);
  const auto e1 = splits.train.epoch_order(1);
  const auto e2 = splits.train.epoch_order(2);
  CHECK(e1 == splits.train.epoch_order(1));
  CHECK(e1 != e2);
  auto sorted = e1;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);

  const std::vector<std::size_t> rows{4, 0, 249};
  const auto b = splits.train.gather(rows);
  CHECK(b.inputs.shape() == Shape{3, 200});
  for (std::size_t c = 0; c < 200; ++c) CHECK(b.inputs.at(2, c) == splits.train.pool().inputs.at(249, c));
  for (std::size_t c = 0; c < 100; ++c) CHECK(b.targets[14].at(0, c) == splits.train.pool().targets[14].at(4, c));
}

TEST_CASE("suite archive round trip") {
  testutil::TempDir dir("suite");
  const auto s = make_suite(Setting::c, 11);
  export_suite(s, dir.path() / "suite.json");
  const auto back = import_suite(dir.path() / "suite.json");
  CHECK(back.setting == Setting::c);
  CHECK(back.seed == 11);
  CHECK(back.base == s.base);
  REQUIRE(back.task_count() == 15);
  for (std::size_t k = 0; k < 15; ++k) {
    CHECK(back.tasks[k].delta == s.tasks[k].delta);
    CHECK(back.tasks[k].activation == s.tasks[k].activation);
    CHECK(back.tasks[k].multiplier == s.tasks[k].multiplier);
    CHECK(back.tasks[k].group == s.tasks[k].group);
  }
  export_suite(s, dir.path() / "again.json");
  CHECK(testutil::read_file_bytes(dir.path() / "suite.json") == testutil::read_file_bytes(dir.path() / "again.json"));
}
