#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "treemtl/autodiff.hpp"
#include "treemtl/random.hpp"
#include "treemtl/tensor.hpp"

namespace treemtl {

enum class Setting { a, b, c };

std::string setting_name(Setting s);
Setting parse_setting(std::string_view name);

struct SyntheticTaskSpec {
  ActivationKind activation = ActivationKind::sin;
  double multiplier = 1.0;  // applied inside the activation
  std::size_t noise_index = 0;
  std::size_t group = 0;    // ground-truth relatedness class
  Tensor delta;             // output_dim x input_dim
};

// Regression tasks T = activation(m * ((B + delta_s) z) / phi) that share B
// and differ in their per-task delta. B ~ N(0, 10^2), delta ~ N(0, 2^2),
// phi = input_dim.
struct SyntheticTaskSuite {
  Setting setting = Setting::a;
  std::uint64_t seed = 0;
  std::size_t input_dim = 200;
  std::size_t output_dim = 100;
  double phi = 200.0;
  Tensor base;  // B, output_dim x input_dim
  std::vector<SyntheticTaskSpec> tasks;

  std::size_t task_count() const { return tasks.size(); }
  std::vector<std::size_t> group_labels() const;
};

inline constexpr double kBaseSigma = 10.0;
inline constexpr double kDeltaSigma = 2.0;
inline constexpr std::size_t kSeedsPerActivation = 5;

// Setting a: bent, square, sinc. Setting b: sin scaled by 1, 2, 3 (one
// ground-truth group). Setting c: cos, sinc, square. Five tasks each.
SyntheticTaskSuite make_suite(Setting setting, std::uint64_t seed, std::size_t input_dim = 200,
                              std::size_t output_dim = 100);

// Targets of every task for the rows of z (n x input_dim).
std::vector<Tensor> compute_targets(const SyntheticTaskSuite& suite, const Tensor& z);

struct Batch {
  Tensor inputs;                // n x input_dim
  std::vector<Tensor> targets;  // per task, n x output_dim
};

// Fresh inputs with i.i.d. N(0,1) entries and their targets.
Batch generate_batch(const SyntheticTaskSuite& suite, std::size_t n, Rng& rng);

// Fixed training pool served in a per-epoch shuffled order.
class TrainStream {
 public:
  TrainStream(Batch pool, std::uint64_t seed);

  std::size_t size() const { return pool_.inputs.rows(); }
  std::size_t batches_per_epoch(std::size_t batch_size) const;
  // Row order for the given epoch (1-based); a pure function of seed and epoch.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  Batch gather(std::span<const std::size_t> rows) const;
  const Batch& pool() const { return pool_; }

 private:
  Batch pool_;
  std::uint64_t seed_;
};

struct Splits {
  TrainStream train;
  Batch val;
};

// Validation and training data come from separate streams of `seed`, so the
// validation set does not depend on n_train.
Splits make_splits(const SyntheticTaskSuite& suite, std::size_t n_train, std::size_t n_val,
                   std::uint64_t seed);

// Self-describing JSON archive of a suite (B, deltas, activations, labels).
void export_suite(const SyntheticTaskSuite& suite, const std::filesystem::path& path);
SyntheticTaskSuite import_suite(const std::filesystem::path& path);

}  // namespace treemtl
