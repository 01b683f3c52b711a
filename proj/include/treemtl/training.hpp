#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "treemtl/error.hpp"
#include "treemtl/network.hpp"
#include "treemtl/synthetic.hpp"

namespace treemtl {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  double lr_weights = 1e-3;
  double lr_branch = 1e-7;
  std::size_t batch_size = 100;
  std::size_t epochs = 500;
  std::size_t warmup_epochs = 50;
  double tau0 = 50.0;
  double tau_floor = 0.1;
  AdamConfig adam;
  std::uint64_t seed = 1;
  StraightThroughMode st_mode = StraightThroughMode::hard_activations;
  std::size_t val_samples = 8;
  // Stop once validation loss has not improved for this many epochs; 0 disables.
  std::size_t patience = 0;
  // Rescale the weight gradient to this global L2 norm when above it; 0 disables.
  double clip_norm = 0.0;

  // Learning rates may be zero (a frozen group) and warmup may span the
  // whole run.
  void validate() const;
};

// First/second moments for a list of parameters.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

AdamState make_adam_state(std::span<const NamedParameter> params);

// One bias-corrected Adam update using each parameter's gradient slot.
void adam_step(std::span<const NamedParameter> params, AdamState& state, double lr,
               const AdamConfig& cfg = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double tau = 0.0;
  double train_total = 0.0;
  double val_total = 0.0;
  std::vector<double> val_tasks;
  std::vector<Tensor> logits;  // one snapshot per block
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

// Numeric abort during training. Carries enough to explain where it happened.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::string snapshot)
      : NumericError(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

enum class EvalMode { noisy_averaged, noiseless };

// Per-task MSE over a full data set. Noisy mode averages `samples`
// independent routings.
std::vector<double> evaluate(const TreeNetwork& net, const Batch& data, EvalMode mode,
                             std::size_t samples, Rng& rng);

// Per-block parent choice of every child.
using Routing = std::vector<std::vector<std::size_t>>;

Routing sample_routing(const TreeNetwork& net, SampleMode mode, Rng& rng);

// Tape-free forward under a given routing. Only parent ops that feed some
// task are evaluated; `cache` may be shared between calls on the same input
// to reuse op outputs with identical ancestry.
class InferenceCache {
 public:
  const Tensor* find(const std::vector<std::size_t>& ancestry) const;
  const Tensor& insert(std::vector<std::size_t> ancestry, Tensor value);

 private:
  std::map<std::vector<std::size_t>, Tensor> entries_;
};

std::vector<Tensor> infer(const TreeNetwork& net, const Tensor& input, const Routing& routing,
                          InferenceCache* cache = nullptr);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Joint search over weights and branch logits. Weights follow Adam every
// step; logits only after warmup, with tau counted in post-warmup steps.
TrainLog train_search(TreeNetwork& net, const Splits& data, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

// Weights-only training of a network whose routing is fixed; validation is
// noiseless. Used for retraining a selected architecture.
TrainLog train_fixed(TreeNetwork& net, const Splits& data, const TrainConfig& config,
                     const EpochCallback& on_epoch = {});

void write_log_csv(const TrainLog& log, std::size_t task_count, const std::string& header,
                   const std::filesystem::path& path);
void write_logits_history(const TrainLog& log, const std::string& header,
                          const std::filesystem::path& path);

}  // namespace treemtl
