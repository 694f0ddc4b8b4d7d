#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchnet/augment.hpp"
#include "branchnet/data_io.hpp"
#include "branchnet/evaluation.hpp"
#include "branchnet/model.hpp"
#include "branchnet/tensor.hpp"

namespace branchnet {

/// Defaults are the full-size ImageNet schedule: batch 128, 95 epochs,
/// lr 0.05 decayed x0.1 every 30 epochs, weight decay 1e-4.
struct TrainConfig {
  int batch_size = 128;
  int total_epochs = 95;
  double base_lr = 0.05;
  double lr_decay_factor = 0.1;
  int lr_decay_interval_epochs = 30;
  double weight_decay = 0.0001;
  double momentum = 0.9;
  double smoothing_epsilon = 0.1;
  std::uint64_t seed = 0;
  int num_classes = 10;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Smoothed target: 1 - eps + eps/K on the true class, eps/K elsewhere.
std::vector<double> smooth_labels(int label, int num_classes, double epsilon);
/// Stacks smoothed targets for a batch into [N, K].
Tensor smoothed_targets(std::span<const int> labels, int num_classes, double epsilon);

/// Mean over rows of -sum_i p_i log softmax(logits)_i. The gradient with
/// respect to the logits is (softmax(logits) - p) / N.
Tensor smoothed_cross_entropy(const Tensor& logits, const Tensor& targets);

struct BranchLoss {
  Tensor total;                    // mean of the branch losses, differentiable
  std::vector<double> per_branch;  // values of the individual branch losses
};

BranchLoss combined_branch_loss(const std::vector<Tensor>& branch_logits, const Tensor& targets);

struct OptimizerState {
  std::vector<std::string> names;
  std::vector<Tensor> velocity;

  static OptimizerState zeros_like(std::span<const NamedTensor> params);
};

struct SgdOptions {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0001;
};

/// v <- momentum * v + g + decay * theta; theta <- theta - lr * v.
/// Entries flagged decay_exempt skip the decay term. A parameter without a
/// gradient buffer is treated as having zero gradient.
void sgd_momentum_step(std::span<const NamedTensor> params, OptimizerState& state, const SgdOptions& options);

/// base_lr * factor^floor(epoch / interval)
double lr_at_epoch(const TrainConfig& config, int epoch);

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  std::vector<double> branch_loss;  // sample-weighted mean training loss
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<EvalReport> evaluations;
};

struct TrainState {
  OptimizerState optimizer;
  int next_epoch = 0;
  TrainHistory history;
};

struct TrainOptions {
  int workers = 1;              // augmentation fan-out; never changes results
  std::optional<int> stop_epoch;  // exclusive; defaults to total_epochs
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Fills in per-dataset augmentation statistics that were left unset
/// (channel means) and fits the PCA basis when PCA noise is enabled.
struct PreparedAugmentation {
  AugmentConfig config;
  std::optional<PcaBasis> basis;
};
PreparedAugmentation prepare_augmentation(const Dataset& train_set, const AugmentConfig& config);

/// Runs epochs state.next_epoch .. stop_epoch - 1: shuffle, augment each
/// sample, forward every branch, mean smoothed loss, backward, SGD step.
TrainState train(BranchedNetwork& net, const Dataset& data, const TrainConfig& config,
                 const PreparedAugmentation& augment, TrainState state, const TrainOptions& options = {});

/// epoch,lr,loss_branch_1..K,wall_seconds (the last column only when
/// `include_timing`).
std::string format_history_csv(const TrainHistory& history, int num_branches, bool include_timing);

}  // namespace branchnet
