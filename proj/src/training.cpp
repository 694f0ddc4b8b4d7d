#include "branchnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "branchnet/ops.hpp"

namespace branchnet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (total_epochs < 0) fail("total_epochs must be non-negative");
  if (!(base_lr >= 0.0)) fail("base_lr must be non-negative");
  if (!(lr_decay_factor > 0.0)) fail("lr_decay_factor must be positive");
  if (lr_decay_interval_epochs < 1) fail("lr_decay_interval_epochs must be at least 1");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(smoothing_epsilon >= 0.0 && smoothing_epsilon <= 1.0)) fail("smoothing_epsilon must lie in [0, 1]");
  if (num_classes < 2) fail("num_classes must be at least 2");
}

std::vector<double> smooth_labels(int label, int num_classes, double epsilon) {
  if (num_classes < 1) throw std::invalid_argument("smooth_labels: num_classes must be positive");
  if (label < 0 || label >= num_classes) {
    throw std::invalid_argument("smooth_labels: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(num_classes) + ")");
  }
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("smooth_labels: epsilon outside [0, 1]");
  const double off = epsilon / num_classes;
  std::vector<double> p(static_cast<std::size_t>(num_classes), off);
  p[label] = 1.0 - epsilon + off;
  return p;
}

Tensor smoothed_targets(std::span<const int> labels, int num_classes, double epsilon) {
  std::vector<double> values;
  values.reserve(labels.size() * num_classes);
  for (int y : labels) {
    const auto p = smooth_labels(y, num_classes, epsilon);
    values.insert(values.end(), p.begin(), p.end());
  }
  return Tensor({static_cast<std::int64_t>(labels.size()), num_classes}, std::move(values));
}

Tensor smoothed_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    throw std::invalid_argument("smoothed_cross_entropy: logits " + to_string(logits.shape()) +
                                " and targets " + to_string(targets.shape()) + " must both be [N, K]");
  }
  check_finite(logits.data(), "smoothed_cross_entropy input");
  const auto rows = logits.dim(0), classes = logits.dim(1);
  const auto z = logits.data(), p = targets.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) total += p[r * classes + k];
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("smoothed_cross_entropy: target row " + std::to_string(r) + " sums to " +
                                  std::to_string(total));
    }
  }
  std::vector<double> q(z.size());
  double loss = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * classes;
    const double peak = *std::max_element(row, row + classes);
    double norm = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) norm += std::exp(row[k] - peak);
    const double log_norm = std::log(norm);
    for (std::int64_t k = 0; k < classes; ++k) {
      const double log_q = row[k] - peak - log_norm;
      q[r * classes + k] = std::exp(log_q);
      loss -= p[r * classes + k] * log_q;
    }
  }
  loss /= static_cast<double>(rows);
  std::vector<double> target(p.begin(), p.end());
  return make_result({1}, {loss}, "smoothed_cross_entropy", {logits},
                     [rows, q = std::move(q), target = std::move(target)](Node& node, std::span<const double> gy) {
                       auto dz = node.inputs[0].mutable_grad();
                       const double s = gy[0] / static_cast<double>(rows);
                       for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += s * (q[i] - target[i]);
                     });
}

BranchLoss combined_branch_loss(const std::vector<Tensor>& branch_logits, const Tensor& targets) {
  if (branch_logits.empty()) throw std::invalid_argument("combined_branch_loss: no branches");
  const Shape& shape = branch_logits.front().shape();
  BranchLoss out;
  Tensor total;
  for (const auto& logits : branch_logits) {
    if (logits.shape() != shape) throw std::invalid_argument("combined_branch_loss: branch shapes differ");
    Tensor loss = smoothed_cross_entropy(logits, targets);
    out.per_branch.push_back(loss.item());
    total = total.defined() ? residual_add(total, loss) : loss;
  }
  out.total = scale(total, 1.0 / static_cast<double>(branch_logits.size()));
  return out;
}

OptimizerState OptimizerState::zeros_like(std::span<const NamedTensor> params) {
  OptimizerState state;
  for (const auto& p : params) {
    state.names.push_back(p.name);
    state.velocity.push_back(Tensor::zeros(p.tensor.shape()));
  }
  return state;
}

void sgd_momentum_step(std::span<const NamedTensor> params, OptimizerState& state, const SgdOptions& options) {
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_momentum_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor theta = params[i].tensor;
    Tensor& v = state.velocity[i];
    if (theta.shape() != v.shape()) {
      throw std::invalid_argument("sgd_momentum_step: velocity shape " + to_string(v.shape()) +
                                  " does not match parameter " + params[i].name + " " + to_string(theta.shape()));
    }
    const double decay = params[i].decay_exempt ? 0.0 : options.weight_decay;
    auto w = theta.data();
    auto vel = v.data();
    const bool has_grad = theta.has_grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has_grad ? theta.grad()[j] : 0.0;
      vel[j] = options.momentum * vel[j] + g + decay * w[j];
      w[j] -= options.learning_rate * vel[j];
    }
  }
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at_epoch: negative epoch");
  const int steps = epoch / config.lr_decay_interval_epochs;
  // 0.05 * 0.1 is 0.005000000000000001 in binary; dividing by the integer
  // 10 instead lands on the nearest double to 0.005.
  const double inverse = 1.0 / config.lr_decay_factor;
  const double rounded = std::round(inverse);
  if (rounded >= 2.0 && std::abs(inverse - rounded) <= 1e-12 * rounded) {
    double divisor = 1.0;
    for (int i = 0; i < steps && divisor < 9.0e15; ++i) divisor *= rounded;
    if (divisor < 9.0e15) return config.base_lr / divisor;
  }
  double lr = config.base_lr;
  for (int i = 0; i < steps; ++i) lr *= config.lr_decay_factor;
  return lr;
}

PreparedAugmentation prepare_augmentation(const Dataset& train_set, const AugmentConfig& config) {
  config.validate();
  PreparedAugmentation out{config, std::nullopt};
  if (config.enable_normalize && !config.channel_means) out.config.channel_means = channel_means(train_set.images);
  if (config.enable_pca) out.basis = fit_pca_basis(train_set.images);
  return out;
}

namespace {

std::vector<Tensor> augment_batch(const Dataset& data, std::span<const std::int64_t> indices,
                                  const PreparedAugmentation& augment, std::uint64_t seed, int epoch, int workers) {
  std::vector<Tensor> out(indices.size());
  const PcaBasis* basis = augment.basis ? &*augment.basis : nullptr;
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto idx = static_cast<std::size_t>(indices[i]);
      const SampleKey key{seed, static_cast<std::uint64_t>(epoch), idx};
      out[i] = augment_pipeline(to_float(data.images[idx]), augment.config, basis, key);
    }
  };
  const std::size_t n = indices.size();
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, n);
  if (threads <= 1) {
    work(0, n);
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(n, begin + chunk);
    if (begin < end) pool.emplace_back(work, begin, end);
  }
  for (auto& th : pool) th.join();
  return out;
}

}  // namespace

TrainState train(BranchedNetwork& net, const Dataset& data, const TrainConfig& config,
                 const PreparedAugmentation& augment, TrainState state, const TrainOptions& options) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.num_classes != net.config().num_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.num_classes) + " classes, network " +
                                std::to_string(net.config().num_classes));
  }
  const auto params = net.parameters();
  if (state.optimizer.velocity.empty()) state.optimizer = OptimizerState::zeros_like(params);
  const int stop = options.stop_epoch.value_or(config.total_epochs);
  const auto n = static_cast<std::int64_t>(data.size());
  const int branches = net.config().num_branches;

  for (int epoch = state.next_epoch; epoch < std::min(stop, config.total_epochs); ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(config, epoch);
    const auto order = epoch_shuffle(n, static_cast<std::uint64_t>(epoch), config.seed);
    std::vector<double> loss_sum(branches, 0.0);

    int batch_index = 0;
    for (std::int64_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::int64_t end = std::min(n, start + config.batch_size);
      const std::span<const std::int64_t> indices(order.data() + start, static_cast<std::size_t>(end - start));
      std::vector<int> labels;
      for (auto i : indices) labels.push_back(data.labels[static_cast<std::size_t>(i)]);

      try {
        const Tensor batch = stack(augment_batch(data, indices, augment, config.seed, epoch, options.workers));
        const Tensor targets = smoothed_targets(labels, config.num_classes, config.smoothing_epsilon);
        for (const auto& p : params) Tensor(p.tensor).zero_grad();
        const auto logits = forward_all_branches(net, batch, Mode::train);
        const BranchLoss loss = combined_branch_loss(logits, targets);
        backward(loss.total);
        sgd_momentum_step(params, state.optimizer, {lr, config.momentum, config.weight_decay});
        for (int b = 0; b < branches; ++b) loss_sum[b] += loss.per_branch[b] * static_cast<double>(end - start);
      } catch (const TensorError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " +
                            e.what());
      }
      for (const auto& p : params) {
        check_finite(p.tensor.data(), p.name);
      }
    }

    EpochRecord record;
    record.epoch = epoch;
    record.learning_rate = lr;
    for (double s : loss_sum) record.branch_loss.push_back(s / static_cast<double>(n));
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    state.history.epochs.push_back(record);
    state.next_epoch = epoch + 1;
    if (options.on_epoch) options.on_epoch(record);
  }
  return state;
}

std::string format_history_csv(const TrainHistory& history, int num_branches, bool include_timing) {
  std::ostringstream out;
  out << "epoch,lr";
  for (int b = 1; b <= num_branches; ++b) out << ",loss_branch_" << b;
  if (include_timing) out << ",wall_seconds";
  out << '\n';
  char buf[40];
  for (const auto& e : history.epochs) {
    out << e.epoch;
    std::snprintf(buf, sizeof(buf), ",%.17g", e.learning_rate);
    out << buf;
    for (double l : e.branch_loss) {
      std::snprintf(buf, sizeof(buf), ",%.17g", l);
      out << buf;
    }
    if (include_timing) {
      std::snprintf(buf, sizeof(buf), ",%.3f", e.wall_seconds);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace branchnet
