#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "branchnet/experiment.hpp"
#include "branchnet/training.hpp"
#include "doctest.h"
#include "suites.hpp"

using namespace branchnet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.model.stage_blocks = {1, 1};
  c.model.stage_widths = {4, 8};
  c.model.stem_width = 4;
  c.model.branch_after_block = 1;
  c.model.num_branches = 2;
  c.model.num_classes = 4;
  c.model.input_height = c.model.input_width = 8;
  c.train.batch_size = 16;
  c.train.total_epochs = 5;
  c.train.base_lr = 0.05;
  c.train.lr_decay_interval_epochs = 3;
  c.train.num_classes = 4;
  c.train.seed = 9;
  c.augment.crop_height = c.augment.crop_width = 8;
  c.data.synthetic.num_classes = 4;
  c.data.synthetic.samples_per_class = 8;
  c.data.synthetic.image_size = 10;
  return c;
}

bool same_tensors(const BranchedNetwork& a, const BranchedNetwork& b) {
  if (a.registry().size() != b.registry().size()) return false;
  for (std::size_t i = 0; i < a.registry().size(); ++i) {
    const auto x = a.registry()[i].tensor.data(), y = b.registry()[i].tensor.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("smooth_labels examples") {
  CHECK(smooth_labels(1, 3, 0.0) == std::vector<double>{0, 1, 0});
  const auto p = smooth_labels(0, 4, 0.2);
  CHECK(p[0] == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(smooth_labels(0, 2, 1.0) == std::vector<double>{0.5, 0.5});
  CHECK_THROWS_AS(smooth_labels(3, 3, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(smooth_labels(-1, 3, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(smooth_labels(0, 3, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(smooth_labels(0, 0, 0.1), std::invalid_argument);
}

TEST_CASE("smoothed targets sum to one") {
  const auto r = suites::smoothing_suite();
  CHECK(r.cases == 27);
  CHECK(r.identity_exact);
  CHECK(r.values_match);
  CHECK(r.max_sum_error <= 1e-12);
}

TEST_CASE("smoothed cross entropy") {
  const Tensor logits({2, 3}, {1.0, 2.0, -0.5, 0.3, 0.3, 4.0});
  const std::vector<int> labels{1, 2};
  // eps = 0 is the negative log likelihood
  const double nll = [&] {
    double s = 0.0;
    const auto z = logits.data();
    for (int r = 0; r < 2; ++r) {
      double m = -INFINITY, t = 0.0;
      for (int k = 0; k < 3; ++k) m = std::max(m, z[r * 3 + k]);
      for (int k = 0; k < 3; ++k) t += std::exp(z[r * 3 + k] - m);
      s += -(z[r * 3 + labels[r]] - m - std::log(t));
    }
    return s / 2;
  }();
  CHECK(smoothed_cross_entropy(logits, smoothed_targets(labels, 3, 0.0)).item() ==
        doctest::Approx(nll).epsilon(1e-14));
  const Tensor even({1, 2}, {0.7, 0.7});
  const std::vector<int> one{0};
  CHECK(smoothed_cross_entropy(even, smoothed_targets(one, 2, 0.1)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(smoothed_cross_entropy(logits, Tensor({2, 3}, {0.5, 0.2, 0.2, 0, 0, 1})), std::invalid_argument);
  CHECK_THROWS_AS(smoothed_cross_entropy(logits, Tensor({3, 2})), std::invalid_argument);

  Tensor z = suites::random_tensor({3, 5}, 4);
  z.set_requires_grad(true);
  const std::vector<int> y{0, 4, 2};
  const Tensor t = smoothed_targets(y, 5, 0.1);
  const auto rep = finite_diff_check([&](const std::vector<Tensor>& in) { return smoothed_cross_entropy(in[0], t); },
                                     {z});
  CHECK(rep.max_relative_error < 1e-6);
}

TEST_CASE("combined branch loss") {
  const Tensor targets = smoothed_targets(std::vector<int>{0, 1}, 3, 0.1);
  const Tensor a = suites::random_tensor({2, 3}, 1);
  const auto single = combined_branch_loss({a}, targets);
  CHECK(single.total.item() == smoothed_cross_entropy(a, targets).item());
  const auto same = combined_branch_loss({a, a, a}, targets);
  CHECK(same.total.item() == doctest::Approx(single.total.item()).epsilon(1e-15));
  CHECK(same.per_branch.size() == 3);
  const Tensor b = suites::random_tensor({2, 3}, 2);
  const auto two = combined_branch_loss({a, b}, targets);
  CHECK(two.total.item() == doctest::Approx(0.5 * (two.per_branch[0] + two.per_branch[1])).epsilon(1e-15));
  CHECK_THROWS_AS(combined_branch_loss({}, targets), std::invalid_argument);
}

TEST_CASE("SGD with momentum and weight decay") {
  auto step = [](double theta, double g, double lr, double mu, double decay, int steps) {
    Tensor p({1}, {theta});
    std::vector<NamedTensor> params{{"w", p, true, false}};
    OptimizerState st = OptimizerState::zeros_like(params);
    for (int i = 0; i < steps; ++i) {
      Tensor(p).mutable_grad()[0] = g;
      sgd_momentum_step(params, st, {lr, mu, decay});
    }
    return std::pair{p.data()[0], st.velocity[0].data()[0]};
  };
  CHECK(step(2.0, 3.0, 0.0, 0.9, 0.1, 3).first == 2.0);
  // mu = 0, decay = 0: plain gradient descent
  CHECK(step(1.0, 0.5, 0.1, 0.0, 0.0, 1).first == doctest::Approx(0.95).epsilon(1e-15));
  // theta 1, g 1 fixed, lr 0.1, mu 0.9: v1 = 1, theta1 = 0.9; v2 = 1.9, theta2 = 0.71
  auto [t1, v1] = step(1.0, 1.0, 0.1, 0.9, 0.0, 1);
  CHECK(v1 == doctest::Approx(1.0));
  CHECK(t1 == doctest::Approx(0.9).epsilon(1e-15));
  auto [t2, v2] = step(1.0, 1.0, 0.1, 0.9, 0.0, 2);
  CHECK(v2 == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(t2 == doctest::Approx(0.71).epsilon(1e-15));
  // decay adds lambda * theta to the gradient
  CHECK(step(2.0, 0.0, 0.5, 0.0, 0.1, 1).first == doctest::Approx(1.9).epsilon(1e-15));

  Tensor p({2}, {1.0, 1.0});
  std::vector<NamedTensor> params{{"w", p, true, false}};
  OptimizerState bad;
  bad.names = {"w"};
  bad.velocity = {Tensor({3})};
  CHECK_THROWS(sgd_momentum_step(params, bad, {}));
}

TEST_CASE("decay-exempt parameters skip weight decay") {
  Tensor p({1}, {2.0});
  std::vector<NamedTensor> params{{"bn.gamma", p, true, true}};
  OptimizerState st = OptimizerState::zeros_like(params);
  Tensor(p).mutable_grad()[0] = 0.0;
  sgd_momentum_step(params, st, {0.5, 0.0, 0.1});
  CHECK(p.data()[0] == 2.0);
}

TEST_CASE("step learning rate schedule") {
  TrainConfig c;
  CHECK(lr_at_epoch(c, 0) == 0.05);
  CHECK(lr_at_epoch(c, 29) == 0.05);
  CHECK(lr_at_epoch(c, 30) == 0.005);
  CHECK(lr_at_epoch(c, 60) == 0.0005);
  CHECK(lr_at_epoch(c, 90) == 0.00005);
  CHECK(lr_at_epoch(c, 94) == 0.00005);
  c.lr_decay_factor = 0.3;
  CHECK(lr_at_epoch(c, 60) == 0.05 * 0.3 * 0.3);
  CHECK_THROWS_AS(lr_at_epoch(c, -1), std::invalid_argument);
}

TEST_CASE("zero epochs leave the network untouched") {
  ExperimentConfig c = tiny_experiment();
  c.train.total_epochs = 0;
  const Dataset data = load_training_set(c.data);
  BranchedNetwork net = build_branched_net(c.model, c.train.seed);
  const BranchedNetwork before = net.clone();
  const auto prep = prepare_augmentation(data, c.augment);
  TrainState st{OptimizerState::zeros_like(net.parameters()), 0, {}};
  st = train(net, data, c.train, prep, st);
  CHECK(st.history.epochs.empty());
  CHECK(same_tensors(net, before));
}

TEST_CASE("training loss decreases on separable data") {
  ExperimentConfig c = tiny_experiment();
  c.data.synthetic.samples_per_class = 50;
  c.train.total_epochs = 10;
  c.train.lr_decay_interval_epochs = 100;
  c.augment.enable_pca = c.augment.enable_jitter = false;
  const Dataset data = load_training_set(c.data);
  REQUIRE(data.size() == 200);
  BranchedNetwork net = build_branched_net(c.model, c.train.seed);
  const auto prep = prepare_augmentation(data, c.augment);
  TrainState st{OptimizerState::zeros_like(net.parameters()), 0, {}};
  st = train(net, data, c.train, prep, st);
  REQUIRE(st.history.epochs.size() == 10);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(st.history.epochs.back().branch_loss[b] < 0.8 * st.history.epochs.front().branch_loss[b]);
  }
}

TEST_CASE("training is reproducible and resumable bitwise") {
  const ExperimentConfig c = tiny_experiment();
  const Dataset data = load_training_set(c.data);
  auto run = [&](int workers) {
    BranchedNetwork net = build_branched_net(c.model, c.train.seed);
    const auto prep = prepare_augmentation(data, c.augment);
    TrainState st{OptimizerState::zeros_like(net.parameters()), 0, {}};
    TrainOptions opts;
    opts.workers = workers;
    st = train(net, data, c.train, prep, st, opts);
    return std::pair{std::move(net), std::move(st)};
  };
  auto [a, sa] = run(1);
  auto [b, sb] = run(3);
  CHECK(same_tensors(a, b));
  CHECK(format_history_csv(sa.history, 2, false) == format_history_csv(sb.history, 2, false));

  // 3 epochs, checkpoint to disk, restore, 2 more
  ExperimentConfig resolved = c;
  const auto prep = prepare_augmentation(data, c.augment);
  resolved.augment = prep.config;
  BranchedNetwork part = build_branched_net(c.model, c.train.seed);
  TrainState st{OptimizerState::zeros_like(part.parameters()), 0, {}};
  TrainOptions opts;
  opts.stop_epoch = 3;
  st = train(part, data, c.train, prep, st, opts);
  const fs::path file = fs::temp_directory_path() / ("branchnet_resume_" + std::to_string(std::random_device{}()));
  save_checkpoint(file, make_checkpoint(resolved, part, st));
  RestoredRun back = restore_checkpoint(load_checkpoint(file));
  fs::remove(file);
  CHECK(back.state.next_epoch == 3);
  CHECK(back.config.augment == prep.config);
  back.state = train(back.net, data, back.config.train, prepare_augmentation(data, back.config.augment), back.state);
  CHECK(same_tensors(back.net, a));
  CHECK(format_history_csv(back.state.history, 2, false) == format_history_csv(sa.history, 2, false));
}

TEST_CASE("non-finite loss aborts training") {
  ExperimentConfig c = tiny_experiment();
  c.train.base_lr = 1e300;
  c.train.total_epochs = 3;
  const Dataset data = load_training_set(c.data);
  BranchedNetwork net = build_branched_net(c.model, c.train.seed);
  const auto prep = prepare_augmentation(data, c.augment);
  TrainState st{OptimizerState::zeros_like(net.parameters()), 0, {}};
  CHECK_THROWS_AS(train(net, data, c.train, prep, st), TrainingError);
}

TEST_CASE("history csv layout") {
  TrainHistory h;
  h.epochs.push_back({0, 0.05, {1.5, 1.25}, 2.0});
  const std::string without = format_history_csv(h, 2, false);
  CHECK(without.rfind("epoch,lr,loss_branch_1,loss_branch_2\n", 0) == 0);
  CHECK(without.find("wall") == std::string::npos);
  CHECK(format_history_csv(h, 2, true).find("wall_seconds") != std::string::npos);
}
