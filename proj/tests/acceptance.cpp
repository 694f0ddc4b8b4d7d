// One PASS/FAIL line per acceptance criterion on stdout; run details go to
// stderr. `--criteria 1,2,9` restricts the run.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "branchnet/experiment.hpp"
#include "suites.hpp"

using namespace branchnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path source(const std::string& rel) { return fs::path(BRANCHNET_SOURCE_DIR) / rel; }

Outcome gradients() {
  bool ok = true;
  int min_shapes = 1 << 30;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : suites::gradient_suite(10)) {
    ok = ok && r.passed && r.max_relative_error < 1e-4;
    min_shapes = std::min(min_shapes, r.shapes);
    worst = std::max(worst, r.max_relative_error);
    if (!r.passed) failed += " " + r.op;
    std::fprintf(stderr, "  grad %-24s shapes %2d  max rel err %.3e\n", r.op.c_str(), r.shapes, r.max_relative_error);
  }
  ok = ok && min_shapes >= 10;
  return {ok, fmt("max rel err %.2e over >= %d shapes per op%s", worst, min_shapes, failed.c_str())};
}

Outcome smoothing() {
  const auto r = suites::smoothing_suite();
  const bool ok = r.identity_exact && r.values_match && r.max_sum_error <= 1e-12 && r.cases == 27;
  return {ok, fmt("%d cases, formula match %s, exact identity %s, max |sum-1| in double %.1e", r.cases,
                  r.values_match ? "yes" : "no", r.identity_exact ? "yes" : "no", r.max_sum_error)};
}

Outcome topology() {
  const ExperimentConfig c = load_experiment(source("configs/full_scale.json"));
  const auto t = block_topology(c.model);
  const auto l = layer_counts(c.model);
  const bool ok = t.total_blocks_materialized == 93 && l.weighted_layers == 200 && l.conv_layers == 199;
  return {ok, fmt("%d blocks, %d weighted layers (%d conv + classifier)", t.total_blocks_materialized,
                  l.weighted_layers, l.conv_layers)};
}

Outcome economy() {
  BranchedNetConfig c = load_experiment(source("configs/full_scale.json")).model;
  BranchedNetConfig single = c;
  single.num_branches = 1;
  single.branch_after_block = 0;
  const std::int64_t one = count_parameters(single).total_params;
  const std::int64_t total = count_parameters(c).total_params;
  bool monotone = true;
  double prev = INFINITY;
  for (int b = 0; b <= c.total_blocks(); ++b) {
    c.branch_after_block = b;
    const double r = count_parameters(c).sharing_ratio;
    monotone = monotone && r <= prev;
    prev = r;
  }
  return {total < 2 * one && monotone,
          fmt("total %lld < 2 x %lld; ratio non-increasing over B=0..%d: %s", static_cast<long long>(total),
              static_cast<long long>(one), c.total_blocks(), monotone ? "yes" : "no")};
}

Outcome improvement() {
  const double a = relative_improvement(std::vector<double>{22.02, 22.09}, 20.81);
  const double b = relative_improvement(std::vector<double>{21.24, 21.32}, 20.31);
  return {std::abs(a - 5.65) <= 0.01 && std::abs(b - 4.56) <= 0.01, fmt("%.4f and %.4f", a, b)};
}

Outcome schedule() {
  const TrainConfig c;
  const double want[] = {0.05, 0.005, 0.0005, 0.00005};
  bool ok = true;
  std::string got;
  for (int i = 0; i < 4; ++i) {
    const double lr = lr_at_epoch(c, 30 * i);
    ok = ok && lr == want[i];
    got += fmt("%s%g", i ? " / " : "", lr);
  }
  return {ok, got};
}

struct TrendRun {
  std::vector<double> branch_top1;
  double ensemble_top1 = 0.0;
  double seconds = 0.0;
};

TrendRun trend_run(ExperimentConfig c, double epsilon, std::uint64_t seed) {
  c.train.smoothing_epsilon = epsilon;
  c.train.seed = seed;
  const Dataset train_set = load_training_set(c.data);
  const Dataset test_set = load_test_set(c.data);
  const auto start = std::chrono::steady_clock::now();
  BranchedNetwork net = build_branched_net(c.model, seed);
  const auto prep = prepare_augmentation(train_set, c.augment);
  TrainState state{OptimizerState::zeros_like(net.parameters()), 0, {}};
  state = train(net, train_set, c.train, prep, state);
  const EvalReport rep = evaluate(net, test_set, prep.config, c.train.batch_size);
  TrendRun r{rep.branch_top1, rep.ensemble_top1,
             std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
  std::fprintf(stderr, "  trend eps %.1f seed %llu: branches %.2f %.2f  ensemble %.2f  (%.0f s)\n", epsilon,
               static_cast<unsigned long long>(seed), r.branch_top1[0], r.branch_top1[1], r.ensemble_top1, r.seconds);
  return r;
}

Outcome ensemble_trend() {
  const ExperimentConfig base = load_experiment(source("configs/ensemble_trend.json"));
  const int seeds = 5;
  struct Setting {
    double branch = 0.0, ensemble = 0.0, seconds = 0.0;
  };
  auto run_setting = [&](double eps) {
    Setting s;
    for (int k = 0; k < seeds; ++k) {
      const TrendRun r = trend_run(base, eps, static_cast<std::uint64_t>(k));
      s.branch += (r.branch_top1[0] + r.branch_top1[1]) / 2.0 / seeds;
      s.ensemble += r.ensemble_top1 / seeds;
      s.seconds += r.seconds;
    }
    return s;
  };
  const Setting hard = run_setting(0.0), smooth = run_setting(0.1);
  const bool ok = hard.ensemble <= hard.branch && smooth.ensemble <= smooth.branch && smooth.branch <= hard.branch;
  return {ok, fmt("%d seeds; eps 0: branch %.2f ensemble %.2f; eps 0.1: branch %.2f ensemble %.2f; "
                  "minutes per setting %.1f / %.1f",
                  seeds, hard.branch, hard.ensemble, smooth.branch, smooth.ensemble, hard.seconds / 60,
                  smooth.seconds / 60)};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Outcome determinism() {
  ExperimentConfig c = load_experiment(source("configs/mini.json"));
  c.model.input_height = c.model.input_width = 16;
  c.augment.crop_height = c.augment.crop_width = 16;
  c.data.synthetic.image_size = 18;
  c.data.synthetic.samples_per_class = 8;
  c.train.batch_size = 16;
  c.train.total_epochs = 4;
  c.train.lr_decay_interval_epochs = 2;
  const Dataset data = load_training_set(c.data);
  const fs::path dir = fs::temp_directory_path() / ("branchnet_accept_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);

  auto finish = [&](BranchedNetwork& net, TrainState state, std::optional<int> stop, const std::string& name) {
    const auto prep = prepare_augmentation(data, c.augment);
    ExperimentConfig resolved = c;
    resolved.augment = prep.config;
    TrainOptions opts;
    opts.stop_epoch = stop;
    state = train(net, data, c.train, prep, std::move(state), opts);
    save_checkpoint(dir / (name + ".bin"), make_checkpoint(resolved, net, state));
    std::ofstream(dir / (name + ".csv")) << format_history_csv(state.history, c.model.num_branches, false);
  };
  auto fresh = [&](const std::string& name, std::optional<int> stop) {
    BranchedNetwork net = build_branched_net(c.model, c.train.seed);
    finish(net, TrainState{OptimizerState::zeros_like(net.parameters()), 0, {}}, stop, name);
  };
  fresh("a", std::nullopt);
  fresh("b", std::nullopt);
  fresh("part", 2);
  RestoredRun back = restore_checkpoint(load_checkpoint(dir / "part.bin"));
  finish(back.net, std::move(back.state), std::nullopt, "resumed");

  const bool same_history = file_bytes(dir / "a.csv") == file_bytes(dir / "b.csv");
  const bool same_ck = file_bytes(dir / "a.bin") == file_bytes(dir / "b.bin");
  const bool resume_ck = file_bytes(dir / "a.bin") == file_bytes(dir / "resumed.bin");
  const bool resume_history = file_bytes(dir / "a.csv") == file_bytes(dir / "resumed.csv");
  fs::remove_all(dir);
  return {same_history && same_ck && resume_ck && resume_history,
          fmt("history equal %s, checkpoint equal %s, 2+2 resume equals 4 epochs %s", same_history ? "yes" : "no",
              same_ck ? "yes" : "no", resume_ck && resume_history ? "yes" : "no")};
}

Outcome augmentation() {
  bool ok = true;
  std::string failed;
  for (const auto& r : suites::augmentation_suite()) {
    ok = ok && r.passed;
    if (!r.passed) failed += "; failed: " + r.name;
    std::fprintf(stderr, "  augment %-48s %s  measured %.3e\n", r.name.c_str(), r.passed ? "ok" : "FAIL", r.measured);
  }
  return {ok, "flip, identities, crop shape and uniformity, PCA basis, pooled mean" + failed};
}

Outcome oracles() {
  double worst = 0.0;
  for (const auto& r : suites::oracle_suite()) {
    worst = std::max(worst, r.max_abs_error);
    std::fprintf(stderr, "  oracle %-14s max abs err %.3e\n", r.op.c_str(), r.max_abs_error);
  }
  const double trunk = suites::trunk_gradient_decomposition_error();
  return {worst <= 1e-12 && trunk <= 1e-10, fmt("kernels max abs err %.2e, trunk gradient err %.2e", worst, trunk)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("--criteria", only, "comma-separated criterion numbers")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> chosen(only.begin(), only.end());

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"label smoothing exactness", smoothing},
      {"topology reproduction", topology},
      {"parameter economy", economy},
      {"relative improvement reproduction", improvement},
      {"learning rate schedule", schedule},
      {"ensemble and smoothing trend", ensemble_trend},
      {"determinism", determinism},
      {"augmentation properties", augmentation},
      {"oracle equivalence", oracles},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!chosen.empty() && !chosen.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.passed;
    std::printf("criterion %2d %s: %s (%s)\n", id, o.passed ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
