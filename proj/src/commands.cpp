#include "branchnet/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <ostream>

#include "branchnet/experiment.hpp"

namespace branchnet {

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path.string() + ": cannot open for writing");
  f << text;
  if (!f) throw std::runtime_error(path.string() + ": write failed");
}

ExperimentConfig load_config(const CommonOptions& common) {
  if (!common.config) throw ConfigError("--config is required");
  if (common.precision != "ref" && common.precision != "fast") {
    throw ConfigError("--precision: expected ref or fast, got " + common.precision);
  }
  if (common.workers < 1) throw ConfigError("--workers: must be at least 1");
  return load_experiment(*common.config, common.overrides);
}

fs::path output_root(const CommonOptions& common, const ExperimentConfig& config) {
  return common.out.empty() ? fs::path(config.output_dir) : common.out;
}

void precision_note(const CommonOptions& common, std::ostream& err) {
  if (common.precision == "fast") err << "note: fast precision runs the float64 reference kernels\n";
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::string timing_csv(const TrainHistory& history) {
  std::string s = "epoch,wall_seconds\n";
  char buf[64];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f\n", e.epoch, e.wall_seconds);
    s += buf;
  }
  return s;
}

}  // namespace

fs::path make_run_directory(const fs::path& root, const std::string& fingerprint) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &utc);
  const std::string base = fingerprint + "-" + stamp;
  fs::create_directories(root);
  for (int suffix = 0;; ++suffix) {
    const fs::path dir = root / (suffix == 0 ? base : base + "-" + std::to_string(suffix));
    if (fs::create_directory(dir)) return dir;
  }
}

int cmd_train(const CommonOptions& common, const TrainCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    ExperimentConfig config = load_config(common);
    std::optional<RestoredRun> restored;
    if (cmd.resume) {
      restored.emplace(restore_checkpoint(load_checkpoint(*cmd.resume)));
      const std::string diff = first_model_difference(restored->config.model, config.model);
      if (!diff.empty()) throw ConfigError(diff + ": checkpoint architecture differs from the config");
    }
    precision_note(common, err);
    const Dataset train_set = load_training_set(config.data);
    const Dataset test_set = load_test_set(config.data);
    const PreparedAugmentation prepared = prepare_augmentation(train_set, config.augment);

    // The checkpoint keeps the fitted normalization so eval reproduces it.
    ExperimentConfig resolved = config;
    resolved.augment = prepared.config;
    const std::string fingerprint = config_fingerprint(resolved);

    BranchedNetwork net = restored ? std::move(restored->net) : build_branched_net(config.model, config.train.seed);
    TrainState state = restored ? std::move(restored->state) : TrainState{};

    const fs::path run_dir = make_run_directory(output_root(common, config), config_fingerprint(config));
    out << "run directory: " << run_dir.string() << '\n';
    write_text(run_dir / "config.json", to_json(resolved).dump(2) + "\n");

    TrainOptions options;
    options.workers = common.workers;
    options.on_epoch = [&](const EpochRecord& r) {
      out << "epoch " << r.epoch + 1 << "/" << config.train.total_epochs << " lr " << r.learning_rate << " loss";
      for (double l : r.branch_loss) out << ' ' << l;
      out << '\n';
      out.flush();
    };
    try {
      state = train(net, train_set, config.train, prepared, std::move(state), options);
    } catch (const TrainingError& e) {
      err << "training failed: " << e.what() << '\n';
      return kExitFailure;
    }

    save_checkpoint(run_dir / "checkpoint.bin", make_checkpoint(resolved, net, state));
    write_text(run_dir / "history.csv", format_history_csv(state.history, config.model.num_branches, false));
    write_text(run_dir / "timing.csv", timing_csv(state.history));

    const EvalReport report = evaluate(net, test_set, prepared.config, config.train.batch_size, fingerprint);
    write_text(run_dir / "report.txt", format_report_table(report));
    write_text(run_dir / "report.csv", format_report_csv(report));
    out << format_report_table(report);
    return 0;
  });
}

int cmd_eval(const CommonOptions& common, const EvalCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (common.precision != "ref" && common.precision != "fast") {
      throw ConfigError("--precision: expected ref or fast, got " + common.precision);
    }
    RestoredRun run = restore_checkpoint(load_checkpoint(cmd.checkpoint));
    DataConfig data = run.config.data;
    if (common.config) {
      const ExperimentConfig given = load_experiment(*common.config, common.overrides);
      const std::string diff = first_model_difference(run.config.model, given.model);
      if (!diff.empty()) {
        const auto a = to_json(run.config.model), b = to_json(given.model);
        const std::string key = diff.substr(diff.find('.') + 1);
        throw ConfigError(diff + ": checkpoint has " + a.at(key).dump() + ", config has " + b.at(key).dump());
      }
      data = given.data;
    } else if (!common.overrides.empty()) {
      throw ConfigError("--set requires --config for eval");
    }
    precision_note(common, err);
    const Dataset test_set = load_test_set(data);
    const std::string fingerprint = config_fingerprint(run.config);
    const EvalOutputs outputs =
        evaluate_detailed(run.net, test_set, run.config.augment, run.config.train.batch_size, fingerprint);
    const fs::path root = common.out.empty() ? fs::path(run.config.output_dir) : common.out;
    const fs::path run_dir = make_run_directory(root, fingerprint);
    out << "run directory: " << run_dir.string() << '\n';
    write_text(run_dir / "report.txt", format_report_table(outputs.report));
    write_text(run_dir / "report.csv", format_report_csv(outputs.report));
    write_text(run_dir / "probabilities.csv", format_probabilities_csv(outputs));
    out << format_report_table(outputs.report);
    return 0;
  });
}

int cmd_inspect(const CommonOptions& common, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = load_config(common);
    const BranchedNetConfig& m = config.model;
    const BlockTopology topo = block_topology(m);
    const LayerCounts layers = layer_counts(m);
    const ParamReport params = count_parameters(m);
    out << "blocks per branch:      " << m.total_blocks() << '\n';
    out << "branch point B:         " << m.branch_after_block << '\n';
    out << "branches K_b:           " << m.num_branches << '\n';
    out << "shared blocks:          " << topo.shared_blocks << '\n';
    out << "per-branch blocks:      " << topo.per_branch_blocks << '\n';
    out << "total blocks:           " << topo.total_blocks_materialized << '\n';
    out << "conv layers:            " << layers.conv_layers << '\n';
    out << "projection convs:       " << layers.projection_convs << '\n';
    out << "weighted layers:        " << layers.weighted_layers << '\n';
    out << "stem params:            " << params.stem_params << '\n';
    out << "shared params:          " << params.shared_params << '\n';
    for (std::size_t b = 0; b < params.per_branch_params.size(); ++b) {
      out << "branch " << b + 1 << " params:        " << params.per_branch_params[b] << " (head "
          << params.head_params[b] << ")\n";
    }
    out << "total params:           " << params.total_params << '\n';
    out << "independent ensemble:   " << params.equivalent_independent_ensemble_params << '\n';
    char ratio[32];
    std::snprintf(ratio, sizeof(ratio), "%.6f", params.sharing_ratio);
    out << "sharing ratio:          " << ratio << '\n';
    return 0;
  });
}

int cmd_compare(const CommonOptions& common, const CompareCommand& cmd, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = load_config(common);
    std::vector<int> sweep = cmd.branch_points;
    if (sweep.empty()) {
      for (int b = 0; b <= config.model.total_blocks(); ++b) sweep.push_back(b);
    }
    std::string csv = "B,total_params,sharing_ratio,materialized_blocks\n";
    for (int b : sweep) {
      BranchedNetConfig m = config.model;
      m.branch_after_block = b;
      try {
        m.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model.branch_after_block: ") + e.what());
      }
      const ParamReport p = count_parameters(m);
      char row[128];
      std::snprintf(row, sizeof(row), "%d,%lld,%.9f,%d\n", b, static_cast<long long>(p.total_params),
                    p.sharing_ratio, block_topology(m).total_blocks_materialized);
      csv += row;
    }
    const fs::path run_dir = make_run_directory(output_root(common, config), config_fingerprint(config));
    write_text(run_dir / "compare.csv", csv);
    err << "run directory: " << run_dir.string() << '\n';
    out << csv;
    return 0;
  });
}

int cmd_augment_preview(const CommonOptions& common, const PreviewCommand& cmd, std::ostream& out,
                        std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = load_config(common);
    if (cmd.count < 0) throw ConfigError("--count: must be non-negative");
    const ByteImage input = read_ppm(cmd.input);
    if (cmd.count == 0) return 0;

    AugmentConfig augment = config.augment;
    if (!augment.enable_crop) {
      augment.crop_height = input.height;
      augment.crop_width = input.width;
    }
    if (augment.crop_height > input.height || augment.crop_width > input.width) {
      throw std::runtime_error(cmd.input.string() + ": image is smaller than the crop size");
    }
    std::optional<PcaBasis> basis;
    if (augment.enable_pca) basis = fit_pca_basis(std::span<const ByteImage>(&input, 1));
    const Image source = to_float(input);

    const fs::path run_dir = make_run_directory(output_root(common, config), config_fingerprint(config));
    out << "run directory: " << run_dir.string() << '\n';
    for (int i = 0; i < cmd.count; ++i) {
      const SampleKey key{config.train.seed, 0, static_cast<std::uint64_t>(i)};
      const Image result = augment_image(source, augment, basis ? &*basis : nullptr, key);
      char name[32];
      std::snprintf(name, sizeof(name), "augmented_%04d.ppm", i);
      write_ppm(run_dir / name, to_bytes(result));
      out << (run_dir / name).string() << '\n';
    }
    return 0;
  });
}

}  // namespace branchnet
