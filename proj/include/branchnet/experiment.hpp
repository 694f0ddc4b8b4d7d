#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "branchnet/augment.hpp"
#include "branchnet/data_io.hpp"
#include "branchnet/model.hpp"
#include "branchnet/training.hpp"

namespace branchnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" or "cifar10"
  // cifar10
  std::string directory;
  int max_train = 5000;
  int max_test = 1000;
  // synthetic
  SyntheticSpec synthetic;
  int test_samples_per_class = 20;
  std::uint64_t seed = 1234;

  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  BranchedNetConfig model;
  TrainConfig train;
  AugmentConfig augment;
  DataConfig data;
  std::string output_dir = "runs";

  /// Cross-section checks on top of each section's own validation.
  void validate() const;
};

/// Strict conversion: unknown keys and out-of-range values throw ConfigError
/// naming the key path.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const BranchedNetConfig& config);
BranchedNetConfig model_from_json(const nlohmann::json& j);

/// Applies "section.key=value". The value is parsed as JSON when possible
/// and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Parses a config file; syntax errors report line and column.
ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// FNV-1a 64 over the canonical JSON dump, as 16 hex digits.
std::string config_fingerprint(const ExperimentConfig& config);

/// First field at which two model configs differ, or empty when equal.
std::string first_model_difference(const BranchedNetConfig& a, const BranchedNetConfig& b);

Dataset load_training_set(const DataConfig& data);
Dataset load_test_set(const DataConfig& data);

/// Network tensors, optimizer velocities ("optim.velocity.<name>") and a
/// JSON header holding the config, next epoch, RNG cursor and history.
Checkpoint make_checkpoint(const ExperimentConfig& config, const BranchedNetwork& net, const TrainState& state);

struct RestoredRun {
  ExperimentConfig config;
  BranchedNetwork net;
  TrainState state;
};

RestoredRun restore_checkpoint(const Checkpoint& checkpoint);

}  // namespace branchnet
