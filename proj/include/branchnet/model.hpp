#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "branchnet/ops.hpp"
#include "branchnet/tensor.hpp"

namespace branchnet {

/// Declarative topology of a residual network whose blocks after
/// `branch_after_block` are replicated `num_branches` times.
///
/// Blocks are numbered 1..total_blocks across all stages. Blocks 1..B form
/// the shared trunk (together with the stem when B > 0); blocks B+1..total
/// and a classifier head are instantiated once per branch. With B = 0 each
/// branch also owns its stem, i.e. the branches are fully independent nets.
struct BranchedNetConfig {
  std::vector<int> stage_blocks{2, 2, 2};
  std::vector<int> stage_widths{16, 32, 64};
  bool bottleneck = false;
  int branch_after_block = 4;
  int num_branches = 2;
  int num_classes = 10;
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;
  int stem_width = 16;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_max_pool = false;  // 3x3, stride 2, after the stem conv

  int total_blocks() const;
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  /// Desk-scale network: stages [2,2,2], widths [16,32,64], B = 4 of 6.
  static BranchedNetConfig mini();
  /// 200-layer bottleneck network, stages [3,24,36,3], branched after block 39.
  static BranchedNetConfig full_scale();

  bool operator==(const BranchedNetConfig&) const = default;
};

struct BlockTopology {
  int shared_blocks = 0;
  int per_branch_blocks = 0;
  int total_blocks_materialized = 0;
};

BlockTopology block_topology(const BranchedNetConfig& config);

struct LayerCounts {
  int conv_layers = 0;        // main-path convolutions of one full network, stem included
  int projection_convs = 0;   // 1x1 shortcut convolutions, reported separately
  int weighted_layers = 0;    // conv_layers + classifier
};

LayerCounts layer_counts(const BranchedNetConfig& config);

struct ParamReport {
  std::int64_t stem_params = 0;  // summed over replicas when B = 0
  std::int64_t shared_params = 0;
  std::vector<std::int64_t> per_branch_params;
  std::vector<std::int64_t> head_params;
  std::int64_t total_params = 0;
  std::int64_t equivalent_independent_ensemble_params = 0;
  double sharing_ratio = 1.0;
};

/// Trainable parameter counts from closed-form layer arithmetic; no tensors
/// are allocated, so the full-size configuration is cheap to inspect.
ParamReport count_parameters(const BranchedNetConfig& config);

struct BatchNormLayer {
  Tensor gamma, beta, running_mean, running_var;
  Tensor forward(const Tensor& x, Mode mode);
};

struct ConvBnLayer {
  Tensor weight;
  BatchNormLayer bn;
  int stride = 1;
  int pad = 0;
  Tensor forward(const Tensor& x, Mode mode);
};

struct ResidualBlock {
  int index = 0;  // 1-based global block number
  std::vector<ConvBnLayer> path;
  std::optional<ConvBnLayer> projection;
  Tensor forward(const Tensor& x, Mode mode);
};

struct Stem {
  ConvBnLayer conv;
  bool max_pool = false;
  Tensor forward(const Tensor& x, Mode mode);
};

struct ClassifierHead {
  Tensor weight, bias;
};

struct Branch {
  std::optional<Stem> stem;
  std::vector<ResidualBlock> blocks;
  ClassifierHead head;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;     // false for BN running statistics
  bool decay_exempt = false; // BN affine parameters and biases
};

class BranchedNetwork {
 public:
  BranchedNetwork(BranchedNetConfig config, std::optional<Stem> stem, std::vector<ResidualBlock> trunk,
                  std::vector<Branch> branches);
  BranchedNetwork(BranchedNetwork&&) = default;
  BranchedNetwork& operator=(BranchedNetwork&&) = default;
  BranchedNetwork(const BranchedNetwork&) = delete;
  BranchedNetwork& operator=(const BranchedNetwork&) = delete;

  const BranchedNetConfig& config() const { return config_; }

  /// Parameters and buffers under stable names, trunk entries first, then
  /// each branch in order.
  const std::vector<NamedTensor>& registry() const { return registry_; }
  std::vector<NamedTensor> parameters() const;
  const NamedTensor* find(const std::string& name) const;

  /// Independent deep copy.
  BranchedNetwork clone() const;
  /// Overwrites branch `to` (1-based) with the values of branch `from`.
  void copy_branch(int from, int to);

  std::optional<Stem> stem;
  std::vector<ResidualBlock> trunk;
  std::vector<Branch> branches;

 private:
  void rebuild_registry();

  BranchedNetConfig config_;
  std::vector<NamedTensor> registry_;
};

/// He (fan-in) initialized convolutions, unit BN scale, zero biases. Every
/// component draws from a stream keyed by (seed, replica, block), where the
/// trunk shares replica 0 with branch 1, so branch 1 of any network equals
/// the plain network built from the same seed.
BranchedNetwork build_branched_net(const BranchedNetConfig& config, std::uint64_t seed);

/// Trainable parameter counts read back from an instantiated network.
ParamReport count_parameters(const BranchedNetwork& net);

struct ForwardStats {
  int stem_evaluations = 0;
  int trunk_block_evaluations = 0;
  int branch_block_evaluations = 0;
};

/// Evaluates the trunk once and every branch on the shared trunk output.
/// Returns one [N, num_classes] logit tensor per branch.
std::vector<Tensor> forward_all_branches(BranchedNetwork& net, const Tensor& batch, Mode mode,
                                         ForwardStats* stats = nullptr);

}  // namespace branchnet
