#include "branchnet/model.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "branchnet/random.hpp"

namespace branchnet {

namespace {

constexpr int kBottleneckExpansion = 4;
constexpr int kStemPoolWindow = 3;
constexpr int kStemPoolStride = 2;

struct BlockGeometry {
  int index;
  int stage;
  int in_width;
  int out_width;
  int stride;
  bool projection;
};

std::vector<BlockGeometry> block_geometry(const BranchedNetConfig& c) {
  std::vector<BlockGeometry> blocks;
  int in_width = c.stem_width;
  int index = 1;
  for (std::size_t s = 0; s < c.stage_blocks.size(); ++s) {
    for (int p = 0; p < c.stage_blocks[s]; ++p) {
      const int out_width = c.stage_widths[s];
      const int stride = (p == 0 && s > 0) ? 2 : 1;
      blocks.push_back({index++, static_cast<int>(s), in_width, out_width, stride,
                        stride != 1 || in_width != out_width});
      in_width = out_width;
    }
  }
  return blocks;
}

std::int64_t conv_bn_params(std::int64_t in, std::int64_t out, std::int64_t k) {
  return in * out * k * k + 2 * out;
}

std::int64_t block_params(const BranchedNetConfig& c, const BlockGeometry& b) {
  std::int64_t n = 0;
  if (c.bottleneck) {
    const int mid = b.out_width / kBottleneckExpansion;
    n += conv_bn_params(b.in_width, mid, 1) + conv_bn_params(mid, mid, 3) + conv_bn_params(mid, b.out_width, 1);
  } else {
    n += conv_bn_params(b.in_width, b.out_width, 3) + conv_bn_params(b.out_width, b.out_width, 3);
  }
  if (b.projection) n += conv_bn_params(b.in_width, b.out_width, 1);
  return n;
}

std::int64_t stem_params(const BranchedNetConfig& c) {
  return conv_bn_params(c.input_channels, c.stem_width, c.stem_kernel);
}

std::int64_t head_params(const BranchedNetConfig& c) {
  const std::int64_t features = c.stage_widths.back();
  return features * c.num_classes + c.num_classes;
}

int conv_out(int size, int kernel, int stride, int pad) { return (size + 2 * pad - kernel) / stride + 1; }

ConvBnLayer make_conv_bn(int in, int out, int kernel, int stride, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  Tensor weight({out, in, kernel, kernel});
  for (double& w : weight.data()) w = normal(rng);
  weight.set_requires_grad(true);
  ConvBnLayer layer;
  layer.weight = weight;
  layer.bn.gamma = Tensor(Shape{out}, 1.0).set_requires_grad(true);
  layer.bn.beta = Tensor(Shape{out}, 0.0).set_requires_grad(true);
  layer.bn.running_mean = Tensor(Shape{out}, 0.0);
  layer.bn.running_var = Tensor(Shape{out}, 1.0);
  layer.stride = stride;
  layer.pad = kernel / 2;
  return layer;
}

Stem make_stem(const BranchedNetConfig& c, std::uint64_t seed, std::uint64_t replica) {
  auto rng = keyed_engine({seed, replica, 0});
  Stem stem;
  stem.conv = make_conv_bn(c.input_channels, c.stem_width, c.stem_kernel, c.stem_stride, rng);
  stem.max_pool = c.stem_max_pool;
  return stem;
}

ResidualBlock make_block(const BranchedNetConfig& c, const BlockGeometry& g, std::uint64_t seed,
                         std::uint64_t replica) {
  auto rng = keyed_engine({seed, replica, static_cast<std::uint64_t>(g.index)});
  ResidualBlock block;
  block.index = g.index;
  if (c.bottleneck) {
    const int mid = g.out_width / kBottleneckExpansion;
    block.path.push_back(make_conv_bn(g.in_width, mid, 1, 1, rng));
    block.path.push_back(make_conv_bn(mid, mid, 3, g.stride, rng));
    block.path.push_back(make_conv_bn(mid, g.out_width, 1, 1, rng));
  } else {
    block.path.push_back(make_conv_bn(g.in_width, g.out_width, 3, g.stride, rng));
    block.path.push_back(make_conv_bn(g.out_width, g.out_width, 3, 1, rng));
  }
  if (g.projection) block.projection = make_conv_bn(g.in_width, g.out_width, 1, g.stride, rng);
  return block;
}

ClassifierHead make_head(const BranchedNetConfig& c, std::uint64_t seed, std::uint64_t replica) {
  auto rng = keyed_engine({seed, replica, static_cast<std::uint64_t>(c.total_blocks() + 1)});
  const int features = c.stage_widths.back();
  std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / features));
  ClassifierHead head;
  head.weight = Tensor({c.num_classes, features});
  for (double& w : head.weight.data()) w = normal(rng);
  head.weight.set_requires_grad(true);
  head.bias = Tensor(Shape{c.num_classes}, 0.0).set_requires_grad(true);
  return head;
}

void register_conv_bn(std::vector<NamedTensor>& reg, const std::string& conv, const std::string& bn,
                      const ConvBnLayer& layer) {
  reg.push_back({conv + ".weight", layer.weight, true, false});
  reg.push_back({bn + ".gamma", layer.bn.gamma, true, true});
  reg.push_back({bn + ".beta", layer.bn.beta, true, true});
  reg.push_back({bn + ".running_mean", layer.bn.running_mean, false, true});
  reg.push_back({bn + ".running_var", layer.bn.running_var, false, true});
}

void register_stem(std::vector<NamedTensor>& reg, const std::string& prefix, const Stem& stem) {
  register_conv_bn(reg, prefix + "stem.conv", prefix + "stem.bn", stem.conv);
}

void register_block(std::vector<NamedTensor>& reg, const std::string& prefix, const ResidualBlock& block) {
  const std::string base = prefix + "block" + std::to_string(block.index) + ".";
  for (std::size_t j = 0; j < block.path.size(); ++j) {
    const auto n = std::to_string(j + 1);
    register_conv_bn(reg, base + "conv" + n, base + "bn" + n, block.path[j]);
  }
  if (block.projection) register_conv_bn(reg, base + "proj", base + "proj_bn", *block.projection);
}

}  // namespace

int BranchedNetConfig::total_blocks() const {
  return std::accumulate(stage_blocks.begin(), stage_blocks.end(), 0);
}

void BranchedNetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (stage_blocks.empty()) fail("stage_blocks must list at least one stage");
  if (stage_widths.size() != stage_blocks.size()) {
    fail("stage_widths has " + std::to_string(stage_widths.size()) + " entries but stage_blocks has " +
         std::to_string(stage_blocks.size()));
  }
  for (std::size_t s = 0; s < stage_blocks.size(); ++s) {
    if (stage_blocks[s] < 1) fail("stage_blocks[" + std::to_string(s) + "] must be at least 1");
    if (stage_widths[s] < 1) fail("stage_widths[" + std::to_string(s) + "] must be positive");
    if (bottleneck && stage_widths[s] % kBottleneckExpansion != 0) {
      fail("stage_widths[" + std::to_string(s) + "] = " + std::to_string(stage_widths[s]) +
           " is not divisible by the bottleneck expansion " + std::to_string(kBottleneckExpansion));
    }
  }
  if (branch_after_block < 0 || branch_after_block > total_blocks()) {
    fail("branch_after_block = " + std::to_string(branch_after_block) + " outside [0, " +
         std::to_string(total_blocks()) + "]");
  }
  if (num_branches < 1) fail("num_branches must be at least 1");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (input_channels < 1) fail("input_channels must be positive");
  if (stem_width < 1) fail("stem_width must be positive");
  if (stem_kernel < 1 || stem_stride < 1) fail("stem_kernel and stem_stride must be positive");

  int h = input_height, w = input_width;
  if (h < 1 || w < 1) fail("input_height and input_width must be positive");
  if (stem_kernel > h + 2 * (stem_kernel / 2) || stem_kernel > w + 2 * (stem_kernel / 2)) {
    fail("stem_kernel larger than the padded input");
  }
  h = conv_out(h, stem_kernel, stem_stride, stem_kernel / 2);
  w = conv_out(w, stem_kernel, stem_stride, stem_kernel / 2);
  if (stem_max_pool) {
    if (h < kStemPoolWindow || w < kStemPoolWindow) fail("input too small for the stem max pool");
    h = (h - kStemPoolWindow) / kStemPoolStride + 1;
    w = (w - kStemPoolWindow) / kStemPoolStride + 1;
  }
  for (std::size_t s = 1; s < stage_blocks.size(); ++s) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }
  if (h < 1 || w < 1) fail("input_height/input_width too small for the number of stages");
}

BranchedNetConfig BranchedNetConfig::mini() { return BranchedNetConfig{}; }

BranchedNetConfig BranchedNetConfig::full_scale() {
  BranchedNetConfig c;
  c.stage_blocks = {3, 24, 36, 3};
  c.stage_widths = {256, 512, 1024, 2048};
  c.bottleneck = true;
  c.branch_after_block = 39;
  c.num_branches = 2;
  c.num_classes = 1000;
  c.input_height = 224;
  c.input_width = 224;
  c.stem_width = 64;
  c.stem_kernel = 7;
  c.stem_stride = 2;
  c.stem_max_pool = true;
  return c;
}

BlockTopology block_topology(const BranchedNetConfig& config) {
  const int total = config.total_blocks();
  if (config.branch_after_block < 0 || config.branch_after_block > total) {
    throw std::invalid_argument("branch_after_block = " + std::to_string(config.branch_after_block) +
                                " exceeds total blocks " + std::to_string(total));
  }
  if (config.num_branches < 1) throw std::invalid_argument("num_branches must be at least 1");
  BlockTopology t;
  t.shared_blocks = config.branch_after_block;
  t.per_branch_blocks = total - config.branch_after_block;
  t.total_blocks_materialized = t.shared_blocks + config.num_branches * t.per_branch_blocks;
  return t;
}

LayerCounts layer_counts(const BranchedNetConfig& config) {
  LayerCounts counts;
  const int per_block = config.bottleneck ? 3 : 2;
  counts.conv_layers = 1 + per_block * config.total_blocks();
  for (const auto& b : block_geometry(config)) counts.projection_convs += b.projection ? 1 : 0;
  counts.weighted_layers = counts.conv_layers + 1;
  return counts;
}

ParamReport count_parameters(const BranchedNetConfig& config) {
  config.validate();
  const int shared = config.branch_after_block;
  const auto blocks = block_geometry(config);
  const std::int64_t stem = stem_params(config);
  std::int64_t trunk = 0, upper = 0;
  for (const auto& b : blocks) (b.index <= shared ? trunk : upper) += block_params(config, b);

  ParamReport r;
  r.stem_params = shared > 0 ? stem : stem * config.num_branches;
  r.shared_params = trunk;
  r.per_branch_params.assign(config.num_branches, upper);
  r.head_params.assign(config.num_branches, head_params(config));
  r.total_params = r.stem_params + r.shared_params;
  for (int b = 0; b < config.num_branches; ++b) r.total_params += r.per_branch_params[b] + r.head_params[b];
  const std::int64_t single = stem + trunk + upper + head_params(config);
  r.equivalent_independent_ensemble_params = single * config.num_branches;
  r.sharing_ratio = static_cast<double>(r.total_params) /
                    static_cast<double>(r.equivalent_independent_ensemble_params);
  return r;
}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  BatchNormOptions options;
  options.mode = mode;
  return batch_norm2d(x, gamma, beta, running_mean, running_var, options);
}

Tensor ConvBnLayer::forward(const Tensor& x, Mode mode) {
  return bn.forward(conv2d(x, weight, std::nullopt, stride, pad), mode);
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (std::size_t j = 0; j < path.size(); ++j) {
    h = path[j].forward(h, mode);
    if (j + 1 < path.size()) h = relu(h);
  }
  const Tensor shortcut = projection ? projection->forward(x, mode) : x;
  return relu(residual_add(h, shortcut));
}

Tensor Stem::forward(const Tensor& x, Mode mode) {
  Tensor h = relu(conv.forward(x, mode));
  if (max_pool) h = pool2d(h, PoolKind::max, kStemPoolWindow, kStemPoolStride);
  return h;
}

BranchedNetwork::BranchedNetwork(BranchedNetConfig config, std::optional<Stem> stem_,
                                 std::vector<ResidualBlock> trunk_, std::vector<Branch> branches_)
    : stem(std::move(stem_)), trunk(std::move(trunk_)), branches(std::move(branches_)),
      config_(std::move(config)) {
  rebuild_registry();
}

void BranchedNetwork::rebuild_registry() {
  registry_.clear();
  if (stem) register_stem(registry_, "", *stem);
  for (const auto& block : trunk) register_block(registry_, "trunk.", block);
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const std::string prefix = "branch" + std::to_string(b + 1) + ".";
    const auto& branch = branches[b];
    if (branch.stem) register_stem(registry_, prefix, *branch.stem);
    for (const auto& block : branch.blocks) register_block(registry_, prefix, block);
    registry_.push_back({prefix + "head.weight", branch.head.weight, true, false});
    registry_.push_back({prefix + "head.bias", branch.head.bias, true, true});
  }
}

std::vector<NamedTensor> BranchedNetwork::parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& entry : registry_) {
    if (entry.trainable) out.push_back(entry);
  }
  return out;
}

const NamedTensor* BranchedNetwork::find(const std::string& name) const {
  for (const auto& entry : registry_) {
    if (entry.name == name) return &entry;
  }
  return nullptr;
}

BranchedNetwork BranchedNetwork::clone() const {
  BranchedNetwork copy = build_branched_net(config_, 0);
  for (std::size_t i = 0; i < registry_.size(); ++i) {
    Tensor dst_tensor = copy.registry_[i].tensor;
    auto src = registry_[i].tensor.data();
    auto dst = dst_tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

void BranchedNetwork::copy_branch(int from, int to) {
  const int count = static_cast<int>(branches.size());
  if (from < 1 || from > count || to < 1 || to > count) {
    throw std::out_of_range("branch index outside 1.." + std::to_string(count));
  }
  const std::string src_prefix = "branch" + std::to_string(from) + ".";
  const std::string dst_prefix = "branch" + std::to_string(to) + ".";
  for (const auto& entry : registry_) {
    if (entry.name.rfind(src_prefix, 0) != 0) continue;
    const auto* target = find(dst_prefix + entry.name.substr(src_prefix.size()));
    Tensor dst_tensor = target->tensor;
    auto src = entry.tensor.data();
    auto dst = dst_tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

BranchedNetwork build_branched_net(const BranchedNetConfig& config, std::uint64_t seed) {
  config.validate();
  const int shared = config.branch_after_block;
  const auto geometry = block_geometry(config);

  std::optional<Stem> stem;
  std::vector<ResidualBlock> trunk;
  if (shared > 0) stem = make_stem(config, seed, 0);
  for (const auto& g : geometry) {
    if (g.index <= shared) trunk.push_back(make_block(config, g, seed, 0));
  }
  std::vector<Branch> branches;
  for (int b = 0; b < config.num_branches; ++b) {
    const auto replica = static_cast<std::uint64_t>(b);
    Branch branch;
    if (shared == 0) branch.stem = make_stem(config, seed, replica);
    for (const auto& g : geometry) {
      if (g.index > shared) branch.blocks.push_back(make_block(config, g, seed, replica));
    }
    branch.head = make_head(config, seed, replica);
    branches.push_back(std::move(branch));
  }
  return BranchedNetwork(config, std::move(stem), std::move(trunk), std::move(branches));
}

ParamReport count_parameters(const BranchedNetwork& net) {
  const auto& config = net.config();
  ParamReport r;
  r.per_branch_params.assign(config.num_branches, 0);
  r.head_params.assign(config.num_branches, 0);
  for (const auto& entry : net.registry()) {
    if (!entry.trainable) continue;
    const std::int64_t n = entry.tensor.numel();
    const auto& name = entry.name;
    if (name.rfind("branch", 0) == 0) {
      const auto dot = name.find('.');
      const int b = std::stoi(name.substr(6, dot - 6)) - 1;
      const std::string rest = name.substr(dot + 1);
      if (rest.rfind("head.", 0) == 0) {
        r.head_params[b] += n;
      } else if (rest.rfind("stem.", 0) == 0) {
        r.stem_params += n;
      } else {
        r.per_branch_params[b] += n;
      }
    } else if (name.rfind("stem.", 0) == 0) {
      r.stem_params += n;
    } else {
      r.shared_params += n;
    }
    r.total_params += n;
  }
  // A single full network is the trunk plus one branch, with one stem.
  const std::int64_t stem_single = config.branch_after_block > 0 ? r.stem_params
                                                                 : r.stem_params / config.num_branches;
  const std::int64_t single = stem_single + r.shared_params + r.per_branch_params[0] + r.head_params[0];
  r.equivalent_independent_ensemble_params = single * config.num_branches;
  r.sharing_ratio = static_cast<double>(r.total_params) /
                    static_cast<double>(r.equivalent_independent_ensemble_params);
  return r;
}

std::vector<Tensor> forward_all_branches(BranchedNetwork& net, const Tensor& batch, Mode mode,
                                         ForwardStats* stats) {
  const auto& c = net.config();
  if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_height ||
      batch.dim(3) != c.input_width) {
    throw TensorError("forward: batch shape " + to_string(batch.shape()) + " does not match [N, " +
                      std::to_string(c.input_channels) + ", " + std::to_string(c.input_height) + ", " +
                      std::to_string(c.input_width) + "]");
  }
  Tensor shared = batch;
  if (net.stem) {
    shared = net.stem->forward(shared, mode);
    if (stats) ++stats->stem_evaluations;
  }
  for (auto& block : net.trunk) {
    shared = block.forward(shared, mode);
    if (stats) ++stats->trunk_block_evaluations;
  }
  std::vector<Tensor> logits;
  logits.reserve(net.branches.size());
  for (auto& branch : net.branches) {
    Tensor h = shared;
    if (branch.stem) {
      h = branch.stem->forward(h, mode);
      if (stats) ++stats->stem_evaluations;
    }
    for (auto& block : branch.blocks) {
      h = block.forward(h, mode);
      if (stats) ++stats->branch_block_evaluations;
    }
    logits.push_back(linear(global_avg_pool(h), branch.head.weight, branch.head.bias));
  }
  return logits;
}

}  // namespace branchnet
