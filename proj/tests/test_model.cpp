#include <map>
#include <set>

#include "branchnet/model.hpp"
#include "doctest.h"
#include "suites.hpp"

using namespace branchnet;

namespace {

BranchedNetConfig small_config() {
  BranchedNetConfig c;
  c.stage_blocks = {1, 1};
  c.stage_widths = {8, 16};
  c.stem_width = 8;
  c.num_classes = 10;
  c.branch_after_block = 1;
  c.num_branches = 2;
  return c;
}

BranchedNetConfig tiny_config(int b, int kb) {
  BranchedNetConfig c;
  c.stage_blocks = {1, 1, 1};
  c.stage_widths = {4, 8, 8};
  c.stem_width = 4;
  c.num_classes = 5;
  c.branch_after_block = b;
  c.num_branches = kb;
  c.input_height = c.input_width = 8;
  return c;
}

std::int64_t sum_params(const BranchedNetwork& net) {
  std::int64_t n = 0;
  for (const auto& p : net.parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace

TEST_CASE("block topology examples") {
  BranchedNetConfig c = BranchedNetConfig::full_scale();
  auto t = block_topology(c);
  CHECK(t.shared_blocks == 39);
  CHECK(t.per_branch_blocks == 27);
  CHECK(t.total_blocks_materialized == 93);
  c.branch_after_block = 0;
  CHECK(block_topology(c).total_blocks_materialized == 132);
  c.branch_after_block = 66;
  CHECK(block_topology(c).total_blocks_materialized == 66);
  c.branch_after_block = 67;
  CHECK_THROWS_AS(block_topology(c), std::invalid_argument);
}

TEST_CASE("full-scale layer bookkeeping: 199 convolutions plus the classifier") {
  const auto l = layer_counts(BranchedNetConfig::full_scale());
  CHECK(l.conv_layers == 199);
  CHECK(l.weighted_layers == 200);
  CHECK(l.projection_convs == 4);
}

TEST_CASE("config validation names the field") {
  BranchedNetConfig c = BranchedNetConfig::mini();
  c.stage_widths = {16, 32};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("stage_widths"), std::invalid_argument);
  c = BranchedNetConfig::full_scale();
  c.stage_widths = {254, 512, 1024, 2048};
  CHECK_THROWS_WITH_AS(build_branched_net(c, 0), doctest::Contains("stage_widths"), std::invalid_argument);
  c = BranchedNetConfig::mini();
  c.num_branches = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("num_branches"), std::invalid_argument);
}

TEST_CASE("registry of the small config matches the hand-enumerated layer list") {
  // name -> shape, trainable tensors only
  const std::vector<std::pair<std::string, Shape>> expected_shared{
      {"stem.conv.weight", {8, 3, 3, 3}},          {"stem.bn.gamma", {8}},
      {"stem.bn.beta", {8}},                       {"trunk.block1.conv1.weight", {8, 8, 3, 3}},
      {"trunk.block1.bn1.gamma", {8}},             {"trunk.block1.bn1.beta", {8}},
      {"trunk.block1.conv2.weight", {8, 8, 3, 3}}, {"trunk.block1.bn2.gamma", {8}},
      {"trunk.block1.bn2.beta", {8}},
  };
  const std::vector<std::pair<std::string, Shape>> expected_branch{
      {"block2.conv1.weight", {16, 8, 3, 3}},  {"block2.bn1.gamma", {16}},     {"block2.bn1.beta", {16}},
      {"block2.conv2.weight", {16, 16, 3, 3}}, {"block2.bn2.gamma", {16}},     {"block2.bn2.beta", {16}},
      {"block2.proj.weight", {16, 8, 1, 1}},   {"block2.proj_bn.gamma", {16}}, {"block2.proj_bn.beta", {16}},
      {"head.weight", {10, 16}},               {"head.bias", {10}},
  };
  std::vector<std::pair<std::string, Shape>> expected = expected_shared;
  for (int b = 1; b <= 2; ++b)
    for (const auto& [n, s] : expected_branch) expected.emplace_back("branch" + std::to_string(b) + "." + n, s);

  const BranchedNetwork net = build_branched_net(small_config(), 0);
  const auto params = net.parameters();
  REQUIRE(params.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(params[i].name == expected[i].first);
    CHECK(params[i].tensor.shape() == expected[i].second);
  }
  std::set<std::string> names;
  for (const auto& e : net.registry()) CHECK(names.insert(e.name).second);
  CHECK(net.find("trunk.block1.bn1.running_var") != nullptr);
  CHECK_FALSE(net.find("trunk.block1.bn1.running_var")->trainable);
}

TEST_CASE("small config parameter counts match the hand count") {
  // stem 216 + 16; block1 2 * (576 + 16); block2 1152 + 32 + 2304 + 32 + 128 + 32; head 160 + 10
  const ParamReport p = count_parameters(small_config());
  CHECK(p.stem_params == 232);
  CHECK(p.shared_params == 1184);
  CHECK(p.per_branch_params == std::vector<std::int64_t>{3680, 3680});
  CHECK(p.head_params == std::vector<std::int64_t>{170, 170});
  CHECK(p.total_params == 9116);
  CHECK(p.equivalent_independent_ensemble_params == 10532);
  CHECK(p.sharing_ratio == doctest::Approx(9116.0 / 10532.0).epsilon(1e-15));
  const BranchedNetwork net = build_branched_net(small_config(), 0);
  const ParamReport q = count_parameters(net);
  CHECK(q.total_params == 9116);
  CHECK(sum_params(net) == 9116);
}

TEST_CASE("bottleneck block count") {
  // stem 3x3 3->8: 216 + 16; block 1x1 8->4 (32 + 8), 3x3 4->4 (144 + 8), 1x1 4->16 (64 + 32),
  // projection 8->16 (128 + 32); head 10x16 + 10.
  BranchedNetConfig c;
  c.stage_blocks = {1};
  c.stage_widths = {16};
  c.bottleneck = true;
  c.stem_width = 8;
  c.branch_after_block = 0;
  c.num_branches = 1;
  CHECK(count_parameters(c).total_params == 232 + 448 + 170);
  CHECK(sum_params(build_branched_net(c, 0)) == 850);
}

TEST_CASE("full-scale counts agree with a reference ResNet enumeration") {
  // torchvision ResNet(Bottleneck, [3, 24, 36, 3]) has 64,673,832 parameters.
  const ParamReport p = count_parameters(BranchedNetConfig::full_scale());
  CHECK(p.equivalent_independent_ensemble_params == 2 * 64673832LL);
  CHECK(p.total_params == 108499984LL);
  CHECK(p.total_params < p.equivalent_independent_ensemble_params);
  CHECK(p.sharing_ratio < 1.0);
}

TEST_CASE("sharing ratio is 1 at B = 0 and non-increasing in B") {
  BranchedNetConfig c = BranchedNetConfig::full_scale();
  double prev = 2.0;
  for (int b = 0; b <= c.total_blocks(); ++b) {
    c.branch_after_block = b;
    const double r = count_parameters(c).sharing_ratio;
    if (b == 0) CHECK(r == 1.0);
    CHECK(r <= prev);
    prev = r;
  }
}

TEST_CASE("builds are deterministic and branches are decorrelated") {
  const BranchedNetwork a = build_branched_net(small_config(), 7);
  const BranchedNetwork b = build_branched_net(small_config(), 7);
  for (std::size_t i = 0; i < a.registry().size(); ++i) {
    const auto x = a.registry()[i].tensor.data(), y = b.registry()[i].tensor.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
  const auto w1 = a.find("branch1.block2.conv1.weight")->tensor.data();
  const auto w2 = a.find("branch2.block2.conv1.weight")->tensor.data();
  CHECK_FALSE(std::equal(w1.begin(), w1.end(), w2.begin(), w2.end()));
}

TEST_CASE("copying branch 1 into branch 2 gives identical logits") {
  BranchedNetwork net = build_branched_net(tiny_config(2, 2), 1);
  net.copy_branch(1, 2);
  const Tensor batch = suites::random_tensor({2, 3, 8, 8}, 9);
  for (Mode mode : {Mode::eval, Mode::train}) {
    const auto logits = forward_all_branches(net, batch, mode);
    CHECK(suites::max_abs_diff(logits[0].data(), {logits[1].data().begin(), logits[1].data().end()}) <= 1e-12);
  }
}

TEST_CASE("one branch behaves as the plain network regardless of the branch point") {
  const Tensor batch = suites::random_tensor({2, 3, 8, 8}, 10);
  BranchedNetwork plain = build_branched_net(tiny_config(0, 1), 4);
  const auto reference = forward_all_branches(plain, batch, Mode::eval)[0];
  for (int b : {1, 2, 3}) {
    BranchedNetwork net = build_branched_net(tiny_config(b, 1), 4);
    const auto out = forward_all_branches(net, batch, Mode::eval)[0];
    CHECK(suites::max_abs_diff(out.data(), {reference.data().begin(), reference.data().end()}) == 0.0);
  }
  // Branch 1 of a two-branch net is that same network.
  BranchedNetwork two = build_branched_net(tiny_config(2, 2), 4);
  const auto first = forward_all_branches(two, batch, Mode::eval)[0];
  CHECK(suites::max_abs_diff(first.data(), {reference.data().begin(), reference.data().end()}) == 0.0);
}

TEST_CASE("trunk blocks run once per forward regardless of branch count") {
  const Tensor batch = suites::random_tensor({2, 3, 8, 8}, 11);
  for (int kb : {1, 2, 4}) {
    BranchedNetwork net = build_branched_net(tiny_config(2, kb), 0);
    ForwardStats stats;
    const auto logits = forward_all_branches(net, batch, Mode::train, &stats);
    CHECK(logits.size() == static_cast<std::size_t>(kb));
    CHECK(stats.trunk_block_evaluations == 2);
    CHECK(stats.stem_evaluations == 1);
    CHECK(stats.branch_block_evaluations == kb * 1);
    CHECK(logits[0].shape() == Shape{2, 5});
  }
}

TEST_CASE("forward rejects a batch of the wrong shape") {
  BranchedNetwork net = build_branched_net(tiny_config(1, 2), 0);
  CHECK_THROWS(forward_all_branches(net, Tensor({2, 3, 7, 8}), Mode::eval));
  CHECK_THROWS(forward_all_branches(net, Tensor({2, 1, 8, 8}), Mode::eval));
}

TEST_CASE("clone is deep") {
  BranchedNetwork net = build_branched_net(tiny_config(1, 2), 0);
  BranchedNetwork copy = net.clone();
  Tensor w = copy.find("branch1.head.weight")->tensor;
  w.data()[0] += 1.0;
  CHECK(net.find("branch1.head.weight")->tensor.data()[0] != w.data()[0]);
}

TEST_CASE("combined loss trunk gradient equals the mean of single-branch passes") {
  CHECK(suites::trunk_gradient_decomposition_error() <= 1e-10);
}
