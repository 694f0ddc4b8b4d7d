#include "branchnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace branchnet {

namespace {

thread_local bool g_grad_mode = true;
std::atomic<std::uint64_t> g_node_sequence{0};

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw TensorError("tensor shape must have at least one extent");
  for (auto extent : shape) {
    if (extent <= 0) throw TensorError("tensor extents must be positive, got " + to_string(shape));
  }
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorStorage>()) {
  validate_shape(shape);
  impl_->data.assign(static_cast<std::size_t>(branchnet::numel(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorStorage>()) {
  validate_shape(shape);
  if (branchnet::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw TensorError("tensor of shape " + to_string(shape) + " cannot hold " +
                      std::to_string(values.size()) + " values");
  }
  check_finite(values, "tensor data");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw TensorError("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

static std::size_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> index) {
  if (index.size() != shape.size()) {
    throw TensorError("index rank " + std::to_string(index.size()) + " does not match shape " +
                      to_string(shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape[axis]) throw TensorError("index out of range on axis " + std::to_string(axis));
    flat = flat * static_cast<std::size_t>(shape[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  return impl_->data[flat_index(shape(), index)];
}

double& Tensor::at(std::initializer_list<std::int64_t> index) {
  return impl_->data[flat_index(shape(), index)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TensorError("tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor copy(impl_->shape, impl_->data);
  copy.impl_->requires_grad = impl_->requires_grad;
  return copy;
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

Tensor make_result(Shape shape, std::vector<double> values, std::string kind,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(values, kind);
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_mode) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->kind = std::move(kind);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->sequence = g_node_sequence.fetch_add(1);
  out.storage()->node = std::move(node);
  out.set_requires_grad(true);
  return out;
}

ComputationTape build_tape(const Tensor& loss) {
  ComputationTape tape;
  std::unordered_set<const Node*> seen;
  std::vector<Tensor> stack{loss};
  while (!stack.empty()) {
    Tensor t = stack.back();
    stack.pop_back();
    const auto& node = t.node();
    if (!node || !seen.insert(node.get()).second) continue;
    tape.nodes.push_back(node);
    tape.outputs.push_back(t);
    for (const auto& input : node->inputs) stack.push_back(input);
  }
  // Creation order is a topological order, so descending sequence visits
  // every consumer before its producers.
  std::vector<std::size_t> order(tape.nodes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return tape.nodes[a]->sequence > tape.nodes[b]->sequence;
  });
  ComputationTape sorted;
  sorted.nodes.reserve(order.size());
  sorted.outputs.reserve(order.size());
  for (auto i : order) {
    sorted.nodes.push_back(tape.nodes[i]);
    sorted.outputs.push_back(tape.outputs[i]);
  }
  return sorted;
}

void reverse_pass(const ComputationTape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TensorError("reverse pass requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw TensorError("loss does not depend on any tensor requiring grad");
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (std::size_t i = 0; i < tape.nodes.size(); ++i) {
    Tensor out = tape.outputs[i];
    if (!out.has_grad()) continue;
    tape.nodes[i]->backward(*tape.nodes[i], out.grad());
  }
}

void backward(const Tensor& loss) { reverse_pass(build_tape(loss), loss); }

void check_finite(std::span<const double> values, const std::string& what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw TensorError("non-finite value produced by " + what);
  }
}

}  // namespace branchnet
