#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace branchnet {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown for any contract violation on tensor shapes or values.
class TensorError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor;
struct Node;

/// Accumulates the gradient of the op output into the grads of its inputs.
using BackwardFn = std::function<void(Node& node, std::span<const double> grad_out)>;

/// One recorded operation. Inputs are held by handle so the graph outlives
/// the caller's temporaries; outputs never appear in their own node.
struct Node {
  std::string kind;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  std::uint64_t sequence = 0;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

/// Dense row-major float64 array with optional gradient.
///
/// Tensor is a handle: copies share storage, `clone()` makes an independent
/// copy. Operations that touch a tensor requiring grad record a Node so that
/// `backward()` can walk the graph in reverse creation order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  // NCHW-style indexed access; mostly for tests and small tools.
  double at(std::initializer_list<std::int64_t> index) const;
  double& at(std::initializer_list<std::int64_t> index);

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return impl_->node; }
  bool is_leaf() const { return !impl_->node; }

  /// Deep copy of data, detached from any graph. Grad is not copied.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorStorage* storage() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorStorage> impl_;
};

/// Graph recording is enabled by default; NoGradGuard turns it off for the
/// current thread (evaluation, optimizer updates).
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. When grad mode is on and any input requires grad,
/// the result records `backward` and requires grad itself.
Tensor make_result(Shape shape, std::vector<double> values, std::string kind,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Nodes reachable from a loss, ordered so that every node precedes the
/// nodes of its inputs (reverse topological order).
struct ComputationTape {
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<Tensor> outputs;  // outputs[i] is produced by nodes[i]
};

ComputationTape build_tape(const Tensor& loss);

/// Seeds d(loss)/d(loss) = 1 and runs every node of the tape once.
/// Gradients accumulate into existing grad buffers.
void reverse_pass(const ComputationTape& tape, const Tensor& loss);

void backward(const Tensor& loss);

void check_finite(std::span<const double> values, const std::string& what);

}  // namespace branchnet
