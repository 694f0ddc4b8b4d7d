#pragma once

#include <optional>

#include "branchnet/tensor.hpp"

namespace branchnet {

enum class Mode { train, eval };

/// Cross-correlation (no kernel flip) of an NCHW input with a
/// [Cout, Cin, kh, kw] weight.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              int stride, int pad);

struct BatchNormOptions {
  Mode mode = Mode::train;
  double epsilon = 1e-5;
  double momentum = 0.9;  // weight kept by the running statistics
};

/// Per-channel normalization over (N, H, W). In train mode the running
/// statistics are updated in place from the batch; the running variance
/// receives the unbiased batch estimate.
Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options = {});

Tensor relu(const Tensor& input);

enum class PoolKind { max, avg };

/// Valid (unpadded) pooling. Max ties go to the first element in row-major
/// window order, and so does its gradient.
Tensor pool2d(const Tensor& input, PoolKind kind, int window, int stride);

Tensor global_avg_pool(const Tensor& input);

/// input [N, D], weight [K, D], bias [K] -> [N, K]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Row-wise softmax of [N, K] logits with max subtraction.
Tensor softmax(const Tensor& logits);

Tensor residual_add(const Tensor& a, const Tensor& b);

// Reductions and scalings used to build losses.
Tensor sum(const Tensor& input);
Tensor scale(const Tensor& input, double factor);
/// sum(input * weights) with `weights` treated as a constant.
Tensor weighted_sum(const Tensor& input, const Tensor& weights);

/// Stacks equally shaped tensors along a new leading axis. Not differentiable.
Tensor stack(const std::vector<Tensor>& items);

}  // namespace branchnet
