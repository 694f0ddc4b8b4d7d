#include "branchnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace branchnet {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw TensorError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got shape " + to_string(t.shape()));
  }
}

void accumulate(Tensor& target, std::span<const double> delta) {
  auto g = target.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

struct ConvGeometry {
  std::int64_t batch, in_channels, height, width;
  std::int64_t out_channels, kernel_h, kernel_w;
  std::int64_t out_h, out_w;
  int stride, pad;

  std::int64_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::int64_t positions() const { return out_h * out_w; }
};

void im2col(const double* image, const ConvGeometry& g, double* col) {
  const auto positions = g.positions();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * positions;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  const auto positions = g.positions();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * positions;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) continue;
          double* dst = plane + ih * g.width;
          const double* src = row + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              int stride, int pad) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) throw TensorError("conv2d: stride must be positive");
  if (pad < 0) throw TensorError("conv2d: pad must be non-negative");

  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                 weight.dim(2), weight.dim(3), 0, 0, stride, pad};
  if (weight.dim(1) != g.in_channels) {
    throw TensorError("conv2d: weight input channels (" + std::to_string(weight.dim(1)) +
                      ") do not match input channels (" + std::to_string(g.in_channels) + ")");
  }
  if (g.kernel_h > g.height + 2 * pad) {
    throw TensorError("conv2d: kernel height " + std::to_string(g.kernel_h) +
                      " exceeds padded input height " + std::to_string(g.height + 2 * pad));
  }
  if (g.kernel_w > g.width + 2 * pad) {
    throw TensorError("conv2d: kernel width " + std::to_string(g.kernel_w) +
                      " exceeds padded input width " + std::to_string(g.width + 2 * pad));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw TensorError("conv2d: bias must have shape [" + std::to_string(g.out_channels) + "], got " +
                      to_string(bias->shape()));
  }
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;

  const auto patch = g.patch();
  const auto positions = g.positions();
  const auto in_sample = g.in_channels * g.height * g.width;
  const auto out_sample = g.out_channels * positions;

  std::vector<double> out(static_cast<std::size_t>(g.batch * out_sample));
  std::vector<double> col(static_cast<std::size_t>(patch * positions));
  ConstMatrixMap w(weight.data().data(), g.out_channels, patch);
  for (std::int64_t n = 0; n < g.batch; ++n) {
    im2col(input.data().data() + n * in_sample, g, col.data());
    MatrixMap y(out.data() + n * out_sample, g.out_channels, positions);
    y.noalias() = w * ConstMatrixMap(col.data(), patch, positions);
    if (bias) {
      for (std::int64_t co = 0; co < g.out_channels; ++co) y.row(co).array() += bias->data()[co];
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return make_result(
      {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), "conv2d", std::move(inputs),
      [g, has_bias](Node& node, std::span<const double> grad_out) {
        Tensor& x = node.inputs[0];
        Tensor& wt = node.inputs[1];
        const auto patch = g.patch();
        const auto positions = g.positions();
        const auto in_sample = g.in_channels * g.height * g.width;
        const auto out_sample = g.out_channels * positions;
        std::vector<double> col(static_cast<std::size_t>(patch * positions));
        std::vector<double> dcol(col.size());
        ConstMatrixMap w(wt.data().data(), g.out_channels, patch);
        RowMatrix dw = RowMatrix::Zero(g.out_channels, patch);
        for (std::int64_t n = 0; n < g.batch; ++n) {
          ConstMatrixMap gy(grad_out.data() + n * out_sample, g.out_channels, positions);
          if (wt.requires_grad()) {
            im2col(x.data().data() + n * in_sample, g, col.data());
            dw.noalias() += gy * ConstMatrixMap(col.data(), patch, positions).transpose();
          }
          if (x.requires_grad()) {
            MatrixMap(dcol.data(), patch, positions).noalias() = w.transpose() * gy;
            col2im_add(dcol.data(), g, x.mutable_grad().data() + n * in_sample);
          }
        }
        if (wt.requires_grad()) accumulate(wt, std::span<const double>(dw.data(), dw.size()));
        if (has_bias && node.inputs[2].requires_grad()) {
          auto db = node.inputs[2].mutable_grad();
          for (std::int64_t n = 0; n < g.batch; ++n) {
            for (std::int64_t co = 0; co < g.out_channels; ++co) {
              const double* row = grad_out.data() + n * out_sample + co * positions;
              double s = 0.0;
              for (std::int64_t p = 0; p < positions; ++p) s += row[p];
              db[co] += s;
            }
          }
        }
      });
}

Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options) {
  require_rank(input, 4, "batch_norm2d", "input");
  const auto batch = input.dim(0), channels = input.dim(1);
  const auto spatial = input.dim(2) * input.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw TensorError("batch_norm2d: per-channel tensor has shape " + to_string(t->shape()) +
                        ", expected [" + std::to_string(channels) + "]");
    }
  }
  const std::int64_t count = batch * spatial;
  const bool training = options.mode == Mode::train;
  if (training && count < 2) {
    throw TensorError("batch_norm2d: train mode needs at least 2 values per channel, got " +
                      std::to_string(count));
  }

  const auto x = input.data();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) {
    double mean, var;
    if (training) {
      double s = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const double* p = x.data() + (n * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) s += p[i];
      }
      mean = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const double* p = x.data() + (n * channels + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean.data()[c] = options.momentum * running_mean.data()[c] + (1.0 - options.momentum) * mean;
      running_var.data()[c] = options.momentum * running_var.data()[c] + (1.0 - options.momentum) * unbiased;
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const double istd = 1.0 / std::sqrt(var + options.epsilon);
    inv_std[c] = istd;
    const double gm = gamma.data()[c], bt = beta.data()[c];
    for (std::int64_t n = 0; n < batch; ++n) {
      const auto offset = (n * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double h = (x[offset + i] - mean) * istd;
        xhat[offset + i] = h;
        out[offset + i] = gm * h + bt;
      }
    }
  }

  return make_result(
      input.shape(), std::move(out), "batch_norm2d", {input, gamma, beta},
      [training, batch, channels, spatial, count, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& node, std::span<const double> gy) {
        Tensor& in = node.inputs[0];
        Tensor& gm = node.inputs[1];
        Tensor& bt = node.inputs[2];
        for (std::int64_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t n = 0; n < batch; ++n) {
            const auto offset = (n * channels + c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              sum_g += gy[offset + i];
              sum_gx += gy[offset + i] * xhat[offset + i];
            }
          }
          if (gm.requires_grad()) gm.mutable_grad()[c] += sum_gx;
          if (bt.requires_grad()) bt.mutable_grad()[c] += sum_g;
          if (!in.requires_grad()) continue;
          auto dx = in.mutable_grad();
          const double k = gm.data()[c] * inv_std[c];
          const double m = static_cast<double>(count);
          for (std::int64_t n = 0; n < batch; ++n) {
            const auto offset = (n * channels + c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              const auto j = offset + i;
              dx[j] += training ? k * (gy[j] - sum_g / m - xhat[j] * sum_gx / m) : k * gy[j];
            }
          }
        }
      });
}

Tensor relu(const Tensor& input) {
  const auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_result(input.shape(), std::move(out), "relu", {input},
                     [](Node& node, std::span<const double> gy) {
                       Tensor& in = node.inputs[0];
                       const auto xs = in.data();
                       auto dx = in.mutable_grad();
                       for (std::size_t i = 0; i < xs.size(); ++i) {
                         if (xs[i] > 0.0) dx[i] += gy[i];
                       }
                     });
}

Tensor pool2d(const Tensor& input, PoolKind kind, int window, int stride) {
  require_rank(input, 4, "pool2d", "input");
  if (window < 1 || stride < 1) throw TensorError("pool2d: window and stride must be positive");
  const auto batch = input.dim(0), channels = input.dim(1), height = input.dim(2), width = input.dim(3);
  if (window > height || window > width) {
    throw TensorError("pool2d: window " + std::to_string(window) + " larger than input " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  const std::int64_t out_h = (height - window) / stride + 1;
  const std::int64_t out_w = (width - window) / stride + 1;
  const auto x = input.data();
  const auto planes = batch * channels;
  std::vector<double> out(static_cast<std::size_t>(planes * out_h * out_w));
  std::vector<std::int64_t> argmax(kind == PoolKind::max ? out.size() : 0);
  const double inv_area = 1.0 / static_cast<double>(window * window);

  for (std::int64_t p = 0; p < planes; ++p) {
    const double* plane = x.data() + p * height * width;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        const auto o = (p * out_h + oh) * out_w + ow;
        if (kind == PoolKind::max) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t where = 0;
          for (int i = 0; i < window; ++i) {
            for (int j = 0; j < window; ++j) {
              const auto idx = (oh * stride + i) * width + ow * stride + j;
              if (plane[idx] > best) {
                best = plane[idx];
                where = idx;
              }
            }
          }
          out[o] = best;
          argmax[o] = p * height * width + where;
        } else {
          double s = 0.0;
          for (int i = 0; i < window; ++i) {
            for (int j = 0; j < window; ++j) s += plane[(oh * stride + i) * width + ow * stride + j];
          }
          out[o] = s * inv_area;
        }
      }
    }
  }

  return make_result(
      {batch, channels, out_h, out_w}, std::move(out), kind == PoolKind::max ? "max_pool2d" : "avg_pool2d",
      {input},
      [=, argmax = std::move(argmax)](Node& node, std::span<const double> gy) {
        auto dx = node.inputs[0].mutable_grad();
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < gy.size(); ++o) dx[argmax[o]] += gy[o];
          return;
        }
        for (std::int64_t p = 0; p < planes; ++p) {
          for (std::int64_t oh = 0; oh < out_h; ++oh) {
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
              const double share = gy[(p * out_h + oh) * out_w + ow] * inv_area;
              for (int i = 0; i < window; ++i) {
                for (int j = 0; j < window; ++j) {
                  dx[p * height * width + (oh * stride + i) * width + ow * stride + j] += share;
                }
              }
            }
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const auto planes = input.dim(0) * input.dim(1);
  const auto spatial = input.dim(2) * input.dim(3);
  const auto x = input.data();
  std::vector<double> out(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::int64_t i = 0; i < spatial; ++i) s += x[p * spatial + i];
    out[p] = s / static_cast<double>(spatial);
  }
  return make_result({input.dim(0), input.dim(1)}, std::move(out), "global_avg_pool", {input},
                     [planes, spatial](Node& node, std::span<const double> gy) {
                       auto dx = node.inputs[0].mutable_grad();
                       const double inv = 1.0 / static_cast<double>(spatial);
                       for (std::int64_t p = 0; p < planes; ++p) {
                         for (std::int64_t i = 0; i < spatial; ++i) dx[p * spatial + i] += gy[p] * inv;
                       }
                     });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const auto batch = input.dim(0), features = input.dim(1), outputs = weight.dim(0);
  if (weight.dim(1) != features) {
    throw TensorError("linear: weight input dimension (" + std::to_string(weight.dim(1)) +
                      ") does not match input features (" + std::to_string(features) + ")");
  }
  if (bias.rank() != 1 || bias.dim(0) != outputs) {
    throw TensorError("linear: bias must have shape [" + std::to_string(outputs) + "], got " +
                      to_string(bias.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(batch * outputs));
  MatrixMap y(out.data(), batch, outputs);
  y.noalias() = ConstMatrixMap(input.data().data(), batch, features) *
                ConstMatrixMap(weight.data().data(), outputs, features).transpose();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t k = 0; k < outputs; ++k) y(n, k) += bias.data()[k];
  }
  return make_result({batch, outputs}, std::move(out), "linear", {input, weight, bias},
                     [batch, features, outputs](Node& node, std::span<const double> grad_out) {
                       ConstMatrixMap gy(grad_out.data(), batch, outputs);
                       Tensor& x = node.inputs[0];
                       Tensor& w = node.inputs[1];
                       Tensor& b = node.inputs[2];
                       if (x.requires_grad()) {
                         RowMatrix dx = gy * ConstMatrixMap(w.data().data(), outputs, features);
                         accumulate(x, std::span<const double>(dx.data(), dx.size()));
                       }
                       if (w.requires_grad()) {
                         RowMatrix dw = gy.transpose() * ConstMatrixMap(x.data().data(), batch, features);
                         accumulate(w, std::span<const double>(dw.data(), dw.size()));
                       }
                       if (b.requires_grad()) {
                         auto db = b.mutable_grad();
                         for (std::int64_t n = 0; n < batch; ++n) {
                           for (std::int64_t k = 0; k < outputs; ++k) db[k] += gy(n, k);
                         }
                       }
                     });
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax", "logits");
  check_finite(logits.data(), "softmax input");
  const auto rows = logits.dim(0), cols = logits.dim(1);
  const auto z = logits.data();
  std::vector<double> out(z.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * cols;
    const double peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::int64_t k = 0; k < cols; ++k) {
      out[r * cols + k] = std::exp(row[k] - peak);
      total += out[r * cols + k];
    }
    for (std::int64_t k = 0; k < cols; ++k) out[r * cols + k] /= total;
  }
  std::vector<double> probs = out;
  return make_result(logits.shape(), std::move(out), "softmax", {logits},
                     [rows, cols, probs = std::move(probs)](Node& node, std::span<const double> gy) {
                       auto dx = node.inputs[0].mutable_grad();
                       for (std::int64_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::int64_t k = 0; k < cols; ++k) dot += gy[r * cols + k] * probs[r * cols + k];
                         for (std::int64_t k = 0; k < cols; ++k) {
                           dx[r * cols + k] += probs[r * cols + k] * (gy[r * cols + k] - dot);
                         }
                       }
                     });
}

Tensor residual_add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("residual_add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), "residual_add", {a, b},
                     [](Node& node, std::span<const double> gy) {
                       for (auto& in : node.inputs) {
                         if (in.requires_grad()) accumulate(in, gy);
                       }
                     });
}

Tensor sum(const Tensor& input) {
  double s = 0.0;
  for (double v : input.data()) s += v;
  return make_result({1}, {s}, "sum", {input}, [](Node& node, std::span<const double> gy) {
    for (double& d : node.inputs[0].mutable_grad()) d += gy[0];
  });
}

Tensor scale(const Tensor& input, double factor) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (double& v : out) v *= factor;
  return make_result(input.shape(), std::move(out), "scale", {input},
                     [factor](Node& node, std::span<const double> gy) {
                       auto dx = node.inputs[0].mutable_grad();
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * gy[i];
                     });
}

Tensor weighted_sum(const Tensor& input, const Tensor& weights) {
  if (input.shape() != weights.shape()) {
    throw TensorError("weighted_sum: shape mismatch " + to_string(input.shape()) + " vs " +
                      to_string(weights.shape()));
  }
  const auto x = input.data(), w = weights.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w[i];
  std::vector<double> coeff(w.begin(), w.end());
  return make_result({1}, {s}, "weighted_sum", {input},
                     [coeff = std::move(coeff)](Node& node, std::span<const double> gy) {
                       auto dx = node.inputs[0].mutable_grad();
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += coeff[i] * gy[0];
                     });
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw TensorError("stack: no tensors given");
  const Shape& inner = items.front().shape();
  Shape shape{static_cast<std::int64_t>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(numel(shape)));
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw TensorError("stack: shape mismatch " + to_string(t.shape()) + " vs " + to_string(inner));
    }
    values.insert(values.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace branchnet
