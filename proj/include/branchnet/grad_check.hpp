#pragma once

#include <functional>
#include <string>
#include <vector>

#include "branchnet/tensor.hpp"

namespace branchnet {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double relative_step = 1e-5;  // h = relative_step * max(1, |theta|)
  double denominator_floor = 1e-6;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<GradCheckEntry> failures;
  std::size_t checked = 0;
  bool passed() const { return failures.empty(); }
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every element of every input. Relative error is
/// |a - n| / max(|a|, |n|, denominator_floor).
GradCheckReport finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  std::vector<Tensor> inputs, const GradCheckOptions& options = {});

}  // namespace branchnet
