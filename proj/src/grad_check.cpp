#include "branchnet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace branchnet {

GradCheckReport finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  std::vector<Tensor> inputs, const GradCheckOptions& options) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = fn(inputs);
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double h = options.relative_step * std::max(1.0, std::abs(original));
      values[i] = original + h;
      const double up = fn(inputs).item();
      values[i] = original - h;
      const double down = fn(inputs).item();
      values[i] = original;

      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.checked;
      if (rel >= options.tolerance) report.failures.push_back({k, i, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace branchnet
