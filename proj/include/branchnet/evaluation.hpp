#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "branchnet/augment.hpp"
#include "branchnet/data_io.hpp"
#include "branchnet/model.hpp"
#include "branchnet/tensor.hpp"

namespace branchnet {

/// Per-branch and ensemble error rates in percent.
struct EvalReport {
  std::vector<double> branch_top1;
  std::vector<double> branch_top5;
  double ensemble_top1 = 0.0;
  double ensemble_top5 = 0.0;
  /// Undefined when the mean branch top-1 error is zero.
  std::optional<double> relative_improvement;
  int top5_k = 5;  // min(5, num_classes)
  std::int64_t samples = 0;
  std::string config_fingerprint;
};

/// Percentage of rows whose label is not among the k largest probabilities.
/// Equal probabilities rank the lower class index first.
double top_k_error(const Tensor& probs, std::span<const int> labels, int k);

/// Elementwise arithmetic mean of branch probability matrices.
Tensor ensemble_probs(const std::vector<Tensor>& branch_probs);

/// 100 * (mean(branch) - ensemble) / mean(branch). Inferred from reference
/// numbers: branch errors 22.02/22.09 with ensemble 20.81 give 5.65, and
/// 21.24/21.32 with 20.31 give 4.56.
double relative_improvement(std::span<const double> branch_errors, double ensemble_error);

/// Builds a report from per-branch probability matrices.
EvalReport make_report(const std::vector<Tensor>& branch_probs, std::span<const int> labels,
                       const std::string& fingerprint = {});

struct EvalOutputs {
  EvalReport report;
  std::vector<Tensor> branch_probs;  // one [N, K] matrix per branch
  std::vector<int> labels;
};

/// Eval-mode forward (running BN statistics), center crop plus
/// normalization only, softmax per branch, mean ensemble.
EvalOutputs evaluate_detailed(BranchedNetwork& net, const Dataset& data, const AugmentConfig& augment,
                              int batch_size, const std::string& fingerprint = {});
EvalReport evaluate(BranchedNetwork& net, const Dataset& data, const AugmentConfig& augment, int batch_size,
                    const std::string& fingerprint = {});

/// Aligned text table: one row per branch, the ensemble, then the relative
/// improvement.
std::string format_report_table(const EvalReport& report);
std::string format_report_csv(const EvalReport& report);
/// Rows of "sample,label,branch,p_0,...,p_{K-1}".
std::string format_probabilities_csv(const EvalOutputs& outputs);

}  // namespace branchnet
