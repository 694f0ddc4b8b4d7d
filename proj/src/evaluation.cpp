#include "branchnet/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace branchnet {

double top_k_error(const Tensor& probs, std::span<const int> labels, int k) {
  if (probs.rank() != 2) throw std::invalid_argument("top_k_error: probabilities must be [N, K]");
  const auto rows = probs.dim(0), classes = probs.dim(1);
  if (k < 1 || k > classes) {
    throw std::invalid_argument("top_k_error: k = " + std::to_string(k) + " outside [1, " +
                                std::to_string(classes) + "]");
  }
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw std::invalid_argument("top_k_error: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows");
  }
  const auto p = probs.data();
  std::int64_t misses = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= classes) throw std::invalid_argument("top_k_error: label out of range");
    const double* row = p.data() + r * classes;
    // Rank of the true class: classes strictly ahead of it in (prob desc, index asc) order.
    std::int64_t ahead = 0;
    for (std::int64_t j = 0; j < classes; ++j) {
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++ahead;
    }
    if (ahead >= k) ++misses;
  }
  return 100.0 * static_cast<double>(misses) / static_cast<double>(rows);
}

Tensor ensemble_probs(const std::vector<Tensor>& branch_probs) {
  if (branch_probs.empty()) throw std::invalid_argument("ensemble_probs: no branches given");
  const Shape& shape = branch_probs.front().shape();
  std::vector<double> mean(static_cast<std::size_t>(numel(shape)), 0.0);
  for (const auto& p : branch_probs) {
    if (p.shape() != shape) throw std::invalid_argument("ensemble_probs: branch shapes differ");
    const auto v = p.data();
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(branch_probs.size());
  for (double& m : mean) m *= inv;
  return Tensor(shape, std::move(mean));
}

double relative_improvement(std::span<const double> branch_errors, double ensemble_error) {
  if (branch_errors.empty()) throw std::invalid_argument("relative_improvement: no branch errors");
  const double mean = std::accumulate(branch_errors.begin(), branch_errors.end(), 0.0) /
                      static_cast<double>(branch_errors.size());
  if (!(mean > 0.0)) throw std::invalid_argument("relative_improvement: mean branch error is zero");
  return 100.0 * (mean - ensemble_error) / mean;
}

EvalReport make_report(const std::vector<Tensor>& branch_probs, std::span<const int> labels,
                       const std::string& fingerprint) {
  if (branch_probs.empty()) throw std::invalid_argument("make_report: no branches");
  EvalReport report;
  const int classes = static_cast<int>(branch_probs.front().dim(1));
  report.top5_k = std::min(5, classes);
  report.samples = static_cast<std::int64_t>(labels.size());
  report.config_fingerprint = fingerprint;
  for (const auto& p : branch_probs) {
    report.branch_top1.push_back(top_k_error(p, labels, 1));
    report.branch_top5.push_back(top_k_error(p, labels, report.top5_k));
  }
  const Tensor ensemble = ensemble_probs(branch_probs);
  report.ensemble_top1 = top_k_error(ensemble, labels, 1);
  report.ensemble_top5 = top_k_error(ensemble, labels, report.top5_k);
  const double mean = std::accumulate(report.branch_top1.begin(), report.branch_top1.end(), 0.0);
  if (mean > 0.0) report.relative_improvement = relative_improvement(report.branch_top1, report.ensemble_top1);
  return report;
}

EvalOutputs evaluate_detailed(BranchedNetwork& net, const Dataset& data, const AugmentConfig& augment,
                              int batch_size, const std::string& fingerprint) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch_size must be positive");
  NoGradGuard no_grad;
  const int branches = net.config().num_branches;
  const int classes = net.config().num_classes;
  std::vector<std::vector<double>> probs(branches);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Tensor> samples;
    for (std::size_t i = start; i < end; ++i) samples.push_back(eval_transform(to_float(data.images[i]), augment));
    const auto logits = forward_all_branches(net, stack(samples), Mode::eval);
    for (int b = 0; b < branches; ++b) {
      const Tensor q = softmax(logits[b]);
      probs[b].insert(probs[b].end(), q.data().begin(), q.data().end());
    }
  }
  EvalOutputs out;
  out.labels = data.labels;
  for (auto& p : probs) {
    out.branch_probs.emplace_back(Shape{static_cast<std::int64_t>(data.size()), classes}, std::move(p));
  }
  out.report = make_report(out.branch_probs, out.labels, fingerprint);
  return out;
}

EvalReport evaluate(BranchedNetwork& net, const Dataset& data, const AugmentConfig& augment, int batch_size,
                    const std::string& fingerprint) {
  return evaluate_detailed(net, data, augment, batch_size, fingerprint).report;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_report_table(const EvalReport& r) {
  std::ostringstream out;
  const std::string top5 = "top-" + std::to_string(r.top5_k) + " error";
  char line[160];
  std::snprintf(line, sizeof(line), "%-22s %12s %14s\n", "", "top-1 error", top5.c_str());
  out << line;
  for (std::size_t b = 0; b < r.branch_top1.size(); ++b) {
    const std::string name = "Branch" + std::to_string(b + 1);
    std::snprintf(line, sizeof(line), "%-22s %12s %14s\n", name.c_str(), fixed(r.branch_top1[b], 2).c_str(),
                  fixed(r.branch_top5[b], 2).c_str());
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-22s %12s %14s\n", "Ensemble", fixed(r.ensemble_top1, 2).c_str(),
                fixed(r.ensemble_top5, 2).c_str());
  out << line;
  const std::string ri = r.relative_improvement ? fixed(*r.relative_improvement, 2) : "undefined";
  std::snprintf(line, sizeof(line), "%-22s %12s %14s\n", "Relative Improvement", ri.c_str(), "");
  out << line;
  out << "samples: " << r.samples;
  if (!r.config_fingerprint.empty()) out << "  config: " << r.config_fingerprint;
  out << '\n';
  return out.str();
}

std::string format_report_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "row,top1_error,top5_error\n";
  for (std::size_t b = 0; b < r.branch_top1.size(); ++b) {
    out << "branch_" << b + 1 << ',' << fixed(r.branch_top1[b], 6) << ',' << fixed(r.branch_top5[b], 6) << '\n';
  }
  out << "ensemble," << fixed(r.ensemble_top1, 6) << ',' << fixed(r.ensemble_top5, 6) << '\n';
  out << "relative_improvement,"
      << (r.relative_improvement ? fixed(*r.relative_improvement, 6) : std::string("undefined")) << ",\n";
  return out.str();
}

std::string format_probabilities_csv(const EvalOutputs& outputs) {
  std::ostringstream out;
  const auto classes = outputs.branch_probs.front().dim(1);
  out << "sample,label,branch";
  for (std::int64_t k = 0; k < classes; ++k) out << ",p_" << k;
  out << '\n';
  char buf[32];
  for (std::size_t b = 0; b < outputs.branch_probs.size(); ++b) {
    const auto p = outputs.branch_probs[b].data();
    for (std::size_t i = 0; i < outputs.labels.size(); ++i) {
      out << i << ',' << outputs.labels[i] << ',' << b + 1;
      for (std::int64_t k = 0; k < classes; ++k) {
        std::snprintf(buf, sizeof(buf), ",%.17g", p[i * classes + k]);
        out << buf;
      }
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace branchnet
