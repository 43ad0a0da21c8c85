#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xlt {

/// counts[true][predicted].
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::string> labels;

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& row : counts)
      for (auto c : row) t += c;
    return t;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::int32_t> gold, std::span<const std::int32_t> predicted,
                                        std::size_t num_classes, std::vector<std::string> labels = {}) {
  if (gold.size() != predicted.size())
    throw std::invalid_argument("confusion_matrix: " + std::to_string(gold.size()) + " gold labels but " +
                                std::to_string(predicted.size()) + " predictions");
  if (!labels.empty() && labels.size() != num_classes)
    throw std::invalid_argument("confusion_matrix: label names do not match class count");
  ConfusionMatrix m{num_classes, std::vector<std::vector<std::size_t>>(num_classes, std::vector<std::size_t>(num_classes, 0)),
                    std::move(labels)};
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(gold[i]) >= num_classes ||
        static_cast<std::size_t>(predicted[i]) >= num_classes)
      throw std::out_of_range("confusion_matrix: label index outside " + std::to_string(num_classes) + " classes at " +
                              std::to_string(i));
    ++m.counts[gold[i]][predicted[i]];
  }
  return m;
}

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

/// Free-form run description carried alongside the numbers.
struct RunInfo {
  std::string model = "xlt";
  std::string strategy;
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<std::string> labels;
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0.0;
  double weighted_precision = 0.0;
  double weighted_recall = 0.0;
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  std::size_t total = 0;
  RunInfo run;
};

inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline double harmonic_mean(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

/// Per-class P/R/F1 with 0/0 -> 0, plus macro, weighted and micro averages.
inline EvalReport compute_report(const ConfusionMatrix& m, RunInfo run = {}) {
  const std::size_t C = m.num_classes;
  const std::size_t N = m.total();
  if (N == 0) throw std::invalid_argument("compute_report: confusion matrix is empty");
  EvalReport r;
  r.run = std::move(run);
  r.total = N;
  r.labels = m.labels;
  if (r.labels.empty())
    for (std::size_t c = 0; c < C; ++c) r.labels.push_back("class_" + std::to_string(c));
  std::size_t correct = 0, sum_fp = 0, sum_fn = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t tp = m.counts[c][c], fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += m.counts[k][c];
      fn += m.counts[c][k];
    }
    correct += tp;
    sum_fp += fp;
    sum_fn += fn;
    ClassMetrics cm;
    cm.support = tp + fn;
    cm.precision = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp));
    cm.recall = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fn));
    cm.f1 = harmonic_mean(cm.precision, cm.recall);
    r.per_class.push_back(cm);
  }
  for (const auto& cm : r.per_class) {
    const double w = static_cast<double>(cm.support) / static_cast<double>(N);
    r.macro_f1 += cm.f1 / static_cast<double>(C);
    r.weighted_precision += w * cm.precision;
    r.weighted_recall += w * cm.recall;
    r.weighted_f1 += w * cm.f1;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(N);
  const double micro_p = safe_ratio(static_cast<double>(correct), static_cast<double>(correct + sum_fp));
  const double micro_r = safe_ratio(static_cast<double>(correct), static_cast<double>(correct + sum_fn));
  r.micro_f1 = harmonic_mean(micro_p, micro_r);
  return r;
}

}  // namespace xlt
