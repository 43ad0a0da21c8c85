#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlt/metrics.hpp"

namespace xlt {

/// Shortest round-trip representation of a double; stable across runs.
inline std::string format_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Two-decimal display used in markdown tables.
inline std::string format_2dp(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct RenderedTables {
  std::string markdown;
  std::string csv;
};

/// Metric column names: P/R/F1 per class, weighted P/R/F1, macro F1.
inline std::vector<std::string> metric_columns(const std::vector<std::string>& labels) {
  std::vector<std::string> cols;
  for (const auto& l : labels)
    for (const char* m : {"P", "R", "F1"}) cols.push_back(l + " " + m);
  for (const char* m : {"Weighted P", "Weighted R", "Weighted F1", "Macro F1"}) cols.emplace_back(m);
  return cols;
}

inline std::vector<double> metric_values(const EvalReport& r) {
  std::vector<double> v;
  for (const auto& c : r.per_class) v.insert(v.end(), {c.precision, c.recall, c.f1});
  v.insert(v.end(), {r.weighted_precision, r.weighted_recall, r.weighted_f1, r.macro_f1});
  return v;
}

inline std::string row_name(const RunInfo& run) {
  std::string name = run.model;
  if (!run.strategy.empty()) name += " (" + run.strategy + ")";
  return name;
}

/// One row per report: markdown rounded to two decimals, CSV at full precision.
inline RenderedTables render_tables(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("render_tables: no reports");
  const auto& labels = reports.front().labels;
  for (const auto& r : reports)
    if (r.labels != labels) throw std::invalid_argument("render_tables: reports do not share a label schema");
  const auto cols = metric_columns(labels);

  std::ostringstream md, csv;
  md << "| Model |";
  for (const auto& c : cols) md << ' ' << c << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << '\n';

  csv << "model,strategy,n_train,seed";
  for (const auto& l : labels) csv << ',' << l << "_precision," << l << "_recall," << l << "_f1";
  csv << ",weighted_precision,weighted_recall,weighted_f1,macro_f1\n";

  for (const auto& r : reports) {
    const auto vals = metric_values(r);
    md << "| " << row_name(r.run) << " |";
    for (double v : vals) md << ' ' << format_2dp(v) << " |";
    md << '\n';
    csv << r.run.model << ',' << r.run.strategy << ',' << r.run.n_train << ',' << r.run.seed;
    for (double v : vals) csv << ',' << format_full(v);
    csv << '\n';
  }
  return {md.str(), csv.str()};
}

/// Row-normalized confusion proportions; an all-zero row stays zero.
inline std::string render_heatmap_data(const ConfusionMatrix& m) {
  std::vector<std::string> labels = m.labels;
  if (labels.empty())
    for (std::size_t c = 0; c < m.num_classes; ++c) labels.push_back("class_" + std::to_string(c));
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& l : labels) os << ',' << l;
  os << '\n';
  for (std::size_t g = 0; g < m.num_classes; ++g) {
    std::size_t row_total = 0;
    for (auto c : m.counts[g]) row_total += c;
    os << labels[g];
    for (std::size_t p = 0; p < m.num_classes; ++p)
      os << ',' << format_full(row_total ? static_cast<double>(m.counts[g][p]) / static_cast<double>(row_total) : 0.0);
    os << '\n';
  }
  return os.str();
}

struct CurvePoint {
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  double macro_f1 = 0.0;
};

struct CurveSeries {
  std::string strategy;
  std::vector<CurvePoint> points;
};

/// Long-format learning curve: strategy,n_train,seed,macro_f1.
inline std::string render_learning_curve(const std::vector<CurveSeries>& series) {
  std::ostringstream os;
  os << "strategy,n_train,seed,macro_f1\n";
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.points.size(); ++i)
      if (s.points[i].n_train < s.points[i - 1].n_train)
        throw std::invalid_argument("render_learning_curve: series '" + s.strategy + "' is not sorted by n_train");
    for (const auto& p : s.points)
      os << s.strategy << ',' << p.n_train << ',' << p.seed << ',' << format_full(p.macro_f1) << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace xlt
