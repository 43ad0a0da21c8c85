#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xlt/random.hpp"

namespace xlt {

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Ordered label inventory; position fixes the class index.
class LabelSchema {
 public:
  LabelSchema() = default;
  LabelSchema(std::string task, std::vector<std::string> labels) : task_(std::move(task)), labels_(std::move(labels)) {
    std::set<std::string> seen;
    for (const auto& l : labels_) {
      if (l.empty()) throw std::invalid_argument("label schema: empty label name");
      if (!seen.insert(to_lower(l)).second) throw std::invalid_argument("label schema: duplicate label '" + l + "'");
    }
  }

  const std::string& task() const { return task_; }
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  const std::string& name(std::size_t i) const { return labels_.at(i); }

  /// Case-insensitive lookup.
  std::optional<std::int32_t> index_of(std::string_view label) const {
    const auto key = to_lower(label);
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (to_lower(labels_[i]) == key) return static_cast<std::int32_t>(i);
    return std::nullopt;
  }

  friend bool operator==(const LabelSchema&, const LabelSchema&) = default;

 private:
  std::string task_;
  std::vector<std::string> labels_;
};

struct Instance {
  std::string id;
  std::string text;
  std::int32_t label = 0;

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct LabeledDataset {
  std::vector<Instance> instances;
  LabelSchema schema;
  std::string provenance;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(schema.size(), 0);
    for (const auto& in : instances) ++counts.at(in.label);
    return counts;
  }

  std::vector<std::int32_t> labels() const {
    std::vector<std::int32_t> out;
    out.reserve(instances.size());
    for (const auto& in : instances) out.push_back(in.label);
    return out;
  }

  void validate() const {
    std::unordered_set<std::string> ids;
    for (const auto& in : instances) {
      if (in.label < 0 || static_cast<std::size_t>(in.label) >= schema.size())
        throw std::invalid_argument("dataset: instance " + in.id + " has label index " + std::to_string(in.label) +
                                    " outside schema of " + std::to_string(schema.size()));
      if (!ids.insert(in.id).second) throw std::invalid_argument("dataset: duplicate instance id " + in.id);
    }
  }
};

/// Zero-based column positions of a TSV file.
struct ColumnMapping {
  std::optional<std::size_t> id_column;
  std::size_t text_column = 1;
  std::size_t label_column = 2;
  /// Total fields per row; 0 means "at least enough for the declared columns".
  std::size_t num_columns = 0;
  enum class Header { kAuto, kPresent, kAbsent } header = Header::kAuto;
};

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}
inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}
}  // namespace detail

/// Reads a UTF-8 TSV file. In kAuto mode the first row is a header when its
/// label field is not a schema label.
inline LabeledDataset load_tsv(const std::filesystem::path& path, const LabelSchema& schema,
                               const ColumnMapping& cols = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tsv: cannot open " + path.string());
  std::size_t need = std::max(cols.text_column, cols.label_column) + 1;
  if (cols.id_column) need = std::max(need, *cols.id_column + 1);
  if (cols.num_columns && cols.num_columns < need)
    throw std::invalid_argument("load_tsv: num_columns smaller than the declared column positions");

  LabeledDataset ds;
  ds.schema = schema;
  ds.provenance = path.string();
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    const bool ragged = cols.num_columns ? fields.size() != cols.num_columns : fields.size() < need;
    if (ragged)
      throw std::runtime_error("load_tsv: " + path.string() + " row " + std::to_string(row) + " has " +
                               std::to_string(fields.size()) + " fields, expected " +
                               std::to_string(cols.num_columns ? cols.num_columns : need));
    const std::string label = detail::trim(fields[cols.label_column]);
    const auto index = schema.index_of(label);
    if (row == 1 && cols.header != ColumnMapping::Header::kAbsent &&
        (cols.header == ColumnMapping::Header::kPresent || !index))
      continue;
    if (!index)
      throw std::runtime_error("load_tsv: " + path.string() + " row " + std::to_string(row) + ": unknown label '" +
                               label + "'");
    Instance in;
    in.id = cols.id_column ? detail::trim(fields[*cols.id_column]) : std::to_string(row);
    in.text = fields[cols.text_column];
    in.label = *index;
    ds.instances.push_back(std::move(in));
  }
  ds.validate();
  return ds;
}

/// Writes id, text, label-name columns with a header row.
inline void write_tsv(const std::filesystem::path& path, const LabeledDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_tsv: cannot write " + path.string());
  os << "id\ttext\tlabel\n";
  for (const auto& in : ds.instances) os << in.id << '\t' << in.text << '\t' << ds.schema.name(in.label) << '\n';
  if (!os) throw std::runtime_error("write_tsv: write failed for " + path.string());
}

/// Relabels through mapping (old name -> new name); the new schema lists
/// new_order. Several old labels may map to one new label.
inline LabeledDataset map_labels(const LabeledDataset& ds, const std::map<std::string, std::string>& mapping,
                                 const std::vector<std::string>& new_order, std::string task = {}) {
  LabelSchema target(task.empty() ? ds.schema.task() : std::move(task), new_order);
  std::map<std::string, std::string> folded;
  for (const auto& [from, to] : mapping) folded[to_lower(from)] = to;
  std::vector<std::int32_t> remap(ds.schema.size());
  for (std::size_t i = 0; i < ds.schema.size(); ++i) {
    auto it = folded.find(to_lower(ds.schema.name(i)));
    if (it == folded.end()) throw std::invalid_argument("map_labels: no mapping for label '" + ds.schema.name(i) + "'");
    auto idx = target.index_of(it->second);
    if (!idx)
      throw std::invalid_argument("map_labels: label '" + ds.schema.name(i) + "' maps to '" + it->second +
                                  "', which is not in the target schema");
    remap[i] = *idx;
  }
  LabeledDataset out;
  out.schema = std::move(target);
  out.provenance = ds.provenance;
  out.instances = ds.instances;
  for (auto& in : out.instances) in.label = remap[in.label];
  return out;
}

/// Per-class quotas summing to n, proportional to counts (largest remainder,
/// ties to the lower class index).
inline std::vector<std::size_t> proportional_quotas(const std::vector<std::size_t>& counts, std::size_t n) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  std::vector<std::size_t> quota(counts.size(), 0);
  if (total == 0) return quota;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double exact = static_cast<double>(counts[c]) * static_cast<double>(n) / static_cast<double>(total);
    quota[c] = std::min(counts[c], static_cast<std::size_t>(exact));
    assigned += quota[c];
    remainders.push_back({exact - static_cast<double>(quota[c]), c});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % remainders.size()) {
    const std::size_t c = remainders[i].second;
    if (quota[c] < counts[c]) {
      ++quota[c];
      ++assigned;
    }
  }
  return quota;
}

namespace detail {
inline std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.schema.size());
  for (std::size_t i = 0; i < ds.instances.size(); ++i) by_class[ds.instances[i].label].push_back(i);
  return by_class;
}
}  // namespace detail

/// Stratified sample of n instances, deterministic in seed.
inline LabeledDataset subsample(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size())
    throw std::invalid_argument("subsample: requested " + std::to_string(n) + " of " + std::to_string(ds.size()) +
                                " instances");
  Rng rng(seed);
  auto by_class = detail::indices_by_class(ds);
  const auto quota = proportional_quotas(ds.class_counts(), n);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    deterministic_shuffle(by_class[c], rng);
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  deterministic_shuffle(picked, rng);
  LabeledDataset out;
  out.schema = ds.schema;
  out.provenance = ds.provenance;
  for (auto i : picked) out.instances.push_back(ds.instances[i]);
  return out;
}

inline std::vector<std::string> texts(const LabeledDataset& ds) {
  std::vector<std::string> out;
  out.reserve(ds.size());
  for (const auto& in : ds.instances) out.push_back(in.text);
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) os << l << '\n';
}

}  // namespace xlt
