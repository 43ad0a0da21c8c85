#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "xlt/datasets.hpp"
#include "xlt/encoder.hpp"
#include "xlt/experiment.hpp"
#include "xlt/synthetic.hpp"
#include "xlt/trainer.hpp"

namespace xlt {

/// Validation failure; the message starts with the offending field.
class ManifestError : public std::invalid_argument {
 public:
  ManifestError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DataSection {
  std::optional<std::filesystem::path> train;
  std::optional<std::filesystem::path> test;
  std::vector<std::filesystem::path> pretrain_corpus;
  std::string task = "task";
  std::vector<std::string> labels;  // as written in the files
  ColumnMapping columns;
  std::map<std::string, std::string> label_map;  // file label -> task label
  std::vector<std::string> mapped_labels;        // task schema when label_map is set

  /// Schema of the task after any label mapping.
  LabelSchema schema() const { return LabelSchema(task, label_map.empty() ? labels : mapped_labels); }

  LabeledDataset load(const std::filesystem::path& path) const {
    auto ds = load_tsv(path, LabelSchema(task, labels), columns);
    return label_map.empty() ? ds : map_labels(ds, label_map, mapped_labels, task);
  }
};

/// Declarative run description, read from an INI-style file with sections
/// [tokenizer] [model] [data] [pretrain] [strategy] [train] [output].
/// Relative paths resolve against the manifest's directory.
struct Manifest {
  std::filesystem::path source;
  std::optional<std::filesystem::path> vocab;
  EncoderConfig model;
  DataSection data;
  PretrainConfig pretrain;
  Strategy strategy = Strategy::kScratch;
  std::optional<std::filesystem::path> checkpoint;       // source-task model for transfer
  std::optional<std::filesystem::path> base_checkpoint;  // pretrained encoder for scratch
  TrainConfig train;
  std::filesystem::path output_dir = "out";
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ManifestReader {
 public:
  ManifestReader(const boost::property_tree::ptree& tree, std::filesystem::path base)
      : tree_(tree), base_(std::move(base)) {}

  std::optional<std::string> text(const std::string& field) const {
    auto v = tree_.get_optional<std::string>(field);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  template <typename T>
  T number(const std::string& field, T fallback) const {
    auto v = text(field);
    if (!v || v->empty()) return fallback;
    std::istringstream is(*v);
    T out{};
    if constexpr (std::is_unsigned_v<T>)
      if (v->front() == '-') throw ManifestError(field, "must be non-negative, got '" + *v + "'");
    if (!(is >> out) || !(is >> std::ws).eof()) throw ManifestError(field, "not a number: '" + *v + "'");
    return out;
  }

  /// Existing file, resolved against the manifest directory.
  std::optional<std::filesystem::path> file(const std::string& field) const {
    auto v = text(field);
    if (!v || v->empty()) return std::nullopt;
    auto p = resolve(*v);
    if (!std::filesystem::is_regular_file(p)) throw ManifestError(field, "file not found: " + p.string());
    return p;
  }

  std::filesystem::path resolve(const std::string& v) const {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base_ / p;
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::filesystem::path base_;
};

}  // namespace detail

inline Manifest parse_manifest(const std::string& contents, const std::filesystem::path& base_dir) {
  boost::property_tree::ptree tree;
  std::istringstream is(contents);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ManifestError("manifest", "line " + std::to_string(e.line()) + ": " + e.message());
  }
  static const std::map<std::string, std::vector<std::string>> kKnown{
      {"tokenizer", {"vocab"}},
      {"model", {"num_layers", "hidden_size", "num_heads", "ff_size", "max_len", "dropout"}},
      {"data",
       {"train", "test", "pretrain_corpus", "task", "labels", "text_column", "label_column", "id_column", "num_columns",
        "header", "label_map", "mapped_labels"}},
      {"pretrain", {"epochs", "learning_rate", "batch_size", "warmup_fraction", "mask_probability", "seed"}},
      {"strategy", {"name", "checkpoint", "base_checkpoint"}},
      {"train",
       {"learning_rate", "epochs", "batch_size", "warmup_fraction", "early_stop_patience", "eval_every_steps",
        "split_ratio", "seed", "decay"}},
      {"output", {"dir"}}};
  for (const auto& [section, body] : tree) {
    auto it = kKnown.find(section);
    if (it == kKnown.end()) throw ManifestError(section, "unknown section");
    for (const auto& kv : body) {
      const auto& keys = it->second;
      if (std::find(keys.begin(), keys.end(), kv.first) == keys.end())
        throw ManifestError(section + "." + kv.first, "unknown field");
    }
  }

  detail::ManifestReader r(tree, base_dir);
  Manifest m;
  m.vocab = r.file("tokenizer.vocab");

  m.model.num_layers = r.number("model.num_layers", m.model.num_layers);
  m.model.hidden_size = r.number("model.hidden_size", m.model.hidden_size);
  m.model.num_heads = r.number("model.num_heads", m.model.num_heads);
  m.model.ff_size = r.number("model.ff_size", m.model.ff_size);
  m.model.max_len = r.number("model.max_len", m.model.max_len);
  m.model.dropout_rate = r.number("model.dropout", m.model.dropout_rate);
  {
    const auto& c = m.model;
    for (auto [field, v] : {std::pair{"model.num_layers", c.num_layers}, {"model.hidden_size", c.hidden_size},
                            {"model.num_heads", c.num_heads}, {"model.ff_size", c.ff_size}})
      if (v == 0) throw ManifestError(field, "must be positive");
    if (c.hidden_size % c.num_heads != 0)
      throw ManifestError("model.num_heads", "must divide hidden_size (" + std::to_string(c.hidden_size) + ")");
    if (c.max_len < 3 || c.max_len > kMaxSequenceLength) throw ManifestError("model.max_len", "must be in [3, 512]");
    if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) throw ManifestError("model.dropout", "must be in [0, 1)");
  }

  auto& d = m.data;
  d.train = r.file("data.train");
  d.test = r.file("data.test");
  for (const auto& p : detail::split_list(r.text("data.pretrain_corpus").value_or(""))) {
    auto path = r.resolve(p);
    if (!std::filesystem::is_regular_file(path)) throw ManifestError("data.pretrain_corpus", "file not found: " + path.string());
    d.pretrain_corpus.push_back(path);
  }
  d.task = r.text("data.task").value_or(d.task);
  d.labels = detail::split_list(r.text("data.labels").value_or(""));
  d.columns.text_column = r.number("data.text_column", d.columns.text_column);
  d.columns.label_column = r.number("data.label_column", d.columns.label_column);
  if (r.text("data.id_column")) d.columns.id_column = r.number<std::size_t>("data.id_column", 0);
  d.columns.num_columns = r.number("data.num_columns", d.columns.num_columns);
  if (auto h = r.text("data.header")) {
    if (*h == "auto")
      d.columns.header = ColumnMapping::Header::kAuto;
    else if (*h == "yes" || *h == "true")
      d.columns.header = ColumnMapping::Header::kPresent;
    else if (*h == "no" || *h == "false")
      d.columns.header = ColumnMapping::Header::kAbsent;
    else
      throw ManifestError("data.header", "expected auto, yes or no, got '" + *h + "'");
  }
  for (const auto& pair : detail::split_list(r.text("data.label_map").value_or(""))) {
    auto colon = pair.find(':');
    if (colon == std::string::npos) throw ManifestError("data.label_map", "entry '" + pair + "' is not from:to");
    d.label_map[detail::trim(pair.substr(0, colon))] = detail::trim(pair.substr(colon + 1));
  }
  d.mapped_labels = detail::split_list(r.text("data.mapped_labels").value_or(""));
  if ((d.train || d.test) && d.labels.empty()) throw ManifestError("data.labels", "required when a dataset is given");
  if (!d.label_map.empty() && d.mapped_labels.empty())
    throw ManifestError("data.mapped_labels", "required when data.label_map is set");
  try {
    if (!d.labels.empty()) (void)LabelSchema(d.task, d.labels);
    if (!d.labels.empty()) (void)d.schema();
  } catch (const std::invalid_argument& e) {
    throw ManifestError(d.label_map.empty() ? "data.labels" : "data.mapped_labels", e.what());
  }

  auto& p = m.pretrain;
  p.epochs = r.number("pretrain.epochs", p.epochs);
  p.learning_rate = r.number("pretrain.learning_rate", p.learning_rate);
  p.batch_size = r.number("pretrain.batch_size", p.batch_size);
  p.warmup_fraction = r.number("pretrain.warmup_fraction", p.warmup_fraction);
  p.mask_probability = r.number("pretrain.mask_probability", p.mask_probability);
  p.seed = r.number("pretrain.seed", p.seed);
  if (p.epochs == 0) throw ManifestError("pretrain.epochs", "must be positive");
  if (p.batch_size == 0) throw ManifestError("pretrain.batch_size", "must be positive");
  if (!(p.mask_probability > 0.0 && p.mask_probability < 1.0))
    throw ManifestError("pretrain.mask_probability", "must be in (0, 1)");
  if (!(p.warmup_fraction > 0.0 && p.warmup_fraction < 1.0))
    throw ManifestError("pretrain.warmup_fraction", "must be in (0, 1)");

  try {
    m.strategy = parse_strategy(r.text("strategy.name").value_or("scratch"));
  } catch (const std::invalid_argument& e) {
    throw ManifestError("strategy.name", e.what());
  }
  m.checkpoint = r.file("strategy.checkpoint");
  m.base_checkpoint = r.file("strategy.base_checkpoint");

  auto& t = m.train;
  t.learning_rate = r.number("train.learning_rate", t.learning_rate);
  t.epochs = r.number("train.epochs", t.epochs);
  t.batch_size = r.number("train.batch_size", t.batch_size);
  t.warmup_fraction = r.number("train.warmup_fraction", t.warmup_fraction);
  t.early_stop_patience = r.number("train.early_stop_patience", t.early_stop_patience);
  t.eval_every_steps = r.number("train.eval_every_steps", t.eval_every_steps);
  t.split_ratio = r.number("train.split_ratio", t.split_ratio);
  t.seed = r.number("train.seed", t.seed);
  if (auto dec = r.text("train.decay")) {
    if (*dec == "constant")
      t.decay = LrDecay::kConstant;
    else if (*dec == "linear")
      t.decay = LrDecay::kLinear;
    else
      throw ManifestError("train.decay", "expected constant or linear, got '" + *dec + "'");
  }
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    // "train config: <field> must ..." -> name the manifest field
    std::string msg = e.what();
    const std::string prefix = "train config: ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    throw ManifestError("train." + msg.substr(0, msg.find(' ')), msg);
  }

  m.output_dir = r.resolve(r.text("output.dir").value_or("out"));
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ManifestError("manifest", "cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  Manifest m = parse_manifest(ss.str(), path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
  m.source = path;
  return m;
}

/// Field-level checks a command needs beyond what parsing guarantees.
inline void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ManifestError(field, message);
}

/// Synthetic benchmark parameters from an INI file with a [synth] section.
/// Missing keys keep their defaults.
inline SynthSpec parse_synth_spec(const std::string& contents) {
  boost::property_tree::ptree tree;
  std::istringstream is(contents);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ManifestError("spec", "line " + std::to_string(e.line()) + ": " + e.message());
  }
  static const std::vector<std::string> kKeys{"seed",          "nouns",         "neutral_adjectives", "offensive_words",
                                              "verbs",         "positive_adjectives", "template_count", "anchor_bias",
                                              "balance",       "balance3",      "pretrain_per_language",
                                              "code_mix_fraction", "a_train",   "b_train",            "b_test",
                                              "b3_train",      "b3_test"};
  for (const auto& [section, body] : tree) {
    if (section != "synth") throw ManifestError(section, "unknown section (expected [synth])");
    for (const auto& kv : body)
      if (std::find(kKeys.begin(), kKeys.end(), kv.first) == kKeys.end())
        throw ManifestError("synth." + kv.first, "unknown field");
  }
  detail::ManifestReader r(tree, ".");
  SynthSpec s;
  s.seed = r.number("synth.seed", s.seed);
  s.nouns = r.number("synth.nouns", s.nouns);
  s.neutral_adjectives = r.number("synth.neutral_adjectives", s.neutral_adjectives);
  s.offensive_words = r.number("synth.offensive_words", s.offensive_words);
  s.verbs = r.number("synth.verbs", s.verbs);
  s.positive_adjectives = r.number("synth.positive_adjectives", s.positive_adjectives);
  s.template_count = r.number("synth.template_count", s.template_count);
  s.anchor_bias = r.number("synth.anchor_bias", s.anchor_bias);
  s.pretrain_per_language = r.number("synth.pretrain_per_language", s.pretrain_per_language);
  s.code_mix_fraction = r.number("synth.code_mix_fraction", s.code_mix_fraction);
  s.a_train = r.number("synth.a_train", s.a_train);
  s.b_train = r.number("synth.b_train", s.b_train);
  s.b_test = r.number("synth.b_test", s.b_test);
  s.b3_train = r.number("synth.b3_train", s.b3_train);
  s.b3_test = r.number("synth.b3_test", s.b3_test);
  auto fractions = [&](const std::string& field, std::vector<double>& into) {
    auto v = r.text(field);
    if (!v) return;
    into.clear();
    for (const auto& item : detail::split_list(*v)) {
      try {
        std::size_t used = 0;
        into.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ManifestError(field, "not a number: '" + item + "'");
      }
    }
  };
  fractions("synth.balance", s.balance);
  fractions("synth.balance3", s.balance3);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ManifestError("synth", e.what());
  }
  return s;
}

}  // namespace xlt
