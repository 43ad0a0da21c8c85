#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xlt/datasets.hpp"
#include "xlt/model.hpp"
#include "xlt/tokenizer.hpp"

namespace xlt {

inline constexpr std::array<char, 8> kCheckpointMagic{'X', 'L', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

/// Raised when a checkpoint cannot be used for the requested model; callers
/// treat it as a configuration problem rather than a runtime failure.
class TransferError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

/// Digest of the vocabulary file bytes.
inline std::string vocabulary_hash(const Vocabulary& v) { return sha256_hex(v.serialize()); }

namespace meta {
inline constexpr const char* kTask = "task";
inline constexpr const char* kLabels = "labels";
inline constexpr const char* kSeed = "seed";
inline constexpr const char* kSteps = "steps";
inline constexpr const char* kVocabHash = "vocab_sha256";
}  // namespace meta

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  EncoderConfig config;
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
  bool has_classifier() const { return find("head.classifier.weight") && find("head.classifier.bias"); }
  bool has_mlm() const { return find("head.mlm.projection") && find("head.mlm.bias"); }
  std::size_t num_classes() const {
    const Tensor* w = find("head.classifier.weight");
    return w ? w->shape.at(0) : 0;
  }

  /// Label schema stored by the training run, if any.
  std::optional<LabelSchema> schema() const {
    auto it = metadata.find(meta::kLabels);
    if (it == metadata.end()) return std::nullopt;
    std::vector<std::string> labels;
    std::string item;
    std::istringstream is(it->second);
    while (std::getline(is, item, '|')) labels.push_back(item);
    auto task = metadata.find(meta::kTask);
    return LabelSchema(task == metadata.end() ? "" : task->second, labels);
  }
};

/// Metadata entries for a label schema ('|' separated names).
inline void put_schema(std::map<std::string, std::string>& metadata, const LabelSchema& schema) {
  std::string joined;
  for (const auto& l : schema.labels()) {
    if (l.find('|') != std::string::npos) throw std::invalid_argument("checkpoint: label names may not contain '|'");
    if (!joined.empty()) joined += '|';
    joined += l;
  }
  metadata[meta::kLabels] = joined;
  metadata[meta::kTask] = schema.task();
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointFormatError("checkpoint: truncated file");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int width) {
    auto s = take(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = width - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string config_block(const EncoderConfig& c, const std::map<std::string, std::string>& metadata) {
  std::ostringstream os;
  os << "config.num_layers=" << c.num_layers << '\n'
     << "config.hidden_size=" << c.hidden_size << '\n'
     << "config.num_heads=" << c.num_heads << '\n'
     << "config.ff_size=" << c.ff_size << '\n'
     << "config.max_len=" << c.max_len << '\n'
     << "config.vocab_size=" << c.vocab_size << '\n'
     << "config.dropout_rate=" << std::bit_cast<std::uint64_t>(c.dropout_rate) << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint: metadata key/value '" + k + "' contains '=' or a newline");
    os << "meta." << k << '=' << v << '\n';
  }
  return os.str();
}

}  // namespace detail

/// Serializes the model: magic, version, key/value text block, then one
/// record per tensor (name, dtype, shape, little-endian f64 payload).
inline std::string serialize_checkpoint(const Model& model, const std::map<std::string, std::string>& metadata) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  const std::string block = detail::config_block(model.config, metadata);
  detail::put_u64(out, block.size());
  out += block;
  const auto params = model.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    out += static_cast<char>(kDtypeF64);
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.shape.size()));
    for (auto d : p->value.shape) detail::put_u64(out, d);
    for (double v : p->value.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  detail::Reader rd(bytes);
  auto magic = rd.take(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw CheckpointFormatError("checkpoint: unrecognized magic bytes (not a checkpoint or unsupported version)");
  Checkpoint ck;
  ck.version = static_cast<std::uint32_t>(rd.uint(4));
  if (ck.version != kCheckpointVersion)
    throw CheckpointFormatError("checkpoint: unsupported version " + std::to_string(ck.version));
  const auto block_len = rd.uint(8);
  std::istringstream block{std::string(rd.take(block_len))};
  std::string line;
  std::map<std::string, std::string> cfg;
  while (std::getline(block, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointFormatError("checkpoint: bad header line '" + line + "'");
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.starts_with("meta."))
      ck.metadata[key.substr(5)] = value;
    else if (key.starts_with("config."))
      cfg[key.substr(7)] = value;
    else
      throw CheckpointFormatError("checkpoint: unknown header key '" + key + "'");
  }
  auto field = [&](const char* name) -> std::uint64_t {
    auto it = cfg.find(name);
    if (it == cfg.end()) throw CheckpointFormatError(std::string("checkpoint: missing config.") + name);
    return std::stoull(it->second);
  };
  ck.config.num_layers = field("num_layers");
  ck.config.hidden_size = field("hidden_size");
  ck.config.num_heads = field("num_heads");
  ck.config.ff_size = field("ff_size");
  ck.config.max_len = field("max_len");
  ck.config.vocab_size = field("vocab_size");
  ck.config.dropout_rate = std::bit_cast<double>(field("dropout_rate"));
  const auto count = rd.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(rd.take(rd.uint(4)));
    if (static_cast<std::uint8_t>(rd.take(1)[0]) != kDtypeF64)
      throw CheckpointFormatError("checkpoint: tensor " + t.name + " has unsupported dtype");
    Shape shape(rd.uint(4));
    for (auto& d : shape) d = rd.uint(8);
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(rd.uint(8));
    t.value = Tensor(std::move(shape), std::move(data));
    ck.tensors.push_back(std::move(t));
  }
  if (!rd.done()) throw CheckpointFormatError("checkpoint: trailing bytes");
  return ck;
}

/// Writes atomically through a temporary file and rename.
inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const std::map<std::string, std::string>& metadata) {
  const std::string bytes = serialize_checkpoint(model, metadata);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("save_checkpoint: cannot rename to " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_checkpoint(ss.str());
  } catch (const CheckpointFormatError& e) {
    throw CheckpointFormatError(path.string() + ": " + e.what());
  }
}

struct FieldMismatch {
  std::string field;
  std::string checkpoint_value;
  std::string requested_value;
};

struct CompatibilityReport {
  std::vector<FieldMismatch> mismatches;
  bool compatible() const { return mismatches.empty(); }

  std::string describe() const {
    std::string s;
    for (const auto& m : mismatches) {
      if (!s.empty()) s += ", ";
      s += m.field + " (checkpoint " + m.checkpoint_value + ", requested " + m.requested_value + ")";
    }
    return s;
  }
};

/// Field-by-field comparison of the checkpoint's encoder config with config.
inline CompatibilityReport compatibility_check(const Checkpoint& ck, const EncoderConfig& config) {
  CompatibilityReport r;
  auto cmp = [&](const char* name, auto a, auto b) {
    if (a != b) r.mismatches.push_back({name, std::to_string(a), std::to_string(b)});
  };
  cmp("num_layers", ck.config.num_layers, config.num_layers);
  cmp("hidden_size", ck.config.hidden_size, config.hidden_size);
  cmp("num_heads", ck.config.num_heads, config.num_heads);
  cmp("ff_size", ck.config.ff_size, config.ff_size);
  cmp("max_len", ck.config.max_len, config.max_len);
  cmp("vocab_size", ck.config.vocab_size, config.vocab_size);
  cmp("dropout_rate", ck.config.dropout_rate, config.dropout_rate);
  return r;
}

/// Refuses transfer across different subword vocabularies.
inline void check_vocabulary(const Checkpoint& ck, const Vocabulary& vocab) {
  auto it = ck.metadata.find(meta::kVocabHash);
  if (it == ck.metadata.end()) throw TransferError("checkpoint carries no vocabulary hash");
  if (it->second != vocabulary_hash(vocab))
    throw TransferError("checkpoint was trained with a different vocabulary (hash " + it->second + ")");
}

namespace detail {

inline void restore(Parameter& p, const Checkpoint& ck) {
  const Tensor* t = ck.find(p.name);
  if (!t) throw TransferError("checkpoint is missing tensor " + p.name);
  if (t->shape != p.value.shape)
    throw TransferError("checkpoint tensor " + p.name + " has shape " + shape_str(t->shape) + ", expected " +
                        shape_str(p.value.shape));
  p.value.data = t->data;
}

inline Model restore_encoder(const Checkpoint& ck) {
  ck.config.validate();
  Model m;
  m.config = ck.config;
  m.encoder = init_encoder(ck.config, 0);
  for (Parameter* p : m.encoder.parameters()) restore(*p, ck);
  return m;
}

}  // namespace detail

/// Inter-language strategy: encoder and classifier head restored exactly.
inline Model load_full(const Checkpoint& ck, std::size_t target_num_classes) {
  if (!ck.has_classifier()) throw TransferError("load_full: checkpoint has no classifier head");
  if (ck.num_classes() != target_num_classes)
    throw TransferError("load_full: checkpoint head has " + std::to_string(ck.num_classes()) +
                        " classes but the target task has " + std::to_string(target_num_classes) +
                        "; use load_encoder_only (transfer-encoder-only) for a different label count");
  Model m = detail::restore_encoder(ck);
  m.classifier = make_classifier_head(target_num_classes, m.config.hidden_size, 0);
  detail::restore(m.classifier->weight, ck);
  detail::restore(m.classifier->bias, ck);
  if (ck.has_mlm()) {
    m.mlm = make_mlm_head(m.config.vocab_size, m.config.hidden_size, 0);
    detail::restore(m.mlm->projection, ck);
    detail::restore(m.mlm->bias, ck);
  }
  return m;
}

/// Inter-task strategy: encoder restored, classifier head freshly drawn from
/// seed. Head tensors in the checkpoint are never read.
inline Model load_encoder_only(const Checkpoint& ck, std::size_t target_num_classes, std::uint64_t seed,
                               const std::optional<EncoderConfig>& requested = std::nullopt) {
  if (requested) {
    auto report = compatibility_check(ck, *requested);
    if (!report.compatible()) throw TransferError("load_encoder_only: encoder config mismatch: " + report.describe());
  }
  Model m = detail::restore_encoder(ck);
  m.classifier = make_classifier_head(target_num_classes, m.config.hidden_size, derive_seed(seed, 2));
  return m;
}

}  // namespace xlt
