#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlt/autograd.hpp"
#include "xlt/random.hpp"
#include "xlt/tokenizer.hpp"

namespace xlt {

inline constexpr std::size_t kMaxSequenceLength = 512;
inline constexpr double kInitStddev = 0.02;

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 4;
  std::size_t ff_size = 128;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  double dropout_rate = 0.1;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("encoder config: " + m); };
    if (num_layers == 0 || hidden_size == 0 || num_heads == 0 || ff_size == 0 || max_len == 0 || vocab_size == 0)
      fail("all sizes must be positive");
    if (hidden_size % num_heads != 0) fail("hidden_size must be divisible by num_heads");
    if (max_len > kMaxSequenceLength) fail("max_len must not exceed 512");
    if (max_len < 3) fail("max_len must be at least 3");
    if (vocab_size <= kNumSpecials) fail("vocab_size must exceed the special tokens");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct EncoderLayer {
  Parameter attn_norm_gain, attn_norm_bias;
  Parameter query_weight, query_bias;
  Parameter key_weight, key_bias;
  Parameter value_weight, value_bias;
  Parameter output_weight, output_bias;
  Parameter ff_norm_gain, ff_norm_bias;
  Parameter ff_in_weight, ff_in_bias;
  Parameter ff_out_weight, ff_out_bias;
};

/// Encoder parameters. Projection weights are stored [in, out].
struct EncoderWeights {
  Parameter token_embedding;     // [V, H]
  Parameter position_embedding;  // [max_len, H]
  std::vector<EncoderLayer> layers;
  Parameter final_norm_gain, final_norm_bias;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&token_embedding, &position_embedding};
    for (auto& l : layers)
      for (Parameter* p : {&l.attn_norm_gain, &l.attn_norm_bias, &l.query_weight, &l.query_bias, &l.key_weight,
                           &l.key_bias, &l.value_weight, &l.value_bias, &l.output_weight, &l.output_bias,
                           &l.ff_norm_gain, &l.ff_norm_bias, &l.ff_in_weight, &l.ff_in_bias, &l.ff_out_weight,
                           &l.ff_out_bias})
        out.push_back(p);
    out.push_back(&final_norm_gain);
    out.push_back(&final_norm_bias);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<EncoderWeights*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }
};

/// Normal(0, 0.02) projections and embeddings, unit gains, zero biases.
inline EncoderWeights init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t H = cfg.hidden_size, F = cfg.ff_size;
  auto normal = [&](std::string name, Shape s) { return Parameter(std::move(name), normal_tensor(std::move(s), kInitStddev, rng)); };
  auto fill = [](std::string name, Shape s, double v) { return Parameter(std::move(name), Tensor(std::move(s), v)); };
  EncoderWeights w;
  w.token_embedding = normal("encoder.embeddings.token", {cfg.vocab_size, H});
  w.position_embedding = normal("encoder.embeddings.position", {cfg.max_len, H});
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "encoder.layers." + std::to_string(i) + ".";
    EncoderLayer l;
    l.attn_norm_gain = fill(p + "attention_norm.gain", {H}, 1.0);
    l.attn_norm_bias = fill(p + "attention_norm.bias", {H}, 0.0);
    l.query_weight = normal(p + "attention.query.weight", {H, H});
    l.query_bias = fill(p + "attention.query.bias", {H}, 0.0);
    l.key_weight = normal(p + "attention.key.weight", {H, H});
    l.key_bias = fill(p + "attention.key.bias", {H}, 0.0);
    l.value_weight = normal(p + "attention.value.weight", {H, H});
    l.value_bias = fill(p + "attention.value.bias", {H}, 0.0);
    l.output_weight = normal(p + "attention.output.weight", {H, H});
    l.output_bias = fill(p + "attention.output.bias", {H}, 0.0);
    l.ff_norm_gain = fill(p + "feed_forward_norm.gain", {H}, 1.0);
    l.ff_norm_bias = fill(p + "feed_forward_norm.bias", {H}, 0.0);
    l.ff_in_weight = normal(p + "feed_forward.in.weight", {H, F});
    l.ff_in_bias = fill(p + "feed_forward.in.bias", {F}, 0.0);
    l.ff_out_weight = normal(p + "feed_forward.out.weight", {F, H});
    l.ff_out_bias = fill(p + "feed_forward.out.bias", {H}, 0.0);
    w.layers.push_back(std::move(l));
  }
  w.final_norm_gain = fill("encoder.final_norm.gain", {H}, 1.0);
  w.final_norm_bias = fill("encoder.final_norm.bias", {H}, 0.0);
  return w;
}

/// Training-mode switch plus the counter key for dropout masks.
struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  /// Distinguishes sequences that share a step (e.g. position in the batch).
  std::uint64_t stream = 0;
};

namespace detail {

inline Var linear(Tape& tape, Var x, const Parameter& w, const Parameter& b) {
  return add(matmul(x, tape.param(w)), tape.param(b));
}

}  // namespace detail

/// Pre-norm transformer encoder over ids/mask of equal length T <= max_len.
///
/// Masked positions are excluded as attention keys, so the rows of unmasked
/// positions do not depend on what sits in the masked ones.
inline Var encode_tokens(Tape& tape, const EncoderWeights& w, const EncoderConfig& cfg,
                         std::span<const std::int32_t> ids, std::span<const std::uint8_t> mask,
                         const ForwardOptions& opt = {}) {
  if (ids.size() != mask.size())
    throw ShapeError("encode_sequence: " + std::to_string(ids.size()) + " ids but " + std::to_string(mask.size()) +
                     " mask entries");
  if (ids.empty() || ids.size() > cfg.max_len)
    throw ShapeError("encode_sequence: sequence length " + std::to_string(ids.size()) + " outside [1, " +
                     std::to_string(cfg.max_len) + "]");
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw std::out_of_range("encode_sequence: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
  const std::size_t T = ids.size();
  std::uint64_t dropout_calls = 0;
  auto drop = [&](Var v) {
    return dropout(v, cfg.dropout_rate, {opt.seed, opt.step, opt.stream * 1024 + dropout_calls++}, opt.train);
  };

  std::vector<std::size_t> positions(T);
  for (std::size_t i = 0; i < T; ++i) positions[i] = i;
  Var x = add(embedding(tape.param(w.token_embedding), ids), select_rows(tape.param(w.position_embedding), positions));
  x = drop(x);
  for (const auto& l : w.layers) {
    Var a = layer_norm(x, tape.param(l.attn_norm_gain), tape.param(l.attn_norm_bias));
    Var q = detail::linear(tape, a, l.query_weight, l.query_bias);
    Var k = detail::linear(tape, a, l.key_weight, l.key_bias);
    Var v = detail::linear(tape, a, l.value_weight, l.value_bias);
    Var att = attention(q, k, v, cfg.num_heads, mask);
    x = add(x, drop(detail::linear(tape, att, l.output_weight, l.output_bias)));
    Var f = layer_norm(x, tape.param(l.ff_norm_gain), tape.param(l.ff_norm_bias));
    f = gelu(detail::linear(tape, f, l.ff_in_weight, l.ff_in_bias));
    x = add(x, drop(detail::linear(tape, f, l.ff_out_weight, l.ff_out_bias)));
  }
  return layer_norm(x, tape.param(w.final_norm_gain), tape.param(w.final_norm_bias));
}

/// Hidden states [max_len, H] for a full padded sequence.
inline Var encode_sequence(Tape& tape, const EncoderWeights& w, const EncoderConfig& cfg, const TokenSequence& seq,
                           const ForwardOptions& opt = {}) {
  if (seq.ids.size() != cfg.max_len)
    throw ShapeError("encode_sequence: sequence length " + std::to_string(seq.ids.size()) + " != max_len " +
                     std::to_string(cfg.max_len));
  return encode_tokens(tape, w, cfg, seq.ids, seq.mask, opt);
}

/// Hidden states of the real (unpadded) prefix only. Rows equal the
/// corresponding rows of encode_sequence bitwise, at a fraction of the cost.
inline Var encode_prefix(Tape& tape, const EncoderWeights& w, const EncoderConfig& cfg,
                         std::span<const std::int32_t> ids, const ForwardOptions& opt = {}) {
  std::vector<std::uint8_t> mask(ids.size(), 1);
  return encode_tokens(tape, w, cfg, ids, mask, opt);
}

inline Tensor encode_sequence(const EncoderWeights& w, const EncoderConfig& cfg, const TokenSequence& seq) {
  Tape tape(false);
  return encode_sequence(tape, w, cfg, seq).value();
}

/// The [CLS] row of a hidden-state matrix, as a [1, H] node.
inline Var cls_state(Var hidden) {
  const std::size_t first = 0;
  return select_rows(hidden, {&first, 1});
}

inline std::vector<double> cls_state(const Tensor& hidden) {
  if (hidden.rank() != 2 || hidden.shape[0] == 0) throw ShapeError("cls_state: expected non-empty hidden states");
  auto r = hidden.row(0);
  return {r.begin(), r.end()};
}

}  // namespace xlt
