#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "xlt/encoder.hpp"
#include "xlt/heads.hpp"

namespace xlt {

/// Encoder plus whichever heads the current task uses.
struct Model {
  EncoderConfig config;
  EncoderWeights encoder;
  std::optional<ClassifierHead> classifier;
  std::optional<MlmHead> mlm;

  std::vector<Parameter*> parameters() {
    auto out = encoder.parameters();
    if (classifier) out.insert(out.end(), {&classifier->weight, &classifier->bias});
    if (mlm) out.insert(out.end(), {&mlm->projection, &mlm->bias});
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  std::size_t num_classes() const { return classifier ? classifier->num_classes() : 0; }
};

/// Fresh model with a classifier head of num_classes rows (0 = no head).
inline Model make_model(const EncoderConfig& cfg, std::size_t num_classes, std::uint64_t seed) {
  Model m;
  m.config = cfg;
  m.encoder = init_encoder(cfg, derive_seed(seed, 1));
  if (num_classes > 0) m.classifier = make_classifier_head(num_classes, cfg.hidden_size, derive_seed(seed, 2));
  return m;
}

/// Classifier logits [1, C] for one sequence of real tokens ([CLS] ... [SEP]).
inline Var sequence_logits(Tape& tape, const Model& m, std::span<const std::int32_t> ids,
                           const ForwardOptions& opt = {}) {
  if (!m.classifier) throw std::logic_error("sequence_logits: model has no classifier head");
  Var hidden = encode_prefix(tape, m.encoder, m.config, ids, opt);
  return classifier_logits(tape, *m.classifier, cls_state(hidden));
}

/// Class distribution for a padded sequence via the full encoder path.
inline std::vector<double> predict_proba(const Model& m, const TokenSequence& seq) {
  if (!m.classifier) throw std::logic_error("predict_proba: model has no classifier head");
  return classify(*m.classifier, cls_state(encode_sequence(m.encoder, m.config, seq)));
}

/// Same distribution computed over the real prefix only.
inline std::vector<double> predict_proba_prefix(const Model& m, std::span<const std::int32_t> ids) {
  Tape tape(false);
  Var logits = sequence_logits(tape, m, ids);
  const auto& z = logits.value().data;
  std::vector<double> probs(z.size());
  softmax_row(z, probs);
  return probs;
}

}  // namespace xlt
