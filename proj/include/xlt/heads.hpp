#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlt/autograd.hpp"
#include "xlt/encoder.hpp"
#include "xlt/random.hpp"

namespace xlt {

/// Softmax classifier over the [CLS] state: p(c|h) = softmax(W h + b).
struct ClassifierHead {
  Parameter weight;  // [C, H]
  Parameter bias;    // [C]

  std::size_t num_classes() const { return weight.value.shape.at(0); }
  std::size_t hidden_size() const { return weight.value.shape.at(1); }
};

inline ClassifierHead make_classifier_head(std::size_t num_classes, std::size_t hidden_size, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("classifier head: need at least 2 classes");
  Rng rng(seed);
  return {Parameter("head.classifier.weight", normal_tensor({num_classes, hidden_size}, kInitStddev, rng)),
          Parameter("head.classifier.bias", Tensor({num_classes}, 0.0))};
}

/// Logits [N, C] for a stack of [CLS] states h [N, H].
inline Var classifier_logits(Tape& tape, const ClassifierHead& head, Var h) {
  return add(matmul(h, tape.param(head.weight), Transpose::kSecond), tape.param(head.bias));
}

inline std::vector<double> classify(const ClassifierHead& head, std::span<const double> h) {
  if (h.size() != head.hidden_size())
    throw ShapeError("classify: state of length " + std::to_string(h.size()) + " for head of hidden size " +
                     std::to_string(head.hidden_size()));
  const std::size_t C = head.num_classes(), H = h.size();
  std::vector<double> logits(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < H; ++j) s += h[j] * head.weight.value.data[c * H + j];
    logits[c] = s + head.bias.value.data[c];
  }
  std::vector<double> probs(C);
  softmax_row(logits, probs);
  return probs;
}

/// Argmax with ties going to the lowest index.
inline std::size_t predict_label(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("predict_label: empty probability vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

/// Masked-token prediction head; not tied to the input embeddings.
struct MlmHead {
  Parameter projection;  // [V, H]
  Parameter bias;        // [V]

  std::size_t vocab_size() const { return projection.value.shape.at(0); }
};

inline MlmHead make_mlm_head(std::size_t vocab_size, std::size_t hidden_size, std::uint64_t seed) {
  Rng rng(seed);
  return {Parameter("head.mlm.projection", normal_tensor({vocab_size, hidden_size}, kInitStddev, rng)),
          Parameter("head.mlm.bias", Tensor({vocab_size}, 0.0))};
}

/// Logits [k, V] for the hidden states at the given positions.
inline Var mlm_logits(Tape& tape, const MlmHead& head, Var hidden, std::span<const std::size_t> positions) {
  const std::size_t rows = hidden.value().rows();
  for (auto p : positions)
    if (p >= rows)
      throw std::out_of_range("mlm_logits: masked position " + std::to_string(p) + " outside sequence of " +
                              std::to_string(rows));
  Var picked = select_rows(hidden, positions);
  return add(matmul(picked, tape.param(head.projection), Transpose::kSecond), tape.param(head.bias));
}

inline Tensor mlm_logits(const MlmHead& head, const Tensor& hidden, std::span<const std::size_t> positions) {
  Tape tape(false);
  return mlm_logits(tape, head, tape.constant(hidden), positions).value();
}

}  // namespace xlt
