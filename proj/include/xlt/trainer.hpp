#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xlt/datasets.hpp"
#include "xlt/metrics.hpp"
#include "xlt/model.hpp"
#include "xlt/report.hpp"
#include "xlt/tokenizer.hpp"

namespace xlt {

enum class LrDecay { kConstant, kLinear };

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  double warmup_fraction = 0.10;
  std::size_t early_stop_patience = 10;
  /// 0 selects max(1, ceil(total_steps / 30)).
  std::size_t eval_every_steps = 0;
  double split_ratio = 0.8;
  std::uint64_t seed = 42;
  LrDecay decay = LrDecay::kConstant;
  double min_improvement = 1e-6;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must be in (0, 1)");
    if (early_stop_patience < 1) fail("early_stop_patience must be at least 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) fail("split_ratio must be in (0, 1)");
    if (batch_size == 0) fail("batch_size must be positive");
    if (epochs == 0) fail("epochs must be positive");
    if (!(learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  }
};

/// Linear warmup from 0 to base_lr over the first ceil(fraction * total)
/// steps, then constant (or linear decay to 0 with LrDecay::kLinear).
inline double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction = 0.10,
                          LrDecay decay = LrDecay::kConstant) {
  if (total_steps == 0) throw std::invalid_argument("lr_schedule: total_steps must be positive");
  if (step > total_steps) throw std::invalid_argument("lr_schedule: step beyond total_steps");
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (decay == LrDecay::kLinear && total_steps > warmup)
    return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
  return base_lr;
}

/// Stratified train/validation split when every class has at least two
/// instances, plain shuffle otherwise. Fewer than two instances: all train.
inline std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& ds, double ratio,
                                                               std::uint64_t seed) {
  LabeledDataset train, val;
  train.schema = val.schema = ds.schema;
  train.provenance = val.provenance = ds.provenance;
  if (ds.size() < 2) {
    train.instances = ds.instances;
    return {train, val};
  }
  Rng rng(seed);
  const auto counts = ds.class_counts();
  const bool stratify = std::all_of(counts.begin(), counts.end(), [](auto c) { return c == 0 || c >= 2; });
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ds.size()))), 1, ds.size() - 1);
  std::vector<std::size_t> train_idx, val_idx;
  if (stratify) {
    auto by_class = detail::indices_by_class(ds);
    // Each present class keeps at least one instance on each side.
    std::vector<std::size_t> room(counts.size()), base(counts.size());
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      base[c] = counts[c] ? 1 : 0;
      room[c] = counts[c] ? counts[c] - 2 : 0;
      assigned += base[c];
    }
    std::vector<std::size_t> extra(counts.size(), 0);
    if (n_train > assigned) extra = proportional_quotas(room, std::min(n_train - assigned, [&] {
                                                          std::size_t r = 0;
                                                          for (auto x : room) r += x;
                                                          return r;
                                                        }()));
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      deterministic_shuffle(by_class[c], rng);
      const std::size_t take = counts[c] ? std::min(base[c] + extra[c], counts[c] - 1) : 0;
      train_idx.insert(train_idx.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take));
      val_idx.insert(val_idx.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take), by_class[c].end());
    }
    deterministic_shuffle(train_idx, rng);
    deterministic_shuffle(val_idx, rng);
  } else {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    deterministic_shuffle(all, rng);
    train_idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    val_idx.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  }
  for (auto i : train_idx) train.instances.push_back(ds.instances[i]);
  for (auto i : val_idx) val.instances.push_back(ds.instances[i]);
  return {train, val};
}

/// Real-token ids ([CLS] ... [SEP]) plus label, tokenized once up front.
struct EncodedExample {
  std::vector<std::int32_t> ids;
  std::int32_t label = 0;
};

inline std::vector<EncodedExample> encode_dataset(const LabeledDataset& ds, const Vocabulary& vocab,
                                                  std::size_t max_len) {
  std::vector<EncodedExample> out;
  out.reserve(ds.size());
  for (const auto& in : ds.instances) {
    auto seq = vocab.encode(in.text, max_len);
    seq.ids.resize(seq.real_length());
    out.push_back({std::move(seq.ids), in.label});
  }
  return out;
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step(const std::unordered_map<const Parameter*, Tensor>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto it = grads.find(params_[i]);
      if (it == grads.end()) continue;
      auto& w = params_[i]->value.data;
      const auto& g = it->second.data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

inline void accumulate(std::unordered_map<const Parameter*, Tensor>& into,
                       const std::unordered_map<const Parameter*, Tensor>& g) {
  for (const auto& [p, t] : g) {
    auto [it, inserted] = into.try_emplace(p, t);
    if (!inserted) detail::axpy(it->second, t);
  }
}

struct EvalOutcome {
  double loss = 0.0;
  double macro_f1 = 0.0;
};

/// Mean cross-entropy and macro F1 of the classifier on examples.
inline EvalOutcome evaluate_examples(const Model& m, const std::vector<EncodedExample>& examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  double loss = 0.0;
  std::vector<std::int32_t> gold, pred;
  for (const auto& ex : examples) {
    Tape tape(false);
    Var logits = sequence_logits(tape, m, ex.ids);
    loss += cross_entropy(logits, {&ex.label, 1}).value().item();
    std::vector<double> probs(logits.value().size());
    softmax_row(logits.value().data, probs);
    gold.push_back(ex.label);
    pred.push_back(static_cast<std::int32_t>(predict_label(probs)));
  }
  auto report = compute_report(confusion_matrix(gold, pred, m.num_classes()));
  return {loss / static_cast<double>(examples.size()), report.macro_f1};
}

/// Predicted label per example.
inline std::vector<std::int32_t> predict_examples(const Model& m, const std::vector<EncodedExample>& examples) {
  std::vector<std::int32_t> pred;
  pred.reserve(examples.size());
  for (const auto& ex : examples) pred.push_back(static_cast<std::int32_t>(predict_label(predict_proba_prefix(m, ex.ids))));
  return pred;
}

enum class StopReason { kEpochsExhausted, kEarlyStopped };

inline const char* to_string(StopReason r) {
  return r == StopReason::kEarlyStopped ? "early-stopped" : "epochs-exhausted";
}

struct EvalRound {
  std::size_t round = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double eval_loss = std::numeric_limits<double>::quiet_NaN();
  double eval_macro_f1 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  /// Validation loss of the starting weights (the early-stopping baseline).
  double initial_eval_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<EvalRound> rounds;
  StopReason stop = StopReason::kEpochsExhausted;
  std::size_t total_steps = 0;
  std::size_t steps_taken = 0;
  /// Round whose weights were kept (0 = starting weights).
  std::size_t best_round = 0;
  double best_eval_loss = std::numeric_limits<double>::quiet_NaN();
};

/// round,step,train_loss,eval_loss,eval_macro_f1
inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "round,step,train_loss,eval_loss,eval_macro_f1\n";
  for (const auto& r : h.rounds)
    os << r.round << ',' << r.step << ',' << format_full(r.train_loss) << ',' << format_full(r.eval_loss) << ','
       << format_full(r.eval_macro_f1) << '\n';
  return os.str();
}

/// Replaces validation for tests; receives the model being trained.
using Evaluator = std::function<EvalOutcome(const Model&)>;

struct TrainResult {
  Model model;
  TrainHistory history;
};

namespace detail {
inline std::vector<Tensor> snapshot(const Model& m) {
  std::vector<Tensor> out;
  for (const Parameter* p : m.parameters()) out.push_back(p->value);
  return out;
}
inline void restore_snapshot(Model& m, const std::vector<Tensor>& snap) {
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}
}  // namespace detail

/// Fine-tunes model on dataset: 0.8/0.2 split, batches of batch_size, Adam
/// with warmup, validation every eval_every_steps, early stopping after
/// patience rounds without improvement, best-validation weights returned.
inline TrainResult train_classifier(Model model, const Vocabulary& vocab, const LabeledDataset& dataset,
                                    const TrainConfig& cfg, const Evaluator& evaluator = {}) {
  cfg.validate();
  if (!model.classifier) throw std::invalid_argument("train_classifier: model has no classifier head");
  if (dataset.schema.size() != model.num_classes())
    throw std::invalid_argument("train_classifier: dataset schema has " + std::to_string(dataset.schema.size()) +
                                " labels but the model head has " + std::to_string(model.num_classes()));
  for (const auto& in : dataset.instances)
    if (in.label < 0 || static_cast<std::size_t>(in.label) >= model.num_classes())
      throw std::invalid_argument("train_classifier: unknown label index " + std::to_string(in.label) +
                                  " on instance " + in.id);
  auto [train_set, val_set] = split_dataset(dataset, cfg.split_ratio, derive_seed(cfg.seed, 10));
  if (train_set.empty())
    throw std::invalid_argument("train_classifier: empty training split; evaluate the initial model instead");

  const auto train_ex = encode_dataset(train_set, vocab, model.config.max_len);
  const auto val_ex = encode_dataset(val_set, vocab, model.config.max_len);
  const bool can_eval = static_cast<bool>(evaluator) || !val_ex.empty();
  auto eval = [&](const Model& m) { return evaluator ? evaluator(m) : evaluate_examples(m, val_ex); };

  const std::size_t steps_per_epoch = (train_ex.size() + cfg.batch_size - 1) / cfg.batch_size;
  TrainHistory hist;
  hist.total_steps = cfg.epochs * steps_per_epoch;
  const std::size_t eval_every =
      cfg.eval_every_steps ? cfg.eval_every_steps : std::max<std::size_t>(1, (hist.total_steps + 29) / 30);

  Adam adam(model.parameters());
  std::vector<Tensor> best = detail::snapshot(model);
  if (can_eval) {
    hist.initial_eval_loss = eval(model).loss;
    hist.best_eval_loss = hist.initial_eval_loss;
  }
  std::size_t stale = 0, step = 0;
  double loss_since_eval = 0.0;
  std::size_t batches_since_eval = 0;
  Rng order_rng(derive_seed(cfg.seed, 11));
  const std::uint64_t dropout_seed = derive_seed(cfg.seed, 12);
  bool stopped = false;

  for (std::size_t epoch = 0; epoch < cfg.epochs && !stopped; ++epoch) {
    std::vector<std::size_t> order(train_ex.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    deterministic_shuffle(order, order_rng);
    for (std::size_t b = 0; b < steps_per_epoch && !stopped; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::unordered_map<const Parameter*, Tensor> grads;
      double batch_loss = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& ex = train_ex[order[i]];
        Tape tape;
        Var logits = sequence_logits(tape, model, ex.ids, {true, dropout_seed, step, i - lo});
        Var loss = scale(cross_entropy(logits, {&ex.label, 1}), 1.0 / static_cast<double>(hi - lo));
        batch_loss += loss.value().item();
        accumulate(grads, tape.backward(loss));
      }
      ++step;
      adam.step(grads, lr_schedule(step, hist.total_steps, cfg.learning_rate, cfg.warmup_fraction, cfg.decay));
      loss_since_eval += batch_loss;
      ++batches_since_eval;

      if (step % eval_every == 0 || step == hist.total_steps) {
        EvalRound r;
        r.round = hist.rounds.size() + 1;
        r.step = step;
        r.train_loss = loss_since_eval / static_cast<double>(batches_since_eval);
        loss_since_eval = 0.0;
        batches_since_eval = 0;
        if (can_eval) {
          const auto out = eval(model);
          r.eval_loss = out.loss;
          r.eval_macro_f1 = out.macro_f1;
          if (out.loss < hist.best_eval_loss - cfg.min_improvement) {
            hist.best_eval_loss = out.loss;
            hist.best_round = r.round;
            best = detail::snapshot(model);
            stale = 0;
          } else if (++stale >= cfg.early_stop_patience) {
            hist.stop = StopReason::kEarlyStopped;
            stopped = true;
          }
        }
        hist.rounds.push_back(r);
      }
    }
  }
  hist.steps_taken = step;
  if (can_eval)
    detail::restore_snapshot(model, best);
  else
    hist.best_round = hist.rounds.empty() ? 0 : hist.rounds.back().round;
  return {std::move(model), std::move(hist)};
}

// ---------------------------------------------------------------------------
// Masked-language-model pretraining.

struct PretrainConfig {
  double learning_rate = 2e-3;
  std::size_t epochs = 6;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.10;
  double mask_probability = 0.15;
  std::uint64_t seed = 7;
};

/// Masking decision for one sequence.
struct MaskPlan {
  std::vector<std::int32_t> input;    // ids after corruption
  std::vector<std::size_t> positions;  // selected positions
  std::vector<std::int32_t> targets;   // original ids at those positions
  std::size_t replaced_with_mask = 0;
  std::size_t replaced_with_random = 0;
  std::size_t kept = 0;
};

/// Selects each non-special position with probability mask_probability; of
/// the selected, 80% become [MASK], 10% a random non-special token, 10% stay.
inline MaskPlan plan_masking(std::span<const std::int32_t> ids, std::size_t vocab_size, double mask_probability,
                             Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MaskPlan plan;
  plan.input.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < static_cast<std::int32_t>(kNumSpecials)) continue;
    if (u(rng) >= mask_probability) continue;
    plan.positions.push_back(i);
    plan.targets.push_back(ids[i]);
    const double r = u(rng);
    if (r < 0.8) {
      plan.input[i] = kMask;
      ++plan.replaced_with_mask;
    } else if (r < 0.9) {
      plan.input[i] = static_cast<std::int32_t>(kNumSpecials + rng() % (vocab_size - kNumSpecials));
      ++plan.replaced_with_random;
    } else {
      ++plan.kept;
    }
  }
  return plan;
}

struct PretrainHistory {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// Masked-token objective over the corpus; adds an MLM head when missing.
inline PretrainHistory pretrain_mlm(Model& model, const Vocabulary& vocab, const std::vector<std::string>& corpus,
                                    const PretrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_mlm: empty corpus");
  if (vocab.size() != model.config.vocab_size)
    throw std::invalid_argument("pretrain_mlm: vocabulary size " + std::to_string(vocab.size()) +
                                " differs from model vocab_size " + std::to_string(model.config.vocab_size));
  if (!model.mlm) model.mlm = make_mlm_head(model.config.vocab_size, model.config.hidden_size, derive_seed(cfg.seed, 3));
  std::vector<std::vector<std::int32_t>> seqs;
  for (const auto& line : corpus) {
    auto s = vocab.encode(line, model.config.max_len);
    s.ids.resize(s.real_length());
    seqs.push_back(std::move(s.ids));
  }
  const std::size_t steps_per_epoch = (seqs.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  Adam adam(model.parameters());
  Rng rng(derive_seed(cfg.seed, 20));
  const std::uint64_t dropout_seed = derive_seed(cfg.seed, 21);
  PretrainHistory hist;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    deterministic_shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<MaskPlan> plans;
      std::size_t targets = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        plans.push_back(plan_masking(seqs[order[i]], vocab.size(), cfg.mask_probability, rng));
        targets += plans.back().positions.size();
      }
      ++hist.steps;
      if (targets == 0) continue;
      std::unordered_map<const Parameter*, Tensor> grads;
      for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& plan = plans[i];
        if (plan.positions.empty()) continue;
        Tape tape;
        Var hidden = encode_prefix(tape, model.encoder, model.config, plan.input, {true, dropout_seed, hist.steps, i});
        Var logits = mlm_logits(tape, *model.mlm, hidden, plan.positions);
        const double weight = static_cast<double>(plan.positions.size()) / static_cast<double>(targets);
        Var loss = scale(cross_entropy(logits, plan.targets), weight);
        epoch_loss += loss.value().item() * static_cast<double>(targets);
        accumulate(grads, tape.backward(loss));
      }
      epoch_targets += targets;
      adam.step(grads, lr_schedule(hist.steps, total, cfg.learning_rate, cfg.warmup_fraction));
    }
    hist.epoch_loss.push_back(epoch_targets ? epoch_loss / static_cast<double>(epoch_targets) : 0.0);
  }
  return hist;
}

}  // namespace xlt
