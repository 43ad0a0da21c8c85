#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xlt/datasets.hpp"
#include "xlt/metrics.hpp"
#include "xlt/model.hpp"
#include "xlt/report.hpp"
#include "xlt/tokenizer.hpp"
#include "xlt/trainer.hpp"
#include "xlt/transfer.hpp"

namespace xlt {

enum class Strategy { kScratch, kTransferFull, kTransferEncoderOnly };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kScratch: return "scratch";
    case Strategy::kTransferFull: return "transfer-full";
    case Strategy::kTransferEncoderOnly: return "transfer-encoder-only";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "scratch") return Strategy::kScratch;
  if (s == "transfer-full") return Strategy::kTransferFull;
  if (s == "transfer-encoder-only") return Strategy::kTransferEncoderOnly;
  throw std::invalid_argument("unknown strategy '" + std::string(s) +
                              "' (expected scratch, transfer-full or transfer-encoder-only)");
}

/// Starting point of a target-language run.
///
/// Scratch starts from the pretrained encoder (init may be null for a fully
/// random model) with a fresh head; the transfer strategies start from the
/// source-task checkpoint. Any MLM head is dropped.
inline Model initial_model(Strategy s, const Checkpoint* init, const EncoderConfig& cfg, std::size_t num_classes,
                           std::uint64_t seed) {
  Model m;
  switch (s) {
    case Strategy::kScratch:
      m = init ? load_encoder_only(*init, num_classes, seed, cfg) : make_model(cfg, num_classes, seed);
      break;
    case Strategy::kTransferFull:
      if (!init) throw TransferError("transfer-full needs a source checkpoint");
      if (auto r = compatibility_check(*init, cfg); !r.compatible())
        throw TransferError("transfer-full: encoder config mismatch: " + r.describe());
      m = load_full(*init, num_classes);
      break;
    case Strategy::kTransferEncoderOnly:
      if (!init) throw TransferError("transfer-encoder-only needs a source checkpoint");
      m = load_encoder_only(*init, num_classes, seed, cfg);
      break;
  }
  m.mlm.reset();
  return m;
}

struct Evaluation {
  EvalReport report;
  ConfusionMatrix confusion;
};

inline Evaluation evaluate_dataset(const Model& m, const Vocabulary& vocab, const LabeledDataset& test, RunInfo info) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (test.schema.size() != m.num_classes())
    throw std::invalid_argument("evaluate: test set has " + std::to_string(test.schema.size()) +
                                " labels but the model head has " + std::to_string(m.num_classes()));
  const auto examples = encode_dataset(test, vocab, m.config.max_len);
  const auto pred = predict_examples(m, examples);
  std::vector<std::int32_t> gold;
  for (const auto& ex : examples) gold.push_back(ex.label);
  Evaluation e;
  e.confusion = confusion_matrix(gold, pred, m.num_classes(), test.schema.labels());
  e.report = compute_report(e.confusion, std::move(info));
  return e;
}

struct TargetRun {
  Model model;
  Evaluation evaluation;
  std::optional<TrainHistory> history;  // empty when n_train == 0
};

/// One learning-curve point: stratified sample of n_train instances from
/// pool, fine-tune, score on test. n_train == 0 evaluates the initial model.
inline TargetRun run_target(Model init, const Vocabulary& vocab, const LabeledDataset& pool, const LabeledDataset& test,
                            std::size_t n_train, std::uint64_t seed, TrainConfig cfg, RunInfo info) {
  info.n_train = n_train;
  info.seed = seed;
  TargetRun run;
  if (n_train == 0) {
    run.model = std::move(init);
  } else {
    const auto sample = subsample(pool, n_train, derive_seed(seed, 30));
    cfg.seed = seed;
    auto trained = train_classifier(std::move(init), vocab, sample, cfg);
    run.model = std::move(trained.model);
    run.history = std::move(trained.history);
  }
  run.evaluation = evaluate_dataset(run.model, vocab, test, std::move(info));
  return run;
}

/// A strategy together with the checkpoint it starts from.
struct StrategyArm {
  Strategy strategy = Strategy::kScratch;
  const Checkpoint* init = nullptr;
};

struct ProgressResult {
  std::vector<CurveSeries> curves;
  std::vector<EvalReport> reports;
};

/// Every (strategy, size, seed) combination; seeds vary fastest.
inline ProgressResult progress_test(const std::vector<StrategyArm>& arms, const EncoderConfig& cfg,
                                    const Vocabulary& vocab, const LabeledDataset& pool, const LabeledDataset& test,
                                    std::vector<std::size_t> sizes, const std::vector<std::uint64_t>& seeds,
                                    const TrainConfig& train_cfg) {
  if (arms.empty() || sizes.empty() || seeds.empty())
    throw std::invalid_argument("progress_test: strategies, sizes and seeds must be non-empty");
  std::sort(sizes.begin(), sizes.end());
  for (auto n : sizes)
    if (n > pool.size())
      throw std::invalid_argument("progress_test: size " + std::to_string(n) + " exceeds the " +
                                  std::to_string(pool.size()) + "-instance training pool");
  ProgressResult out;
  for (const auto& arm : arms) {
    CurveSeries series{to_string(arm.strategy), {}};
    for (auto n : sizes)
      for (auto seed : seeds) {
        RunInfo info;
        info.strategy = to_string(arm.strategy);
        auto run = run_target(initial_model(arm.strategy, arm.init, cfg, test.schema.size(), seed), vocab, pool, test, n,
                              seed, train_cfg, info);
        series.points.push_back({n, seed, run.evaluation.report.macro_f1});
        out.reports.push_back(std::move(run.evaluation.report));
      }
    out.curves.push_back(std::move(series));
  }
  return out;
}

/// Mean macro F1 per training size for one series.
inline std::map<std::size_t, double> mean_by_size(const CurveSeries& s) {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const auto& p : s.points) {
    acc[p.n_train].first += p.macro_f1;
    ++acc[p.n_train].second;
  }
  std::map<std::size_t, double> out;
  for (const auto& [n, v] : acc) out[n] = v.first / static_cast<double>(v.second);
  return out;
}

/// Checkpoint metadata describing a model trained with vocab on schema.
inline std::map<std::string, std::string> checkpoint_metadata(const Vocabulary& vocab,
                                                              const std::optional<LabelSchema>& schema,
                                                              std::uint64_t seed, std::size_t steps) {
  std::map<std::string, std::string> md;
  md[meta::kVocabHash] = vocabulary_hash(vocab);
  md[meta::kSeed] = std::to_string(seed);
  md[meta::kSteps] = std::to_string(steps);
  if (schema) put_schema(md, *schema);
  return md;
}

/// In-memory checkpoint of model, identical to what save_checkpoint writes.
inline Checkpoint to_checkpoint(const Model& m, const std::map<std::string, std::string>& metadata) {
  return parse_checkpoint(serialize_checkpoint(m, metadata));
}

}  // namespace xlt
