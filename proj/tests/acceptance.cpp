// Acceptance run: one PASS/FAIL line per criterion, plus the benchmark CSVs.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "xlt/xlt.hpp"

using namespace xlt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void verdict(int id, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s), 0.0);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

Var project(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(matmul(x, tape.constant(random_tensor({x.shape()[1], 1}, rng))));
}

// ---------------------------------------------------------------- gradients

double gradient_suite(std::size_t points) {
  using Fn = std::function<Var(Tape&, Var)>;
  struct Case {
    const char* name;
    Shape shape;
    Fn fn;
  };
  Rng fixed(99);
  const Tensor mat_b = random_tensor({4, 3}, fixed);
  const Tensor gain = random_tensor({5}, fixed, 0.5, 1.5);
  const std::vector<std::int32_t> ids{3, 0, 5, 3};
  const std::vector<std::size_t> rows{2, 0};
  const std::vector<std::uint8_t> mask{1, 1, 1, 0};
  const std::vector<std::int32_t> labels{2, 0, 1};
  const Tensor kv = random_tensor({4, 4}, fixed);
  const Tensor addend = random_tensor({2, 3}, fixed);
  const Tensor ln_input = random_tensor({3, 5}, fixed);

  std::vector<Case> cases{
      {"matmul", {2, 4}, [&](Tape& t, Var x) { return project(t, matmul(x, t.constant(mat_b)), 1); }},
      {"matmul^T", {2, 3}, [&](Tape& t, Var x) { return project(t, matmul(t.constant(mat_b), x, Transpose::kSecond), 2); }},
      {"add", {2, 3}, [&](Tape& t, Var x) { return project(t, add(x, t.constant(addend)), 3); }},
      {"add-broadcast", {3}, [&](Tape& t, Var b) { return project(t, add(t.constant(mat_b), b), 4); }},
      {"scale", {2, 3}, [&](Tape& t, Var x) { return project(t, scale(x, -1.7), 5); }},
      {"sum", {2, 3}, [&](Tape&, Var x) { return sum(x); }},
      {"gelu", {2, 5}, [&](Tape& t, Var x) { return project(t, gelu(x), 6); }},
      {"tanh", {2, 5}, [&](Tape& t, Var x) { return project(t, tanh(x), 7); }},
      {"softmax", {2, 5}, [&](Tape& t, Var x) { return project(t, softmax(x), 8); }},
      {"layer_norm", {3, 5},
       [&](Tape& t, Var x) { return project(t, layer_norm(x, t.constant(gain), t.constant(Tensor({5}, 0.1))), 9); }},
      {"layer_norm-gain", {5},
       [&](Tape& t, Var g) {
         return project(t, layer_norm(t.constant(ln_input), g, t.constant(Tensor({5}, 0.0))), 10);
       }},
      {"embedding", {6, 4}, [&](Tape& t, Var w) { return project(t, embedding(w, ids), 11); }},
      {"select_rows", {3, 4}, [&](Tape& t, Var x) { return project(t, select_rows(x, rows), 12); }},
      {"dropout", {3, 4},
       [&](Tape& t, Var x) { return project(t, dropout(x, 0.3, DropoutKey{5, 1, 2}, true), 13); }},
      {"attention", {4, 4},
       [&](Tape& t, Var q) { return project(t, attention(q, t.constant(kv), t.constant(kv), 2, mask), 14); }},
      {"cross_entropy", {3, 4}, [&](Tape&, Var z) { return cross_entropy(z, labels); }},
  };

  double worst = 0.0;
  Rng rng(2025);
  for (const auto& c : cases)
    for (std::size_t i = 0; i < points; ++i)
      worst = std::max(worst, finite_difference_check(c.fn, random_tensor(c.shape, rng), 1e-5));

  // Full 2-layer H=8 encoder with a classifier head, dropout active.
  EncoderConfig cfg;
  cfg.vocab_size = 12;
  cfg.num_layers = 2;
  cfg.hidden_size = 8;
  cfg.num_heads = 2;
  cfg.ff_size = 16;
  cfg.max_len = 6;
  Model m = make_model(cfg, 3, 21);
  for (Parameter* p : m.parameters())
    if (p->value.rank() == 2)
      for (auto& v : p->value.data) v = std::normal_distribution<double>(0.0, 0.3)(rng);
  const std::vector<std::int32_t> seq{kCls, 7, 9, 5, kSep};
  const std::int32_t label = 1;
  auto loss = [&](Tape& t) { return cross_entropy(sequence_logits(t, m, seq, {true, 5, 1, 0}), {&label, 1}); };
  // Key biases cancel inside softmax; their gradient is exactly zero and is checked as such.
  std::vector<Parameter*> params;
  std::vector<Parameter*> key_biases;
  for (Parameter* p : m.parameters())
    (p->name.find("attention.key.bias") != std::string::npos ? key_biases : params).push_back(p);
  worst = std::max(worst, finite_difference_check(loss, std::span<Parameter* const>(params), 1e-5));
  Tape tape;
  auto grads = tape.backward(loss(tape));
  for (Parameter* p : key_biases)
    for (double g : grads.at(p).data)
      if (std::abs(g) > 1e-12) worst = std::max(worst, 1.0);
  return worst;
}

// ---------------------------------------------------------------- metrics

bool metric_oracle(std::size_t sets, double& worst) {
  Rng rng(77);
  worst = 0.0;
  bool identity = true;
  for (std::size_t s = 0; s < sets; ++s) {
    const std::size_t C = 2 + rng() % 4;
    const std::size_t n = 1 + rng() % 200;
    std::vector<std::int32_t> gold(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gold[i] = static_cast<std::int32_t>(rng() % C);
      pred[i] = static_cast<std::int32_t>(rng() % C);
    }
    const auto r = compute_report(confusion_matrix(gold, pred, C));
    // Oracle: count per instance, no confusion matrix.
    double macro = 0.0, wf = 0.0, wp = 0.0, wr = 0.0, correct = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool g = gold[i] == static_cast<std::int32_t>(c), p = pred[i] == static_cast<std::int32_t>(c);
        tp += g && p;
        fp += !g && p;
        fn += g && !p;
      }
      const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      const double support = tp + fn;
      worst = std::max({worst, std::abs(prec - r.per_class[c].precision), std::abs(rec - r.per_class[c].recall),
                        std::abs(f1 - r.per_class[c].f1)});
      macro += f1 / static_cast<double>(C);
      wf += f1 * support / static_cast<double>(n);
      wp += prec * support / static_cast<double>(n);
      wr += rec * support / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) correct += gold[i] == pred[i];
    worst = std::max({worst, std::abs(macro - r.macro_f1), std::abs(wf - r.weighted_f1),
                      std::abs(wp - r.weighted_precision), std::abs(wr - r.weighted_recall),
                      std::abs(correct / static_cast<double>(n) - r.accuracy)});
    if (std::abs(r.micro_f1 - r.accuracy) > 1e-12) identity = false;
  }
  return identity;
}

// ---------------------------------------------------------------- checkpoints

std::string checkpoint_fidelity(bool& ok) {
  EncoderConfig cfg;
  cfg.vocab_size = 40;
  cfg.hidden_size = 16;
  cfg.ff_size = 32;
  cfg.num_heads = 2;
  cfg.max_len = 16;
  Model m = make_model(cfg, 2, 5);
  const auto dir = fs::temp_directory_path() / "xlt_acceptance_ckpt";
  fs::create_directories(dir);
  const std::map<std::string, std::string> md{{"seed", "5"}};
  save_checkpoint(m, dir / "m.ckpt", md);
  const Model back = load_full(read_checkpoint(dir / "m.ckpt"), 2);

  Rng rng(6);
  std::size_t identical = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t real = 2 + rng() % (cfg.max_len - 1);
    TokenSequence seq;
    seq.ids.push_back(kCls);
    for (std::size_t k = 1; k + 1 < real; ++k)
      seq.ids.push_back(static_cast<std::int32_t>(kNumSpecials + rng() % (cfg.vocab_size - kNumSpecials)));
    seq.ids.push_back(kSep);
    seq.mask.assign(seq.ids.size(), 1);
    seq.ids.resize(cfg.max_len, kPad);
    seq.mask.resize(cfg.max_len, 0);
    identical += predict_proba(m, seq) == predict_proba(back, seq) &&
                 encode_sequence(m.encoder, cfg, seq) == encode_sequence(back.encoder, cfg, seq);
  }

  Model poisoned = m;
  std::fill(poisoned.classifier->weight.value.data.begin(), poisoned.classifier->weight.value.data.end(),
            std::numeric_limits<double>::quiet_NaN());
  save_checkpoint(poisoned, dir / "nan.ckpt", md);
  const Model fresh = load_encoder_only(read_checkpoint(dir / "nan.ckpt"), 3, 9);
  bool finite = true;
  for (const Parameter* p : fresh.parameters())
    for (double v : p->value.data) finite = finite && std::isfinite(v);
  fs::remove_all(dir);

  ok = identical == 100 && finite;
  return std::to_string(identical) + "/100 bitwise-equal forwards; encoder-only model from NaN head " +
         (finite ? "finite" : "NOT finite");
}

// ---------------------------------------------------------------- early stopping

std::string early_stopping(bool& ok) {
  EncoderConfig cfg;
  cfg.vocab_size = 30;
  cfg.hidden_size = 8;
  cfg.ff_size = 16;
  cfg.num_heads = 2;
  cfg.max_len = 10;
  const std::vector<std::string> corpus{"alpha beta gamma", "delta epsilon", "alpha delta", "gamma beta beta"};
  const auto vocab = Vocabulary::train(corpus, 30);
  cfg.vocab_size = vocab.size();
  LabeledDataset ds;
  ds.schema = LabelSchema("t", {"a", "b"});
  for (int i = 0; i < 400; ++i) ds.instances.push_back({std::to_string(i), corpus[i % 4], i % 2});
  TrainConfig tc;
  tc.epochs = 50;
  tc.batch_size = 4;
  tc.eval_every_steps = 1;
  std::size_t calls = 0;
  auto stub = [&](const Model&) {
    ++calls;
    return EvalOutcome{0.693, 0.5};
  };
  const auto result = train_classifier(make_model(cfg, 2, 3), vocab, ds, tc, stub);
  const auto& h = result.history;
  ok = h.stop == StopReason::kEarlyStopped && h.rounds.size() == 10 && h.best_round == 0;
  return std::to_string(h.rounds.size()) + " evaluation rounds after the baseline, stop=" + to_string(h.stop) +
         ", " + std::to_string(h.steps_taken) + "/" + std::to_string(h.total_steps) + " steps";
}

// ---------------------------------------------------------------- benchmark

struct Benchmark {
  ProgressResult binary;
  ProgressResult three_class;
  double pipeline_seconds = 0.0;
  double three_class_seconds = 0.0;
};

struct Pipeline {
  SynthCorpus corpus;
  Vocabulary vocab;
  EncoderConfig cfg;
  Checkpoint pretrained;
  Checkpoint source;
  PretrainHistory pretrain_history;
  TrainHistory source_history;
};

Pipeline build_pipeline(const SynthSpec& spec, std::size_t vocab_size, const PretrainConfig& pc,
                        const TrainConfig& source_cfg) {
  Pipeline p;
  p.corpus = generate_synthetic_bilingual(spec);
  p.vocab = Vocabulary::train(p.corpus.pretrain, vocab_size);
  p.cfg.vocab_size = p.vocab.size();
  Model m = make_model(p.cfg, 0, pc.seed);
  p.pretrain_history = pretrain_mlm(m, p.vocab, p.corpus.pretrain, pc);
  p.pretrained = to_checkpoint(m, checkpoint_metadata(p.vocab, std::nullopt, pc.seed, p.pretrain_history.steps));
  auto src = train_classifier(initial_model(Strategy::kScratch, &p.pretrained, p.cfg, 2, source_cfg.seed), p.vocab,
                              p.corpus.a_train, source_cfg);
  p.source_history = src.history;
  p.source = to_checkpoint(src.model, checkpoint_metadata(p.vocab, p.corpus.a_train.schema, source_cfg.seed,
                                                          src.history.steps_taken));
  return p;
}

void write_outputs(const fs::path& dir, const Pipeline& p, const ProgressResult& r) {
  fs::create_directories(dir);
  write_text(dir / "pretrain_loss.csv", [&] {
    std::ostringstream os;
    os << "epoch,mlm_loss\n";
    for (std::size_t e = 0; e < p.pretrain_history.epoch_loss.size(); ++e)
      os << e + 1 << ',' << format_full(p.pretrain_history.epoch_loss[e]) << '\n';
    return os.str();
  }());
  write_text(dir / "source_history.csv", history_csv(p.source_history));
  write_text(dir / "curve.csv", render_learning_curve(r.curves));
  write_text(dir / "report.csv", render_tables(r.reports).csv);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double mean_at(const ProgressResult& r, std::size_t curve, std::size_t n) { return mean_by_size(r.curves.at(curve)).at(n); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xlt acceptance run"};
  fs::path out = "acceptance_out";
  std::size_t fd_points = 20;
  app.add_option("--out", out, "Directory for benchmark CSVs");
  app.add_option("--fd-points", fd_points, "Random points per primitive in the gradient suite");
  CLI11_PARSE(app, argc, argv);

  try {
    {
      const auto t = Clock::now();
      const double err = gradient_suite(fd_points);
      const double secs = seconds_since(t);
      verdict(1, "gradient suite", err < 1e-4 && secs < 120.0,
              "max relative error " + fmt(err, 3) + " (< 1e-4), " + fmt(secs, 3) + " s (< 120 s)");
    }
    {
      double worst = 0.0;
      const bool identity = metric_oracle(1000, worst);
      verdict(2, "metric oracle", worst <= 1e-12 && identity,
              "max deviation " + fmt(worst, 3) + " over 1000 sets (<= 1e-12), micro-F1 = accuracy " +
                  (identity ? "on all" : "VIOLATED"));
    }
    {
      bool ok = false;
      const auto detail = checkpoint_fidelity(ok);
      verdict(3, "checkpoint fidelity", ok, detail);
    }
    {
      bool ok = false;
      const auto detail = early_stopping(ok);
      verdict(4, "early stopping", ok, detail);
    }

    const std::vector<std::uint64_t> seeds{1, 2, 3};
    const SynthSpec spec;
    const PretrainConfig pc;
    // A gentler source stage keeps more of the cross-lingual alignment from pretraining.
    TrainConfig source_cfg;
    source_cfg.learning_rate = 1e-4;
    source_cfg.epochs = 6;
    source_cfg.seed = 5;
    const TrainConfig target_cfg;

    auto t = Clock::now();
    const Pipeline p = build_pipeline(spec, 600, pc, source_cfg);
    const auto binary = progress_test({{Strategy::kScratch, &p.pretrained}, {Strategy::kTransferFull, &p.source}},
                                      p.cfg, p.vocab, p.corpus.b_train, p.corpus.b_test, {0, 100, 1000}, seeds,
                                      target_cfg);
    const double pipeline_secs = seconds_since(t);
    write_outputs(out / "binary", p, binary);
    std::cout << "  benchmark wall time " << fmt(pipeline_secs, 4) << " s" << std::endl;

    const double s0 = mean_at(binary, 0, 0), s100 = mean_at(binary, 0, 100), s1000 = mean_at(binary, 0, 1000);
    const double t0 = mean_at(binary, 1, 0), t100 = mean_at(binary, 1, 100), t1000 = mean_at(binary, 1, 1000);
    for (const auto& c : binary.curves) {
      std::cout << "  " << c.strategy;
      for (const auto& [n, f] : mean_by_size(c)) std::cout << "  n=" << n << ": " << fmt(f);
      std::cout << std::endl;
    }

    verdict(5, "transfer trend", t100 >= s100 + 0.10 && pipeline_secs < 900.0,
            "n=100 transfer " + fmt(t100) + " vs scratch " + fmt(s100) + " (gap " + fmt(t100 - s100) +
                ", needs >= 0.10), " + fmt(pipeline_secs, 4) + " s (< 900 s)");
    verdict(6, "zero-shot", t0 >= 0.65 && std::abs(s0 - 0.50) <= 0.07,
            "n=0 transfer-full " + fmt(t0) + " (>= 0.65), untrained scratch " + fmt(s0) + " (0.50 +/- 0.07)");

    t = Clock::now();
    const auto three = progress_test(
        {{Strategy::kScratch, &p.pretrained}, {Strategy::kTransferEncoderOnly, &p.source}}, p.cfg, p.vocab,
        p.corpus.b3_train, p.corpus.b3_test, {100}, seeds, target_cfg);
    fs::create_directories(out / "three_class");
    write_text(out / "three_class" / "curve.csv", render_learning_curve(three.curves));
    write_text(out / "three_class" / "report.csv", render_tables(three.reports).csv);
    const double e100 = mean_at(three, 1, 100), s3 = mean_at(three, 0, 100);
    verdict(7, "inter-task transfer", e100 >= s3 + 0.05,
            "3-class n=100 encoder-only " + fmt(e100) + " vs scratch " + fmt(s3) + " (gap " + fmt(e100 - s3) +
                ", needs >= 0.05), " + fmt(seconds_since(t), 4) + " s");

    verdict(8, "convergence", (t1000 - s1000) < (t100 - s100),
            "gap at n=1000 " + fmt(t1000 - s1000) + " vs n=100 " + fmt(t100 - s100));

    // Determinism: a reduced pipeline run twice from scratch must write identical bytes.
    SynthSpec small = spec;
    small.pretrain_per_language = 600;
    small.a_train = 300;
    small.b_train = 300;
    small.b_test = 100;
    PretrainConfig small_pc = pc;
    small_pc.epochs = 1;
    TrainConfig small_src = source_cfg;
    small_src.epochs = 1;
    std::vector<std::string> names{"pretrain_loss.csv", "source_history.csv", "curve.csv", "report.csv"};
    for (int rep = 0; rep < 2; ++rep) {
      const Pipeline q = build_pipeline(small, 300, small_pc, small_src);
      const auto r = progress_test({{Strategy::kScratch, &q.pretrained}, {Strategy::kTransferFull, &q.source}}, q.cfg,
                                   q.vocab, q.corpus.b_train, q.corpus.b_test, {0, 50}, {1, 2}, target_cfg);
      write_outputs(out / ("determinism_" + std::to_string(rep)), q, r);
    }
    // The main benchmark's progress test is repeated too, from the same checkpoints.
    const auto again = progress_test({{Strategy::kScratch, &p.pretrained}, {Strategy::kTransferFull, &p.source}},
                                     p.cfg, p.vocab, p.corpus.b_train, p.corpus.b_test, {0, 100}, seeds, target_cfg);
    const auto first = progress_test({{Strategy::kScratch, &p.pretrained}, {Strategy::kTransferFull, &p.source}},
                                     p.cfg, p.vocab, p.corpus.b_train, p.corpus.b_test, {0, 100}, seeds, target_cfg);
    std::size_t same = 0;
    for (const auto& n : names)
      same += read_file(out / "determinism_0" / n) == read_file(out / "determinism_1" / n) &&
              !read_file(out / "determinism_0" / n).empty();
    const bool main_same = render_learning_curve(again.curves) == render_learning_curve(first.curves) &&
                           render_tables(again.reports).csv == render_tables(first.reports).csv;
    verdict(9, "determinism", same == names.size() && main_same,
            std::to_string(same) + "/" + std::to_string(names.size()) +
                " CSVs byte-identical across full reruns; benchmark progress CSVs " +
                (main_same ? "identical" : "DIFFER"));
  } catch (const std::exception& e) {
    std::cout << "FAIL  acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  if (failures == 0)
    std::cout << "all criteria passed" << std::endl;
  else
    std::cout << failures << (failures == 1 ? " criterion" : " criteria") << " failed" << std::endl;
  return failures == 0 ? 0 : 1;
}
