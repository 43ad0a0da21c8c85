// Command-line front end: tokenizer, synthetic data, pretraining, fine-tuning,
// evaluation and the learning-curve protocol.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xlt/xlt.hpp"

namespace fs = std::filesystem;
using namespace xlt;

namespace {

// Wall-clock details live apart from the CSVs so those stay byte-identical.
void write_metadata(const fs::path& dir, const std::string& command, const std::vector<std::string>& extra = {}) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << "command=" << command << '\n';
  os << "finished_utc=" << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ") << '\n';
  for (const auto& line : extra) os << line << '\n';
  write_text(dir / "metadata.txt", os.str());
}

Vocabulary manifest_vocab(const Manifest& m) {
  require(m.vocab.has_value(), "tokenizer.vocab", "required by this command");
  return Vocabulary::load(*m.vocab);
}

EncoderConfig manifest_config(const Manifest& m, const Vocabulary& vocab) {
  EncoderConfig cfg = m.model;
  cfg.vocab_size = vocab.size();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ManifestError("model", e.what());
  }
  return cfg;
}

std::optional<Checkpoint> load_checked(const std::optional<fs::path>& path, const Vocabulary& vocab) {
  if (!path) return std::nullopt;
  auto ck = read_checkpoint(*path);
  check_vocabulary(ck, vocab);
  return ck;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : detail::split_list(s)) {
    if (item.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("--sizes: not a non-negative integer: '" + item + "'");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw std::invalid_argument("--sizes: empty list");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : detail::split_list(s)) {
    if (item.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("--seeds: not a non-negative integer: '" + item + "'");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw std::invalid_argument("--seeds: empty list");
  return out;
}

int cmd_tokenizer_train(const std::vector<std::string>& corpora, std::size_t vocab_size, bool keep_case,
                        const fs::path& out) {
  std::vector<std::string> lines;
  for (const auto& c : corpora) {
    auto more = read_lines(c);
    lines.insert(lines.end(), more.begin(), more.end());
  }
  auto vocab = Vocabulary::train(lines, vocab_size, !keep_case);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  vocab.save(out);
  std::cout << "vocabulary: " << vocab.size() << " tokens, " << vocab.merges().size() << " merges -> " << out.string()
            << '\n';
  return 0;
}

int cmd_synth_gen(const std::optional<fs::path>& spec_path, const fs::path& out_dir) {
  SynthSpec spec;
  if (spec_path) {
    std::ifstream is(*spec_path, std::ios::binary);
    if (!is) throw std::invalid_argument("--spec: cannot open " + spec_path->string());
    std::stringstream ss;
    ss << is.rdbuf();
    spec = parse_synth_spec(ss.str());
  }
  const auto corpus = generate_synthetic_bilingual(spec);
  fs::create_directories(out_dir);
  write_lines(out_dir / "pretrain.txt", corpus.pretrain);
  write_tsv(out_dir / "a_train.tsv", corpus.a_train);
  write_tsv(out_dir / "b_train.tsv", corpus.b_train);
  write_tsv(out_dir / "b_test.tsv", corpus.b_test);
  if (!corpus.b3_train.empty()) write_tsv(out_dir / "b3_train.tsv", corpus.b3_train);
  if (!corpus.b3_test.empty()) write_tsv(out_dir / "b3_test.tsv", corpus.b3_test);
  std::ostringstream cipher;
  for (const auto& [a, b] : corpus.cipher) cipher << a << '\t' << b << '\n';
  write_text(out_dir / "cipher.tsv", cipher.str());
  std::cout << "synthetic corpus written to " << out_dir.string() << '\n';
  return 0;
}

int cmd_pretrain(const fs::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  const auto vocab = manifest_vocab(m);
  const auto cfg = manifest_config(m, vocab);
  require(!m.data.pretrain_corpus.empty(), "data.pretrain_corpus", "required by pretrain");
  std::vector<std::string> corpus;
  for (const auto& p : m.data.pretrain_corpus) {
    auto more = read_lines(p);
    corpus.insert(corpus.end(), more.begin(), more.end());
  }
  // Continue from an existing encoder when one is given.
  auto base = load_checked(m.base_checkpoint, vocab);
  Model model = base ? load_encoder_only(*base, 2, m.pretrain.seed, cfg) : make_model(cfg, 0, m.pretrain.seed);
  model.classifier.reset();
  const auto hist = pretrain_mlm(model, vocab, corpus, m.pretrain);

  fs::create_directories(m.output_dir);
  auto md = checkpoint_metadata(vocab, std::nullopt, m.pretrain.seed, hist.steps);
  md[meta::kTask] = "mlm";
  save_checkpoint(model, m.output_dir / "model.ckpt", md);
  std::ostringstream csv;
  csv << "epoch,mlm_loss\n";
  for (std::size_t e = 0; e < hist.epoch_loss.size(); ++e) csv << e + 1 << ',' << format_full(hist.epoch_loss[e]) << '\n';
  write_text(m.output_dir / "history.csv", csv.str());
  write_metadata(m.output_dir, "pretrain", {"manifest=" + manifest_path.string()});
  std::cout << "pretrained " << hist.steps << " steps, final MLM loss " << hist.epoch_loss.back() << '\n';
  return 0;
}

int cmd_train(const fs::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  const auto vocab = manifest_vocab(m);
  const auto cfg = manifest_config(m, vocab);
  require(m.data.train.has_value(), "data.train", "required by train");
  if (m.strategy != Strategy::kScratch)
    require(m.checkpoint.has_value(), "strategy.checkpoint", std::string("required by ") + to_string(m.strategy));
  const auto dataset = m.data.load(*m.data.train);
  const auto init = load_checked(m.strategy == Strategy::kScratch ? m.base_checkpoint : m.checkpoint, vocab);
  Model model = initial_model(m.strategy, init ? &*init : nullptr, cfg, dataset.schema.size(), m.train.seed);
  auto result = train_classifier(std::move(model), vocab, dataset, m.train);

  fs::create_directories(m.output_dir);
  auto md = checkpoint_metadata(vocab, dataset.schema, m.train.seed, result.history.steps_taken);
  save_checkpoint(result.model, m.output_dir / "model.ckpt", md);
  write_text(m.output_dir / "history.csv", history_csv(result.history));
  write_metadata(m.output_dir, "train",
                 {"manifest=" + manifest_path.string(), std::string("strategy=") + to_string(m.strategy),
                  std::string("stop=") + to_string(result.history.stop)});
  std::cout << "trained " << result.history.steps_taken << '/' << result.history.total_steps << " steps ("
            << to_string(result.history.stop) << "), best round " << result.history.best_round << '\n';
  return 0;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& dataset_path, const fs::path& vocab_path,
                 const fs::path& out_dir, const ColumnMapping& cols) {
  const auto vocab = Vocabulary::load(vocab_path);
  const auto ck = read_checkpoint(checkpoint);
  check_vocabulary(ck, vocab);
  const auto schema = ck.schema();
  if (!schema) throw std::invalid_argument("--checkpoint: checkpoint carries no label schema");
  const auto model = load_full(ck, schema->size());
  const auto test = load_tsv(dataset_path, *schema, cols);
  RunInfo info;
  info.strategy = ck.metadata.count(meta::kTask) ? ck.metadata.at(meta::kTask) : "";
  const auto ev = evaluate_dataset(model, vocab, test, info);
  fs::create_directories(out_dir);
  const auto tables = render_tables({ev.report});
  write_text(out_dir / "report.md", tables.markdown);
  write_text(out_dir / "report.csv", tables.csv);
  write_text(out_dir / "confusion.csv", render_heatmap_data(ev.confusion));
  write_metadata(out_dir, "evaluate", {"checkpoint=" + checkpoint.string(), "dataset=" + dataset_path.string()});
  std::cout << tables.markdown;
  return 0;
}

int cmd_progress_test(const fs::path& manifest_path, const std::string& sizes_arg, const std::string& seeds_arg) {
  const auto sizes = parse_sizes(sizes_arg);
  const auto seeds = parse_seeds(seeds_arg);
  const auto m = load_manifest(manifest_path);
  const auto vocab = manifest_vocab(m);
  const auto cfg = manifest_config(m, vocab);
  require(m.data.train.has_value(), "data.train", "required by progress-test");
  require(m.data.test.has_value(), "data.test", "required by progress-test");
  require(m.strategy != Strategy::kScratch, "strategy.name",
          "progress-test compares scratch against transfer-full or transfer-encoder-only");
  require(m.checkpoint.has_value(), "strategy.checkpoint", "required by progress-test");
  const auto pool = m.data.load(*m.data.train);
  const auto test = m.data.load(*m.data.test);
  const auto source = load_checked(m.checkpoint, vocab);
  const auto base = load_checked(m.base_checkpoint, vocab);

  const auto result = progress_test({{Strategy::kScratch, base ? &*base : nullptr}, {m.strategy, &*source}}, cfg, vocab,
                                    pool, test, sizes, seeds, m.train);
  fs::create_directories(m.output_dir);
  write_text(m.output_dir / "curve.csv", render_learning_curve(result.curves));
  const auto tables = render_tables(result.reports);
  write_text(m.output_dir / "report.csv", tables.csv);
  write_text(m.output_dir / "report.md", tables.markdown);
  write_metadata(m.output_dir, "progress-test",
                 {"manifest=" + manifest_path.string(), "sizes=" + sizes_arg, "seeds=" + seeds_arg});
  for (const auto& series : result.curves) {
    std::cout << series.strategy;
    for (const auto& [n, f1] : mean_by_size(series)) std::cout << "  n=" << n << ": " << format_2dp(f1);
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-lingual transfer experiments for offensive-language identification"};
  app.require_subcommand(1);

  std::vector<std::string> corpora;
  std::size_t vocab_size = 8000;
  bool keep_case = false;
  fs::path out;
  auto* tok = app.add_subcommand("tokenizer-train", "Learn a subword vocabulary from text files");
  tok->add_option("corpus", corpora, "Plain-text corpus files, one text per line")->required()->check(CLI::ExistingFile);
  tok->add_option("--vocab-size", vocab_size, "Target vocabulary size")->capture_default_str();
  tok->add_flag("--keep-case", keep_case, "Do not lowercase the text");
  tok->add_option("--out", out, "Vocabulary file to write")->required();

  std::optional<fs::path> spec_path;
  fs::path out_dir;
  auto* synth = app.add_subcommand("synth-gen", "Write the synthetic bilingual benchmark");
  synth->add_option("--spec", spec_path, "INI file with a [synth] section")->check(CLI::ExistingFile);
  synth->add_option("--out-dir", out_dir, "Output directory")->required();

  fs::path manifest;
  auto* pre = app.add_subcommand("pretrain", "Masked-language-model pretraining");
  pre->add_option("--manifest", manifest, "Experiment manifest")->required()->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "Fine-tune a classifier under the manifest's strategy");
  train->add_option("--manifest", manifest, "Experiment manifest")->required()->check(CLI::ExistingFile);

  fs::path checkpoint, dataset, vocab_path;
  ColumnMapping cols;
  std::size_t id_column = 0;
  std::string header = "auto";
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a labelled TSV");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset, "Labelled TSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--vocab", vocab_path, "Vocabulary the checkpoint was trained with")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_option("--text-column", cols.text_column, "0-based text column")->capture_default_str();
  eval->add_option("--label-column", cols.label_column, "0-based label column")->capture_default_str();
  auto* id_opt = eval->add_option("--id-column", id_column, "0-based id column");
  eval->add_option("--header", header, "auto, yes or no")->check(CLI::IsMember({"auto", "yes", "no"}));

  std::string sizes = "0,100,200,300,400,500,600,700,800,900,1000", seeds = "1,2,3";
  auto* prog = app.add_subcommand("progress-test", "Learning curve: scratch against the manifest's transfer strategy");
  prog->add_option("--manifest", manifest, "Experiment manifest")->required()->check(CLI::ExistingFile);
  prog->add_option("--sizes", sizes, "Comma-separated target training sizes")->capture_default_str();
  prog->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*tok) return cmd_tokenizer_train(corpora, vocab_size, keep_case, out);
    if (*synth) return cmd_synth_gen(spec_path, out_dir);
    if (*pre) return cmd_pretrain(manifest);
    if (*train) return cmd_train(manifest);
    if (*eval) {
      if (*id_opt) cols.id_column = id_column;
      cols.header = header == "yes" ? ColumnMapping::Header::kPresent
                    : header == "no" ? ColumnMapping::Header::kAbsent
                                     : ColumnMapping::Header::kAuto;
      return cmd_evaluate(checkpoint, dataset, vocab_path, out_dir, cols);
    }
    if (*prog) return cmd_progress_test(manifest, sizes, seeds);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
