// Drives the xlt binary end to end on a small synthetic benchmark.
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(XLT_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const char* kModel = "[model]\nnum_layers = 1\nhidden_size = 16\nnum_heads = 2\nff_size = 32\nmax_len = 24\n";

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  // Shared pipeline: synthetic data, vocabulary, pretraining, source model.
  static void SetUpTestSuite() {
    dir = xlt::testing::temp_dir("cli");
    write(dir / "synth.ini",
          "[synth]\npretrain_per_language = 300\na_train = 200\nb_train = 200\nb_test = 60\nb3_train = 90\n"
          "b3_test = 30\n");
    ASSERT_EQ(run("synth-gen --spec " + (dir / "synth.ini").string() + " --out-dir " + (dir / "data").string()).code, 0);
    ASSERT_EQ(run("tokenizer-train " + (dir / "data/pretrain.txt").string() + " --vocab-size 300 --out " +
                  (dir / "vocab.txt").string())
                  .code,
              0);
    write(dir / "pretrain.ini", std::string("[tokenizer]\nvocab = vocab.txt\n") + kModel +
                                    "[data]\npretrain_corpus = data/pretrain.txt\n[pretrain]\nepochs = 1\n"
                                    "[output]\ndir = pre\n");
    auto pre = run("pretrain --manifest " + (dir / "pretrain.ini").string());
    ASSERT_EQ(pre.code, 0) << pre.output;
    write(dir / "source.ini", std::string("[tokenizer]\nvocab = vocab.txt\n") + kModel +
                                  "[data]\ntrain = data/a_train.tsv\nlabels = offensive, non-offensive\n"
                                  "[strategy]\nname = scratch\nbase_checkpoint = pre/model.ckpt\n"
                                  "[train]\nepochs = 1\nlearning_rate = 1e-3\n[output]\ndir = source\n");
    auto src = run("train --manifest " + (dir / "source.ini").string());
    ASSERT_EQ(src.code, 0) << src.output;
  }

  static std::string target_manifest(const std::string& out, const std::string& strategy = "transfer-full") {
    return std::string("[tokenizer]\nvocab = vocab.txt\n") + kModel +
           "[data]\ntrain = data/b_train.tsv\ntest = data/b_test.tsv\nlabels = offensive, non-offensive\n"
           "[strategy]\nname = " + strategy + "\ncheckpoint = source/model.ckpt\nbase_checkpoint = pre/model.ckpt\n"
           "[train]\nepochs = 1\n[output]\ndir = " + out + "\n";
  }
};

fs::path Cli::dir;

}  // namespace

TEST_F(Cli, PipelineArtifactsExist) {
  for (const char* f : {"data/pretrain.txt", "data/a_train.tsv", "data/b_train.tsv", "data/b_test.tsv",
                        "data/b3_train.tsv", "data/b3_test.tsv", "data/cipher.tsv", "vocab.txt", "pre/model.ckpt",
                        "pre/history.csv", "pre/metadata.txt", "source/model.ckpt", "source/history.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(line_count(dir / "data/a_train.tsv"), 201u);
  EXPECT_EQ(slurp(dir / "pre/history.csv").rfind("epoch,mlm_loss\n1,", 0), 0u);
  EXPECT_EQ(slurp(dir / "source/history.csv").rfind("round,step,train_loss,eval_loss,eval_macro_f1\n", 0), 0u);
  const auto ck = xlt::read_checkpoint(dir / "source/model.ckpt");
  EXPECT_EQ(ck.num_classes(), 2u);
  EXPECT_EQ(ck.metadata.at("labels"), "offensive|non-offensive");
}

TEST_F(Cli, ProgressTestWritesOneRowPerSizeStrategyAndSeed) {
  write(dir / "progress.ini", target_manifest("progress"));
  auto r = run("progress-test --manifest " + (dir / "progress.ini").string() + " --sizes 0,100 --seeds 1");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(line_count(dir / "progress/curve.csv"), 1u + 4u);
  EXPECT_EQ(line_count(dir / "progress/report.csv"), 1u + 4u);
  const auto curve = slurp(dir / "progress/curve.csv");
  EXPECT_NE(curve.find("\nscratch,0,1,"), std::string::npos);
  EXPECT_NE(curve.find("\ntransfer-full,100,1,"), std::string::npos);
  EXPECT_NE(r.output.find("transfer-full"), std::string::npos);

  // Same manifest, same seeds: byte-identical CSVs.
  write(dir / "progress2.ini", target_manifest("progress2"));
  ASSERT_EQ(run("progress-test --manifest " + (dir / "progress2.ini").string() + " --sizes 0,100 --seeds 1").code, 0);
  EXPECT_EQ(slurp(dir / "progress2/curve.csv"), curve);
  EXPECT_EQ(slurp(dir / "progress2/report.csv"), slurp(dir / "progress/report.csv"));
}

TEST_F(Cli, FullTransferToThreeClassesFailsWithGuidance) {
  write(dir / "three.ini",
        std::string("[tokenizer]\nvocab = vocab.txt\n") + kModel +
            "[data]\ntrain = data/b3_train.tsv\nlabels = overtly-aggressive, covertly-aggressive, non-aggressive\n"
            "[strategy]\nname = transfer-full\ncheckpoint = source/model.ckpt\n[output]\ndir = three\n");
  auto r = run("train --manifest " + (dir / "three.ini").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("2 classes"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("has 3"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "three/model.ckpt"));
}

TEST_F(Cli, EncoderOnlyTransferToThreeClasses) {
  write(dir / "three_ok.ini",
        std::string("[tokenizer]\nvocab = vocab.txt\n") + kModel +
            "[data]\ntrain = data/b3_train.tsv\nlabels = overtly-aggressive, covertly-aggressive, non-aggressive\n"
            "[strategy]\nname = transfer-encoder-only\ncheckpoint = source/model.ckpt\n"
            "[train]\nepochs = 1\n[output]\ndir = three_ok\n");
  auto r = run("train --manifest " + (dir / "three_ok.ini").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(xlt::read_checkpoint(dir / "three_ok/model.ckpt").num_classes(), 3u);
}

TEST_F(Cli, EvaluateWritesReportAndHeatmap) {
  auto r = run("evaluate --checkpoint " + (dir / "source/model.ckpt").string() + " --dataset " +
               (dir / "data/b_test.tsv").string() + " --vocab " + (dir / "vocab.txt").string() + " --out " +
               (dir / "eval").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(line_count(dir / "eval/report.csv"), 2u);
  EXPECT_EQ(slurp(dir / "eval/confusion.csv").rfind("true\\predicted,offensive,non-offensive\n", 0), 0u);
  EXPECT_EQ(line_count(dir / "eval/confusion.csv"), 3u);
  EXPECT_NE(slurp(dir / "eval/report.md").find("| Macro F1 |"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "eval/metadata.txt"));
}

TEST_F(Cli, EvaluateRejectsForeignVocabulary) {
  write(dir / "other.txt", "zz yy xx ww\nvv uu tt\n");
  ASSERT_EQ(run("tokenizer-train " + (dir / "other.txt").string() + " --vocab-size 40 --out " +
                (dir / "other_vocab.txt").string())
                .code,
            0);
  auto r = run("evaluate --checkpoint " + (dir / "source/model.ckpt").string() + " --dataset " +
               (dir / "data/b_test.tsv").string() + " --vocab " + (dir / "other_vocab.txt").string() + " --out " +
               (dir / "eval_bad").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("different vocabulary"), std::string::npos) << r.output;
}

TEST_F(Cli, ValidationErrorsExitWithOne) {
  write(dir / "bad.ini", "[train]\nlearning_rate = fast\n");
  auto r = run("train --manifest " + (dir / "bad.ini").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("train.learning_rate"), std::string::npos) << r.output;

  write(dir / "scratch_progress.ini", target_manifest("sp", "scratch"));
  r = run("progress-test --manifest " + (dir / "scratch_progress.ini").string() + " --sizes 0 --seeds 1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("strategy.name"), std::string::npos) << r.output;

  write(dir / "sizes.ini", target_manifest("sz"));
  r = run("progress-test --manifest " + (dir / "sizes.ini").string() + " --sizes 0,-5");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--sizes"), std::string::npos) << r.output;

  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("train").code, 1);
  EXPECT_EQ(run("train --manifest " + (dir / "missing.ini").string()).code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, RuntimeFailuresExitWithTwo) {
  write(dir / "broken.ckpt", "definitely not a checkpoint");
  auto r = run("evaluate --checkpoint " + (dir / "broken.ckpt").string() + " --dataset " +
               (dir / "data/b_test.tsv").string() + " --vocab " + (dir / "vocab.txt").string() + " --out " +
               (dir / "eval_broken").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("magic"), std::string::npos) << r.output;
}
