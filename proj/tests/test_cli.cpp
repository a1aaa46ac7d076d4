#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "langseg/cli.hpp"
#include "langseg/model.hpp"
#include "langseg/png_io.hpp"
#include "test_util.hpp"

namespace langseg {
namespace {

using testing::TempDir;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, double> read_metrics(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "name,value");
  std::map<std::string, double> m;
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    if (comma + 1 < line.size()) m[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  return m;
}

// A dataset, vocabulary and zero-step checkpoint shared by the small tests.
class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(run_cli({"make-vocab", "--out", (dir / "vocab.lemb").string()}).code, 0);
    ASSERT_EQ(run_cli({"gen-data", "--out", (dir / "data").string(), "--labels", "cat,car", "--count", "3", "--size",
                       "16"})
                  .code,
              0);
    ASSERT_EQ(run_cli({"train", "--data", (dir / "data").string(), "--table", (dir / "vocab.lemb").string(), "--out",
                       (dir / "init.ckpt").string(), "--steps", "0", "--seed", "7"})
                  .code,
              0);
  }
  TempDir dir;
};

TEST_F(CliFixture, ZeroStepTrainingSavesTheInitialization) {
  ModelConfig mc;
  mc.encoder.height = 16;
  mc.encoder.width = 16;
  mc.encoder.embed_dim = 64;
  const ModelParameters<float> init(mc, 7);
  EXPECT_EQ(load_checkpoint(dir / "init.ckpt"), init);
}

TEST_F(CliFixture, PredictWithUnknownLabelIsValidationError) {
  const auto r = run_cli({"predict", "--checkpoint", (dir / "init.ckpt").string(), "--table",
                          (dir / "vocab.lemb").string(), "--image", (dir / "data/images/00000.png").string(),
                          "--labels", "other,cat,zebra", "--out", (dir / "p.png").string()});
  EXPECT_EQ(r.code, cli::kValidation);
  EXPECT_NE(r.err.find("zebra"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "p.png"));
}

TEST_F(CliFixture, PredictWritesOverlayAndLegend) {
  const auto r = run_cli({"predict", "--checkpoint", (dir / "init.ckpt").string(), "--table",
                          (dir / "vocab.lemb").string(), "--image", (dir / "data/images/00001.png").string(),
                          "--labels", "other,cat,car", "--other", "--out", (dir / "p.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream png(dir / "p.png", std::ios::binary);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(png)), {});
  EXPECT_EQ(decode_png_rgb(bytes).shape_string(), "16x16x3");
  std::ifstream legend(dir / "p.legend.txt");
  std::string first;
  std::getline(legend, first);
  EXPECT_EQ(first.substr(0, 6), "other\t");
  EXPECT_NE(first.find("(other)"), std::string::npos);
}

TEST_F(CliFixture, MissingInputsAreIoErrors) {
  const auto r = run_cli({"predict", "--checkpoint", (dir / "none.ckpt").string(), "--table",
                          (dir / "vocab.lemb").string(), "--image", (dir / "data/images/00000.png").string(),
                          "--labels", "cat", "--out", (dir / "p.png").string()});
  EXPECT_EQ(r.code, cli::kIo);
  const auto w = run_cli({"train", "--data", (dir / "data").string(), "--table", (dir / "vocab.lemb").string(),
                          "--out", (dir / "no/such/dir/m.ckpt").string(), "--steps", "0"});
  EXPECT_EQ(w.code, cli::kIo);
}

TEST_F(CliFixture, CorruptCheckpointIsIoError) {
  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  const auto r = run_cli({"eval", "--checkpoint", (dir / "bad.ckpt").string(), "--table",
                          (dir / "vocab.lemb").string(), "--data", (dir / "data").string()});
  EXPECT_EQ(r.code, cli::kIo);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train", "--table", "t"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train", "--data", "d", "--table", "t", "--out", "o", "--depth", "99"}).code, cli::kUsage);
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.code, cli::kOk);
  EXPECT_NE(help.out.find("predict"), std::string::npos);
}

TEST(Cli, TextVocabularyRoundTrips) {
  TempDir dir;
  ASSERT_EQ(run_cli({"make-vocab", "--out", (dir / "v.txt").string(), "--dim", "16", "--seed", "3"}).code, 0);
  EXPECT_EQ(load_table(dir / "v.txt"), synth_vocab(default_vocabulary(3, 16)));
}

// gen-data -> make-vocab -> train -> eval on the training classes.
TEST(Cli, PipelineBeatsChanceOnSeenClasses) {
  TempDir dir;
  ASSERT_EQ(run_cli({"gen-data", "--out", (dir / "train").string(), "--labels", "cat,car,tree", "--count", "24",
                     "--size", "16", "--seed", "1"})
                .code,
            0);
  ASSERT_EQ(run_cli({"make-vocab", "--out", (dir / "vocab.lemb").string()}).code, 0);
  std::ofstream(dir / "train.cfg") << "base_lr = 0.01\nclip_norm = 1.0\nmax_steps = 200\n";
  const auto tr = run_cli({"train", "--data", (dir / "train").string(), "--table", (dir / "vocab.lemb").string(),
                           "--out", (dir / "m.ckpt").string(), "--config", (dir / "train.cfg").string(), "--history",
                           (dir / "h.csv").string()});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "h.csv"));
  const auto ev = run_cli({"eval", "--checkpoint", (dir / "m.ckpt").string(), "--table",
                           (dir / "vocab.lemb").string(), "--data", (dir / "train").string(), "--out",
                           (dir / "metrics.csv").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto m = read_metrics(dir / "metrics.csv");
  ASSERT_TRUE(m.count("miou") && m.count("chance_miou"));
  EXPECT_GT(m.at("miou"), m.at("chance_miou"));
  EXPECT_TRUE(m.count("iou:cat"));
}

#ifdef LANGSEG_CLI_PATH
TEST(CliProcess, ExitCodeReachesTheShell) {
  TempDir dir;
  const std::string cli = LANGSEG_CLI_PATH;
  const std::string cmd = "\"" + cli + "\" predict --checkpoint \"" + (dir / "missing.ckpt").string() +
                          "\" --table t --image i --labels a --out \"" + (dir / "o.png").string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), cli::kIo);
  EXPECT_EQ(WEXITSTATUS(std::system(("\"" + cli + "\" --bogus 2>/dev/null").c_str())), cli::kUsage);
}
#endif

}  // namespace
}  // namespace langseg
