#include <gtest/gtest.h>

#include <filesystem>
#include <sys/wait.h>

#include "maskattn/analysis.hpp"
#include "maskattn/key_value.hpp"
#include "maskattn/model.hpp"
#include "maskattn/train.hpp"

namespace fs = std::filesystem;
using namespace maskattn;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "maskattn_cli_test.log";
  const std::string cmd = std::string(MASKATTN_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text_file(log.string());
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("maskattn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  // Small model so end-to-end commands stay fast.
  std::string write_config() const {
    write_text_file(path("toy.cfg"),
                    "encoder_layers = 2\ndecoder_layers = 1\nheight = 32\nwidth = 32\n"
                    "warmup_iters = 1\ndecay_iter = 3\n");
    return path("toy.cfg");
  }

  fs::path dir_;
};

const std::vector<std::string> kCommands{"train",        "eval",        "propagate",
                                         "retrieve",     "project",     "inspect-attn",
                                         "probe-throughput", "gen-data"};

TEST_F(CliTest, HelpListsFlagsWithDefaults) {
  EXPECT_EQ(run("--help").code, 0);
  for (const auto& c : kCommands) {
    const CliRun r = run(c + " --help");
    EXPECT_EQ(r.code, 0) << c;
    EXPECT_NE(r.out.find("--"), std::string::npos) << c;
  }
  const CliRun r = run("eval --help");
  EXPECT_NE(r.out.find("--history TEXT [7]"), std::string::npos) << r.out;
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-data --out " + path("g") + " --no-such-flag").code, 2);
  EXPECT_EQ(run("train --out " + path("r") + " --config " + path("missing.cfg")).code, 2);
  EXPECT_EQ(run("train --out " + path("r") + " --set bogus=1").code, 2);
  EXPECT_EQ(run("train --out " + path("r") + " --regime sideways").code, 2);
  EXPECT_EQ(run("eval --ckpt " + path("none.bin") + " --synthetic 1").code, 2);
}

TEST_F(CliTest, ZeroIterationsWritesInitCheckpoint) {
  const std::string cfg = write_config();
  const CliRun r = run("train --config " + cfg + " --out " + path("r") + " --seed 5 --iterations 0");
  ASSERT_EQ(r.code, 0) << r.out;
  TrainConfig c;
  for (const auto& [k, v] : parse_key_values(read_text_file(cfg))) c.set(k, v);
  EXPECT_EQ(read_text_file(path("r/checkpoint.bin")), serialize_checkpoint(SegmentationModel(c.model, 5)));
  EXPECT_TRUE(fs::exists(path("r/config.txt")));
  EXPECT_TRUE(fs::exists(path("r/metrics.csv")));
}

TEST_F(CliTest, TrainIsByteReproducible) {
  const std::string cfg = write_config();
  const std::string flags = "--config " + cfg + " --seed 3 --iterations 4";
  ASSERT_EQ(run("train " + flags + " --out " + path("a")).code, 0);
  ASSERT_EQ(run("train " + flags + " --out " + path("b")).code, 0);
  for (const char* f : {"checkpoint.bin", "metrics.csv", "config.txt"}) {
    EXPECT_EQ(read_text_file(path(std::string("a/") + f)), read_text_file(path(std::string("b/") + f))) << f;
  }
  const CsvTable m = parse_csv(read_text_file(path("a/metrics.csv")));
  EXPECT_EQ(m.rows.size(), 4u);
}

TEST_F(CliTest, ArmFlagsReachTheResolvedConfig) {
  const std::string cfg = write_config();
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("r") +
                " --iterations 1 --attention hard --catch-all off --regime cyclic --set clip_length=2")
                .code,
            0);
  const std::string text = read_text_file(path("r/config.txt"));
  EXPECT_NE(text.find("attention_mode=hard"), std::string::npos) << text;
  EXPECT_NE(text.find("catch_all=off"), std::string::npos) << text;
  EXPECT_NE(text.find("regime=cyclic"), std::string::npos) << text;
}

TEST_F(CliTest, NumericAbortExitsThree) {
  const std::string cfg = write_config();
  const CliRun r = run("train --config " + cfg + " --out " + path("r") +
                    " --iterations 3 --set peak_lr=1e200 --set warmup_iters=0");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_TRUE(fs::exists(path("r/numeric_failure.txt")));
}

TEST_F(CliTest, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --seed 9 --n 2 --size 32 --out " + path("a")).code, 0);
  ASSERT_EQ(run("gen-data --seed 9 --n 2 --size 32 --out " + path("b")).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(path("a"))) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), path("a"));
    EXPECT_EQ(read_text_file(e.path().string()), read_text_file((fs::path(path("b")) / rel).string()));
    ++files;
  }
  EXPECT_EQ(files, 2u * 3u * 2u);
}

TEST_F(CliTest, EvalSweepAndArtifacts) {
  const std::string cfg = write_config();
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("r") + " --iterations 0").code, 0);
  const std::string ckpt = path("r/checkpoint.bin");
  ASSERT_EQ(run("gen-data --seed 2 --n 2 --size 32 --out " + path("d")).code, 0);

  CliRun r = run("eval --ckpt " + ckpt + " --data " + path("d") + " --history 1,4,7 --out " + path("e.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const CsvTable t = parse_csv(read_text_file(path("e.csv")));
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.rows[0][0], "1");
  EXPECT_EQ(t.rows[2][0], "7");

  r = run("propagate --ckpt " + ckpt + " --clip " + path("d") + " --out " + path("p"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(path("p/seq00001/00002_obj0.pgm")));

  r = run("inspect-attn --ckpt " + ckpt + " --layer 1 --head 7 --out " + path("a"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(path("a/obj0.pgm")));
  EXPECT_TRUE(fs::exists(path("a/bg8.pgm")));
  EXPECT_EQ(run("inspect-attn --ckpt " + ckpt + " --head 8 --out " + path("a")).code, 2);
  EXPECT_EQ(run("inspect-attn --ckpt " + ckpt + " --layer 2 --out " + path("a")).code, 2);

  r = run("project --ckpt " + ckpt + " --synthetic 3 --out " + path("proj"));
  ASSERT_EQ(r.code, 0) << r.out;
  // Crowded 32x32 scenes may hold fewer than two objects; every object appears in all 3 frames.
  const std::size_t rows = parse_csv(read_text_file(path("proj/projection.csv"))).rows.size();
  EXPECT_GE(rows, 3u * 3u);
  EXPECT_EQ(rows % 3u, 0u);

  r = run("probe-throughput --ckpt " + ckpt + " --histories 1,10 --frames 3 --runs 1 --out " + path("tp.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(parse_csv(read_text_file(path("tp.csv"))).rows.size(), 2u);
}

TEST_F(CliTest, CheckpointResolutionMismatchExitsTwo) {
  const std::string cfg = write_config();
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("r") + " --iterations 0").code, 0);
  ASSERT_EQ(run("gen-data --n 1 --size 64 --out " + path("d")).code, 0);
  const CliRun r = run("eval --ckpt " + path("r/checkpoint.bin") + " --data " + path("d"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("trained at 32x32"), std::string::npos) << r.out;
}

TEST_F(CliTest, RetrieveOnTwoClustersGivesPrecisionOne) {
  CsvTable t{{"label", "d0", "d1"}, {}};
  for (int i = 0; i < 6; ++i) {
    const double off = i % 2 ? 100.0 : 0.0;
    t.rows.push_back({std::to_string(i % 2), format_real(off + 0.1 * i), format_real(off - 0.05 * i)});
  }
  export_csv(t, path("desc.csv"));
  const CliRun r = run("retrieve --descriptors " + path("desc.csv") + " --out " + path("r"));
  ASSERT_EQ(r.code, 0) << r.out;
  const CsvTable pr = parse_csv(read_text_file(path("r/pr_curve.csv")));
  ASSERT_EQ(pr.rows.size(), 21u);
  for (const auto& row : pr.rows) EXPECT_EQ(parse_real("p", row[1]), 1.0);
}

}  // namespace
