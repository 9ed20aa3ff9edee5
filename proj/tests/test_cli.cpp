#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <regex>
#include <string>

#include "emdiff/container.hpp"
#include "emdiff/json_io.hpp"

using namespace emdiff;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

const std::string kTiny =
    " --set dataset.n_train=120 --set dataset.n_init=50 --set dataset.n_test=40"
    " --set init_train.epochs=5 --set train.epochs=2 --set train.batch_size=32 --set em.iterations=3 --set em.subset_size=256"
    " --set sampler.lambda_subset=4 --set sampler.lambda_grid=[1,10] --set schedule.T=20"
    " --set net.hidden=[32,32] --set net.time_embed_dim=8";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("emdiff_test_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  // Runs the binary with EMDIFF_OUT pointing at the scratch root; stderr is
  // merged into the captured output.
  Result run(const std::string& args) const {
    const std::string cmd = "EMDIFF_OUT='" + root_.string() + "' EMDIFF_CONFIG_DIR='" EMDIFF_CONFIG_DIR "' '" +
                            std::string(EMDIFF_CLI_PATH) + "' " + args + " 2>&1";
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  fs::path dir() const { return root_ / "toy_inpaint"; }

  fs::path root_;
};

bool single_error_line(const std::string& out, const std::string& category) {
  return std::regex_match(out, std::regex("error: " + category + ": [^\n]+\n"));
}

}  // namespace

TEST_F(Cli, InvalidConfigWritesNothing) {
  auto r = run("gen-data --config toy_inpaint --set operator.mask_prob=1.5");
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(single_error_line(r.out, "config")) << r.out;
  EXPECT_TRUE(fs::is_empty(root_));

  r = run("gen-data --config toy_inpaint --set train.epoch=3");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("unknown key 'train.epoch'"), std::string::npos) << r.out;

  r = run("gen-data --config no_such_config");
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(single_error_line(r.out, "config")) << r.out;
  EXPECT_TRUE(fs::is_empty(root_));
}

TEST_F(Cli, UsageAndMissingInputErrors) {
  auto r = run("");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "usage")) << r.out;
  r = run("gen-data");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "usage")) << r.out;
  r = run("corrupt --config toy_inpaint");
  EXPECT_EQ(r.code, 4);
  EXPECT_TRUE(single_error_line(r.out, "io")) << r.out;
  EXPECT_TRUE(fs::is_empty(root_));
  r = run("evaluate --recon '" + (root_ / "missing").string() + "' --reference '" + (root_ / "x").string() + "'");
  EXPECT_EQ(r.code, 4);
}

TEST_F(Cli, CorruptIsDeterministic) {
  ASSERT_EQ(run("gen-data -c toy_inpaint" + kTiny).code, 0);
  ASSERT_EQ(run("corrupt -c toy_inpaint" + kTiny).code, 0);
  const auto y1 = read_file(dir() / "observations" / "y.f32");
  const auto m1 = read_file(dir() / "observations" / "mask.f32");
  const auto man1 = json::parse(read_file(dir() / "manifests" / "corrupt.json"));
  ASSERT_EQ(run("corrupt -c toy_inpaint" + kTiny).code, 0);
  EXPECT_EQ(read_file(dir() / "observations" / "y.f32"), y1);
  EXPECT_EQ(read_file(dir() / "observations" / "mask.f32"), m1);
  auto man2 = json::parse(read_file(dir() / "manifests" / "corrupt.json"));
  EXPECT_EQ(man1["outputs"], man2["outputs"]);
  EXPECT_TRUE(man2.contains("timestamps"));
  ASSERT_EQ(run("corrupt -c toy_inpaint" + kTiny + " --set operator.seed=12").code, 0);
  EXPECT_NE(read_file(dir() / "observations" / "y.f32"), y1);
}

TEST_F(Cli, EvaluateIdenticalSets) {
  ASSERT_EQ(run("gen-data -c toy_inpaint" + kTiny).code, 0);
  const auto test = (dir() / "data" / "test").string();
  auto r = run("evaluate --recon '" + test + "' --reference '" + test + "' --write '" + (root_ / "e.json").string() + "'");
  ASSERT_EQ(r.code, 0) << r.out;
  auto j = json::parse(read_file(root_ / "e.json"));
  EXPECT_EQ(j["psnr_mean"], "inf");
  EXPECT_EQ(j["swd"].get<double>(), 0.0);
  EXPECT_EQ(j["n_recon"], 40);
}

TEST_F(Cli, PipelineProducesMetricsCheckpointsAndPlots) {
  for (const char* cmd : {"gen-data", "corrupt", "init-train", "em-run"}) {
    auto r = run(std::string(cmd) + " -c toy_inpaint" + kTiny);
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.out;
  }
  const auto metrics = read_file(dir() / "metrics.csv");
  std::size_t lines = 0;
  for (char c : metrics) lines += c == '\n';
  EXPECT_EQ(lines, 1u + 3u) << metrics;
  EXPECT_EQ(metrics.rfind("iteration,phase,lambda_star,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir() / "checkpoints" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir() / "checkpoints" / "iter_002.ckpt"));
  EXPECT_TRUE(fs::exists(dir() / "config.json"));
  auto man = json::parse(read_file(dir() / "manifests" / "em-run.json"));
  EXPECT_EQ(man["command"], "em-run");
  EXPECT_EQ(man["timestamps"]["iteration_wall_clock_s"].size(), 3u);

  // A rerun in a fresh directory reproduces the metrics byte for byte.
  fs::rename(dir(), root_ / "first");
  for (const char* cmd : {"gen-data", "corrupt", "init-train", "em-run"}) ASSERT_EQ(run(std::string(cmd) + " -c toy_inpaint" + kTiny).code, 0);
  EXPECT_EQ(read_file(dir() / "metrics.csv"), metrics);
  EXPECT_EQ(read_file(dir() / "checkpoints" / "final.ckpt"), read_file(root_ / "first" / "checkpoints" / "final.ckpt"));

  auto r = run("plot -c toy_inpaint" + kTiny);
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"lambda.svg", "psnr.svg", "data_loss.svg", "loss.svg"}) {
    const auto svg = read_file(dir() / "plots" / f);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u) << f;
    EXPECT_NE(svg.find("<polyline"), std::string::npos) << f;
  }

  r = run("sample -c toy_inpaint" + kTiny + " -n 7");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(load_rows(dir() / "samples").size(), 7u);
  r = run("sample -c toy_inpaint" + kTiny + " --posterior -n 5");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(load_rows(dir() / "reconstructions").size(), 5u);
  r = run("evaluate -c toy_inpaint" + kTiny);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir() / "evaluation.json"));
}

TEST_F(Cli, ResumeContinuesAndRejectsOtherConfigs) {
  for (const char* cmd : {"gen-data", "corrupt", "init-train"}) ASSERT_EQ(run(std::string(cmd) + " -c toy_inpaint" + kTiny).code, 0);
  ASSERT_EQ(run("em-run -c toy_inpaint" + kTiny).code, 0);
  const auto full = read_file(dir() / "metrics.csv");

  ASSERT_EQ(run("em-run -c toy_inpaint" + kTiny + " --set em.iterations=2").code, 0);
  auto r = run("em-run -c toy_inpaint" + kTiny + " --resume");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("resuming after iteration 2"), std::string::npos) << r.out;
  EXPECT_EQ(read_file(dir() / "metrics.csv"), full);
  EXPECT_EQ(read_file(dir() / "checkpoints" / "final.ckpt").size(), read_file(dir() / "checkpoints" / "iter_002.ckpt").size());

  const auto before = read_file(dir() / "config.json");
  r = run("em-run -c toy_inpaint" + kTiny + " --set train.lr=0.01 --resume");
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(single_error_line(r.out, "config")) << r.out;
  EXPECT_EQ(read_file(dir() / "config.json"), before);
}

TEST_F(Cli, CorruptedCheckpointIsReported) {
  for (const char* cmd : {"gen-data", "init-train"}) ASSERT_EQ(run(std::string(cmd) + " -c toy_inpaint" + kTiny).code, 0);
  const auto ck = dir() / "checkpoints" / "init.ckpt";
  auto bytes = read_file(ck);
  bytes[bytes.size() / 2] ^= 0x40;
  write_file(ck, bytes);
  auto r = run("sample -c toy_inpaint" + kTiny + " --checkpoint '" + ck.string() + "'");
  EXPECT_EQ(r.code, 5);
  EXPECT_TRUE(single_error_line(r.out, "checksum")) << r.out;
}
