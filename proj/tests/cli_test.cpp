#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "featwise/cli.hpp"
#include "test_support.hpp"

using namespace featwise;
using featwise::testing::TempDir;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string path(const TempDir& dir, const std::string& name) { return (dir / name).string(); }

}  // namespace

TEST(Cli, GenDomainWritesFile) {
  TempDir dir("cli_gen");
  const CliRun r = cli({"gen-domain", "--seed", "7", "--classes", "20", "--dim", "16", "--per-class", "50", "--out",
                     path(dir, "d.fsds")});
  EXPECT_EQ(r.code, 0) << r.err;
  const Domain d = load_domain(dir / "d.fsds");
  EXPECT_EQ(d.class_count(), 20u);
  EXPECT_EQ(d.dim, 16u);
}

TEST(Cli, UsageErrorsExitOne) {
  CliRun r = cli({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
  r = cli({"eval", "--no-such-flag"});
  EXPECT_EQ(r.code, 1);
  r = cli({});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, MissingInputExitsTwo) {
  const CliRun r = cli({"eval", "--ckpt", "missing.ftcp", "--domain", "missing.fsds"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, EndToEndPipeline) {
  TempDir dir("cli_e2e");
  for (int s = 1; s <= 3; ++s) {
    ASSERT_EQ(cli({"gen-domain", "--seed", std::to_string(s), "--classes", "8", "--dim", "6", "--per-class", "25",
                   "--out", path(dir, "d" + std::to_string(s) + ".fsds")})
                  .code,
              0);
  }
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "mode = lft\nencoder_widths = 8, 8\nft_blocks = 1, 1\nway = 3\nshot = 2\nquery = 4\nalpha = 0.05\n"
           "iterations = 5\n";
  }
  const std::string seen = path(dir, "d1.fsds") + "," + path(dir, "d2.fsds");
  CliRun r = cli({"pretrain", "--config", path(dir, "run.cfg"), "--data", seen, "--epochs", "2", "--out",
               path(dir, "pre.ftcp")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"train", "--config", path(dir, "run.cfg"), "--seen", seen, "--init", path(dir, "pre.ftcp"), "--log",
           path(dir, "log.csv"), "--out", path(dir, "lft.ftcp")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"eval", "--ckpt", path(dir, "lft.ftcp"), "--domain", path(dir, "d3.fsds"), "--way", "3", "--shot", "2",
           "--query", "4", "--trials", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("trial,accuracy\n", 0), 0u);
  EXPECT_NE(r.out.find("# mean="), std::string::npos);
  r = cli({"cross-eval", "--ckpt", path(dir, "lft.ftcp"), "--domains", seen + "," + path(dir, "d3.fsds"), "--way", "3",
           "--shot", "2", "--query", "4", "--trials", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 4);
  r = cli({"stats-ft", "--ckpt", path(dir, "lft.ftcp")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 3);
  r = cli({"stats-projection", "--ckpt", path(dir, "lft.ftcp"), "--domains", seen, "--samples", "10", "--out",
           path(dir, "proj.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "proj.csv"));
  r = cli({"split", "--data", path(dir, "d1.fsds"), "--fractions", "0.5,0.25,0.25", "--out", path(dir, "d1")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_domain(dir / "d1_train.fsds").class_count(), 4u);
  EXPECT_EQ(load_domain(dir / "d1_test.fsds").class_count(), 2u);
}

TEST(Cli, SingleSeenDomainWarns) {
  TempDir dir("cli_single");
  ASSERT_EQ(cli({"gen-domain", "--seed", "1", "--classes", "6", "--dim", "6", "--per-class", "20", "--out",
                 path(dir, "a.fsds")})
                .code,
            0);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "encoder_widths = 8\nft_blocks = 1\nway = 3\nshot = 2\nquery = 3\niterations = 2\n";
  }
  const CliRun r = cli({"train", "--config", path(dir, "run.cfg"), "--mode", "lft", "--seen", path(dir, "a.fsds"),
                     "--out", path(dir, "m.ftcp")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("single seen domain"), std::string::npos) << r.err;
}

#ifdef FEATWISE_CLI_PATH
TEST(Cli, BinaryExitCodes) {
  const std::string bin = FEATWISE_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " bogus 2>/dev/null").c_str())), 1);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " eval --ckpt /nonexistent.ftcp --domain x.fsds 2>/dev/null").c_str())),
            2);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help >/dev/null").c_str())), 0);
}
#endif
