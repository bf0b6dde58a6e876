#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cohet/metrics.hpp"

namespace {

namespace fs = std::filesystem;

const fs::path kRoot = fs::temp_directory_path() / "cohet_cli_test";

const char* kConfig =
    "[scenario]\nhorizon = 10\n"
    "[ppo]\ntrain_batch_size = 40\nminibatch_size = 20\nepochs = 1\n"
    "[model]\nhidden_width = 16\nd_z = 8\nh_dim = 16\n"
    "[algo]\ndynamics_hidden = 16\ndynamics_batch = 16\nbeta = 0.1\n"
    "[run]\nn_envs = 4\niterations = 3\ncheckpoint_every = 2\n";

struct Result {
  int code;
  std::string out;
};

Result cli(const std::string& args) {
  const fs::path log = kRoot / "last.log";
  const std::string cmd = std::string(COHET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    std::ofstream(kRoot / "small.ini") << kConfig;
  }
  static std::string cfg() { return "--config " + (kRoot / "small.ini").string(); }
};

TEST_F(Cli, OneIterationWritesHeaderRowAndCheckpoint) {
  const fs::path out = kRoot / "one";
  const auto r = cli("train " + cfg() + " --iters 1 --seed 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path dir = out / "seed_3";
  const auto t = cohet::metrics::read_csv((dir / "metrics.csv").string());
  EXPECT_EQ(t.columns, cohet::metrics::header(3));
  EXPECT_EQ(t.rows.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "iter_1.ckpt"));
  EXPECT_EQ(std::distance(fs::directory_iterator(dir / "checkpoints"), fs::directory_iterator{}), 1);
  EXPECT_NE(r.out.find("seed=3"), std::string::npos);
}

TEST_F(Cli, RefusesExistingRunWithoutForce) {
  const fs::path out = kRoot / "again";
  ASSERT_EQ(cli("train " + cfg() + " --iters 1 --out " + out.string()).code, 0);
  const auto again = cli("train " + cfg() + " --iters 1 --out " + out.string());
  EXPECT_NE(again.code, 0);
  EXPECT_NE(again.out.find("--force"), std::string::npos) << again.out;
  EXPECT_EQ(cli("train " + cfg() + " --iters 2 --force --out " + out.string()).code, 0);
  EXPECT_EQ(cohet::metrics::read_csv((out / "seed_0" / "metrics.csv").string()).rows.size(), 2u);
}

TEST_F(Cli, SameCommandSameMetrics) {
  ASSERT_EQ(cli("train " + cfg() + " --out " + (kRoot / "p1").string()).code, 0);
  ASSERT_EQ(cli("train " + cfg() + " --out " + (kRoot / "p2").string()).code, 0);
  EXPECT_EQ(slurp(kRoot / "p1" / "seed_0" / "metrics.csv"), slurp(kRoot / "p2" / "seed_0" / "metrics.csv"));
  EXPECT_EQ(slurp(kRoot / "p1" / "seed_0" / "checkpoints" / "iter_3.ckpt"),
            slurp(kRoot / "p2" / "seed_0" / "checkpoints" / "iter_3.ckpt"));
}

TEST_F(Cli, TeamAndBaselineDiffer) {
  ASSERT_EQ(cli("train " + cfg() + " --algo cohet-team --out " + (kRoot / "team").string()).code, 0);
  ASSERT_EQ(cli("train " + cfg() + " --algo baseline --out " + (kRoot / "base").string()).code, 0);
  EXPECT_NE(slurp(kRoot / "team" / "seed_0" / "metrics.csv"), slurp(kRoot / "base" / "seed_0" / "metrics.csv"));
}

TEST_F(Cli, EvalAndPlot) {
  const fs::path out = kRoot / "ep";
  ASSERT_EQ(cli("train " + cfg() + " --out " + out.string()).code, 0);
  const auto e = cli("eval " + (out / "seed_0" / "checkpoints" / "iter_2.ckpt").string() + " --episodes 2");
  EXPECT_EQ(e.code, 0) << e.out;
  EXPECT_NE(e.out.find("mean_reward="), std::string::npos);
  const auto p = cli("plot " + (out / "seed_0").string() + " --out " + (kRoot / "plots").string());
  EXPECT_EQ(p.code, 0) << p.out;
  EXPECT_TRUE(fs::exists(kRoot / "plots" / "episodic_reward_mean.svg"));
  EXPECT_TRUE(fs::exists(kRoot / "plots" / "merged.csv"));
}

TEST_F(Cli, ReportsBadInput) {
  const auto bad = cli("train --algo mappo --out " + (kRoot / "bad").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("error:"), std::string::npos);
  EXPECT_NE(cli("").code, 0);
  EXPECT_NE(cli("eval " + (kRoot / "nope.ckpt").string()).code, 0);
}

TEST_F(Cli, ThreadCountDoesNotChangeResults) {
  ASSERT_EQ(cli("train " + cfg() + " --iters 2 --out " + (kRoot / "t1").string()).code, 0);
  const std::string cmd = "COHET_THREADS=3 " + std::string(COHET_CLI_PATH) + " train " + cfg() +
                          " --iters 2 --out " + (kRoot / "t3").string() + " > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(slurp(kRoot / "t1" / "seed_0" / "metrics.csv"), slurp(kRoot / "t3" / "seed_0" / "metrics.csv"));
}

}  // namespace
