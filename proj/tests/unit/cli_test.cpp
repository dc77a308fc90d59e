// Drives the built command-line binary end to end.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <string>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace {

struct Invocation {
  int exit_code = -1;
  std::string output;
};

Invocation invoke(const std::string& args) {
  Invocation inv;
  const std::string cmd = std::string(FEDCOG_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return inv;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) inv.output += buf.data();
  const int status = ::pclose(pipe);
  inv.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return inv;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const std::string& body) {
  const auto path = dir / "config.ini";
  std::ofstream(path) << body;
  return path;
}

constexpr const char* kTinyConfig =
    "[dataset]\nsource = synth\nsynth_classes = 4\nsynth_train_per_class = 20\nsynth_test_per_class = 5\n"
    "synth_dim = 16\nimage_side = 4\n"
    "[partition]\nkind = niid2\n"
    "[method]\nname = fedcog\n"
    "[federation]\nrounds = 2\nclients = 2\nfedcog_start_round = 1\n"
    "[local]\ntau = 3\nlr = 0.1\nbatch_size = 8\n"
    "[generation]\nnum_samples = 4\nsteps = 3\n"
    "[model]\nhidden = 8\n"
    "[run]\nthreads = 1\n";

TEST(CliTest, RunWritesResults) {
  const auto dir = fedcog::testing::scratch_dir("cli_run");
  const auto cfg = write_config(dir, kTinyConfig);
  const Invocation inv = invoke("run " + cfg.string() + " -o " + (dir / "out").string());
  EXPECT_EQ(inv.exit_code, 0) << inv.output;
  EXPECT_NE(inv.output.find("final global accuracy"), std::string::npos);
  EXPECT_NE(inv.output.find("round   1"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "seed_0" / "rounds.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "summary.json"));
}

TEST(CliTest, InvalidConfigFailsWithMessage) {
  const auto dir = fedcog::testing::scratch_dir("cli_bad");
  const auto cfg = write_config(dir, "[local]\ntau = many\n");
  const Invocation inv = invoke("run " + cfg.string() + " -o " + (dir / "out").string());
  EXPECT_EQ(inv.exit_code, 2);
  EXPECT_NE(inv.output.find("local.tau"), std::string::npos) << inv.output;
}

TEST(CliTest, MissingConfigAndUnknownCommandFail) {
  EXPECT_NE(invoke("run /nonexistent/config.ini").exit_code, 0);
  EXPECT_NE(invoke("frobnicate").exit_code, 0);
  EXPECT_NE(invoke("").exit_code, 0);
}

TEST(CliTest, GradcheckPasses) {
  const Invocation inv = invoke("gradcheck -n 2 -s 3");
  EXPECT_EQ(inv.exit_code, 0) << inv.output;
  EXPECT_NE(inv.output.find("cross_entropy"), std::string::npos);
  EXPECT_EQ(inv.output.find("FAIL"), std::string::npos);
}

TEST(CliTest, DemoGenerateWritesImages) {
  const auto dir = fedcog::testing::scratch_dir("cli_demo");
  const auto cfg = write_config(dir, kTinyConfig);
  const Invocation inv = invoke("demo-generate " + cfg.string() + " -o " + (dir / "out").string() + " -c 1");
  EXPECT_EQ(inv.exit_code, 0) << inv.output;
  EXPECT_NE(inv.output.find("mean target probability"), std::string::npos);
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "out" / "generated")) {
    if (e.path().extension() == ".pgm") ++images;
  }
  EXPECT_EQ(images, 4u);
}

}  // namespace
