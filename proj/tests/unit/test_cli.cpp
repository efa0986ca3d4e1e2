#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(QUESTV_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string scenario(const char* name) { return std::string(QUESTV_SCENARIO_DIR) + "/" + name; }

}  // namespace

TEST(Cli, ValidateExitCodes) {
  EXPECT_EQ(run("validate " + scenario("periodic_mix.json")), 0);
  EXPECT_EQ(run("validate " + scenario("invalid_overcommit.json")), 2);
  EXPECT_EQ(run("validate /nonexistent/file.json"), 2);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("demo no-such-demo"), 2);
  EXPECT_EQ(run("run"), 2);
}

TEST(Cli, RunWritesOutputs) {
  const auto dir = std::filesystem::temp_directory_path() / "questv_cli_test";
  std::filesystem::remove_all(dir);
  EXPECT_EQ(run("run " + scenario("periodic_mix.json") + " --seed 4 --horizon 100000000 --out " + dir.string()), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "trace.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.json"));
  EXPECT_EQ(run("run " + scenario("periodic_mix.json") + " --horizon 0 --out " + dir.string()), 2);
  std::filesystem::remove_all(dir);
}

TEST(Cli, RuntimeFailureExitsOne) {
  // The output path is an existing regular file, so creating the directory fails.
  const auto file = std::filesystem::temp_directory_path() / "questv_cli_blocker";
  std::ofstream(file) << "x";
  EXPECT_EQ(run("run " + scenario("periodic_mix.json") + " --out " + file.string() + "/sub"), 1);
  std::filesystem::remove(file);
}
