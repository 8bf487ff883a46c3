#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <string>

#include <gtest/gtest.h>

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  std::string cmd = std::string(TILEFUSE_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

const std::string kPrograms = TILEFUSE_PROGRAMS;

}  // namespace

TEST(Cli, CompileVanilla) {
  auto r = run("compile --variant vanilla");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("1 kernel(s)", 0), 0u) << r.out;
}

TEST(Cli, VerifyPasses) {
  auto r = run("verify --variant causal --n 128 --seeds 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST(Cli, VerifyFailsUnderFaultInjection) {
  auto r = run("verify --variant vanilla --n 128 --fault-flip-rescale");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("run --variant vanilla --bogus").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("compile").code, 2);
  EXPECT_EQ(run("compile --variant vanilla --tile M").code, 2);
  EXPECT_EQ(run("compile --variant nope").code, 2);
  EXPECT_EQ(run("compile --input /nonexistent.tf").code, 2);
}

TEST(Cli, MalformedProgramReportsLine) {
  auto r = run("compile --input " + kPrograms + "/malformed.tf");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("line 4:"), std::string::npos) << r.out;
}

TEST(Cli, HelpExitsZero) {
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, RunTraceAndParallel) {
  auto r = run("run --variant gqa_causal --n 128 --trace --parallel --threads 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("write overlaps 0"), std::string::npos);
}

TEST(Cli, StatsJson) {
  auto r = run("stats --variant vanilla --sweep n=128,256 --format json");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"traffic_ratio\""), std::string::npos);
}

TEST(Cli, TileHintChangesGrid) {
  auto a = run("compile --variant vanilla --n 512 --format json");
  auto b = run("compile --variant vanilla --n 512 --tile M=128 --format json");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(b.code, 0);
  EXPECT_NE(a.out, b.out);
}
