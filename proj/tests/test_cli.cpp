#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "dmasknas/data.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out, err;
};

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dmasknas_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Runs the CLI inside `dir` with the given arguments; `env` is prefixed verbatim.
Run cli(const fs::path& dir, const std::string& args, const std::string& env = "") {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" DMASKNAS_CLI "' " + args +
                          " 2>'" + err.string() + "'";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.err = slurp(err);
  return r;
}

std::string log_without_time(const fs::path& csv) {
  std::istringstream is(slurp(csv));
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

void expect_error_line(const Run& r, const std::string& category) {
  EXPECT_NE(r.status, 0);
  EXPECT_TRUE(std::regex_match(r.err, std::regex("ERROR " + category + ": [^\n]+\n"))) << r.err;
}

}  // namespace

TEST(Cli, SearchTwiceGivesIdenticalDescriptorAndLog) {
  const auto dir = scratch_dir("determinism");
  const std::string args = "search --space desk-f --epochs 1 --seed 7 --samples 128";
  ASSERT_EQ(cli(dir, args + " --run-dir a").status, 0);
  ASSERT_EQ(cli(dir, args + " --run-dir b").status, 0);
  const auto da = slurp(dir / "a" / "descriptor.json");
  EXPECT_FALSE(da.empty());
  EXPECT_EQ(da, slurp(dir / "b" / "descriptor.json"));
  EXPECT_EQ(log_without_time(dir / "a" / "logs" / "search.csv"),
            log_without_time(dir / "b" / "logs" / "search.csv"));
  for (const char* f : {"config.json", "checkpoints/search.json", "logs/search.csv"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
}

TEST(Cli, RunDirComesFromEnvironment) {
  const auto dir = scratch_dir("env");
  ASSERT_EQ(cli(dir, "search --epochs 1 --seed 3 --samples 64", "DMASKNAS_RUN_DIR=out").status, 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "desk-f-seed3" / "descriptor.json"));
}

TEST(Cli, FlagBeatsFileBeatsDefault) {
  const auto dir = scratch_dir("precedence");
  std::ofstream(dir / "c.json") << R"({"epochs": 2, "lambda": 0.5, "search": {"batch": 8}})";
  ASSERT_EQ(cli(dir, "search --config c.json --epochs 1 --samples 64 --run-dir r").status, 0);
  const auto o = nlohmann::json::parse(slurp(dir / "r" / "cli-search.json"));
  EXPECT_EQ(o.at("epochs"), 1);
  EXPECT_EQ(o.at("lambda"), 0.5);
  EXPECT_EQ(o.at("batch"), 8);
  EXPECT_EQ(o.at("lr_alpha"), 0.01);
}

TEST(Cli, OptionsRoundTripThroughConfigFile) {
  const auto dir = scratch_dir("roundtrip");
  ASSERT_EQ(cli(dir, "search --epochs 1 --seed 4 --samples 64 --lambda 0.01 --tau0 3 --run-dir a")
                .status,
            0);
  const auto saved = slurp(dir / "a" / "cli-search.json");
  ASSERT_EQ(cli(dir, "search --config a/cli-search.json --run-dir b").status, 0);
  auto o = nlohmann::json::parse(slurp(dir / "b" / "cli-search.json"));
  o["run_dir"] = "a";
  EXPECT_EQ(o, nlohmann::json::parse(saved));
  EXPECT_EQ(slurp(dir / "a" / "descriptor.json"), slurp(dir / "b" / "descriptor.json"));
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch_dir("resume");
  const std::string args = "search --epochs 3 --seed 2 --samples 64";
  ASSERT_EQ(cli(dir, args + " --run-dir a --stop-after 1").status, 0);
  EXPECT_FALSE(fs::exists(dir / "a" / "descriptor.json"));
  ASSERT_EQ(cli(dir, args + " --run-dir a --resume").status, 0);
  ASSERT_EQ(cli(dir, args + " --run-dir b").status, 0);
  EXPECT_EQ(slurp(dir / "a" / "descriptor.json"), slurp(dir / "b" / "descriptor.json"));
  EXPECT_EQ(log_without_time(dir / "a" / "logs" / "search.csv"),
            log_without_time(dir / "b" / "logs" / "search.csv"));
  // a changed configuration cannot continue the checkpoint
  expect_error_line(cli(dir, "search --epochs 4 --seed 2 --samples 64 --run-dir a --resume"),
                    "config");
}

TEST(Cli, ErrorsAreOneMachineParsableLine) {
  const auto dir = scratch_dir("errors");
  std::ofstream(dir / "syntax.json") << "{\"epochs\": 2,";
  std::ofstream(dir / "unknown.json") << R"({"epoch": 2})";
  std::ofstream(dir / "type.json") << R"({"lambda": "big"})";
  expect_error_line(cli(dir, "search --config syntax.json"), "config");
  expect_error_line(cli(dir, "search --config unknown.json"), "config");
  expect_error_line(cli(dir, "search --config type.json"), "config");
  expect_error_line(cli(dir, "search --config missing.json"), "io");
  expect_error_line(cli(dir, "search --epochs abc"), "config");
  expect_error_line(cli(dir, "search --epochs 0"), "config");
  expect_error_line(cli(dir, "search --space no-such-space"), "io");
  expect_error_line(cli(dir, "search --data nowhere"), "io");
  expect_error_line(cli(dir, "train --arch nowhere.json"), "io");
  expect_error_line(cli(dir, "search --bogus"), "usage");
  expect_error_line(cli(dir, ""), "usage");
  // diverging training
  expect_error_line(cli(dir, "search --epochs 1 --samples 64 --lr-w 1e30 --clip 0"), "numeric");
}

TEST(Cli, GenDataIsSeededBalancedAndGated) {
  const auto dir = scratch_dir("gendata");
  const auto a = cli(dir, "gen-data --data-seed 5 --samples 256 --out a");
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(cli(dir, "gen-data --data-seed 5 --samples 256 --out b --learn-min 0").status, 0);
  EXPECT_EQ(slurp(dir / "a" / "images.idx"), slurp(dir / "b" / "images.idx"));
  EXPECT_EQ(slurp(dir / "a" / "labels.idx"), slurp(dir / "b" / "labels.idx"));
  std::smatch m;
  ASSERT_TRUE(std::regex_search(a.out, m, std::regex("linear_probe_accuracy ([0-9.]+)")));
  EXPECT_LT(std::stod(m[1]), 0.6);
  ASSERT_TRUE(std::regex_search(a.out, m, std::regex("reference_test_accuracy ([0-9.]+)")));
  EXPECT_GE(std::stod(m[1]), 0.9);
  const auto ds = dmasknas::read_idx(dir / "a" / "images.idx", dir / "a" / "labels.idx");
  std::vector<int> count(8, 0);
  for (int l : ds.labels) ++count[std::size_t(l)];
  for (int k : count) EXPECT_EQ(k, 32);
  // a probe limit the data cannot meet
  expect_error_line(cli(dir, "gen-data --samples 256 --out c --probe-max 0.05 --learn-min 0"),
                    "data");
  // a seeded half of the classes, relabelled 0..3
  ASSERT_EQ(cli(dir, "gen-data --samples 256 --out h --class-fraction 0.5 --learn-min 0").status, 0);
  const auto half = dmasknas::read_idx(dir / "h" / "images.idx", dir / "h" / "labels.idx");
  EXPECT_EQ(half.classes, 4u);
  EXPECT_EQ(half.n, 128u);
  // generated files feed the search
  EXPECT_EQ(cli(dir, "search --epochs 1 --data a --run-dir r").status, 0);
}

TEST(Cli, TrainEvalExportAndCostReport) {
  const auto dir = scratch_dir("pipeline");
  ASSERT_EQ(cli(dir, "search --epochs 1 --seed 1 --samples 64 --run-dir r").status, 0);
  const auto ex = cli(dir, "export --run-dir r");
  ASSERT_EQ(ex.status, 0);
  EXPECT_EQ(ex.out, slurp(dir / "r" / "descriptor.json"));

  const auto tr = cli(dir, "train --run-dir r --epochs 3 --samples 64");
  ASSERT_EQ(tr.status, 0) << tr.err;
  EXPECT_NE(tr.out.find("train_accuracy "), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "r" / "model.json"));
  const auto ev = cli(dir, "eval --run-dir r --samples 64 --data-seed 9");
  ASSERT_EQ(ev.status, 0) << ev.err;
  EXPECT_TRUE(std::regex_match(ev.out, std::regex("top1 [01]\\.[0-9]{4}\n"))) << ev.out;

  const auto cr = cli(dir, "cost-report --run-dir r");
  ASSERT_EQ(cr.status, 0) << cr.err;
  std::smatch total, counted;
  ASSERT_TRUE(std::regex_search(cr.out, total, std::regex("\ntotal +([0-9]+)\\.0 +([0-9]+)\\.0\n")));
  ASSERT_TRUE(std::regex_search(cr.out, counted, std::regex("counted flops ([0-9]+) params ([0-9]+)")));
  EXPECT_EQ(total[1], counted[1]);
  EXPECT_EQ(total[2], counted[2]);
  EXPECT_NE(cr.out.find("match yes"), std::string::npos);
  EXPECT_EQ(slurp(dir / "r" / "reports" / "cost.txt"), cr.out);
}

TEST(Cli, MemoryReportMaskedIsFlat) {
  const auto dir = scratch_dir("memory");
  const auto r = cli(dir, "memory-report --options 2,4,8,16,32 --mode masked --run-dir r");
  ASSERT_EQ(r.status, 0) << r.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex("masked spread ([0-9.]+)%")));
  EXPECT_LT(std::stod(m[1]), 1.0);
  EXPECT_TRUE(fs::exists(dir / "r" / "reports" / "memory.csv"));
  expect_error_line(cli(dir, "memory-report --options 2,x"), "config");
  expect_error_line(cli(dir, "memory-report --options 3"), "config");
}
