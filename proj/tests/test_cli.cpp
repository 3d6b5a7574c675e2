#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "hazediff/cli.hpp"
#include "test_util.hpp"

using namespace hazediff;
using hazediff::testing::TempDir;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "hazediff");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(int(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

// relative path -> file bytes, for whole-tree comparison
std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

const std::vector<std::string> kSmall = {"--height", "32", "--width", "32"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, UnknownFlagIsUsageError) {
  std::string err;
  EXPECT_EQ(run({"synth", "--no-such-flag", "3"}, nullptr, &err), 1);
  EXPECT_NE(err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}, nullptr, &err), 1);
  EXPECT_EQ(run({"frobnicate"}, nullptr, &err), 1);
}

TEST(Cli, HelpExitsZero) {
  std::string out;
  EXPECT_EQ(run({"--help"}, &out), 0);
  EXPECT_NE(out.find("dehaze"), std::string::npos);
}

TEST(Cli, BadValuesAndMissingPathsAreUsageErrors) {
  TempDir dir("cli");
  EXPECT_EQ(run({"synth", "--count", "abc", "--out", dir.path().string()}), 1);
  EXPECT_EQ(run({"synth", "--seed", "-4", "--out", dir.path().string()}), 1);
  EXPECT_EQ(run({"synth", "--count", "2"}), 1);  // no --out
  EXPECT_EQ(run({"dehaze", "--tau", "100", "--omega", "600", "--out", dir.path().string()}), 1);
  EXPECT_EQ(run({"train", "--mode", "sideways", "--out", dir.path().string()}), 1);
}

TEST(Cli, ConfigFileUnknownKeyIsHardError) {
  TempDir dir("cli");
  std::ofstream(dir.path() / "bad.cfg") << "count = 2\nbogus_key = 1\n";
  std::string err;
  EXPECT_EQ(run({"synth", "--config", (dir.path() / "bad.cfg").string(), "--out", dir.path().string()}, nullptr, &err),
            1);
  EXPECT_NE(err.find("bogus_key"), std::string::npos);
  std::ofstream(dir.path() / "nokv.cfg") << "count 2\n";
  EXPECT_EQ(run({"synth", "--config", (dir.path() / "nokv.cfg").string(), "--out", dir.path().string()}), 1);
}

TEST(Cli, RuntimeFailureExitsTwo) {
  TempDir dir("cli");
  fs::create_directories(dir.path() / "in");
  EXPECT_EQ(run({"dehaze", "--checkpoint", (dir.path() / "missing.hzc").string(), "--input",
                 (dir.path() / "in").string(), "--out", (dir.path() / "o").string()}),
            2);
  EXPECT_EQ(run({"train", "--data", (dir.path() / "nowhere").string(), "--out", (dir.path() / "o").string()}), 2);
}

TEST(Cli, ConfigFileThenFlagsAndRunJson) {
  TempDir dir("cli");
  std::ofstream(dir.path() / "a.cfg") << "# toy set\ncount = 3   # three pairs\nseed = 11\nheight = 24\n\nwidth=20\n";
  const auto out = dir.path() / "ds";
  ASSERT_EQ(run({"synth", "--config", (dir.path() / "a.cfg").string(), "--seed", "12", "--out", out.string()}), 0);
  const auto j = nlohmann::json::parse(read_text(out / "run.json"));
  EXPECT_EQ(j["command"], "synth");
  EXPECT_EQ(j["config"]["count"], 3);
  EXPECT_EQ(j["config"]["seed"], 12u);
  EXPECT_EQ(j["config"]["height"], 24);
  EXPECT_EQ(j["config"]["width"], 20);
  EXPECT_EQ(j["config"]["tau"], 800);
  EXPECT_EQ(j["config"].size(), cli::key_specs().size());
  const auto rows = read_manifest(out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].seed, split_seed(12, 1));
  EXPECT_EQ(read_png(out / "hazy" / "00002.png").width(), 20);
}

TEST(Cli, SynthIsDeterministic) {
  TempDir dir("cli");
  for (const char* name : {"a", "b"})
    ASSERT_EQ(run({"synth", "--count", "64", "--seed", "7", "--out", (dir.path() / name).string()}), 0);
  const auto a = hazediff::testing::snapshot(dir.path() / "a"), b = hazediff::testing::snapshot(dir.path() / "b");
  EXPECT_EQ(a.size(), 64u * 3 + 2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(run({"synth", "--count", "64", "--seed", "8", "--out", (dir.path() / "c").string()}), 0);
  EXPECT_NE(hazediff::testing::snapshot(dir.path() / "c"), a);
}

TEST(Cli, BenchReportsFortyVersusFifty) {
  TempDir dir("cli");
  std::string out;
  ASSERT_EQ(run({"bench", "--out", dir.path().string()}, &out), 0);
  const auto tsv = read_text(dir.path() / "bench.tsv");
  EXPECT_NE(tsv.find("accsamp\t1\t40\n"), std::string::npos) << tsv;
  EXPECT_NE(tsv.find("conditional\t1\t50\n"), std::string::npos) << tsv;
  EXPECT_NE(out.find("seconds"), std::string::npos);
}

TEST(Cli, EverySubcommandIsDeterministic) {
  TempDir dir("cli");
  const auto p = [&](const std::string& n) { return (dir.path() / n).string(); };
  const std::vector<std::string> fast = {"--iterations", "3", "--batch_size", "2", "--crop", "16", "--steps", "4"};

  ASSERT_EQ(run(with({"synth", "--count", "3", "--seed", "5", "--out", p("data")}, kSmall)), 0);
  ASSERT_EQ(run(with({"synth", "--count", "3", "--seed", "5", "--out", p("data2")}, kSmall)), 0);
  EXPECT_EQ(hazediff::testing::snapshot(p("data")), hazediff::testing::snapshot(p("data2")));

  for (const char* mode : {"hazegen", "dehaze"}) {
    const std::string m = mode;
    ASSERT_EQ(run(with({"train", "--mode", m, "--data", p("data"), "--seed", "3", "--out", p("tr_" + m + "1")}, fast)), 0);
    ASSERT_EQ(run(with({"train", "--mode", m, "--data", p("data"), "--seed", "3", "--out", p("tr_" + m + "2")}, fast)), 0);
    EXPECT_EQ(hazediff::testing::snapshot(p("tr_" + m + "1")), hazediff::testing::snapshot(p("tr_" + m + "2"))) << m;
  }
  const auto j = nlohmann::json::parse(read_text(fs::path(p("tr_dehaze1")) / "run.json"));
  EXPECT_EQ(j["derived"]["prediction"], "velocity");
  EXPECT_EQ(j["derived"]["effective_p"], 1.0);

  const auto ck_gen = (fs::path(p("tr_hazegen1")) / "model.hzc").string();
  const auto ck_dh = (fs::path(p("tr_dehaze1")) / "model.hzc").string();
  for (const char* run_name : {"g1", "g2"})
    ASSERT_EQ(run(with({"gen-hazy", "--checkpoint", ck_gen, "--input", p("data/clean"), "--seed", "9", "--threads",
                        run_name[1] == '1' ? "1" : "2", "--out", p(run_name)},
                       fast)),
              0);
  EXPECT_EQ(hazediff::testing::snapshot(p("g1"), {"out", "threads"}), hazediff::testing::snapshot(p("g2"), {"out", "threads"}));
  EXPECT_EQ(hazediff::testing::snapshot(p("g1")).size(), 4u);

  for (const char* run_name : {"d1", "d2"})
    ASSERT_EQ(run(with({"dehaze", "--checkpoint", ck_dh, "--input", p("data/hazy"), "--seed", "9", "--threads",
                        run_name[1] == '1' ? "1" : "2", "--out", p(run_name)},
                       fast)),
              0);
  EXPECT_EQ(hazediff::testing::snapshot(p("d1"), {"out", "threads"}), hazediff::testing::snapshot(p("d2"), {"out", "threads"}));
  EXPECT_NE(read_text(fs::path(p("d1")) / "calls.tsv").find("00000\t3\n"), std::string::npos);

  for (const char* run_name : {"e1", "e2"})
    ASSERT_EQ(run({"eval", "--input", p("d1"), "--gt", p("data/clean"), "--out", p(run_name)}), 0);
  EXPECT_EQ(hazediff::testing::snapshot(p("e1")), hazediff::testing::snapshot(p("e2")));
  EXPECT_NE(read_text(fs::path(p("e1")) / "eval.tsv").find("median\t"), std::string::npos);

  for (const char* run_name : {"b1", "b2"})
    ASSERT_EQ(run(with({"bench", "--checkpoint", ck_dh, "--input", p("data/hazy"), "--out", p(run_name)}, fast)), 0);
  EXPECT_EQ(hazediff::testing::snapshot(p("b1")), hazediff::testing::snapshot(p("b2")));
}

TEST(Cli, EvalOfGroundTruthAgainstItselfIsPerfect) {
  TempDir dir("cli");
  const auto data = (dir.path() / "data").string();
  ASSERT_EQ(run(with({"synth", "--count", "2", "--out", data}, kSmall)), 0);
  std::string out;
  ASSERT_EQ(run({"eval", "--input", data + "/clean", "--gt", data + "/clean", "--out", (dir.path() / "e").string()},
                &out),
            0);
  EXPECT_NE(read_text(dir.path() / "e" / "eval.tsv").find("median\t99\t1\n"), std::string::npos);
}
