#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "tsam/cli.hpp"

using namespace tsam;
using io::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  args.insert(args.begin(), "tsam");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Small enough to run in well under a second.
fs::path small_config(const fs::path& dir) {
  const fs::path p = dir / "small.json";
  io::atomic_write(p, R"({"seed": 11, "seeds": 3, "sandbox": {"tau": 12},
    "guidance": {"schedule": [0, 4], "inner_iters": 4, "alpha": 30},
    "verify": {"prop1": {"n_c_grid": [256, 1024, 4096], "trials": 20}, "prop2": {"trials": 10}, "a4": {"trials": 10}},
    "analysis": {"instances": 40, "finding1": {"points": 12, "n_c": 256}}})");
  return p;
}

}  // namespace

TEST(Cli, HelpSucceeds) {
  const auto r = call({"--help"});
  EXPECT_EQ(r.code, cli::kOk);
  EXPECT_NE(r.out.find("run"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(call({}).code, cli::kUsage);
  EXPECT_EQ(call({"verify", "prop9"}).code, cli::kUsage);
  EXPECT_EQ(call({"run", "--alpha", "-3"}).code, cli::kUsage);
  EXPECT_EQ(call({"run", "--schedule", "3-1"}).code, cli::kUsage);
  const auto missing = call({"run", "--config", "/nonexistent/tsam.json"});
  EXPECT_EQ(missing.code, cli::kUsage);
  EXPECT_NE(missing.err.find("/nonexistent/tsam.json"), std::string::npos);
}

TEST(Cli, ScheduleParsing) {
  EXPECT_EQ(cli::parse_schedule("0,10,20"), (std::vector<std::size_t>{0, 10, 20}));
  EXPECT_EQ(cli::parse_schedule("1-3,7"), (std::vector<std::size_t>{1, 2, 3, 7}));
  EXPECT_THROW(cli::parse_schedule("x"), ConfigError);
  EXPECT_THROW(cli::parse_schedule("-2"), ConfigError);
}

TEST(Cli, RunIsByteDeterministic) {
  const fs::path dir = fresh_dir("tsam_cli_run");
  const auto cfg = small_config(dir).string();
  ASSERT_EQ(call({"run", "--config", cfg, "--out", (dir / "a").string()}).code, cli::kOk);
  ASSERT_EQ(call({"run", "--config", cfg, "--out", (dir / "b").string()}).code, cli::kOk);
  for (const char* f : {"summary.csv", "summary_control.csv", "run.json", "traces/seed_0.jsonl"})
    EXPECT_EQ(io::read_file(dir / "a" / f), io::read_file(dir / "b" / f)) << f;
  const std::string csv = io::read_file(dir / "a" / "summary.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,step,loss,C_bound_mean,C_unbound_mean");
  fs::remove_all(dir);
}

TEST(Cli, VerifyTargetsWriteReports) {
  const fs::path dir = fresh_dir("tsam_cli_verify");
  const auto cfg = small_config(dir).string();
  for (const char* t : {"prop1", "prop2", "a4"}) {
    const fs::path rep = dir / (std::string(t) + ".json");
    const auto r = call({"verify", t, "--config", cfg, "--out", rep.string()});
    EXPECT_EQ(r.code, cli::kOk) << t << ": " << r.err;
    EXPECT_TRUE(json::parse(io::read_file(rep)).at("pass").get<bool>());
  }
  fs::remove_all(dir);
}

TEST(Cli, AnalyzeFigures) {
  const fs::path dir = fresh_dir("tsam_cli_analyze");
  const auto cfg = small_config(dir).string();
  for (const char* fig : {"fig2a", "fig2b", "fig4", "fig5a", "fig5b"}) {
    const auto r = call({"analyze", fig, "--config", cfg, "--out", dir.string()});
    EXPECT_EQ(r.code, cli::kOk) << fig << ": " << r.err;
    EXPECT_TRUE(fs::exists(dir / (std::string(fig) + ".csv")));
    EXPECT_TRUE(fs::exists(dir / (std::string(fig) + "_summary.json")));
  }
  fs::remove_all(dir);
}

TEST(Cli, DumpThenImportRoundTrip) {
  const fs::path dir = fresh_dir("tsam_cli_maps");
  const auto cfg = small_config(dir).string();
  ASSERT_EQ(call({"dump-encoding", "--config", cfg, "--instance", "2", "--out", dir.string()}).code, cli::kOk);
  EXPECT_TRUE(fs::exists(dir / "encoding" / "manifest.json"));
  const auto r = call({"import-maps", (dir / "maps" / "manifest.json").string(), "--config", cfg, "--out", (dir / "imp").string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  const auto j = json::parse(io::read_file(dir / "imp" / "import.json"));
  EXPECT_EQ(j.at("max_abs_diff_C").get<double>(), 0.0);

  io::atomic_write(dir / "maps" / "A_avg.bin", std::string(16, '\0'));
  EXPECT_EQ(call({"import-maps", (dir / "maps" / "manifest.json").string(), "--out", (dir / "imp").string()}).code,
            cli::kUsage);
  fs::remove_all(dir);
}
