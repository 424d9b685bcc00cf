#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "json_schema.hpp"

using namespace hermflow;
using namespace hermflow::testing;
namespace fs = std::filesystem;

namespace {

const std::string kSource = HERMFLOW_SOURCE_DIR;
const std::string kCli = HERMFLOW_CLI;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hermflow_scenario_" + std::to_string(getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const int rc = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json schema(const std::string& name) { return nlohmann::json::parse(slurp(fs::path(kSource) / "schemas" / name)); }

const char* kMinimal = R"({"n": 2, "resolution": [16, 16, 1, 1], "ic": {"family": "zero"}})";

std::vector<std::string> violation_pointers(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    std::vector<std::string> out;
    for (const auto& v : e.violations()) out.push_back(v.pointer);
    return out;
  }
  return {};
}

bool has(const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); }

}  // namespace

TEST(Config, MinimalTakesDefaults) {
  const auto c = parse_config(std::string(kMinimal));
  EXPECT_EQ(c.n, 2);
  EXPECT_EQ(c.periods, std::vector<double>(4, 1.0));
  EXPECT_EQ(c.flow.scheme, Scheme::ETDRK4);
  EXPECT_EQ(c.op, "chern");
  EXPECT_EQ(c.flow.dt_init, FlowParams{}.dt_init);
  EXPECT_TRUE(c.flow.adaptive);
  EXPECT_TRUE(c.diagnostics.residuals);
}

TEST(Config, NonNumericAmplitudeNamesPointer) {
  const auto ptrs = violation_pointers(
      R"({"n": 2, "resolution": [16, 16, 1, 1],
          "ic": {"family": "random_bandlimited", "amplitude": "NaN", "seed": 1}})");
  ASSERT_EQ(ptrs.size(), 1u);
  EXPECT_EQ(ptrs[0], "/ic/amplitude");
}

TEST(Config, CollectsEveryViolation) {
  const auto ptrs = violation_pointers(
      R"({"n": 2, "resolution": [16, 12, 1], "periods": [1, -1, 1, 1],
          "ic": {"family": "single_mode", "wave_vector": [1, 0, 0, 0]},
          "flow": {"scheme": "euler", "adaptive": "yes"}})");
  EXPECT_TRUE(has(ptrs, "/resolution"));
  EXPECT_TRUE(has(ptrs, "/resolution/1"));
  EXPECT_TRUE(has(ptrs, "/periods/1"));
  EXPECT_TRUE(has(ptrs, "/ic/amplitude"));
  EXPECT_TRUE(has(ptrs, "/flow/scheme"));
  EXPECT_TRUE(has(ptrs, "/flow/adaptive"));
  EXPECT_GE(ptrs.size(), 6u);
}

TEST(Config, Rejections) {
  EXPECT_TRUE(has(violation_pointers(R"({"n": 2, "resolution": [1, 1, 1, 1], "ic": {"family": "zero"}})"), "/resolution"));
  EXPECT_TRUE(has(violation_pointers(
                      R"({"n": 2, "resolution": [16, 16, 1, 1], "ic": {"family": "random_bandlimited", "amplitude": 0.1}})"),
                  "/ic/seed"));
  EXPECT_TRUE(has(violation_pointers(R"({"n": 4, "resolution": [16, 16, 1, 1], "ic": {"family": "zero"}})"), "/n"));
  EXPECT_TRUE(has(violation_pointers(
                      R"({"n": 3, "resolution": [16, 16, 1, 1, 1, 1], "ic": {"family": "zero"}, "flow": {"operator": "kahler"}})"),
                  "/flow/operator"));
  EXPECT_TRUE(has(violation_pointers(
                      R"({"n": 2, "resolution": [16, 16, 1, 1], "ic": {"family": "single_mode", "amplitude": 1, "wave_vector": [8, 0, 0, 0]}})"),
                  "/ic/wave_vector/0"));
  EXPECT_TRUE(has(violation_pointers(R"({"n": 2, "resolution": [16, 16, 1, 1], "active_axes": [0], "ic": {"family": "zero"}})"),
                  "/active_axes"));
  EXPECT_THROW(parse_config(std::string("{ not json")), ConfigError);
  EXPECT_THROW(parse_config(std::string("[1, 2]")), ConfigError);
}

TEST(Config, SerializeRoundTrip) {
  for (const auto& e : fs::directory_iterator(fs::path(kSource) / "scenarios")) {
    const auto once = serialize(load_config(e.path().string()));
    const auto twice = serialize(parse_config(once.dump()));
    EXPECT_EQ(once.dump(), twice.dump()) << e.path();
  }
}

TEST(Rng, PhiloxKnownAnswers) {
  using P = Philox4x32;
  EXPECT_EQ(P::generate({0, 0, 0, 0}, {0, 0}), (P::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(P::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (P::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(P::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (P::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
  for (double v : P::uniform_pair(7, 0, 42)) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(InitialCondition, RandomIsSeededAndBandLimited) {
  auto g = make_grid(2, {16, 16, 1, 1});
  const ScalarField a = random_bandlimited(g, 0.01, 2, 5), b = random_bandlimited(g, 0.01, 2, 5);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), random_bandlimited(g, 0.01, 2, 6).values());
  EXPECT_NEAR(a.max_abs(), 0.01, 1e-17);
  EXPECT_LE(std::abs(a.mean()), 1e-17);
  const auto c = to_spectral(a);
  for (std::size_t m = 0; m < g->size(); ++m)
    if (std::abs(g->wave(m, 0)) > 2 || std::abs(g->wave(m, 1)) > 2) EXPECT_EQ(std::abs(c[m]) < 1e-18, true);
}

TEST(Run, ZeroScenarioWritesManifest) {
  const auto dir = scratch("zero");
  const auto out = cli_run(load_config(kSource + "/scenarios/zero.json"), dir.string());
  EXPECT_EQ(out.exit_code, 0);
  EXPECT_TRUE(out.error.empty());
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_TRUE(schema_errors(m, schema("run_manifest.schema.json")).empty());
  EXPECT_EQ(m["status"], "Converged");
  EXPECT_EQ(m["grid"]["active_axes"], (std::vector<int>{0, 1}));
  EXPECT_TRUE(fs::exists(dir / "series.csv"));
  EXPECT_TRUE(fs::exists(dir / "spectrum.json"));
  EXPECT_EQ(read_series_csv((dir / "series.csv").string()).size(), 1u);
}

TEST(Run, UnwritableDirectoryIsAnError) {
  const auto blocker = scratch("blocker");
  std::ofstream(blocker) << "x";
  auto cfg = load_config(kSource + "/scenarios/zero.json");
  const auto out = cli_run(cfg, (blocker / "sub").string());
  EXPECT_EQ(out.exit_code, 1);
  EXPECT_FALSE(out.error.empty());
}

TEST(Run, RerunsAreByteIdentical) {
  const auto cfg = load_config(kSource + "/scenarios/nonlinear_stability_n2.json");
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  ASSERT_EQ(cli_run(cfg, a.string()).exit_code, 0);
  ASSERT_EQ(cli_run(cfg, b.string()).exit_code, 0);
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_EQ(slurp(a / "series.csv"), slurp(b / "series.csv"));
  EXPECT_EQ(slurp(a / "residuals.csv"), slurp(b / "residuals.csv"));
  std::size_t snaps = 0;
  for (const auto& e : fs::directory_iterator(a / "snapshots")) {
    EXPECT_EQ(slurp(e.path()), slurp(b / "snapshots" / e.path().filename())) << e.path();
    ++snaps;
  }
  EXPECT_GT(snaps, 1u);
  // A rerun into a used directory leaves no stale snapshots behind.
  ASSERT_EQ(cli_run(load_config(kSource + "/scenarios/zero.json"), a.string()).exit_code, 0);
  snaps = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a / "snapshots")) ++snaps;
  EXPECT_EQ(snaps, 1u);
}

TEST(Run, SeriesCsvRoundTrip) {
  const auto dir = scratch("csv");
  ASSERT_EQ(cli_run(load_config(kSource + "/scenarios/linear_decay_n2.json"), dir.string()).exit_code, 0);
  const std::string text = slurp(dir / "series.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), kSeriesHeader);
  const auto rows = read_series_csv((dir / "series.csv").string());
  write_series_csv((dir / "copy.csv").string(), rows);
  EXPECT_EQ(slurp(dir / "copy.csv"), text);
}

TEST(Verify, PassesAndMatchesSchema) {
  const auto report = cli_verify();
  EXPECT_TRUE(report["pass"].get<bool>()) << report.dump(2);
  const auto errs = schema_errors(nlohmann::json::parse(report.dump()), schema("verify_report.schema.json"));
  for (const auto& e : errs) ADD_FAILURE() << e;
}

TEST(Verify, CorruptedConventionFails) {
  VerifyOptions opts;
  auto bad = oracle::frozen_convention(3);
  bad.c_n = 1.0;
  opts.convention_override[1] = bad;
  const auto report = cli_verify(opts);
  EXPECT_FALSE(report["pass"].get<bool>());
  for (const auto& c : report["checks"]) {
    const auto name = c["name"].get<std::string>();
    if (name == "oracle_equivalence_n3" || name == "oracle_convention_n3") EXPECT_FALSE(c["pass"].get<bool>()) << name;
    if (name == "oracle_equivalence_n2") EXPECT_TRUE(c["pass"].get<bool>());
  }
}

TEST(Schema, ValidatorCatchesBadReports) {
  const auto s = schema("verify_report.schema.json");
  auto r = nlohmann::json::parse(R"({"schema": "hermflow.verify_report/1", "pass": true,
      "checks": [{"name": "x", "tolerance": 1e-8, "measured": 0.0, "pass": true}],
      "conventions": [{"n": 2, "c_n": 1.0, "transpose": true}, {"n": 3, "c_n": 0.5, "transpose": true}],
      "records": {}})");
  EXPECT_TRUE(schema_errors(r, s).empty());
  auto bad = r;
  bad["checks"][0].erase("pass");
  EXPECT_FALSE(schema_errors(bad, s).empty());
  bad = r;
  bad["schema"] = "other/1";
  EXPECT_FALSE(schema_errors(bad, s).empty());
  bad = r;
  bad["extra"] = 1;
  EXPECT_FALSE(schema_errors(bad, s).empty());
  bad = r;
  bad["conventions"].erase(1);
  EXPECT_FALSE(schema_errors(bad, s).empty());
}

TEST(Plot, DeterministicAndRejectsEmptySeries) {
  const auto dir = scratch("plot");
  ASSERT_EQ(cli_run(load_config(kSource + "/scenarios/linear_decay_n2.json"), dir.string()).exit_code, 0);
  cli_plot(dir.string());
  const std::string first = slurp(dir / "decay.svg");
  EXPECT_NE(first.find("<svg"), std::string::npos);
  cli_plot(dir.string());
  EXPECT_EQ(slurp(dir / "decay.svg"), first);
  EXPECT_TRUE(fs::exists(dir / "norms.svg"));

  std::ofstream(dir / "series.csv") << kSeriesHeader << '\n';
  EXPECT_THROW(cli_plot(dir.string()), std::runtime_error);
  EXPECT_THROW(cli_analyze(dir.string()), std::runtime_error);
}

TEST(Plot, ConstantRunSkipsDecayPlot) {
  const auto dir = scratch("plot_zero");
  ASSERT_EQ(cli_run(load_config(kSource + "/scenarios/zero.json"), dir.string()).exit_code, 0);
  EXPECT_NO_THROW(cli_plot(dir.string()));
  EXPECT_TRUE(fs::exists(dir / "norms.svg"));
  EXPECT_FALSE(fs::exists(dir / "decay.svg"));
  const auto fit = cli_analyze(dir.string());
  EXPECT_FALSE(fit["reliable"].get<bool>());
}

TEST(Cli, EveryShippedScenarioRuns) {
  for (const auto& e : fs::directory_iterator(fs::path(kSource) / "scenarios")) {
    const auto out = scratch("cli_" + e.path().stem().string());
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run_cli("run " + e.path().string() + " --out " + out.string());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_TRUE(rc == 0 || rc == 2 || rc == 3) << e.path() << " rc=" << rc;
    EXPECT_LE(secs, 60.0) << e.path();
    EXPECT_TRUE(fs::exists(out / "manifest.json")) << e.path();
    EXPECT_EQ(run_cli("analyze " + out.string()), 0) << e.path();
  }
}

TEST(Cli, BatchModeRunsInParallel) {
  const auto base = scratch("batch");
  fs::create_directories(base);
  std::string args = "run --jobs 2";
  for (const char* name : {"zero", "linear_decay_n2", "linear_decay_n3"}) {
    auto cfg = serialize(load_config(kSource + "/scenarios/" + name + ".json"));
    cfg["output_dir"] = (base / name).string();
    const auto path = base / (std::string(name) + ".json");
    std::ofstream(path) << cfg.dump(2);
    args += " " + path.string();
  }
  EXPECT_EQ(run_cli(args), 0);
  for (const char* name : {"zero", "linear_decay_n2", "linear_decay_n3"})
    EXPECT_TRUE(fs::exists(base / name / "manifest.json")) << name;
}

TEST(Cli, BadConfigExitsOne) {
  const auto dir = scratch("badcfg");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"n": 2, "resolution": [16, 16, 1, 1], "ic": {"family": "random_bandlimited", "amplitude": "NaN"}})";
  EXPECT_EQ(run_cli("run " + (dir / "bad.json").string()), 1);
  EXPECT_EQ(run_cli("oracle"), 0);
}
