#pragma once

// Scenario configs, initial conditions, run directories and the reports behind
// the `hermflow` subcommands.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hermflow/chern_operator.hpp"
#include "hermflow/diagnostics.hpp"
#include "hermflow/exterior_oracle.hpp"
#include "hermflow/flow_engine.hpp"
#include "hermflow/hermitian_forms.hpp"
#include "hermflow/linearized_ops.hpp"
#include "hermflow/norms.hpp"
#include "hermflow/rng.hpp"
#include "hermflow/torus_field.hpp"
#include "json.hpp"

namespace hermflow {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---- config ----------------------------------------------------------------------

struct Violation {
  std::string pointer;
  std::string message;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<Violation> v)
      : std::runtime_error(format(v)), violations_(std::move(v)) {}
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  static std::string format(const std::vector<Violation>& v) {
    std::string s = "invalid config:";
    for (const auto& x : v) s += "\n  " + x.pointer + ": " + x.message;
    return s;
  }
  std::vector<Violation> violations_;
};

struct ModeSpec {
  double amplitude = 0.0;
  std::vector<int> wave_vector;
  double phase = 0.0;
  bool operator==(const ModeSpec&) const = default;
};

struct InitialCondition {
  std::string family = "zero";  // zero, single_mode, multi_mode, random_bandlimited, from_file
  std::vector<ModeSpec> modes;  // single_mode uses modes[0]
  double amplitude = 0.0;       // random_bandlimited: |u0|_inf
  int max_k = 1;
  std::optional<std::uint64_t> seed;
  std::string path;
  bool operator==(const InitialCondition&) const = default;
};

struct DiagnosticsToggles {
  bool residuals = true;
  bool spectrum = true;
  bool operator==(const DiagnosticsToggles&) const = default;
};

struct ScenarioConfig {
  int n = 2;
  std::vector<int> resolution;
  std::vector<double> periods;
  InitialCondition ic;
  FlowParams flow;
  std::string op = "chern";  // or "kahler" (n = 2 only)
  DiagnosticsToggles diagnostics;
  std::string output_dir = "hermflow_run";
};

inline std::vector<int> active_axes_of(const std::vector<int>& res) {
  std::vector<int> a;
  for (std::size_t j = 0; j < res.size(); ++j)
    if (res[j] > 1) a.push_back(static_cast<int>(j));
  return a;
}

inline ojson serialize(const ScenarioConfig& c) {
  ojson j;
  j["n"] = c.n;
  j["resolution"] = c.resolution;
  j["periods"] = c.periods;
  j["active_axes"] = active_axes_of(c.resolution);
  ojson ic;
  ic["family"] = c.ic.family;
  if (c.ic.family == "single_mode") {
    ic["amplitude"] = c.ic.modes.at(0).amplitude;
    ic["wave_vector"] = c.ic.modes.at(0).wave_vector;
    ic["phase"] = c.ic.modes.at(0).phase;
  } else if (c.ic.family == "multi_mode") {
    ic["modes"] = ojson::array();
    for (const auto& m : c.ic.modes) {
      ic["modes"].push_back({{"amplitude", m.amplitude}, {"wave_vector", m.wave_vector}, {"phase", m.phase}});
    }
  } else if (c.ic.family == "random_bandlimited") {
    ic["amplitude"] = c.ic.amplitude;
    ic["max_k"] = c.ic.max_k;
    ic["seed"] = *c.ic.seed;
  } else if (c.ic.family == "from_file") {
    ic["path"] = c.ic.path;
  }
  j["ic"] = ic;
  const auto& f = c.flow;
  j["flow"] = {{"scheme", to_string(f.scheme)}, {"operator", c.op},
               {"dt_init", f.dt_init},          {"dt_min", f.dt_min},
               {"dt_max", f.dt_max},            {"safety", f.safety},
               {"tol_Q", f.tol_Q},              {"T_max", f.T_max},
               {"snapshot_every", f.snapshot_every}, {"rtol", f.rtol},
               {"atol", f.atol},                {"adaptive", f.adaptive}};
  j["diagnostics"] = {{"residuals", c.diagnostics.residuals}, {"spectrum", c.diagnostics.spectrum}};
  j["output_dir"] = c.output_dir;
  return j;
}

namespace detail {

// Collects violations while reading a JSON document.
class Reader {
 public:
  std::vector<Violation> errors;

  void fail(const std::string& ptr, const std::string& msg) { errors.push_back({ptr, msg}); }

  const nlohmann::json* find(const nlohmann::json& obj, const std::string& key) {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  double number(const nlohmann::json& obj, const std::string& key, const std::string& ptr,
                double fallback, bool required = false) {
    const auto* v = find(obj, key);
    if (!v) {
      if (required) fail(ptr, "required");
      return fallback;
    }
    if (!v->is_number()) {
      fail(ptr, "must be a finite number");
      return fallback;
    }
    const double d = v->get<double>();
    if (!std::isfinite(d)) fail(ptr, "must be a finite number");
    return d;
  }

  long long integer(const nlohmann::json& obj, const std::string& key, const std::string& ptr,
                    long long fallback, bool required = false) {
    const auto* v = find(obj, key);
    if (!v) {
      if (required) fail(ptr, "required");
      return fallback;
    }
    if (!v->is_number_integer()) {
      fail(ptr, "must be an integer");
      return fallback;
    }
    return v->get<long long>();
  }

  bool boolean(const nlohmann::json& obj, const std::string& key, const std::string& ptr, bool fallback) {
    const auto* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_boolean()) {
      fail(ptr, "must be a boolean");
      return fallback;
    }
    return v->get<bool>();
  }

  std::string string(const nlohmann::json& obj, const std::string& key, const std::string& ptr,
                     const std::string& fallback, bool required = false) {
    const auto* v = find(obj, key);
    if (!v) {
      if (required) fail(ptr, "required");
      return fallback;
    }
    if (!v->is_string()) {
      fail(ptr, "must be a string");
      return fallback;
    }
    return v->get<std::string>();
  }

  std::vector<int> int_array(const nlohmann::json& obj, const std::string& key, const std::string& ptr,
                             bool required) {
    std::vector<int> out;
    const auto* v = find(obj, key);
    if (!v) {
      if (required) fail(ptr, "required");
      return out;
    }
    if (!v->is_array()) {
      fail(ptr, "must be an array of integers");
      return out;
    }
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_number_integer()) fail(ptr + "/" + std::to_string(i), "must be an integer");
      else out.push_back((*v)[i].get<int>());
    }
    return out;
  }
};

}  // namespace detail

/// Validates a config document, reporting every violation with its JSON
/// pointer. Missing optional fields take their defaults.
inline ScenarioConfig parse_config(const nlohmann::json& doc) {
  detail::Reader r;
  ScenarioConfig c;
  if (!doc.is_object()) throw ConfigError(std::vector<Violation>{{"", "config must be a JSON object"}});

  c.n = static_cast<int>(r.integer(doc, "n", "/n", 2, true));
  if (c.n != 2 && c.n != 3) r.fail("/n", "must be 2 or 3");
  const int axes = 2 * c.n;
  c.resolution = r.int_array(doc, "resolution", "/resolution", true);
  if (r.find(doc, "resolution") && static_cast<int>(c.resolution.size()) != axes) {
    r.fail("/resolution", "needs " + std::to_string(axes) + " entries");
  }
  for (std::size_t j = 0; j < c.resolution.size(); ++j) {
    const int v = c.resolution[j];
    if (v != 1 && (v < 4 || (v & (v - 1)) != 0)) {
      r.fail("/resolution/" + std::to_string(j), "must be 1 or a power of two >= 4");
    }
  }
  if (static_cast<int>(c.resolution.size()) == axes && active_axes_of(c.resolution).empty()) {
    r.fail("/resolution", "needs at least one axis with resolution > 1");
  }
  if (const auto* p = r.find(doc, "periods")) {
    if (!p->is_array() || static_cast<int>(p->size()) != axes) {
      r.fail("/periods", "needs " + std::to_string(axes) + " positive numbers");
    } else {
      for (std::size_t j = 0; j < p->size(); ++j) {
        const auto& v = (*p)[j];
        if (!v.is_number() || !(v.get<double>() > 0.0) || !std::isfinite(v.get<double>())) {
          r.fail("/periods/" + std::to_string(j), "must be a positive finite number");
        } else {
          c.periods.push_back(v.get<double>());
        }
      }
    }
  }
  if (c.periods.empty() || static_cast<int>(c.periods.size()) != axes) c.periods.assign(axes, 1.0);
  if (r.find(doc, "active_axes")) {
    const auto given = r.int_array(doc, "active_axes", "/active_axes", false);
    if (given != active_axes_of(c.resolution)) {
      r.fail("/active_axes", "must list exactly the axes with resolution > 1");
    }
  }

  // initial condition
  const nlohmann::json empty = nlohmann::json::object();
  const auto* icp = r.find(doc, "ic");
  if (!icp) r.fail("/ic", "required");
  else if (!icp->is_object()) r.fail("/ic", "must be an object");
  const nlohmann::json& ic = (icp && icp->is_object()) ? *icp : empty;
  c.ic.family = r.string(ic, "family", "/ic/family", "zero", icp != nullptr);
  auto check_wave = [&](const std::vector<int>& k, const std::string& ptr) {
    if (static_cast<int>(k.size()) != axes) {
      r.fail(ptr, "needs " + std::to_string(axes) + " entries");
      return;
    }
    for (int j = 0; j < axes && j < static_cast<int>(c.resolution.size()); ++j) {
      if (2 * std::abs(k[j]) >= std::max(c.resolution[j], 2)) {
        r.fail(ptr + "/" + std::to_string(j), "outside the grid's resolved wave numbers");
      }
    }
  };
  auto read_mode = [&](const nlohmann::json& m, const std::string& base) {
    ModeSpec s;
    s.amplitude = r.number(m, "amplitude", base + "/amplitude", 0.0, true);
    s.wave_vector = r.int_array(m, "wave_vector", base + "/wave_vector", true);
    if (r.find(m, "wave_vector")) check_wave(s.wave_vector, base + "/wave_vector");
    s.phase = r.number(m, "phase", base + "/phase", 0.0);
    return s;
  };
  if (c.ic.family == "zero") {
  } else if (c.ic.family == "single_mode") {
    c.ic.modes.push_back(read_mode(ic, "/ic"));
  } else if (c.ic.family == "multi_mode") {
    const auto* ms = r.find(ic, "modes");
    if (!ms || !ms->is_array() || ms->empty()) {
      r.fail("/ic/modes", "must be a non-empty array");
    } else {
      for (std::size_t i = 0; i < ms->size(); ++i) c.ic.modes.push_back(read_mode((*ms)[i], "/ic/modes/" + std::to_string(i)));
    }
  } else if (c.ic.family == "random_bandlimited") {
    c.ic.amplitude = r.number(ic, "amplitude", "/ic/amplitude", 0.0, true);
    c.ic.max_k = static_cast<int>(r.integer(ic, "max_k", "/ic/max_k", 1));
    if (c.ic.max_k < 1) r.fail("/ic/max_k", "must be >= 1");
    const auto* s = r.find(ic, "seed");
    if (!s) r.fail("/ic/seed", "required for random families");
    else if (!s->is_number_unsigned() && !(s->is_number_integer() && s->get<long long>() >= 0))
      r.fail("/ic/seed", "must be a nonnegative integer");
    else c.ic.seed = s->get<std::uint64_t>();
  } else if (c.ic.family == "from_file") {
    c.ic.path = r.string(ic, "path", "/ic/path", "", true);
  } else {
    r.fail("/ic/family", "unknown family '" + c.ic.family + "'");
  }

  // flow parameters
  const auto* fp = r.find(doc, "flow");
  if (fp && !fp->is_object()) r.fail("/flow", "must be an object");
  const nlohmann::json& fl = (fp && fp->is_object()) ? *fp : empty;
  auto& f = c.flow;
  const std::string scheme = r.string(fl, "scheme", "/flow/scheme", "ETDRK4");
  try {
    f.scheme = scheme_from_string(scheme);
  } catch (const std::invalid_argument&) {
    r.fail("/flow/scheme", "must be ETDRK4, IMEX-BDF2 or RK4-explicit");
  }
  c.op = r.string(fl, "operator", "/flow/operator", "chern");
  if (c.op != "chern" && c.op != "kahler") r.fail("/flow/operator", "must be chern or kahler");
  if (c.op == "kahler" && c.n != 2) r.fail("/flow/operator", "kahler requires n = 2");
  f.dt_init = r.number(fl, "dt_init", "/flow/dt_init", f.dt_init);
  f.dt_min = r.number(fl, "dt_min", "/flow/dt_min", f.dt_min);
  f.dt_max = r.number(fl, "dt_max", "/flow/dt_max", f.dt_max);
  f.safety = r.number(fl, "safety", "/flow/safety", f.safety);
  f.tol_Q = r.number(fl, "tol_Q", "/flow/tol_Q", f.tol_Q);
  f.T_max = r.number(fl, "T_max", "/flow/T_max", f.T_max);
  f.snapshot_every = static_cast<int>(r.integer(fl, "snapshot_every", "/flow/snapshot_every", f.snapshot_every));
  f.rtol = r.number(fl, "rtol", "/flow/rtol", f.rtol);
  f.atol = r.number(fl, "atol", "/flow/atol", f.atol);
  f.adaptive = r.boolean(fl, "adaptive", "/flow/adaptive", f.adaptive);
  try {
    f.validate();
  } catch (const std::invalid_argument& e) {
    r.fail("/flow", e.what());
  }

  const auto* dp = r.find(doc, "diagnostics");
  if (dp && !dp->is_object()) r.fail("/diagnostics", "must be an object");
  const nlohmann::json& dg = (dp && dp->is_object()) ? *dp : empty;
  c.diagnostics.residuals = r.boolean(dg, "residuals", "/diagnostics/residuals", true);
  c.diagnostics.spectrum = r.boolean(dg, "spectrum", "/diagnostics/spectrum", true);
  c.output_dir = r.string(doc, "output_dir", "/output_dir", c.output_dir);

  if (!r.errors.empty()) throw ConfigError(std::move(r.errors));
  return c;
}

inline ScenarioConfig parse_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::vector<Violation>{{"", std::string("malformed JSON: ") + e.what()}});
  }
  return parse_config(doc);
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// ---- initial conditions ------------------------------------------------------------

inline GridPtr make_grid(const ScenarioConfig& c) { return make_grid(c.n, c.resolution, c.periods); }

inline ScalarField mode_field(const GridPtr& grid, const ModeSpec& m) {
  const auto& P = grid->periods();
  return ScalarField::from_function(grid, [&](std::span<const double> x) {
    double arg = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) arg += m.wave_vector[j] * x[j] / P[j];
    return m.amplitude * std::cos(2.0 * kPi * arg + m.phase);
  });
}

/// Random real field with every mode |k_j| <= max_k (and inside the
/// dealiasing band) drawn from Philox, scaled to |u|_inf = amplitude.
inline ScalarField random_bandlimited(const GridPtr& grid, double amplitude, int max_k, std::uint64_t seed) {
  const auto& g = *grid;
  Spectrum c(g.size());
  for (std::size_t m = 1; m < g.size(); ++m) {
    bool keep = g.resolved(m);
    for (int j = 0; j < g.axes() && keep; ++j) keep = std::abs(g.wave(m, j)) <= max_k;
    if (!keep) continue;
    const auto uv = Philox4x32::uniform_pair(m, 0, seed);
    c[m] = cd(2.0 * uv[0] - 1.0, 2.0 * uv[1] - 1.0);
  }
  ScalarField f = to_physical(grid, std::move(c));
  const double mx = f.max_abs();
  if (mx > 0.0) f *= amplitude / mx;
  return f;
}

inline ScalarField make_initial_condition(const ScenarioConfig& c, const GridPtr& grid) {
  const auto& ic = c.ic;
  if (ic.family == "zero") return ScalarField(grid);
  if (ic.family == "single_mode" || ic.family == "multi_mode") {
    ScalarField u(grid);
    for (const auto& m : ic.modes) u += mode_field(grid, m);
    return u;
  }
  if (ic.family == "random_bandlimited") return random_bandlimited(grid, ic.amplitude, ic.max_k, *ic.seed);
  if (ic.family == "from_file") {
    auto [f, hdr] = read_snapshot(ic.path);
    if (!f.grid()->same_shape(*grid)) throw std::runtime_error("from_file: snapshot grid does not match config");
    return ScalarField(grid, f.values());
  }
  throw std::invalid_argument("unknown IC family " + ic.family);
}

inline FieldOperator operator_for(const ScenarioConfig& c) {
  return c.op == "kahler" ? kahler_operator() : q_operator();
}

// ---- run directories -----------------------------------------------------------------

inline constexpr const char* kSeriesHeader = "t,dt,norm_Q_L2,norm_u_L2,norm_u_inf,min_eig_psi,conservation";

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_series_csv(const std::string& path, const std::vector<SeriesRow>& series) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << kSeriesHeader << '\n';
  for (const auto& r : series) {
    os << fmt17(r.t) << ',' << fmt17(r.dt) << ',' << fmt17(r.norm_Q_L2) << ',' << fmt17(r.norm_u_L2) << ','
       << fmt17(r.norm_u_inf) << ',' << fmt17(r.min_eig_psi) << ',' << fmt17(r.conservation) << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

inline std::vector<SeriesRow> read_series_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing series: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kSeriesHeader) throw std::runtime_error("bad series header in " + path);
  std::vector<SeriesRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 7) throw std::runtime_error("bad series row in " + path);
    out.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  return out;
}

inline void write_json(const std::string& path, const ojson& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path);
}

inline ojson read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return ojson::parse(is);
}

inline int exit_code_for(FlowStatus s) {
  switch (s) {
    case FlowStatus::Converged:
    case FlowStatus::MaxTime: return 0;
    case FlowStatus::PositivityLost: return 2;
    case FlowStatus::Diverged: return 3;
    case FlowStatus::Running: return 1;
  }
  return 1;
}

inline SpectrumReport flat_spectrum(const GridPtr& grid) { return spectrum(L_flat(grid)); }

/// spectrum.json payload: the flat-operator report with the lowest distinct
/// eigenvalues instead of the full list.
inline ojson spectrum_json(const SpectrumReport& rep) {
  ojson j = rep.to_json(false);
  std::vector<double> low;
  for (double v : rep.eigenvalues) {
    if (low.size() >= 16) break;
    if (low.empty() || v > low.back() * (1.0 + 1e-12) + 1e-12) low.push_back(v);
  }
  j["lowest_distinct"] = low;
  return j;
}

struct ResidualRow {
  double t;
  long step;
  double balanced;
  double gauduchon;
  double conservation;
};

inline std::vector<ResidualRow> residual_rows(const std::vector<Snapshot>& snaps) {
  std::vector<ResidualRow> rows;
  for (const auto& s : snaps) {
    rows.push_back({s.t, s.step, balanced_residual(s.u), gauduchon_residual(s.u), conservation_functional(s.u)});
  }
  return rows;
}

inline void write_residuals_csv(const std::string& path, const std::vector<ResidualRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "t,step,balanced,gauduchon,conservation\n";
  for (const auto& r : rows) {
    os << fmt17(r.t) << ',' << r.step << ',' << fmt17(r.balanced) << ',' << fmt17(r.gauduchon) << ','
       << fmt17(r.conservation) << '\n';
  }
}

inline std::string snapshot_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "u_%08ld.bin", step);
  return buf;
}

struct RunOutcome {
  int exit_code = 1;
  FlowRun run;
  std::string error;
};

/// Runs a scenario into `dir` (config output_dir when empty). The manifest is
/// written whenever the directory is writable.
inline RunOutcome cli_run(const ScenarioConfig& cfg, std::string dir = {}) {
  RunOutcome out;
  if (dir.empty()) dir = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "snapshots", ec);
  if (!ec) {
    // Stale snapshots from an earlier run would leak into `analyze`.
    for (const auto& e : fs::directory_iterator(fs::path(dir) / "snapshots", ec))
      if (e.path().extension() == ".bin") fs::remove(e.path(), ec);
  }
  if (ec) {
    out.error = "cannot create output dir " + dir + ": " + ec.message();
    return out;
  }
  const auto grid = make_grid(cfg);
  ojson manifest;
  manifest["schema"] = "hermflow.run_manifest/1";
  manifest["config"] = serialize(cfg);
  manifest["grid"] = {{"n", grid->n()},
                      {"resolution", grid->resolution()},
                      {"periods", grid->periods()},
                      {"active_axes", grid->active_axes()},
                      {"points", grid->size()},
                      {"volume", grid->volume()}};
  manifest["rng"] = {{"algorithm", Philox4x32::kAlgorithm},
                     {"seed", cfg.ic.seed ? ojson(*cfg.ic.seed) : ojson(nullptr)}};
  manifest["convention"] = oracle::frozen_convention(cfg.n).to_json();
  const SpectrumReport flat = flat_spectrum(grid);
  manifest["lambda1"] = flat.lambda1;
  try {
    const ScalarField u0 = make_initial_condition(cfg, grid);
    FlowIntegrator integ(grid, cfg.flow, operator_for(cfg));
    out.run = integ.run(u0);
    const auto& run = out.run;
    write_series_csv((fs::path(dir) / "series.csv").string(), run.series);
    ojson files = ojson::array();
    for (const auto& s : run.snapshots) {
      const std::string name = snapshot_name(s.step);
      write_snapshot((fs::path(dir) / "snapshots" / name).string(), s.u, "u", s.t);
      files.push_back({{"file", "snapshots/" + name}, {"t", s.t}, {"step", s.step}});
    }
    if (cfg.diagnostics.spectrum) write_json((fs::path(dir) / "spectrum.json").string(), spectrum_json(flat));
    if (cfg.diagnostics.residuals) {
      try {
        write_residuals_csv((fs::path(dir) / "residuals.csv").string(), residual_rows(run.snapshots));
      } catch (const PositivityLost&) {
        // The last snapshot of a failed run may sit on the cone boundary.
      }
    }
    out.exit_code = exit_code_for(run.final_state.status);
    manifest["status"] = to_string(run.final_state.status);
    manifest["exit_code"] = out.exit_code;
    manifest["steps"] = run.final_state.steps;
    manifest["rejected_steps"] = run.rejected_steps;
    manifest["final_time"] = run.final_state.t;
    manifest["final_norm_Q_L2"] = run.series.empty() ? ojson(nullptr) : ojson(run.series.back().norm_Q_L2);
    manifest["message"] = run.message;
    manifest["snapshots"] = files;
  } catch (const std::exception& e) {
    out.exit_code = 1;
    out.error = e.what();
    manifest["status"] = "Error";
    manifest["exit_code"] = 1;
    manifest["message"] = e.what();
  }
  try {
    write_json((fs::path(dir) / "manifest.json").string(), manifest);
  } catch (const std::exception& e) {
    out.exit_code = 1;
    out.error = e.what();
  }
  return out;
}

// ---- analysis and plots ----------------------------------------------------------------

struct PlotSeries {
  std::string label;
  std::string color;
  std::vector<double> x, y;
  bool dashed = false;
};

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Deterministic SVG line plot; y values are plotted as given (take logs first
/// for log scale).
inline std::string svg_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                 const std::vector<PlotSeries>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << svg_num(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << svg_num(xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << svg_num(yv) << "</text>\n";
  }
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << H / 2 << ")\">" << ylabel << "</text>\n";
  int idx = 0;
  for (const auto& s : series) {
    os << "<polyline id=\"series-" << idx << "\" fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
    if (s.dashed) os << " stroke-dasharray=\"6 4\"";
    os << " points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!first) os << ' ';
      os << svg_num(px(s.x[i])) << ',' << svg_num(py(s.y[i]));
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 8 << "\" y=\"" << T + 16 + 14 * idx << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
       << s.color << "\">" << s.label << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

/// log |Q|^2 against t with reference slopes -lambda1 and -2 lambda1 through
/// the first sample.
inline bool has_decay_samples(const std::vector<SeriesRow>& series) {
  return std::any_of(series.begin(), series.end(), [](const SeriesRow& r) { return r.norm_Q_L2 > 0.0; });
}

inline std::string decay_svg(const std::vector<SeriesRow>& series, double lambda1) {
  if (series.empty()) throw std::runtime_error("empty series");
  PlotSeries data{"log |Q|^2", "#1f4e9c", {}, {}, false};
  for (const auto& r : series) {
    if (r.norm_Q_L2 <= 0.0) continue;
    data.x.push_back(r.t);
    data.y.push_back(std::log(r.norm_Q_L2 * r.norm_Q_L2));
  }
  if (data.x.empty()) throw std::runtime_error("series has no positive |Q| samples");
  const double t0 = data.x.front(), t1 = data.x.back(), y0 = data.y.front();
  PlotSeries g1{"slope -lambda1", "#c0392b", {t0, t1}, {y0, y0 - lambda1 * (t1 - t0)}, true};
  PlotSeries g2{"slope -2 lambda1", "#27ae60", {t0, t1}, {y0, y0 - 2.0 * lambda1 * (t1 - t0)}, true};
  return svg_line_plot("decay of |Q|^2", "t", "log |Q|^2", {data, g1, g2});
}

inline std::string norms_svg(const std::vector<SeriesRow>& series) {
  if (series.empty()) throw std::runtime_error("empty series");
  PlotSeries linf{"log10 |u|_inf", "#1f4e9c", {}, {}, false};
  PlotSeries l2{"log10 |u|_L2", "#8e44ad", {}, {}, false};
  for (const auto& r : series) {
    linf.x.push_back(r.t);
    linf.y.push_back(r.norm_u_inf > 0 ? std::log10(r.norm_u_inf) : NAN);
    l2.x.push_back(r.t);
    l2.y.push_back(r.norm_u_L2 > 0 ? std::log10(r.norm_u_L2) : NAN);
  }
  return svg_line_plot("potential norms", "t", "log10 norm", {linf, l2});
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

/// lambda1 for a run directory: spectrum.json when present, else recomputed
/// from the manifest's grid.
inline double run_lambda1(const std::string& dir) {
  const fs::path sfile = fs::path(dir) / "spectrum.json";
  if (fs::exists(sfile)) return read_json(sfile.string()).at("lambda1").get<double>();
  const auto m = read_json((fs::path(dir) / "manifest.json").string());
  const auto& g = m.at("grid");
  return flat_spectrum(make_grid(g.at("n").get<int>(), g.at("resolution").get<std::vector<int>>(),
                                 g.at("periods").get<std::vector<double>>()))
      .lambda1;
}

/// Writes decay.svg and norms.svg. Throws on a missing or empty series.
inline void cli_plot(const std::string& dir) {
  const auto series = read_series_csv((fs::path(dir) / "series.csv").string());
  if (series.empty()) throw std::runtime_error("empty series in " + dir);
  const double l1 = run_lambda1(dir);
  // Q = 0 throughout (constant data) leaves nothing to draw on a log axis.
  if (has_decay_samples(series)) write_text((fs::path(dir) / "decay.svg").string(), decay_svg(series, l1));
  write_text((fs::path(dir) / "norms.svg").string(), norms_svg(series));
}

/// Writes decay_fit.json, residuals.csv (from snapshots) and decay.svg.
inline ojson cli_analyze(const std::string& dir) {
  const auto series = read_series_csv((fs::path(dir) / "series.csv").string());
  if (series.empty()) throw std::runtime_error("empty series in " + dir);
  const double l1 = run_lambda1(dir);
  std::vector<double> t, q2;
  for (const auto& r : series) {
    t.push_back(r.t);
    q2.push_back(r.norm_Q_L2 * r.norm_Q_L2);
  }
  ojson fit;
  try {
    fit = decay_fit(t, q2, l1).to_json();
    fit["reliable"] = true;
  } catch (const FitUnreliable& e) {
    fit["reliable"] = false;
    fit["error"] = e.what();
    fit["lambda1"] = l1;
  }
  write_json((fs::path(dir) / "decay_fit.json").string(), fit);

  std::vector<Snapshot> snaps;
  const fs::path sdir = fs::path(dir) / "snapshots";
  if (fs::exists(sdir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(sdir))
      if (e.path().extension() == ".bin") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      auto [f, hdr] = read_snapshot(p.string());
      const long step = std::stol(p.stem().string().substr(2));
      snaps.push_back({hdr.time, step, std::move(f)});
    }
  }
  std::vector<ResidualRow> rows;
  for (const auto& s : snaps) {
    try {
      rows.push_back({s.t, s.step, balanced_residual(s.u), gauduchon_residual(s.u), conservation_functional(s.u)});
    } catch (const PositivityLost&) {
      rows.push_back({s.t, s.step, NAN, NAN, conservation_functional(s.u)});
    }
  }
  write_residuals_csv((fs::path(dir) / "residuals.csv").string(), rows);
  if (has_decay_samples(series)) write_text((fs::path(dir) / "decay.svg").string(), decay_svg(series, l1));
  return fit;
}

// ---- verify ---------------------------------------------------------------------------

struct Check {
  std::string name;
  double tolerance;
  double measured;
  bool pass;
};

namespace detail {

inline Check upper(const std::string& name, double tol, double measured) {
  return {name, tol, measured, std::isfinite(measured) && measured <= tol};
}

inline Eigen::MatrixXcd random_hermitian(int n, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Eigen::MatrixXcd A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = cd(d(rng), d(rng));
  return scale * 0.5 * (A + A.adjoint());
}

inline HMat to_hmat(const Eigen::MatrixXcd& M) {
  HMat h(static_cast<int>(M.rows()));
  for (int i = 0; i < M.rows(); ++i)
    for (int j = 0; j < M.cols(); ++j) h(i, j) = M(i, j);
  return h;
}

inline Eigen::MatrixXcd to_eigen(const HMat& h) {
  Eigen::MatrixXcd M(h.n, h.n);
  for (int i = 0; i < h.n; ++i)
    for (int j = 0; j < h.n; ++j) M(i, j) = h(i, j);
  return M;
}

// Random SPD matrix with eigenvalues in [0.2, 5].
inline HMat random_spd(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.2, 5.0);
  Eigen::MatrixXcd A = random_hermitian(n, rng, 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(A);
  Eigen::VectorXd ev(n);
  for (int i = 0; i < n; ++i) ev(i) = d(rng);
  const Eigen::MatrixXcd M = es.eigenvectors() * ev.cast<cd>().asDiagonal() * es.eigenvectors().adjoint();
  return to_hmat(0.5 * (M + M.adjoint()));
}

}  // namespace detail

/// max |assemble_psi(u)[p] - (I + oracle Delta-psi(Hess u(p)))| over `points`
/// random grid points of `jets` random band-limited potentials.
inline double oracle_equivalence_error(int n, const oracle::Convention& conv, int points, int jets,
                                       std::uint64_t seed) {
  std::vector<int> res(2 * n, 8);
  const auto grid = make_grid(n, res);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, grid->size() - 1);
  double worst = 0.0;
  for (int j = 0; j < jets; ++j) {
    const ScalarField u = random_bandlimited(grid, 0.05, 2, seed + 1000 + j);
    const HermitianField psi = assemble_psi(u, conv);
    const HermitianField H = complex_hessian(u);
    for (int p = 0; p < points; ++p) {
      const std::size_t at = pick(rng);
      const Eigen::MatrixXcd ref =
          Eigen::MatrixXcd::Identity(n, n) + oracle::brute_force_delta_psi(detail::to_eigen(H[at]));
      worst = std::max(worst, (detail::to_eigen(psi[at]) - ref).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

/// max relative |det(g) - det(psi)^{1/(n-1)}| with g = metric_from_psi(psi).
inline double det_identity_error(int n, const oracle::Convention& conv, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    const HMat psi = detail::random_spd(n, rng);
    const HMat g = metric_from_psi(psi, conv);
    const double lhs = det(g).real();
    const double rhs = std::pow(det(psi).real(), 1.0 / (n - 1));
    worst = std::max(worst, std::abs(lhs - rhs) / std::abs(rhs));
  }
  return worst;
}

/// Relative max error of dense J applied to each resolved Fourier mode against
/// the L_flat multiplier.
inline double multiplier_agreement_error(const GridPtr& grid, const Eigen::MatrixXd& J) {
  const auto L = L_flat(grid);
  double worst = 0.0;
  const auto N = static_cast<Eigen::Index>(grid->size());
  for (std::size_t m = 0; m < grid->size(); ++m) {
    if (!grid->resolved(m)) continue;
    Spectrum c(grid->size());
    c[m] = 1.0;
    const ComplexField e = to_physical_complex(grid, c);
    Eigen::VectorXd re(N), im(N);
    for (Eigen::Index i = 0; i < N; ++i) {
      re[i] = e.values[i].real();
      im[i] = e.values[i].imag();
    }
    const double mult = (*L.multiplier)[m];
    const double scale = std::max(1.0, std::abs(mult));
    worst = std::max(worst, (J * re - mult * re).cwiseAbs().maxCoeff() / scale);
    worst = std::max(worst, (J * im - mult * im).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

/// Potential quantized to multiples of 2^-40 so that adding a dyadic constant
/// is exact in floating point.
inline ScalarField dyadic(ScalarField u) {
  for (double& v : u.values()) v = std::ldexp(std::nearbyint(std::ldexp(v, 40)), -40);
  return u;
}

/// Largest amplitude (from a decade sweep) at which the coercivity probe still
/// passes for the given potential shape.
inline double coercivity_admissible_delta(const GridPtr& grid, const ScalarField& shape,
                                          const Eigen::MatrixXd& L, const std::vector<ScalarField>& samples,
                                          double eps) {
  double best = 0.0;
  for (double amp : {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2}) {
    try {
      ScalarField u = shape;
      u *= amp / shape.max_abs();
      const Eigen::MatrixXd Lu = jacobian_fd(q_operator(), u);
      if (!coercivity_probe(grid, Lu, L, samples, eps).pass) break;
      best = amp;
    } catch (const PositivityLost&) {
      break;
    }
  }
  return best;
}

struct VerifyOptions {
  /// Replaces the frozen convention in the oracle checks (negative controls).
  std::optional<oracle::Convention> convention_override[2];
  std::uint64_t seed = 20240601;
};

inline oracle::Convention convention_for(const VerifyOptions& o, int n) {
  const auto& ov = o.convention_override[n - 2];
  return ov ? *ov : oracle::frozen_convention(n);
}

/// The hypothesis/oracle/convention suite behind `hermflow verify`.
inline ojson cli_verify(const VerifyOptions& opts = {}) {
  std::vector<Check> checks;
  ojson records = ojson::object();
  for (int n : {2, 3}) {
    const auto conv = convention_for(opts, n);
    const auto derived = oracle::psi_update_constant(n);
    const double conv_err = std::abs(derived.c_n - conv.c_n) + (derived.transpose == conv.transpose ? 0.0 : 1.0);
    const std::string sfx = "_n" + std::to_string(n);
    checks.push_back(detail::upper("oracle_convention" + sfx, 1e-14, conv_err));
    checks.push_back(detail::upper("oracle_equivalence" + sfx, 1e-12,
                                   oracle_equivalence_error(n, conv, 100, 20, opts.seed + n)));
    checks.push_back(detail::upper("det_identity" + sfx, 1e-10, det_identity_error(n, conv, 1000, opts.seed + 10 + n)));
  }

  for (int n : {2, 3}) {
    const std::string sfx = "_n" + std::to_string(n);
    std::vector<int> res(2 * n, 1);
    res[0] = res[1] = 16;
    const auto grid = make_grid(n, res);
    const ScalarField zero(grid);
    const Eigen::MatrixXd J = jacobian_fd(q_operator(), zero);
    checks.push_back(detail::upper("jacobian_symmetry" + sfx, 1e-8, (J - J.transpose()).cwiseAbs().maxCoeff()));
    checks.push_back(detail::upper("jacobian_row_sum" + sfx, 1e-8, J.rowwise().sum().cwiseAbs().maxCoeff()));
    checks.push_back(detail::upper("jacobian_max_eigenvalue" + sfx, 1e-8, max_eigenvalue(J)));
    checks.push_back(detail::upper("multiplier_agreement" + sfx, 1e-8, multiplier_agreement_error(grid, J)));

    const SpectrumReport sp = flat_spectrum(grid);
    const double l1_expected = std::pow(kPi, 4) / (n - 1);
    checks.push_back(detail::upper("lambda1" + sfx, 1e-12, std::abs(sp.lambda1 - l1_expected) / l1_expected));
    checks.push_back(detail::upper("kernel_dimension" + sfx, 0.0, std::abs(sp.kernel_dim - 1)));

    ScalarField v = random_bandlimited(grid, 1.0, 4, opts.seed + 20 + n);
    v += -v.mean();
    checks.push_back(detail::upper("mean_preservation" + sfx, 1e-12, std::abs(L_flat(grid).apply(v).mean())));

    const ScalarField u = dyadic(random_bandlimited(grid, 1e-2, 3, opts.seed + 30 + n));
    double shift = 0.0;
    const ScalarField q = Q(u);
    for (double a : {1.0, -2.0, 0.5}) shift = std::max(shift, (Q(u + a) - q).max_abs());
    checks.push_back(detail::upper("constant_shift_invariance" + sfx, 1e-13, shift));

    if (n == 2) {
      std::vector<ScalarField> samples;
      for (int s = 0; s < 100; ++s) samples.push_back(random_bandlimited(grid, 1.0, 5, opts.seed + 100 + s));
      samples.push_back(ScalarField(grid, 1.0));
      const ScalarField shape = random_bandlimited(grid, 1.0, 2, opts.seed + 40);
      ScalarField us = shape;
      us *= 1e-4;
      const Eigen::MatrixXd Ju = jacobian_fd(q_operator(), us);
      const auto rep = coercivity_probe(grid, Ju, J, samples, 0.1);
      checks.push_back({"coercivity_margin" + sfx, 0.0, rep.worst_margin, rep.pass});
      records["coercivity_admissible_delta_eps0.1"] = coercivity_admissible_delta(grid, shape, J, samples, 0.1);

      // T-bounded lower bounds
      {
        const Eigen::MatrixXd T = Eigen::VectorXd::LinSpaced(8, 0, 7).array().square().matrix().asDiagonal();
        const auto p = make_tbound_problem(T, Eigen::MatrixXd::Zero(8, 8), 0.0);
        checks.push_back(detail::upper("tbound_zero_perturbation", 1e-14, std::abs(tbound_gamma(p) - p.gamma_T)));
      }
      {
        const double a = 0.37;
        const Eigen::MatrixXd T = Eigen::VectorXd::LinSpaced(8, 0, 7).array().square().matrix().asDiagonal();
        // V = -a I attains the bound: min eig(T + V) = -a = gamma.
        const auto p = make_tbound_problem(T, -a * Eigen::MatrixXd::Identity(8, 8), 0.0);
        const double gap = min_eigenvalue(p.T + p.V) - tbound_gamma(p);
        checks.push_back(detail::upper("tbound_diagonal_tight", 1e-10, std::abs(gap)));
      }
      {
        // T = -eps L, V = L - sym(L_u) with eps = 0.1.
        const auto p = make_tbound_problem(-0.1 * J, J - 0.5 * (Ju + Ju.transpose()), 0.5);
        const double gap = min_eigenvalue(p.T + p.V) - tbound_gamma(p);
        checks.push_back({"tbound_linearization", 0.0, gap, gap >= 0.0});
      }
    }
  }

  ojson report;
  report["schema"] = "hermflow.verify_report/1";
  bool all = true;
  ojson arr = ojson::array();
  for (const auto& c : checks) {
    all = all && c.pass;
    arr.push_back({{"name", c.name}, {"tolerance", c.tolerance}, {"measured", c.measured}, {"pass", c.pass}});
  }
  report["pass"] = all;
  report["checks"] = arr;
  report["conventions"] = {convention_for(opts, 2).to_json(), convention_for(opts, 3).to_json()};
  report["records"] = records;
  return report;
}

/// Frozen conventions as printed by `hermflow oracle`, with the oracle's own
/// derivation alongside.
inline ojson cli_oracle() {
  ojson j = ojson::array();
  for (int n : {2, 3}) {
    ojson e = oracle::frozen_convention(n).to_json();
    const auto d = oracle::psi_update_constant(n);
    e["oracle_c_n"] = d.c_n;
    e["oracle_transpose"] = d.transpose;
    j.push_back(e);
  }
  return j;
}

}  // namespace hermflow
