// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "hermflow/hermflow.hpp"

using namespace hermflow;
namespace fs = std::filesystem;

namespace {

const std::string kSource = HERMFLOW_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

fs::path work_dir() {
  static const fs::path p = fs::temp_directory_path() / ("hermflow_acceptance_" + std::to_string(getpid()));
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ScenarioConfig scenario(const std::string& name) { return load_config(kSource + "/scenarios/" + name + ".json"); }

RunOutcome run_into(const ScenarioConfig& cfg, const std::string& sub) {
  const fs::path dir = work_dir() / sub;
  fs::remove_all(dir);
  return cli_run(cfg, dir.string());
}

// Runs 1 and 2: fitted |Q|^2 decay of a small single mode.
Outcome linear_decay(const std::string& name) {
  const auto cfg = scenario(name);
  const auto out = run_into(cfg, name);
  if (out.exit_code != 0) return {false, "exit " + std::to_string(out.exit_code) + " " + out.error};
  const double l1 = flat_spectrum(make_grid(cfg)).lambda1;
  const DecayFit f = decay_fit(out.run, l1);
  const double rel = std::abs(f.rate - 2.0 * l1) / (2.0 * l1);
  return {rel <= 0.05 && f.rate >= l1,
          "rate " + num(f.rate) + " vs 2*lambda1 " + num(2.0 * l1) + " (rel " + num(rel) + ")"};
}

Outcome nonlinear_stability() {
  const auto out = run_into(scenario("nonlinear_stability_n2"), "stability");
  const auto& s = out.run.final_state;
  if (s.status != FlowStatus::Converged) return {false, std::string("status ") + to_string(s.status)};
  const double q = out.run.series.back().norm_Q_L2;
  const auto& v = s.u.values();
  const double mean = s.u.mean();
  double osc = 0.0;
  for (double x : v) osc = std::max(osc, std::abs(x - mean));
  return {q <= 1e-9 && osc <= 1e-7, "t=" + num(s.t) + " |Q|=" + num(q) + " |u-mean|_inf=" + num(osc)};
}

Outcome hypotheses() {
  double sym = 0.0, rows = 0.0, top = -1e300, shift = 0.0;
  for (int n : {2, 3}) {
    std::vector<int> res(2 * n, 1);
    res[0] = res[1] = 16;
    const auto grid = make_grid(n, res);
    const Eigen::MatrixXd J = jacobian_fd(q_operator(), ScalarField(grid));
    sym = std::max(sym, (J - J.transpose()).cwiseAbs().maxCoeff());
    rows = std::max(rows, J.rowwise().sum().cwiseAbs().maxCoeff());
    top = std::max(top, max_eigenvalue(J));
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const ScalarField u = dyadic(random_bandlimited(grid, 1e-2, 3, seed));
      const ScalarField q = Q(u);
      for (double a : {1.0, -0.5, 3.25}) shift = std::max(shift, (Q(u + a) - q).max_abs());
    }
  }
  return {sym <= 1e-8 && rows <= 1e-8 && top <= 1e-8 && shift <= 1e-13,
          "sym " + num(sym) + " rowsum " + num(rows) + " maxeig " + num(top) + " shift " + num(shift)};
}

Outcome oracle_equivalence() {
  double eq = 0.0, det_err = 0.0;
  for (int n : {2, 3}) {
    const auto conv = oracle::frozen_convention(n);
    eq = std::max(eq, oracle_equivalence_error(n, conv, 100, 20, 20240601 + n));
    det_err = std::max(det_err, det_identity_error(n, conv, 1000, 20240611 + n));
  }
  return {eq <= 1e-12 && det_err <= 1e-10, "psi " + num(eq) + " det " + num(det_err)};
}

Outcome structure_preservation() {
  const auto cfg = scenario("nonlinear_stability_n2");
  const auto grid = make_grid(cfg);
  FlowIntegrator integ(grid, cfg.flow, operator_for(cfg));
  double bal = 0.0, gau = 0.0, drift = 0.0, c0 = 0.0;
  long checked = 0;
  bool first = true;
  const FlowRun run = integ.run(make_initial_condition(cfg, grid), [&](const FlowState& st, const SeriesRow&) {
    bal = std::max(bal, balanced_residual(st.u));
    gau = std::max(gau, gauduchon_residual(st.u));
    const double c = conservation_functional(st.u);
    if (first) c0 = c, first = false;
    drift = std::max(drift, std::abs(c - c0) / std::abs(c0));
    ++checked;
  });
  const bool ok = run.final_state.status == FlowStatus::Converged;
  return {ok && bal <= 1e-8 && gau <= 1e-8 && drift <= 1e-8,
          std::to_string(checked) + " states, balanced " + num(bal) + " gauduchon " + num(gau) + " drift " +
              num(drift)};
}

Outcome kahler_equivalence() {
  const auto grid = make_grid(2, {16, 16, 1, 1});
  double pointwise = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ScalarField u = random_bandlimited(grid, 1e-2, 2, 500 + seed);
    pointwise = std::max(pointwise, (Q(u) - kahler_scalar(u)).max_abs() / std::max(1.0, kahler_scalar(u).max_abs()));
  }
  FlowParams p;
  p.adaptive = false;
  p.dt_init = p.dt_max = 1e-4;
  p.T_max = 0.01;
  p.tol_Q = 1e-300;
  const ScalarField u0 = random_bandlimited(grid, 1e-2, 2, 600);
  const FlowRun a = FlowIntegrator(grid, p, q_operator()).run(u0);
  const FlowRun b = FlowIntegrator(grid, p, kahler_operator()).run(u0);
  const double traj = (a.final_state.u - b.final_state.u).max_abs();
  const bool reached = a.final_state.status == FlowStatus::MaxTime && b.final_state.status == FlowStatus::MaxTime &&
                       std::abs(a.final_state.t - 0.01) < 1e-12;
  return {reached && pointwise <= 1e-10 && traj <= 1e-8, "scalar " + num(pointwise) + " trajectory " + num(traj)};
}

Outcome tbound() {
  const Eigen::MatrixXd T = Eigen::VectorXd::LinSpaced(12, 0, 11).array().square().matrix().asDiagonal();
  double worst_gap = 1e300, tight = 0.0;
  {
    const auto p = make_tbound_problem(T, Eigen::MatrixXd::Zero(12, 12), 0.0);
    worst_gap = std::min(worst_gap, min_eigenvalue(p.T + p.V) - tbound_gamma(p));
  }
  {
    const auto p = make_tbound_problem(T, -0.37 * Eigen::MatrixXd::Identity(12, 12), 0.0);
    const double gap = min_eigenvalue(p.T + p.V) - tbound_gamma(p);
    worst_gap = std::min(worst_gap, gap);
    tight = std::abs(gap);
  }
  {
    // T = -eps L, V = L - sym(L_u) at a small potential, eps = 0.1.
    const auto grid = make_grid(2, {8, 8, 1, 1});
    const Eigen::MatrixXd J = jacobian_fd(q_operator(), ScalarField(grid));
    const Eigen::MatrixXd Ju = jacobian_fd(q_operator(), random_bandlimited(grid, 1e-4, 2, 700));
    const auto p = make_tbound_problem(-0.1 * J, J - 0.5 * (Ju + Ju.transpose()), 0.5);
    worst_gap = std::min(worst_gap, min_eigenvalue(p.T + p.V) - tbound_gamma(p));
  }
  return {worst_gap >= -1e-10 && tight <= 1e-10, "min gap " + num(worst_gap) + " tight " + num(tight)};
}

Outcome frechet_slope() {
  const auto grid = make_grid(2, {16, 16, 1, 1});
  const ScalarField phi = random_bandlimited(grid, 1.0, 2, 800);
  const auto L = L_flat(grid);
  std::vector<double> x, y;
  for (double a : {1e-2, 1e-3, 1e-4, 1e-5}) {
    const ScalarField v = a * phi;
    x.push_back(std::log(l2_norm(v)));
    y.push_back(std::log(l2_norm(Q(v) - L.apply(v))));
  }
  const double mx = (x[0] + x[1] + x[2] + x[3]) / 4.0, my = (y[0] + y[1] + y[2] + y[3]) / 4.0;
  double sxy = 0.0, sxx = 0.0;
  for (int i = 0; i < 4; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double slope = sxy / sxx;
  return {std::abs(slope - 2.0) <= 0.1, "slope " + num(slope)};
}

Outcome determinism() {
  std::string detail;
  bool ok = true;
  for (const auto& [name, sub] : {std::pair<std::string, std::string>{"linear_decay_n2", "linear_decay_n2"},
                                  {"nonlinear_stability_n2", "stability"}}) {
    const auto again = run_into(scenario(name), sub + "_rerun");
    const fs::path a = work_dir() / sub, b = work_dir() / (sub + "_rerun");
    for (const char* f : {"series.csv", "residuals.csv"}) {
      const std::string x = slurp(a / f), y = slurp(b / f);
      const bool same = !x.empty() && x == y;
      ok = ok && same && again.exit_code == 0;
      detail += name + "/" + f + (same ? " identical " : " DIFFERS ");
    }
  }
  return {ok, detail};
}

}  // namespace

int main() {
  fs::remove_all(work_dir());
  fs::create_directories(work_dir());
  struct Criterion {
    int id;
    const char* name;
    double budget;  // seconds, 0 = none
    std::function<Outcome()> body;
  };
  const std::vector<Criterion> all = {
      {1, "linear decay rate n=2", 10.0, [] { return linear_decay("linear_decay_n2"); }},
      {2, "linear decay rate n=3", 20.0, [] { return linear_decay("linear_decay_n3"); }},
      {3, "nonlinear stability", 60.0, nonlinear_stability},
      {4, "discrete hypotheses", 30.0, hypotheses},
      {5, "oracle equivalence", 10.0, oracle_equivalence},
      {6, "structure preservation", 0.0, structure_preservation},
      {7, "kahler equivalence n=2", 0.0, kahler_equivalence},
      {8, "T-bounded lower bound", 0.0, tbound},
      {9, "frechet remainder slope", 0.0, frechet_slope},
      {10, "determinism", 0.0, determinism},
  };
  int failures = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget > 0.0 && secs > c.budget) {
      o.pass = false;
      o.detail += " over budget " + num(c.budget) + "s";
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s  %2d  %-26s %7.2fs  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(work_dir());
  std::printf("%d/%zu criteria passed\n", static_cast<int>(all.size()) - failures, all.size());
  return failures == 0 ? 0 : 1;
}
