#include <gtest/gtest.h>

#include <array>

#include "helpers.hpp"

using namespace hermflow;
using namespace hermflow::testing;

namespace {

FlowParams fixed(Scheme s, double dt, double T) {
  FlowParams p;
  p.scheme = s;
  p.dt_init = p.dt_max = dt;
  p.dt_min = std::min(p.dt_min, dt);
  p.adaptive = false;
  p.T_max = T;
  p.tol_Q = 1e-300;
  return p;
}

cd mode_coefficient(const ScalarField& u, std::array<int, 4> k) {
  return to_spectral(u)[u.grid()->mode_index(k)];
}

}  // namespace

TEST(Controller, Rules) {
  FlowParams p;
  auto d = dt_controller(0.0, 1e-4, p);
  EXPECT_TRUE(d.accepted);
  EXPECT_DOUBLE_EQ(d.dt_next, 2e-4);
  d = dt_controller(1e-12, 1e-4, p);
  EXPECT_DOUBLE_EQ(d.dt_next, 2e-4);
  d = dt_controller(1.0, 1e-4, p);
  EXPECT_TRUE(d.accepted);
  EXPECT_NEAR(d.dt_next, 0.9e-4, 1e-18);
  d = dt_controller(4.0, 1e-4, p);
  EXPECT_FALSE(d.accepted);
  EXPECT_DOUBLE_EQ(d.dt_next, 0.5e-4);
  d = dt_controller(1e6, 1e-4, p);
  EXPECT_FALSE(d.accepted);
  EXPECT_DOUBLE_EQ(d.dt_next, 1e-5);
  d = dt_controller(std::nan(""), 1e-4, p);
  EXPECT_FALSE(d.accepted);
  EXPECT_DOUBLE_EQ(d.dt_next, 0.25e-4);
  d = dt_controller(0.0, 8e-4, p);
  EXPECT_DOUBLE_EQ(d.dt_next, p.dt_max);
  d = dt_controller(1e6, 2e-9, p);
  EXPECT_DOUBLE_EQ(d.dt_next, p.dt_min);
}

TEST(Params, Validation) {
  FlowParams p;
  EXPECT_NO_THROW(p.validate());
  p.dt_init = 1e-2;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = FlowParams{};
  p.tol_Q = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = FlowParams{};
  p.safety = 1.5;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  EXPECT_EQ(scheme_from_string("IMEX-BDF2"), Scheme::IMEX_BDF2);
  EXPECT_EQ(scheme_from_string("RK4-explicit"), Scheme::RK4);
  EXPECT_STREQ(to_string(Scheme::ETDRK4), "ETDRK4");
  EXPECT_THROW(scheme_from_string("euler"), std::invalid_argument);
}

TEST(Etd, PhiFunctions) {
  const auto zero = detail::etd_phi(0.0);
  EXPECT_NEAR(zero[0], 0.5, 1e-14);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(zero[i], 1.0 / 6.0, 1e-14);
  // Away from the removable singularity the closed forms are accurate.
  const double z = -5.0, ez = std::exp(z), z3 = z * z * z;
  const auto phi = detail::etd_phi(z);
  EXPECT_NEAR(phi[0], (std::exp(z / 2) - 1.0) / z, 1e-13);
  EXPECT_NEAR(phi[1], (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3, 1e-13);
  EXPECT_NEAR(phi[2], (2.0 + z + ez * (z - 2.0)) / z3, 1e-13);
  EXPECT_NEAR(phi[3], (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3, 1e-13);
  for (double v : detail::etd_phi(-1e-9)) EXPECT_TRUE(std::isfinite(v));
}

TEST(Flow, ConstantIsFixedPoint) {
  auto g = reduced_grid(2);
  const auto run = run_flow(ScalarField(g, 0.3), FlowParams{});
  EXPECT_EQ(run.final_state.status, FlowStatus::Converged);
  EXPECT_EQ(run.final_state.steps, 0);
  EXPECT_EQ(run.series.size(), 1u);
  EXPECT_EQ(run.final_state.u.values(), ScalarField(g, 0.3).values());
}

TEST(Flow, ZeroConvergesImmediately) {
  auto g = reduced_grid(3);
  const auto run = run_flow(ScalarField(g), FlowParams{});
  EXPECT_EQ(run.final_state.status, FlowStatus::Converged);
  EXPECT_EQ(run.series.front().norm_Q_L2, 0.0);
  EXPECT_EQ(run.snapshots.size(), 1u);
}

TEST(Flow, LinearModeDecay) {
  for (int n : {2, 3}) {
    auto g = reduced_grid(n);
    const double delta = 1e-9, T = 0.01;
    const auto run = run_flow(cos_x1(g, delta), fixed(Scheme::ETDRK4, 1e-4, T));
    ASSERT_EQ(run.final_state.status, FlowStatus::MaxTime);
    EXPECT_NEAR(run.final_state.t, T, 1e-15);
    const double expect = 0.5 * delta * std::exp(-std::pow(kPi, 4) / (n - 1) * T);
    const cd c = mode_coefficient(run.final_state.u, {1, 0, 0, 0});
    EXPECT_NEAR(c.real(), expect, 1e-10 * expect);
    EXPECT_LT(std::abs(c.imag()), 1e-10 * expect);
  }
}

TEST(Flow, Etdrk4FourthOrder) {
  auto g = make_grid(2, {16, 16, 1, 1});
  // Coarse steps on stiff modes show the usual ETD order reduction, so the
  // ratio is taken where z = L dt is moderate.
  const ScalarField u0 = dealiased(random_bandlimited(g, 2e-4, 1, 3));
  const double T = 4e-3;
  auto solve = [&](int steps) {
    FlowIntegrator it(g, fixed(Scheme::ETDRK4, T / steps, T));
    ScalarField u = u0;
    for (int s = 0; s < steps; ++s) u = it.advance(u, T / steps);
    return u;
  };
  const ScalarField ref = solve(512);
  const double e1 = (solve(8) - ref).max_abs(), e2 = (solve(16) - ref).max_abs();
  const double ratio = e1 / e2;
  EXPECT_GT(ratio, 12.0) << e1 << " " << e2;
  EXPECT_LT(ratio, 20.0) << e1 << " " << e2;
}

TEST(Flow, SchemesAgree) {
  auto g = make_grid(2, {8, 8, 1, 1});
  const ScalarField u0 = random_bandlimited(g, 5e-3, 2, 4);
  const double T = 0.01;
  FlowParams etd;
  etd.T_max = T;
  etd.tol_Q = 1e-300;
  const auto a = run_flow(u0, etd);
  const auto b = run_flow(u0, fixed(Scheme::RK4, 1e-5, T));
  const auto c = run_flow(u0, fixed(Scheme::IMEX_BDF2, 1e-5, T));
  ASSERT_EQ(a.final_state.status, FlowStatus::MaxTime);
  ASSERT_EQ(b.final_state.status, FlowStatus::MaxTime);
  ASSERT_EQ(c.final_state.status, FlowStatus::MaxTime);
  EXPECT_LE((a.final_state.u - b.final_state.u).max_abs(), 1e-6);
  EXPECT_LE((a.final_state.u - c.final_state.u).max_abs(), 1e-5);
}

TEST(Flow, SmallCosineConvergesToConstant) {
  auto g = reduced_grid(2);
  FlowParams p;
  p.T_max = 5.0;
  const auto run = run_flow(cos_x1(g, 1e-3), p);
  ASSERT_EQ(run.final_state.status, FlowStatus::Converged);
  EXPECT_LE(run.series.back().norm_Q_L2, 1e-9);
  const auto& u = run.final_state.u.values();
  const auto [lo, hi] = std::minmax_element(u.begin(), u.end());
  EXPECT_LE(*hi - *lo, 1e-7);
  EXPECT_GT(run.snapshots.size(), 1u);
  EXPECT_EQ(run.snapshots.back().step, run.final_state.steps);
}

TEST(Flow, NormOfQDecreases) {
  auto g = reduced_grid(2);
  FlowParams p;
  p.T_max = 0.05;
  const auto run = run_flow(random_bandlimited(g, 1e-3, 3, 5), p);
  for (std::size_t i = 1; i < run.series.size(); ++i)
    EXPECT_LE(run.series[i].norm_Q_L2, run.series[i - 1].norm_Q_L2 * (1.0 + 1e-12));
}

TEST(Flow, StressRunNeverProducesNaN) {
  auto g = reduced_grid(2);
  const auto run = run_flow(cos_x1(g, 1.0), FlowParams{});
  EXPECT_TRUE(run.final_state.status == FlowStatus::PositivityLost ||
              run.final_state.status == FlowStatus::Converged);
  EXPECT_TRUE(run.final_state.u.all_finite());
  for (const auto& r : run.series) EXPECT_TRUE(std::isfinite(r.norm_Q_L2));

  const auto mid = run_flow(random_bandlimited(g, 0.03, 4, 9), FlowParams{});
  EXPECT_NE(mid.final_state.status, FlowStatus::Diverged);
  EXPECT_TRUE(mid.final_state.u.all_finite());
}

TEST(Flow, GrowthIsReportedAsDivergence) {
  auto g = reduced_grid(2);
  // Constant potentials keep psi = I, so only the bound can stop this.
  FieldOperator grow = [](const ScalarField& u) { return 1e4 * u; };
  FlowParams p;
  p.T_max = 1.0;
  FlowIntegrator it(g, p, grow);
  const auto run = it.run(ScalarField(g, 1.0));
  EXPECT_EQ(run.final_state.status, FlowStatus::Diverged);
  EXPECT_LE(run.final_state.u.max_abs(), kDivergenceBound);
}

TEST(Flow, RepeatedRejectionsDiverge) {
  auto g = reduced_grid(2);
  FieldOperator bad = [](const ScalarField& u) {
    ScalarField out(u.grid());
    for (auto& v : out.values()) v = std::nan("");
    return out;
  };
  FlowIntegrator it(g, FlowParams{}, bad);
  const auto run = it.run(ScalarField(g, 1.0));
  EXPECT_EQ(run.final_state.status, FlowStatus::Diverged);
  EXPECT_EQ(run.rejected_steps, kMaxConsecutiveRejections);
  EXPECT_EQ(run.final_state.u.values(), ScalarField(g, 1.0).values());
}

TEST(Flow, Deterministic) {
  auto g = reduced_grid(2);
  FlowParams p;
  p.T_max = 0.02;
  p.snapshot_every = 5;
  const ScalarField u0 = random_bandlimited(g, 1e-2, 4, 10);
  const auto a = run_flow(u0, p), b = run_flow(u0, p);
  ASSERT_EQ(a.series.size(), b.series.size());
  for (std::size_t i = 0; i < a.series.size(); ++i) {
    EXPECT_EQ(a.series[i].t, b.series[i].t);
    EXPECT_EQ(a.series[i].norm_Q_L2, b.series[i].norm_Q_L2);
  }
  EXPECT_EQ(a.final_state.u.values(), b.final_state.u.values());
  EXPECT_EQ(a.snapshots.size(), b.snapshots.size());
}

TEST(Flow, InitialConditionIsBandProjected) {
  auto g = reduced_grid(2);
  ScalarField u0 = cos_x1(g, 1e-6);
  // |k| = 7 lies outside the 2/3 band of a 16-point axis.
  u0 += ScalarField::from_function(g, [](std::span<const double> x) { return 1e-6 * std::cos(14 * kPi * x[0]); });
  FlowParams p;
  p.T_max = 0.0;
  const auto run = run_flow(u0, p);
  EXPECT_LE((run.final_state.u - cos_x1(g, 1e-6)).max_abs(), 1e-20);
}
