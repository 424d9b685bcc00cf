#pragma once

// Decay-rate fits, parabolic norms along runs, and the closedness residuals of
// omega_u^{n-1}.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hermflow/chern_operator.hpp"
#include "hermflow/exterior_oracle.hpp"
#include "hermflow/flow_engine.hpp"
#include "hermflow/hermitian_forms.hpp"
#include "hermflow/norms.hpp"
#include "hermflow/torus_field.hpp"
#include "json.hpp"

namespace hermflow {

class FitUnreliable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kMinRSquared = 0.999;

struct DecayFit {
  double rate = 0.0;       // fitted decay rate of |Q|^2
  double intercept = 0.0;  // log |Q|^2 at t = 0
  double t_a = 0.0;
  double t_b = 0.0;
  double r_squared = 0.0;
  double lambda1 = 0.0;
  std::size_t samples = 0;

  /// rate >= lambda1 (1 - 0.02)
  bool meets_lower_bound() const { return rate >= lambda1 * (1.0 - 0.02); }
  /// |rate - 2 lambda1| <= 0.05 * 2 lambda1, for linear-regime runs
  bool matches_linear_rate() const { return std::abs(rate - 2.0 * lambda1) <= 0.05 * 2.0 * lambda1; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["rate"] = rate;
    j["intercept"] = intercept;
    j["window"] = {t_a, t_b};
    j["r_squared"] = r_squared;
    j["samples"] = samples;
    j["lambda1"] = lambda1;
    j["two_lambda1"] = 2.0 * lambda1;
    j["meets_lower_bound"] = meets_lower_bound();
    j["matches_linear_rate"] = matches_linear_rate();
    return j;
  }
};

/// Least-squares fit of log q2 against t. Without an explicit window the
/// first 10% of the time range is dropped and the window ends where q2 falls
/// below 1e4 machine epsilon.
inline DecayFit decay_fit(std::span<const double> t, std::span<const double> q2, double lambda1,
                          std::optional<std::pair<double, double>> window = std::nullopt) {
  if (t.size() != q2.size()) throw std::invalid_argument("decay_fit: size mismatch");
  if (t.empty()) throw FitUnreliable("decay_fit: empty series");
  constexpr double eps = std::numeric_limits<double>::epsilon();
  std::vector<double> xs, ys;
  if (window) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] >= window->first && t[i] <= window->second && q2[i] > 1e2 * eps) {
        xs.push_back(t[i]);
        ys.push_back(std::log(q2[i]));
      }
    }
  } else {
    const double t_a = t.front() + 0.1 * (t.back() - t.front());
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] < t_a) continue;
      if (q2[i] < 1e4 * eps) break;
      xs.push_back(t[i]);
      ys.push_back(std::log(q2[i]));
    }
  }
  if (xs.size() < 10) {
    throw FitUnreliable("decay_fit: " + std::to_string(xs.size()) + " samples in window, need 10");
  }
  const double N = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= N;
  my /= N;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (!(sxx > 0.0)) throw FitUnreliable("decay_fit: degenerate time window");
  const double slope = sxy / sxx;
  DecayFit f;
  f.rate = -slope;
  f.intercept = my - slope * mx;
  f.t_a = xs.front();
  f.t_b = xs.back();
  f.samples = xs.size();
  f.lambda1 = lambda1;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (f.intercept + slope * xs[i]);
    ss_res += r * r;
  }
  f.r_squared = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  if (f.r_squared < kMinRSquared) {
    throw FitUnreliable("decay_fit: R^2 = " + std::to_string(f.r_squared) + " below 0.999");
  }
  return f;
}

/// Fit of |Q|^2 along a run's series.
inline DecayFit decay_fit(const FlowRun& run, double lambda1) {
  std::vector<double> t, q2;
  for (const auto& r : run.series) {
    t.push_back(r.t);
    q2.push_back(r.norm_Q_L2 * r.norm_Q_L2);
  }
  return decay_fit(t, q2, lambda1);
}

namespace detail {

inline double trapezoid(const std::vector<double>& t, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) s += 0.5 * (t[i] - t[i - 1]) * (f[i] + f[i - 1]);
  return s;
}

// Sum over s = 0..4 of |nabla^s u|^2_{L2}, spectrally.
inline double spatial_energy_r2(const ScalarField& u) {
  const auto& g = *u.grid();
  const auto c = to_spectral(u);
  double s = 0.0;
  for (std::size_t m = 0; m < c.size(); ++m) {
    const double w1 = 4.0 * kPi * kPi * g.kappa_sq(m);
    s += (1.0 + w1 + w1 * w1 + w1 * w1 * w1 + w1 * w1 * w1 * w1) * std::norm(c[m]);
  }
  return s * g.volume();
}

}  // namespace detail

/// Discrete parabolic norm of a trajectory (r = 2). k = 0 integrates |u|^2_L2
/// over the series; k = 1 adds |du/dt|^2 = |Q(u)|^2 and spatial derivatives up
/// to order 4, integrated over the snapshots. Trapezoidal in time.
inline double parabolic_norm(const FlowRun& run, int k, const FieldOperator& op = q_operator()) {
  if (k < 0 || k >= 2) throw std::invalid_argument("parabolic_norm: k must be 0 or 1");
  std::vector<double> t, f;
  if (k == 0) {
    if (run.series.size() < 2) throw std::invalid_argument("parabolic_norm: need >= 2 samples");
    for (const auto& r : run.series) {
      t.push_back(r.t);
      f.push_back(r.norm_u_L2 * r.norm_u_L2);
    }
  } else {
    if (run.snapshots.size() < 2) throw std::invalid_argument("parabolic_norm: need >= 2 snapshots");
    for (const auto& s : run.snapshots) {
      const double q = l2_norm(op(s.u));
      t.push_back(s.t);
      f.push_back(detail::spatial_energy_r2(s.u) + q * q);
    }
  }
  return std::sqrt(detail::trapezoid(t, f));
}

namespace detail {

// Coefficient functions of omega_u^{n-1} rebuilt through the psi -> g -> psi
// roundtrip, as one complex field per (i, j).
inline std::vector<ComplexField> roundtrip_psi_coefficients(const ScalarField& u,
                                                            const oracle::Convention& conv) {
  const auto& grid = u.grid();
  const int n = grid->n();
  const HermitianField psi = assemble_psi(u, conv);
  const HermitianField g = metric_from_psi(psi, conv);
  const HermitianField back = psi_from_metric(g, conv);
  std::vector<ComplexField> coeffs;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      ComplexField f(grid);
      for (std::size_t p = 0; p < back.size(); ++p) f.values[p] = back[p](i, j);
      coeffs.push_back(std::move(f));
    }
  }
  return coeffs;
}

inline double sup_of_terms(const std::vector<oracle::DerivTerm>& terms, std::size_t count,
                           const std::vector<ComplexField>& coeffs, int n) {
  if (terms.empty()) return 0.0;
  const auto& grid = coeffs.front().grid;
  std::vector<std::vector<cd>> acc(count, std::vector<cd>(grid->size()));
  for (const auto& term : terms) {
    ComplexField f = coeffs[static_cast<std::size_t>(term.i * n + term.j)];
    if (term.a >= 0) f = d_z(f, term.a);
    if (term.b >= 0) f = d_zbar(f, term.b);
    auto& out = acc[term.out];
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += term.weight * f.values[p];
  }
  double sup = 0.0;
  for (const auto& row : acc)
    for (const cd& v : row) sup = std::max(sup, std::abs(v));
  return sup;
}

}  // namespace detail

/// Sup norm over all coefficients of d omega_u^{n-1} (its (n, n-1) and
/// (n-1, n) parts). Throws PositivityLost.
inline double balanced_residual(const ScalarField& u, const oracle::Convention& conv) {
  const int n = u.grid()->n();
  const auto tables = oracle::derivative_tables(n);
  const auto coeffs = detail::roundtrip_psi_coefficients(u, conv);
  return std::max(detail::sup_of_terms(tables.d, tables.d_count, coeffs, n),
                  detail::sup_of_terms(tables.dbar, tables.dbar_count, coeffs, n));
}

inline double balanced_residual(const ScalarField& u) {
  return balanced_residual(u, oracle::frozen_convention(u.grid()->n()));
}

/// Sup norm over the coefficients of ddbar omega_u^{n-1}. Throws PositivityLost.
inline double gauduchon_residual(const ScalarField& u, const oracle::Convention& conv) {
  const int n = u.grid()->n();
  const auto tables = oracle::derivative_tables(n);
  const auto coeffs = detail::roundtrip_psi_coefficients(u, conv);
  return detail::sup_of_terms(tables.ddbar, tables.ddbar_count, coeffs, n);
}

inline double gauduchon_residual(const ScalarField& u) {
  return gauduchon_residual(u, oracle::frozen_convention(u.grid()->n()));
}

}  // namespace hermflow
