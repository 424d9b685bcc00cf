#pragma once

// Time integration of du/dt = Q(u). The stiff part is the flat linearization
// L (a diagonal Fourier multiplier), integrated exactly by ETDRK4; the
// remainder N(u) = Q(u) - L u is explicit.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hermflow/chern_operator.hpp"
#include "hermflow/hermitian_forms.hpp"
#include "hermflow/linearized_ops.hpp"
#include "hermflow/norms.hpp"
#include "hermflow/torus_field.hpp"

namespace hermflow {

enum class Scheme { ETDRK4, IMEX_BDF2, RK4 };
enum class FlowStatus { Running, Converged, PositivityLost, Diverged, MaxTime };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::ETDRK4: return "ETDRK4";
    case Scheme::IMEX_BDF2: return "IMEX-BDF2";
    case Scheme::RK4: return "RK4-explicit";
  }
  return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "ETDRK4") return Scheme::ETDRK4;
  if (s == "IMEX-BDF2") return Scheme::IMEX_BDF2;
  if (s == "RK4-explicit" || s == "RK4") return Scheme::RK4;
  throw std::invalid_argument("unknown scheme: " + s);
}

inline const char* to_string(FlowStatus s) {
  switch (s) {
    case FlowStatus::Running: return "Running";
    case FlowStatus::Converged: return "Converged";
    case FlowStatus::PositivityLost: return "PositivityLost";
    case FlowStatus::Diverged: return "Diverged";
    case FlowStatus::MaxTime: return "MaxTime";
  }
  return "?";
}

/// Divergence threshold on |u|_inf.
inline constexpr double kDivergenceBound = 1e6;
inline constexpr int kMaxConsecutiveRejections = 20;

struct FlowParams {
  Scheme scheme = Scheme::ETDRK4;
  double dt_init = 1e-4;
  double dt_min = 1e-9;
  double dt_max = 1e-3;
  double safety = 0.9;
  double tol_Q = 1e-9;
  double T_max = 1.0;
  /// Snapshot every this many accepted steps; 0 keeps only the first and last.
  int snapshot_every = 0;
  /// Step-doubling tolerances (ETDRK4 only; the other schemes run at dt_init).
  double rtol = 1e-7;
  double atol = 1e-14;
  bool adaptive = true;

  void validate() const {
    if (!(dt_min > 0.0 && dt_min <= dt_init && dt_init <= dt_max)) {
      throw std::invalid_argument("FlowParams: need 0 < dt_min <= dt_init <= dt_max");
    }
    if (!(tol_Q > 0.0)) throw std::invalid_argument("FlowParams: tol_Q must be positive");
    if (!(T_max >= 0.0)) throw std::invalid_argument("FlowParams: T_max must be nonnegative");
    if (!(safety > 0.0 && safety <= 1.0)) throw std::invalid_argument("FlowParams: safety must be in (0, 1]");
    if (!(rtol > 0.0) || !(atol >= 0.0)) throw std::invalid_argument("FlowParams: bad tolerances");
    if (snapshot_every < 0) throw std::invalid_argument("FlowParams: snapshot_every must be >= 0");
  }
};

struct FlowState {
  double t = 0.0;
  ScalarField u;
  long steps = 0;
  double dt = 0.0;
  FlowStatus status = FlowStatus::Running;
};

struct SeriesRow {
  double t = 0.0;
  double dt = 0.0;
  double norm_Q_L2 = 0.0;
  double norm_u_L2 = 0.0;
  double norm_u_inf = 0.0;
  double min_eig_psi = 0.0;
  double conservation = 0.0;
};

struct Snapshot {
  double t = 0.0;
  long step = 0;
  ScalarField u;
};

struct FlowRun {
  std::vector<SeriesRow> series;
  std::vector<Snapshot> snapshots;
  FlowState final_state;
  long rejected_steps = 0;
  std::string message;
};

struct ControllerDecision {
  bool accepted = false;
  double dt_next = 0.0;
};

/// Step-size rule on a normalized error (1 = at tolerance). Growth is capped
/// at 2x; a rejection shrinks by at least 2x.
inline ControllerDecision dt_controller(double err, double dt, const FlowParams& p) {
  ControllerDecision d;
  d.accepted = err <= 1.0;
  double factor;
  if (!std::isfinite(err)) {
    factor = 0.25;
  } else if (err == 0.0) {
    factor = 2.0;
  } else {
    factor = p.safety * std::pow(err, -0.2);
  }
  factor = d.accepted ? std::clamp(factor, 0.2, 2.0) : std::clamp(factor, 0.1, 0.5);
  d.dt_next = std::clamp(dt * factor, p.dt_min, p.dt_max);
  return d;
}

namespace detail {

struct EtdCoefficients {
  std::vector<double> E, E2, Qc, f1, f2, f3;
};

// phi-function combinations of z = c dt by contour averaging on a unit circle
// around z (M points on the upper half; the functions are real on the real axis).
inline std::array<double, 4> etd_phi(double z) {
  constexpr int M = 32;
  double q = 0.0, a = 0.0, b = 0.0, c = 0.0;
  for (int j = 1; j <= M; ++j) {
    const cd r = z + std::exp(cd(0.0, kPi * (j - 0.5) / M));
    const cd er = std::exp(r);
    const cd r3 = r * r * r;
    q += ((std::exp(r / 2.0) - 1.0) / r).real();
    a += ((-4.0 - r + er * (4.0 - 3.0 * r + r * r)) / r3).real();
    b += ((2.0 + r + er * (r - 2.0)) / r3).real();
    c += ((-4.0 - 3.0 * r - r * r + er * (4.0 - r)) / r3).real();
  }
  return {q / M, a / M, b / M, c / M};
}

}  // namespace detail

/// Integrates du/dt = op(u) on one grid. Holds the scheme's per-dt coefficient
/// cache and, for IMEX-BDF2, the previous step.
class FlowIntegrator {
 public:
  FlowIntegrator(GridPtr grid, FlowParams params, FieldOperator op = q_operator())
      : grid_(std::move(grid)), params_(params), op_(std::move(op)) {
    params_.validate();
    linear_ = *L_flat(grid_).multiplier;
  }

  const FlowParams& params() const { return params_; }
  const GridPtr& grid() const { return grid_; }
  const std::vector<double>& linear_multiplier() const { return linear_; }

  /// One step of the configured scheme at fixed dt. Throws PositivityLost.
  ScalarField advance(const ScalarField& u, double dt) {
    switch (params_.scheme) {
      case Scheme::ETDRK4: return etdrk4(u, dt);
      case Scheme::RK4: return rk4(u, dt);
      case Scheme::IMEX_BDF2: return bdf2(u, dt);
    }
    throw std::logic_error("unreachable");
  }

  /// Attempts one accepted step from a Running state. On failure the returned
  /// state keeps the last good u with a terminal status.
  FlowState step(const FlowState& s, long* rejections = nullptr) {
    if (s.status != FlowStatus::Running) throw std::invalid_argument("step: state is not Running");
    FlowState out = s;
    double dt = s.dt > 0.0 ? s.dt : params_.dt_init;
    const bool adaptive = params_.adaptive && params_.scheme == Scheme::ETDRK4;
    if (!adaptive) dt = params_.dt_init;
    int consecutive = 0;
    for (;;) {
      const double remaining = params_.T_max - s.t;
      const double h = std::min(dt, remaining);
      try {
        ScalarField next;
        double dt_next = dt;
        if (adaptive) {
          const ScalarField big = advance(s.u, h);
          const ScalarField half = advance(advance(s.u, 0.5 * h), 0.5 * h);
          const double mean = half.mean();
          double diff = 0.0, scale = 0.0;
          for (std::size_t i = 0; i < half.size(); ++i) {
            diff = std::max(diff, std::abs(half[i] - big[i]));
            scale = std::max(scale, std::abs(half[i] - mean));
          }
          // std::max drops NaN, so non-finite trial steps are caught here.
          const double err = big.all_finite() && half.all_finite()
                                 ? diff / (params_.atol + params_.rtol * scale)
                                 : std::numeric_limits<double>::infinity();
          const auto d = dt_controller(err, h, params_);
          if (!d.accepted) {
            if (rejections) ++*rejections;
            if (++consecutive >= kMaxConsecutiveRejections) {
              out.status = FlowStatus::Diverged;
              return out;
            }
            dt = d.dt_next;
            continue;
          }
          next = half;
          // A clipped final step says nothing about the natural step size.
          dt_next = h < dt ? dt : d.dt_next;
        } else {
          next = advance(s.u, h);
        }
        if (!next.all_finite() || next.max_abs() > kDivergenceBound) {
          out.status = FlowStatus::Diverged;
          return out;
        }
        out.u = std::move(next);
        out.t = s.t + h;
        out.steps = s.steps + 1;
        out.dt = adaptive ? dt_next : params_.dt_init;
        last_dt_ = h;
        return out;
      } catch (const PositivityLost&) {
        if (rejections) ++*rejections;
        if (dt <= params_.dt_min || !adaptive) {
          out.status = FlowStatus::PositivityLost;
          return out;
        }
        dt = std::max(0.5 * dt, params_.dt_min);
      }
    }
  }

  /// The dt actually taken by the last accepted step.
  double last_dt() const { return last_dt_; }

  /// Diagnostics row for the current u; throws PositivityLost.
  SeriesRow measure(const ScalarField& u, double t, double dt) {
    SeriesRow r;
    r.t = t;
    r.dt = dt;
    r.norm_Q_L2 = l2_norm(op_(u));
    r.norm_u_L2 = l2_norm(u);
    r.norm_u_inf = u.max_abs();
    const HermitianField psi = assemble_psi(u);
    double me = std::numeric_limits<double>::infinity();
    double tr = 0.0;
    for (const auto& m : psi.data) {
      me = std::min(me, min_eig(m));
      tr += m.trace().real();
    }
    r.min_eig_psi = me;
    r.conservation = tr / static_cast<double>(psi.size());
    return r;
  }

  /// Integrates from u0 (projected onto the dealiasing band) until
  /// |Q|_L2 <= tol_Q, T_max, or a failure.
  FlowRun run(const ScalarField& u0,
              const std::function<void(const FlowState&, const SeriesRow&)>& observer = {}) {
    FlowRun run;
    FlowState s;
    s.u = dealiased(u0);
    s.dt = params_.dt_init;
    history_.reset();
    auto snapshot = [&](const FlowState& st) {
      if (!run.snapshots.empty() && run.snapshots.back().step == st.steps) return;
      run.snapshots.push_back({st.t, st.steps, st.u});
    };
    auto record = [&](const FlowState& st, double dt) -> bool {
      try {
        run.series.push_back(measure(st.u, st.t, dt));
      } catch (const PositivityLost& e) {
        run.message = e.what();
        return false;
      }
      if (observer) observer(st, run.series.back());
      return true;
    };
    if (!record(s, 0.0)) {
      s.status = FlowStatus::PositivityLost;
      run.final_state = s;
      return run;
    }
    snapshot(s);
    for (;;) {
      if (run.series.back().norm_Q_L2 <= params_.tol_Q) {
        s.status = FlowStatus::Converged;
        break;
      }
      if (s.t >= params_.T_max) {
        s.status = FlowStatus::MaxTime;
        break;
      }
      FlowState next = step(s, &run.rejected_steps);
      if (next.status != FlowStatus::Running) {
        s.status = next.status;
        if (run.message.empty()) run.message = to_string(next.status);
        break;
      }
      s = std::move(next);
      if (!record(s, last_dt_)) {
        s.status = FlowStatus::PositivityLost;
        break;
      }
      if (params_.snapshot_every > 0 && s.steps % params_.snapshot_every == 0) snapshot(s);
    }
    snapshot(s);
    run.final_state = s;
    return run;
  }

 private:
  // N(u) = op(u) - L u in spectral form, along with u's spectrum.
  Spectrum nonlinear(const ScalarField& u, const Spectrum& uh) const {
    Spectrum qh = to_spectral(op_(u));
    for (std::size_t m = 0; m < qh.size(); ++m) qh[m] -= linear_[m] * uh[m];
    return qh;
  }

  const detail::EtdCoefficients& coefficients(double dt) {
    auto it = etd_cache_.find(dt);
    if (it != etd_cache_.end()) return it->second;
    if (etd_cache_.size() > 16) etd_cache_.clear();
    std::map<double, std::array<double, 4>> phi;  // by multiplier value
    detail::EtdCoefficients c;
    const std::size_t N = linear_.size();
    c.E.resize(N); c.E2.resize(N); c.Qc.resize(N); c.f1.resize(N); c.f2.resize(N); c.f3.resize(N);
    for (std::size_t m = 0; m < N; ++m) {
      const double z = linear_[m] * dt;
      auto p = phi.find(linear_[m]);
      if (p == phi.end()) p = phi.emplace(linear_[m], detail::etd_phi(z)).first;
      c.E[m] = std::exp(z);
      c.E2[m] = std::exp(0.5 * z);
      c.Qc[m] = dt * p->second[0];
      c.f1[m] = dt * p->second[1];
      c.f2[m] = dt * p->second[2];
      c.f3[m] = dt * p->second[3];
    }
    return etd_cache_.emplace(dt, std::move(c)).first->second;
  }

  ScalarField etdrk4(const ScalarField& u, double dt) {
    const auto& k = coefficients(dt);
    const std::size_t N = linear_.size();
    const Spectrum v = to_spectral(u);
    const Spectrum Nv = nonlinear(u, v);
    Spectrum a(N), b(N), c(N), out(N);
    for (std::size_t m = 0; m < N; ++m) a[m] = k.E2[m] * v[m] + k.Qc[m] * Nv[m];
    const ScalarField ua = to_physical(grid_, a);
    const Spectrum Na = nonlinear(ua, to_spectral(ua));
    for (std::size_t m = 0; m < N; ++m) b[m] = k.E2[m] * v[m] + k.Qc[m] * Na[m];
    const ScalarField ub = to_physical(grid_, b);
    const Spectrum Nb = nonlinear(ub, to_spectral(ub));
    for (std::size_t m = 0; m < N; ++m) c[m] = k.E2[m] * a[m] + k.Qc[m] * (2.0 * Nb[m] - Nv[m]);
    const ScalarField uc = to_physical(grid_, c);
    const Spectrum Nc = nonlinear(uc, to_spectral(uc));
    for (std::size_t m = 0; m < N; ++m) {
      out[m] = k.E[m] * v[m] + k.f1[m] * Nv[m] + 2.0 * k.f2[m] * (Na[m] + Nb[m]) + k.f3[m] * Nc[m];
    }
    return to_physical(grid_, std::move(out));
  }

  ScalarField rk4(const ScalarField& u, double dt) const {
    const ScalarField k1 = op_(u);
    const ScalarField k2 = op_(u + (0.5 * dt) * k1);
    const ScalarField k3 = op_(u + (0.5 * dt) * k2);
    const ScalarField k4 = op_(u + dt * k3);
    return u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  // Second-order semi-implicit BDF with extrapolated N; the first step from a
  // fresh history is IMEX Euler.
  ScalarField bdf2(const ScalarField& u, double dt) {
    const Spectrum v = to_spectral(u);
    const Spectrum Nv = nonlinear(u, v);
    Spectrum out(v.size());
    if (!history_ || history_->dt != dt || history_->u_next_values != u.values()) {
      for (std::size_t m = 0; m < v.size(); ++m) out[m] = (v[m] + dt * Nv[m]) / (1.0 - dt * linear_[m]);
    } else {
      const auto& pv = history_->v;
      const auto& pN = history_->N;
      for (std::size_t m = 0; m < v.size(); ++m) {
        out[m] = (4.0 * v[m] - pv[m] + 2.0 * dt * (2.0 * Nv[m] - pN[m])) / (3.0 - 2.0 * dt * linear_[m]);
      }
    }
    ScalarField next = to_physical(grid_, std::move(out));
    history_ = Bdf2History{dt, v, Nv, next.values()};
    return next;
  }

  struct Bdf2History {
    double dt;
    Spectrum v, N;
    std::vector<double> u_next_values;
  };

  GridPtr grid_;
  FlowParams params_;
  FieldOperator op_;
  std::vector<double> linear_;
  std::map<double, detail::EtdCoefficients> etd_cache_;
  std::optional<Bdf2History> history_;
  double last_dt_ = 0.0;
};

/// Integrates du/dt = op(u) from u0 with a fresh integrator.
inline FlowRun run_flow(const ScalarField& u0, const FlowParams& params,
                        FieldOperator op = q_operator()) {
  FlowIntegrator integ(u0.grid(), params, std::move(op));
  return integ.run(u0);
}

}  // namespace hermflow
