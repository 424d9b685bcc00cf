#pragma once

// Linearizations of the flow operator: the flat-torus Fourier multiplier,
// finite-difference Jacobians on reduced grids, spectra, the coercivity probe
// and the lower bound for symmetric T-bounded perturbations.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <thread>
#include <vector>

#include "hermflow/chern_operator.hpp"
#include "hermflow/torus_field.hpp"
#include "json.hpp"

namespace hermflow {

/// Dense work is limited to reduced grids of at most this many points.
inline constexpr std::size_t kDenseLimit = 4096;

/// Worker cap from HERMFLOW_THREADS, else the hardware concurrency.
inline unsigned hermflow_threads() {
  if (const char* env = std::getenv("HERMFLOW_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// A linear operator on a grid: a Fourier multiplier or a dense matrix in the
/// nodal basis.
struct LinearOperatorHandle {
  GridPtr grid;
  std::optional<std::vector<double>> multiplier;  // indexed by spectral index
  std::optional<Eigen::MatrixXd> dense;

  ScalarField apply(const ScalarField& v) const {
    if (multiplier) {
      auto c = to_spectral(v);
      for (std::size_t m = 0; m < c.size(); ++m) c[m] *= (*multiplier)[m];
      return to_physical(grid, std::move(c));
    }
    Eigen::Map<const Eigen::VectorXd> x(v.values().data(), static_cast<Eigen::Index>(v.size()));
    Eigen::VectorXd y = (*dense) * x;
    return ScalarField(grid, std::vector<double>(y.data(), y.data() + y.size()));
  }

  Eigen::MatrixXd dense_matrix() const {
    if (dense) return *dense;
    const auto N = grid->size();
    if (N > kDenseLimit) throw std::invalid_argument("dense_matrix: grid exceeds dense limit");
    Eigen::MatrixXd A(N, N);
    for (std::size_t j = 0; j < N; ++j) {
      ScalarField e(grid);
      e[j] = 1.0;
      const auto col = apply(e);
      for (std::size_t i = 0; i < N; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    }
    return A;
  }
};

/// pi^2 |k/P|^2, the symbol of -Delta_C.
inline double neg_laplacian_symbol(const TorusGrid& g, std::size_t m) {
  return kPi * kPi * g.kappa_sq(m);
}

/// L = -(1/(n-1)) Delta_C^2 on the flat torus.
inline LinearOperatorHandle L_flat(const GridPtr& grid) {
  const auto& g = *grid;
  std::vector<double> mult(g.size());
  for (std::size_t m = 0; m < g.size(); ++m) {
    const double s = neg_laplacian_symbol(g, m);
    mult[m] = -(s * s) / (g.n() - 1);
  }
  mult[0] = 0.0;
  return LinearOperatorHandle{grid, std::move(mult), std::nullopt};
}

/// Central-difference directional derivatives of op at u along each probe
/// column, refined by Richardson extrapolation over `levels` halvings of the
/// step eps = 1e-5 (1 + |u|_inf).
inline Eigen::MatrixXd jacobian_fd(const FieldOperator& op, const ScalarField& u,
                                   const Eigen::MatrixXd& probes, int levels = 3) {
  const auto& grid = u.grid();
  const auto N = static_cast<Eigen::Index>(grid->size());
  if (probes.rows() != N) throw std::invalid_argument("jacobian_fd: probe size mismatch");
  if (levels < 1) throw std::invalid_argument("jacobian_fd: need at least one level");
  const double eps0 = 1e-5 * (1.0 + u.max_abs());
  const Eigen::Index cols = probes.cols();
  Eigen::MatrixXd J(N, cols);

  auto column = [&](Eigen::Index c) {
    std::vector<Eigen::VectorXd> table;
    for (int l = 0; l < levels; ++l) {
      const double h = eps0 / static_cast<double>(1 << l);
      ScalarField up = u, dn = u;
      for (Eigen::Index i = 0; i < N; ++i) {
        up[i] += h * probes(i, c);
        dn[i] -= h * probes(i, c);
      }
      const ScalarField qp = op(up), qm = op(dn);
      Eigen::VectorXd d(N);
      for (Eigen::Index i = 0; i < N; ++i) d[i] = (qp[i] - qm[i]) / (2.0 * h);
      table.push_back(std::move(d));
    }
    // Richardson: the error expands in even powers of h.
    for (int order = 1; order < levels; ++order) {
      const double f = static_cast<double>(1 << (2 * order));
      for (int l = levels - 1; l >= order; --l) table[l] = (f * table[l] - table[l - 1]) / (f - 1.0);
    }
    J.col(c) = table[levels - 1];
  };

  const unsigned workers = std::min<unsigned>(hermflow_threads(), static_cast<unsigned>(std::max<Eigen::Index>(cols, 1)));
  if (workers <= 1) {
    for (Eigen::Index c = 0; c < cols; ++c) column(c);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (Eigen::Index c = w; c < cols; c += workers) column(c);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  return J;
}

/// Full Jacobian in the nodal basis (reduced grids only).
inline Eigen::MatrixXd jacobian_fd(const FieldOperator& op, const ScalarField& u, int levels = 3) {
  const auto N = u.grid()->size();
  if (N > kDenseLimit) throw std::invalid_argument("jacobian_fd: grid exceeds dense limit");
  return jacobian_fd(op, u, Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N)), levels);
}

inline LinearOperatorHandle dense_handle(const GridPtr& grid, Eigen::MatrixXd A) {
  return LinearOperatorHandle{grid, std::nullopt, std::move(A)};
}

struct SpectrumReport {
  std::vector<double> eigenvalues;  // of -L, ascending
  double lambda1 = 0.0;
  int kernel_dim = 0;
  double kernel_threshold = 1e-9;
  int n = 0;
  std::vector<int> resolution;
  std::vector<double> periods;

  nlohmann::ordered_json to_json(bool include_eigenvalues = true) const {
    nlohmann::ordered_json j;
    j["n"] = n;
    j["resolution"] = resolution;
    j["periods"] = periods;
    j["lambda1"] = lambda1;
    j["two_lambda1"] = 2.0 * lambda1;
    j["kernel_dim"] = kernel_dim;
    j["kernel_threshold"] = kernel_threshold;
    j["count"] = eigenvalues.size();
    if (include_eigenvalues) j["eigenvalues"] = eigenvalues;
    return j;
  }
};

/// Eigenvalues of -L (the symmetric part for dense handles). lambda1 is the
/// smallest eigenvalue above the kernel threshold.
inline SpectrumReport spectrum(const LinearOperatorHandle& h, double kernel_threshold = 1e-9) {
  SpectrumReport rep;
  rep.n = h.grid->n();
  rep.resolution = h.grid->resolution();
  rep.periods = h.grid->periods();
  rep.kernel_threshold = kernel_threshold;
  if (h.multiplier) {
    rep.eigenvalues.reserve(h.multiplier->size());
    for (double v : *h.multiplier) rep.eigenvalues.push_back(-v);
  } else {
    const Eigen::MatrixXd S = -0.5 * (*h.dense + h.dense->transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    rep.eigenvalues.assign(ev.data(), ev.data() + ev.size());
  }
  std::sort(rep.eigenvalues.begin(), rep.eigenvalues.end());
  rep.lambda1 = 0.0;
  for (double v : rep.eigenvalues) {
    if (std::abs(v) <= kernel_threshold) ++rep.kernel_dim;
    else if (v > kernel_threshold && rep.lambda1 == 0.0) rep.lambda1 = v;
  }
  return rep;
}

/// L2 inner product with the grid's volume weights.
inline double inner(const GridPtr& grid, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) * grid->volume() / static_cast<double>(grid->size());
}

struct CoercivityReport {
  double eps = 0.0;
  double worst_margin = 0.0;
  std::vector<double> margins;
  bool pass = false;
};

/// Checks -<L_u z, z> >= (1 - eps) <-L z, z> - eps |z|^2 for each sample, with
/// L_u and L given as dense matrices in the nodal basis.
inline CoercivityReport coercivity_probe(const GridPtr& grid, const Eigen::MatrixXd& Lu,
                                         const Eigen::MatrixXd& L,
                                         const std::vector<ScalarField>& samples, double eps) {
  CoercivityReport rep;
  rep.eps = eps;
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (const auto& z : samples) {
    Eigen::Map<const Eigen::VectorXd> zv(z.values().data(), static_cast<Eigen::Index>(z.size()));
    const Eigen::VectorXd zz = zv;
    const double lhs = -inner(grid, Lu * zz, zz);
    const double rhs = (1.0 - eps) * (-inner(grid, L * zz, zz)) - eps * inner(grid, zz, zz);
    rep.margins.push_back(lhs - rhs);
    rep.worst_margin = std::min(rep.worst_margin, lhs - rhs);
  }
  rep.pass = rep.worst_margin >= 0.0;
  return rep;
}

inline CoercivityReport coercivity_probe(const FieldOperator& op, const ScalarField& u,
                                         const std::vector<ScalarField>& samples, double eps) {
  const Eigen::MatrixXd Lu = jacobian_fd(op, u);
  const Eigen::MatrixXd L = jacobian_fd(op, ScalarField(u.grid()));
  return coercivity_probe(u.grid(), Lu, L, samples, eps);
}

// ---- T-bounded perturbations ---------------------------------------------------

/// T self-adjoint with lower bound gamma_T, V symmetric with
/// |V h| <= a |h| + b |T h|, b < 1.
struct TBoundProblem {
  Eigen::MatrixXd T;
  Eigen::MatrixXd V;
  double gamma_T = 0.0;
  double a = 0.0;
  double b = 0.0;
};

inline double min_eigenvalue(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline double max_eigenvalue(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(es.eigenvalues().size() - 1);
}

/// Builds the problem for a given b. gamma_T is the exact lower bound of T and
/// a is the smallest constant with V^T V <= a^2 I + b^2 T^T T, which implies
/// the relative bound since sqrt(x^2 + y^2) <= x + y.
inline TBoundProblem make_tbound_problem(Eigen::MatrixXd T, Eigen::MatrixXd V, double b) {
  if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("make_tbound_problem: need 0 <= b < 1");
  TBoundProblem p;
  p.gamma_T = min_eigenvalue(T);
  const Eigen::MatrixXd M = V.transpose() * V - b * b * (T.transpose() * T);
  p.a = std::sqrt(std::max(0.0, max_eigenvalue(M)));
  p.b = b;
  p.T = std::move(T);
  p.V = std::move(V);
  return p;
}

/// Largest violation of |V h| <= a |h| + b |T h| over probe columns (<= 0 means
/// the bound holds on the probes).
inline double relative_bound_violation(const TBoundProblem& p, const Eigen::MatrixXd& probes) {
  double worst = -std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < probes.cols(); ++c) {
    const Eigen::VectorXd h = probes.col(c);
    const double lhs = (p.V * h).norm();
    const double rhs = p.a * h.norm() + p.b * (p.T * h).norm();
    worst = std::max(worst, (lhs - rhs) / std::max(1.0, rhs));
  }
  return worst;
}

/// gamma = gamma_T - max{ a / (1 - b), a + b |gamma_T| }.
inline double tbound_gamma(const TBoundProblem& p) {
  if (!(p.b < 1.0)) throw std::invalid_argument("tbound_gamma: relative bound b must be < 1");
  if (p.b < 0.0 || p.a < 0.0) throw std::invalid_argument("tbound_gamma: a, b must be nonnegative");
  return p.gamma_T - std::max(p.a / (1.0 - p.b), p.a + p.b * std::abs(p.gamma_T));
}

}  // namespace hermflow
