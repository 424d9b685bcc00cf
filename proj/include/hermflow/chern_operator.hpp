#pragma once

// psi(u), the induced metric g_u, and the Chern scalar curvature
//
//   s_u = -1/(n-1) g_u^{kbar r} d_r dbar_k log det psi(u)
//
// on the flat torus, where psi(u) = I + c_n [(tr H) I - H^T] with H the complex
// Hessian of u. With the flat cscK background R = 0, so the flow operator is
// Q(u) = s_u.

#include <functional>
#include <optional>

#include "hermflow/exterior_oracle.hpp"
#include "hermflow/hermitian_forms.hpp"
#include "hermflow/torus_field.hpp"

namespace hermflow {

using FieldOperator = std::function<ScalarField(const ScalarField&)>;

/// H_{a bbar} = d_a dbar_b u at every point.
inline HermitianField complex_hessian(const ScalarField& u) {
  const auto& grid = u.grid();
  const auto& g = *grid;
  const int n = g.n();
  const Spectrum uh = to_spectral(u);
  HermitianField H(grid, n);
  Spectrum buf(uh.size());
  for (int a = 0; a < n; ++a) {
    for (int b = a; b < n; ++b) {
      for (std::size_t m = 0; m < uh.size(); ++m) buf[m] = uh[m] * mixed_symbol(g, m, a, b);
      g.inverse(buf.data(), buf.data());
      for (std::size_t p = 0; p < H.size(); ++p) {
        if (a == b) {
          H[p](a, a) = buf[p].real();
        } else {
          H[p](a, b) = buf[p];
          H[p](b, a) = std::conj(buf[p]);
        }
      }
    }
  }
  return H;
}

/// psi(u) = I + Delta_psi(Hess u) under the given convention.
inline HermitianField assemble_psi(const ScalarField& u,
                                   const oracle::Convention& conv) {
  HermitianField psi = complex_hessian(u);
  const HMat id = HMat::identity(psi.n);
  for (auto& m : psi.data) m = id + conv.delta_psi(m);
  return psi;
}

inline HermitianField assemble_psi(const ScalarField& u) {
  return assemble_psi(u, oracle::frozen_convention(u.grid()->n()));
}

namespace detail {

// Contracts -coef * inv(g)^{kr} d_r dbar_k f over the grid, with f real and
// already dealiased in spectral form; the result is dealiased again.
inline ScalarField contract_mixed_derivatives(const GridPtr& grid, const Spectrum& fh,
                                              const HermitianField& ginv, double coef) {
  const auto& g = *grid;
  const int n = g.n();
  std::vector<cd> acc(g.size(), cd{});
  Spectrum buf(fh.size());
  for (int r = 0; r < n; ++r) {
    for (int k = r; k < n; ++k) {
      for (std::size_t m = 0; m < fh.size(); ++m) buf[m] = fh[m] * mixed_symbol(g, m, r, k);
      g.inverse(buf.data(), buf.data());
      for (std::size_t p = 0; p < g.size(); ++p) {
        // tr(G^{-1} F) = sum_{r,k} Ginv(k, r) F(r, k), F(k, r) = conj F(r, k).
        if (r == k) {
          acc[p] += ginv[p](r, r) * buf[p].real();
        } else {
          acc[p] += ginv[p](k, r) * buf[p] + ginv[p](r, k) * std::conj(buf[p]);
        }
      }
    }
  }
  ScalarField out(grid);
  double scale = 0.0;
  for (const cd& v : acc) scale = std::max(scale, std::abs(v));
  for (std::size_t p = 0; p < acc.size(); ++p) {
    if (std::abs(acc[p].imag()) > 1e-8 * std::max(1.0, scale)) {
      throw std::runtime_error("curvature contraction produced a non-real value");
    }
    out[p] = -coef * acc[p].real();
  }
  auto sh = to_spectral(out);
  dealias(g, sh);
  return to_physical(grid, std::move(sh));
}

inline Spectrum dealiased_spectrum(const ScalarField& f) {
  auto c = to_spectral(f);
  dealias(*f.grid(), c);
  return c;
}

}  // namespace detail

/// Cached psi, g, log det psi and s for one potential. Caches are valid for
/// the same u or all invalid; a workspace belongs to a single thread.
class CurvatureWorkspace {
 public:
  explicit CurvatureWorkspace(GridPtr grid)
      : grid_(std::move(grid)), conv_(oracle::frozen_convention(grid_->n())) {}
  CurvatureWorkspace(GridPtr grid, oracle::Convention conv)
      : grid_(std::move(grid)), conv_(conv) {}

  /// Recomputes every cache unless u matches the cached source exactly.
  const ScalarField& evaluate(const ScalarField& u) {
    if (valid_ && source_.values() == u.values()) return s_;
    valid_ = false;
    HermitianField psi = assemble_psi(u, conv_);
    HermitianField g = metric_from_psi(psi, conv_);  // throws PositivityLost
    HermitianField ginv = map_points(g, [](const HMat& m) { return inverse(m); });
    ScalarField ld = reduce_points(psi, [](const HMat& m) { return std::log(det(m).real()); });
    const Spectrum ldh = detail::dealiased_spectrum(ld);
    const int n = grid_->n();
    s_ = detail::contract_mixed_derivatives(grid_, ldh, ginv, 1.0 / (n - 1));
    psi_ = std::move(psi);
    g_ = std::move(g);
    logdet_psi_ = std::move(ld);
    source_ = u;
    valid_ = true;
    return s_;
  }

  bool valid() const { return valid_; }
  void invalidate() { valid_ = false; }
  const HermitianField& psi() const { return psi_; }
  const HermitianField& metric() const { return g_; }
  const ScalarField& logdet_psi() const { return logdet_psi_; }
  const ScalarField& scalar_curvature() const { return s_; }
  const oracle::Convention& convention() const { return conv_; }

 private:
  GridPtr grid_;
  oracle::Convention conv_;
  bool valid_ = false;
  ScalarField source_;
  HermitianField psi_;
  HermitianField g_;
  ScalarField logdet_psi_;
  ScalarField s_;
};

/// Chern scalar curvature of omega_u in the log det psi form.
inline ScalarField chern_scalar(const ScalarField& u, const oracle::Convention& conv) {
  CurvatureWorkspace ws(u.grid(), conv);
  return ws.evaluate(u);
}

inline ScalarField chern_scalar(const ScalarField& u) {
  return chern_scalar(u, oracle::frozen_convention(u.grid()->n()));
}

struct QOptions {
  /// Subtract the grid mean of s_u. Off by default: on the flat torus R = 0
  /// and the flow operator is s_u itself.
  bool mean_subtract = false;
};

inline ScalarField Q(const ScalarField& u, QOptions opts = {}) {
  ScalarField s = chern_scalar(u);
  if (opts.mean_subtract) s += -s.mean();
  return s;
}

inline FieldOperator q_operator(QOptions opts = {}) {
  return [opts](const ScalarField& u) { return Q(u, opts); };
}

/// Scalar curvature of the Kaehler metric omega + sqrt(-1) ddbar u for n = 2,
/// computed from g = I + Hess u directly (no psi). Cross-check path.
inline ScalarField kahler_scalar(const ScalarField& u) {
  const auto& grid = u.grid();
  if (grid->n() != 2) throw std::invalid_argument("kahler_scalar: n must be 2");
  HermitianField g = complex_hessian(u);
  const HMat id = HMat::identity(2);
  for (auto& m : g.data) m = id + m;
  require_positive(g);
  HermitianField ginv = map_points(g, [](const HMat& m) { return inverse(m); });
  ScalarField ld = reduce_points(g, [](const HMat& m) { return std::log(det(m).real()); });
  return detail::contract_mixed_derivatives(grid, detail::dealiased_spectrum(ld), ginv, 1.0);
}

inline FieldOperator kahler_operator() {
  return [](const ScalarField& u) { return kahler_scalar(u); };
}

}  // namespace hermflow
