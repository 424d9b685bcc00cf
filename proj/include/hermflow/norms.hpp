#pragma once

// Field norms shared by the flow engine's series and the diagnostics module.

#include <cmath>
#include <stdexcept>

#include "hermflow/chern_operator.hpp"
#include "hermflow/torus_field.hpp"

namespace hermflow {

/// (integral of f^2 over the torus)^{1/2}.
inline double l2_norm(const ScalarField& f) {
  double s = 0.0;
  for (double v : f.values()) s += v * v;
  return std::sqrt(s / static_cast<double>(f.size()) * f.grid()->volume());
}

/// Spectral W^{k,2} norm with weights (1 + |2 pi kappa|^2)^{k/2}, k in [0, 8].
inline double sobolev_norm(const ScalarField& f, int k) {
  if (k < 0 || k > 8) throw std::invalid_argument("sobolev_norm: k must be in [0, 8]");
  if (k == 0) return l2_norm(f);
  const auto& g = *f.grid();
  const auto c = to_spectral(f);
  double s = 0.0;
  for (std::size_t m = 0; m < c.size(); ++m) {
    const double w = std::pow(1.0 + 4.0 * kPi * kPi * g.kappa_sq(m), k);
    s += w * std::norm(c[m]);
  }
  return std::sqrt(s * g.volume());
}

/// Mean over the grid of tr psi(u), the zero mode of the omega-trace of
/// omega_u^{n-1}. Equals n at u = 0.
inline double conservation_functional(const ScalarField& u, const oracle::Convention& conv) {
  const HermitianField psi = assemble_psi(u, conv);
  double s = 0.0;
  for (const auto& m : psi.data) s += m.trace().real();
  return s / static_cast<double>(psi.size());
}

inline double conservation_functional(const ScalarField& u) {
  return conservation_functional(u, oracle::frozen_convention(u.grid()->n()));
}

}  // namespace hermflow
