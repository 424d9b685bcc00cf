#pragma once

// Per-point Hermitian matrix algebra for n <= 3: closed-form determinants,
// cofactors and eigenvalues, and the psi <-> metric bijection.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "hermflow/exterior_oracle.hpp"
#include "hermflow/torus_field.hpp"

namespace hermflow {

/// Thrown when a field leaves the positive cone. Carries the first offending
/// grid point and its smallest eigenvalue.
class PositivityLost : public std::runtime_error {
 public:
  PositivityLost(std::size_t point, double min_eig)
      : std::runtime_error("positivity lost at point " + std::to_string(point) +
                           " (min eigenvalue " + std::to_string(min_eig) + ")"),
        point_(point),
        min_eig_(min_eig) {}
  std::size_t point() const { return point_; }
  double min_eig() const { return min_eig_; }

 private:
  std::size_t point_;
  double min_eig_;
};

/// A point is degenerate when min eig < kDegeneracyRatio * max eig.
inline constexpr double kDegeneracyRatio = 1e-10;

/// Small dense complex matrix, n in {1, 2, 3}.
struct HMat {
  int n = 0;
  std::array<cd, 9> a{};

  HMat() = default;
  explicit HMat(int dim) : n(dim) {}

  static HMat identity(int dim) {
    HMat m(dim);
    for (int i = 0; i < dim; ++i) m(i, i) = 1.0;
    return m;
  }

  cd& operator()(int i, int j) { return a[i * 3 + j]; }
  cd operator()(int i, int j) const { return a[i * 3 + j]; }

  cd trace() const {
    cd t = 0.0;
    for (int i = 0; i < n; ++i) t += (*this)(i, i);
    return t;
  }
  HMat transpose() const {
    HMat t(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) t(i, j) = (*this)(j, i);
    return t;
  }
  HMat adjoint() const {
    HMat t(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) t(i, j) = std::conj((*this)(j, i));
    return t;
  }
  HMat& operator+=(const HMat& o) {
    for (int k = 0; k < 9; ++k) a[k] += o.a[k];
    return *this;
  }
  HMat& operator-=(const HMat& o) {
    for (int k = 0; k < 9; ++k) a[k] -= o.a[k];
    return *this;
  }
  HMat& operator*=(cd c) {
    for (auto& v : a) v *= c;
    return *this;
  }
  friend HMat operator+(HMat x, const HMat& y) { return x += y; }
  friend HMat operator-(HMat x, const HMat& y) { return x -= y; }
  friend HMat operator*(cd c, HMat x) { return x *= c; }
  friend HMat operator*(const HMat& x, const HMat& y) {
    HMat r(x.n);
    for (int i = 0; i < x.n; ++i)
      for (int j = 0; j < x.n; ++j) {
        cd s = 0.0;
        for (int k = 0; k < x.n; ++k) s += x(i, k) * y(k, j);
        r(i, j) = s;
      }
    return r;
  }

  double max_abs() const {
    double m = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) m = std::max(m, std::abs((*this)(i, j)));
    return m;
  }
  double hermitian_defect() const { return (*this - adjoint()).max_abs(); }

  // Generic-matrix template hooks so Convention::delta_psi works on HMat.
  HMat operator-() const { return cd(-1.0) * *this; }
};

inline HMat operator*(double c, const HMat& x) { return cd(c) * x; }

inline cd det(const HMat& m) {
  switch (m.n) {
    case 1:
      return m(0, 0);
    case 2:
      return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    case 3:
      return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
             m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
             m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    default:
      throw std::invalid_argument("det: n must be <= 3");
  }
}

/// Cofactor matrix, cof_ij = (-1)^{i+j} M_ij.
inline HMat cofactor(const HMat& m) {
  HMat c(m.n);
  switch (m.n) {
    case 1:
      c(0, 0) = 1.0;
      break;
    case 2:
      c(0, 0) = m(1, 1);
      c(0, 1) = -m(1, 0);
      c(1, 0) = -m(0, 1);
      c(1, 1) = m(0, 0);
      break;
    case 3:
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          const int r0 = (i + 1) % 3, r1 = (i + 2) % 3, c0 = (j + 1) % 3, c1 = (j + 2) % 3;
          // Cyclic index choice absorbs the (-1)^{i+j} sign for 3x3.
          c(i, j) = m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0);
        }
      }
      break;
    default:
      throw std::invalid_argument("cofactor: n must be <= 3");
  }
  return c;
}

inline HMat adjugate(const HMat& m) { return cofactor(m).transpose(); }

inline HMat inverse(const HMat& m) {
  const cd d = det(m);
  if (d == cd{}) throw std::domain_error("inverse: singular matrix");
  return (1.0 / d) * adjugate(m);
}

/// Eigenvalues of a Hermitian matrix, ascending. Closed form for n <= 3.
inline std::array<double, 3> hermitian_eigenvalues(const HMat& m) {
  std::array<double, 3> ev{0.0, 0.0, 0.0};
  if (m.n == 1) {
    ev[0] = m(0, 0).real();
    return ev;
  }
  if (m.n == 2) {
    const double a = m(0, 0).real(), d = m(1, 1).real();
    const double mid = 0.5 * (a + d);
    const double rad = std::hypot(0.5 * (a - d), std::abs(m(0, 1)));
    ev[0] = mid - rad;
    ev[1] = mid + rad;
    return ev;
  }
  const double p1 = std::norm(m(0, 1)) + std::norm(m(0, 2)) + std::norm(m(1, 2));
  const double q = m.trace().real() / 3.0;
  const double d0 = m(0, 0).real() - q, d1 = m(1, 1).real() - q, d2 = m(2, 2).real() - q;
  const double p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
  if (p2 <= 0.0) {
    ev = {q, q, q};
    return ev;
  }
  const double p = std::sqrt(p2 / 6.0);
  HMat B = m;
  for (int i = 0; i < 3; ++i) B(i, i) -= q;
  B *= cd(1.0 / p);
  const double r = std::clamp(0.5 * det(B).real(), -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e_hi = q + 2.0 * p * std::cos(phi);
  const double e_lo = q + 2.0 * p * std::cos(phi + 2.0 * kPi / 3.0);
  ev = {e_lo, 3.0 * q - e_hi - e_lo, e_hi};
  return ev;
}

inline double min_eig(const HMat& m) { return hermitian_eigenvalues(m)[0]; }
inline double max_eig(const HMat& m) { return hermitian_eigenvalues(m)[m.n - 1]; }

inline bool is_degenerate(const HMat& m) {
  const auto ev = hermitian_eigenvalues(m);
  const double hi = ev[m.n - 1];
  return !(hi > 0.0) || ev[0] < kDegeneracyRatio * hi;
}

/// psi = det(g) g^{-T} (frozen convention), i.e. the cofactor matrix of g.
inline HMat psi_from_metric(const HMat& g, const oracle::Convention& conv) {
  return conv.transpose ? cofactor(g) : adjugate(g);
}

/// Inverse of psi_from_metric: g = det(psi)^{1/(n-1)} psi^{-T}.
inline HMat metric_from_psi(const HMat& psi, const oracle::Convention& conv) {
  const int n = psi.n;
  const double d = det(psi).real();
  const double scale = std::pow(d, 1.0 / (n - 1)) / d;
  HMat c = conv.transpose ? cofactor(psi) : adjugate(psi);
  return scale * c;
}

/// One n x n Hermitian matrix per grid point.
struct HermitianField {
  GridPtr grid;
  int n = 0;
  std::vector<HMat> data;

  HermitianField() = default;
  HermitianField(GridPtr g, int dim) : grid(std::move(g)), n(dim), data(grid->size(), HMat(dim)) {}

  static HermitianField constant(GridPtr g, const HMat& m) {
    HermitianField f(std::move(g), m.n);
    std::fill(f.data.begin(), f.data.end(), m);
    return f;
  }

  std::size_t size() const { return data.size(); }
  HMat& operator[](std::size_t p) { return data[p]; }
  const HMat& operator[](std::size_t p) const { return data[p]; }

  double max_hermitian_defect() const {
    double m = 0.0;
    for (const auto& h : data) m = std::max(m, h.hermitian_defect() / std::max(1.0, h.max_abs()));
    return m;
  }
};

/// Throws PositivityLost at the first degenerate point.
inline void require_positive(const HermitianField& f) {
  for (std::size_t p = 0; p < f.size(); ++p) {
    if (is_degenerate(f[p])) throw PositivityLost(p, min_eig(f[p]));
  }
}

template <class F>
HermitianField map_points(const HermitianField& in, F&& f) {
  HermitianField out(in.grid, in.n);
  for (std::size_t p = 0; p < in.size(); ++p) out[p] = f(in[p]);
  return out;
}

template <class F>
ScalarField reduce_points(const HermitianField& in, F&& f) {
  ScalarField out(in.grid);
  for (std::size_t p = 0; p < in.size(); ++p) out[p] = f(in[p]);
  return out;
}

inline HermitianField metric_from_psi(const HermitianField& psi,
                                      const oracle::Convention& conv) {
  require_positive(psi);
  return map_points(psi, [&](const HMat& m) { return metric_from_psi(m, conv); });
}

inline HermitianField psi_from_metric(const HermitianField& g, const oracle::Convention& conv) {
  require_positive(g);
  return map_points(g, [&](const HMat& m) { return psi_from_metric(m, conv); });
}

inline ScalarField min_eig(const HermitianField& f) {
  return reduce_points(f, [](const HMat& m) { return min_eig(m); });
}

inline ScalarField det(const HermitianField& f) {
  return reduce_points(f, [](const HMat& m) { return det(m).real(); });
}

inline ScalarField logdet(const HermitianField& f) {
  require_positive(f);
  return reduce_points(f, [](const HMat& m) { return std::log(det(m).real()); });
}

inline HermitianField inv(const HermitianField& f) {
  require_positive(f);
  return map_points(f, [](const HMat& m) { return inverse(m); });
}

}  // namespace hermflow
