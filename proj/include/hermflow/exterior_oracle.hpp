#pragma once

// Brute-force exterior algebra of (p,q)-forms with constant coefficients on C^n.
//
// This is the reference that pins the combinatorial constants of the psi
// machinery (powers of sqrt(-1), factorial prefactor, epsilon signs). It is
// dense and slow; the flow itself only uses the closed form it certifies.
//
// Letters: index a in [0, n) is dz^{a+1}, index n + a is dzbar^{a+1}. A
// monomial is a bitmask over 2n letters, canonically ordered by increasing
// letter index, i.e. dz^I ^ dzbar^J.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace hermflow::oracle {

using cd = std::complex<double>;
using Mask = std::uint32_t;

inline std::vector<Mask> subsets(int n, int k) {
  std::vector<Mask> out;
  for (Mask m = 0; m < (Mask{1} << n); ++m) {
    if (std::popcount(m) == k) out.push_back(m);
  }
  return out;
}

inline int binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  int r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline double factorial(int k) {
  double r = 1.0;
  for (int i = 2; i <= k; ++i) r *= i;
  return r;
}

/// Sorts a letter sequence into canonical order. Returns {mask, sign}; sign is
/// 0 when a letter repeats.
inline std::pair<Mask, int> canonicalize(const std::vector<int>& letters) {
  Mask mask = 0;
  for (int l : letters) {
    if (mask & (Mask{1} << l)) return {0, 0};
    mask |= Mask{1} << l;
  }
  int inversions = 0;
  for (std::size_t i = 0; i < letters.size(); ++i) {
    for (std::size_t j = i + 1; j < letters.size(); ++j) {
      if (letters[i] > letters[j]) ++inversions;
    }
  }
  return {mask, inversions % 2 == 0 ? 1 : -1};
}

/// Constant-coefficient (p,q)-form, coefficients indexed by (I, J) over
/// increasing multi-indices.
class PQForm {
 public:
  PQForm(int n, int p, int q) : n_(n), p_(p), q_(q) {
    if (n < 1 || n > 8 || p < 0 || q < 0 || p > n || q > n) {
      throw std::invalid_argument("PQForm: bidegree out of range");
    }
    rows_ = subsets(n, p);
    cols_ = subsets(n, q);
    coeffs_.assign(rows_.size() * cols_.size(), cd{});
  }

  int n() const { return n_; }
  int p() const { return p_; }
  int q() const { return q_; }
  std::size_t count() const { return coeffs_.size(); }
  const std::vector<Mask>& holo_basis() const { return rows_; }
  const std::vector<Mask>& antiholo_basis() const { return cols_; }
  const std::vector<cd>& coefficients() const { return coeffs_; }

  cd& at(Mask I, Mask J) { return coeffs_[index(I, J)]; }
  cd at(Mask I, Mask J) const { return coeffs_[index(I, J)]; }
  /// Coefficient addressed by a full 2n-letter mask.
  cd& at_letters(Mask letters) { return at(letters & low(), letters >> n_); }
  cd at_letters(Mask letters) const { return at(letters & low(), letters >> n_); }

  PQForm& operator+=(const PQForm& o) {
    check_same(o);
    for (std::size_t i = 0; i < coeffs_.size(); ++i) coeffs_[i] += o.coeffs_[i];
    return *this;
  }
  PQForm& operator*=(cd c) {
    for (auto& v : coeffs_) v *= c;
    return *this;
  }
  friend PQForm operator+(PQForm a, const PQForm& b) { return a += b; }
  friend PQForm operator*(cd c, PQForm a) { return a *= c; }

  double max_abs_diff(const PQForm& o) const {
    check_same(o);
    double m = 0.0;
    for (std::size_t i = 0; i < coeffs_.size(); ++i) m = std::max(m, std::abs(coeffs_[i] - o.coeffs_[i]));
    return m;
  }

  template <class F>
  void for_each_nonzero(F&& f) const {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      for (std::size_t c = 0; c < cols_.size(); ++c) {
        const cd v = coeffs_[r * cols_.size() + c];
        if (v != cd{}) f(rows_[r] | (cols_[c] << n_), v);
      }
    }
  }

 private:
  Mask low() const { return (Mask{1} << n_) - 1; }
  std::size_t index(Mask I, Mask J) const {
    const auto r = std::lower_bound(rows_.begin(), rows_.end(), I);
    const auto c = std::lower_bound(cols_.begin(), cols_.end(), J);
    if (r == rows_.end() || *r != I || c == cols_.end() || *c != J) {
      throw std::out_of_range("PQForm: multi-index not in basis");
    }
    return static_cast<std::size_t>(r - rows_.begin()) * cols_.size() +
           static_cast<std::size_t>(c - cols_.begin());
  }
  void check_same(const PQForm& o) const {
    if (n_ != o.n_ || p_ != o.p_ || q_ != o.q_) throw std::invalid_argument("PQForm: bidegree mismatch");
  }

  int n_, p_, q_;
  std::vector<Mask> rows_, cols_;
  std::vector<cd> coeffs_;
};

/// Exterior product by explicit multi-index merge with permutation signs.
inline PQForm wedge(const PQForm& A, const PQForm& B) {
  if (A.n() != B.n()) throw std::invalid_argument("wedge: dimension mismatch");
  const int n = A.n();
  if (A.p() + B.p() > n || A.q() + B.q() > n) throw std::invalid_argument("wedge: degree overflow");
  PQForm out(n, A.p() + B.p(), A.q() + B.q());
  A.for_each_nonzero([&](Mask ma, cd va) {
    B.for_each_nonzero([&](Mask mb, cd vb) {
      if (ma & mb) return;
      std::vector<int> seq;
      for (int l = 0; l < 2 * n; ++l) if (ma & (Mask{1} << l)) seq.push_back(l);
      for (int l = 0; l < 2 * n; ++l) if (mb & (Mask{1} << l)) seq.push_back(l);
      const auto [mask, sign] = canonicalize(seq);
      out.at_letters(mask) += static_cast<double>(sign) * va * vb;
    });
  });
  return out;
}

inline PQForm constant_form(int n, cd value = 1.0) {
  PQForm f(n, 0, 0);
  f.at(0, 0) = value;
  return f;
}

/// dz^{a+1} or dzbar^{a+1} as a 1-form.
inline PQForm dz(int n, int a) {
  PQForm f(n, 1, 0);
  f.at(Mask{1} << a, 0) = 1.0;
  return f;
}
inline PQForm dzbar(int n, int a) {
  PQForm f(n, 0, 1);
  f.at(0, Mask{1} << a) = 1.0;
  return f;
}

/// sqrt(-1) sum_{ab} M_{ab} dz^a ^ dzbar^b.
inline PQForm form_of_11(const Eigen::MatrixXcd& M) {
  const int n = static_cast<int>(M.rows());
  PQForm f(n, 1, 1);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) f.at(Mask{1} << a, Mask{1} << b) = cd(0.0, 1.0) * M(a, b);
  }
  return f;
}

inline PQForm fundamental_form(const Eigen::MatrixXcd& g) { return form_of_11(g); }

inline PQForm flat_omega(int n) { return form_of_11(Eigen::MatrixXcd::Identity(n, n)); }

inline PQForm power(const PQForm& f, int k) {
  PQForm out = constant_form(f.n());
  for (int i = 0; i < k; ++i) out = wedge(out, f);
  return out;
}

/// Second-order jet of a scalar at a point.
struct ScalarJet2 {
  double value = 0.0;
  std::vector<cd> dz;
  std::vector<cd> dzbar;
  Eigen::MatrixXcd hess;  // v_{a bbar}

  static ScalarJet2 from_hessian(const Eigen::MatrixXcd& H) {
    ScalarJet2 j;
    j.dz.assign(H.rows(), cd{});
    j.dzbar.assign(H.rows(), cd{});
    j.hess = H;
    return j;
  }
};

/// sqrt(-1) ddbar(v B) for constant B, i.e. (sqrt(-1) ddbar v) ^ B.
inline PQForm i_ddbar_times_form(const ScalarJet2& jet, const PQForm& B) {
  return wedge(form_of_11(jet.hess), B);
}

// ---- the psi basis -----------------------------------------------------------

/// (sqrt(-1))^{n-1} (n-1)!
inline cd psi_prefactor(int n) {
  cd p = 1.0;
  for (int i = 0; i < n - 1; ++i) p *= cd(0.0, 1.0);
  return p * factorial(n - 1);
}

inline int psi_epsilon(int i, int j) { return i <= j ? 1 : -1; }

/// Canonical mask and reordering sign of dz^1^dzbar^1^...^dz^n^dzbar^n with
/// dz^{i+1} and dzbar^{j+1} omitted.
inline std::pair<Mask, int> psi_basis_monomial(int n, int i, int j) {
  std::vector<int> seq;
  for (int a = 0; a < n; ++a) {
    if (a != i) seq.push_back(a);
    if (a != j) seq.push_back(n + a);
  }
  return canonicalize(seq);
}

/// Coefficient matrix of an (n-1,n-1)-form in the psi basis.
inline Eigen::MatrixXcd psi_of(const PQForm& phi, double hermitian_tol = 1e-12) {
  const int n = phi.n();
  if (phi.p() != n - 1 || phi.q() != n - 1) throw std::invalid_argument("psi_of: need an (n-1,n-1)-form");
  const cd pref = psi_prefactor(n);
  Eigen::MatrixXcd psi(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const auto [mask, sign] = psi_basis_monomial(n, i, j);
      psi(i, j) = phi.at_letters(mask) * static_cast<double>(sign * psi_epsilon(i, j)) / pref;
    }
  }
  const double defect = (psi - psi.adjoint()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
  if (defect > hermitian_tol * scale) {
    throw std::domain_error("psi_of: non-Hermitian coefficient matrix (malformed form)");
  }
  return psi;
}

inline PQForm form_of_psi(const Eigen::MatrixXcd& psi) {
  const int n = static_cast<int>(psi.rows());
  const cd pref = psi_prefactor(n);
  PQForm phi(n, n - 1, n - 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const auto [mask, sign] = psi_basis_monomial(n, i, j);
      phi.at_letters(mask) = pref * static_cast<double>(sign * psi_epsilon(i, j)) * psi(i, j);
    }
  }
  return phi;
}

// ---- conventions -------------------------------------------------------------

/// Closed-form flat-background update psi(u) = I + c_n [ (tr H) I - H^T ]
/// (or with H when transpose is false), H the complex Hessian of u.
struct Convention {
  int n = 2;
  double c_n = 1.0;
  bool transpose = true;

  template <class Mat>
  Mat delta_psi(const Mat& H) const {
    Mat out = transpose ? Mat(-H.transpose()) : Mat(-H);
    const auto tr = H.trace();
    for (int i = 0; i < n; ++i) out(i, i) += tr;
    return c_n * out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    const cd pref = psi_prefactor(n);
    j["n"] = n;
    j["c_n"] = c_n;
    j["transpose"] = transpose;
    j["update_map"] = transpose ? "c_n * (tr(H) I - H^T)" : "c_n * (tr(H) I - H)";
    j["prefactor"] = {pref.real(), pref.imag()};
    j["epsilon_rule"] = "eps_ij = +1 if i <= j else -1";
    j["basis"] = "dz1^dzb1^...^dzn^dzbn with dz_i and dzb_j omitted";
    j["metric_relation"] = transpose ? "psi = det(g) g^{-T}" : "psi = det(g) g^{-1}";
    return j;
  }
};

/// Constants frozen for the fast path; checked against the oracle in tests and
/// by `hermflow verify`.
inline Convention frozen_convention(int n) {
  if (n != 2 && n != 3) throw std::invalid_argument("frozen_convention: n must be 2 or 3");
  return Convention{n, 1.0 / (n - 1), true};
}

/// Delta-psi of a Hessian by brute force: psi_of(sqrt(-1) ddbar(u) ^ omega^{n-2}).
inline Eigen::MatrixXcd brute_force_delta_psi(const Eigen::MatrixXcd& H) {
  const int n = static_cast<int>(H.rows());
  const PQForm B = power(flat_omega(n), n - 2);
  return psi_of(i_ddbar_times_form(ScalarJet2::from_hessian(H), B));
}

/// Derives c_n and the transpose choice from the brute-force oracle.
inline Convention psi_update_constant(int n) {
  if (n != 2 && n != 3) throw std::invalid_argument("psi_update_constant: n must be 2 or 3");
  const Eigen::MatrixXcd psi0 = psi_of(power(flat_omega(n), n - 1));
  if ((psi0 - Eigen::MatrixXcd::Identity(n, n)).cwiseAbs().maxCoeff() > 1e-13) {
    throw std::logic_error("oracle: psi(omega^{n-1}) is not the identity");
  }
  Eigen::MatrixXcd e00 = Eigen::MatrixXcd::Zero(n, n);
  e00(0, 0) = 1.0;
  const double c = brute_force_delta_psi(e00)(1, 1).real();

  Eigen::MatrixXcd H(n, n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a == b) H(a, b) = 0.3 + 0.7 * a;
      else if (a < b) H(a, b) = cd(0.2 + 0.1 * a, 0.5 - 0.2 * b);
      else H(a, b) = std::conj(H(b, a));
    }
  }
  const Eigen::MatrixXcd D = brute_force_delta_psi(H);
  const Convention with_t{n, c, true}, without_t{n, c, false};
  const double rt = (D - with_t.delta_psi(H)).cwiseAbs().maxCoeff();
  const double rn = (D - without_t.delta_psi(H)).cwiseAbs().maxCoeff();
  if (std::min(rt, rn) > 1e-13) throw std::logic_error("oracle: update map not of the expected shape");
  return rt <= rn ? with_t : without_t;
}

// ---- derivative bookkeeping for (n-1,n-1)-forms -------------------------------

/// Contribution of d_{a}(psi_ij) (or dbar_b, or d_a dbar_b) to one output
/// coefficient of the differentiated form.
struct DerivTerm {
  std::size_t out;
  int i, j;
  int a, b;  // a: holomorphic derivative index (-1 if none), b: antiholomorphic
  cd weight;
};

struct DerivTables {
  std::size_t d_count = 0;     // coefficients of the (n, n-1) part
  std::size_t dbar_count = 0;  // coefficients of the (n-1, n) part
  std::size_t ddbar_count = 0; // coefficients of the (n, n) part
  std::vector<DerivTerm> d, dbar, ddbar;
};

/// Sign/weight tables for d, dbar and ddbar of sum psi_ij(x) * basis_ij,
/// produced by wedging the oracle's basis forms with dz^a, dzbar^b.
inline DerivTables derivative_tables(int n) {
  DerivTables t;
  auto index_of = [](const PQForm& f, Mask letters) {
    const auto& rows = f.holo_basis();
    const auto& cols = f.antiholo_basis();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < cols.size(); ++c) {
        if ((rows[r] | (cols[c] << f.n())) == letters) return r * cols.size() + c;
      }
    }
    throw std::logic_error("derivative_tables: monomial outside basis");
  };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      Eigen::MatrixXcd e = Eigen::MatrixXcd::Zero(n, n);
      e(i, j) = 1.0;
      const PQForm basis = form_of_psi(e);
      for (int a = 0; a < n; ++a) {
        const PQForm f = wedge(dz(n, a), basis);
        t.d_count = f.count();
        f.for_each_nonzero([&](Mask m, cd v) { t.d.push_back({index_of(f, m), i, j, a, -1, v}); });
        const PQForm g = wedge(dzbar(n, a), basis);
        t.dbar_count = g.count();
        g.for_each_nonzero([&](Mask m, cd v) { t.dbar.push_back({index_of(g, m), i, j, -1, a, v}); });
        for (int b = 0; b < n; ++b) {
          const PQForm h = wedge(dz(n, a), wedge(dzbar(n, b), basis));
          t.ddbar_count = h.count();
          h.for_each_nonzero([&](Mask m, cd v) { t.ddbar.push_back({index_of(h, m), i, j, a, b, v}); });
        }
      }
    }
  }
  return t;
}

}  // namespace hermflow::oracle
