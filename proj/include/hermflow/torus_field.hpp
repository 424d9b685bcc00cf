#pragma once

// Flat complex tori C^n / Z^{2n} sampled on uniform grids, with unitary-mean
// Fourier transforms and spectrally exact complex derivatives.
//
// Real axes are laid out as (x_1, ..., x_n, y_1, ..., y_n) with z_a = x_a + i y_a,
// so axis a is Re z_a and axis n + a is Im z_a. Field storage is row-major in
// that axis order (last axis fastest).

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace hermflow {

using cd = std::complex<double>;
using Spectrum = std::vector<cd>;

inline constexpr double kPi = std::numbers::pi;

class TorusGrid;
using GridPtr = std::shared_ptr<const TorusGrid>;

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Owning wrapper around an FFTW plan. Planning is serialized (the FFTW planner
// is not thread-safe); execution through fftw_execute_dft on caller buffers is.
class FftPlan {
 public:
  FftPlan() = default;
  FftPlan(const std::vector<int>& dims, int sign) {
    std::size_t total = 1;
    for (int d : dims) total *= static_cast<std::size_t>(d);
    std::vector<cd> scratch(total);
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    // FFTW_ESTIMATE keeps plan selection independent of timing, so repeated
    // runs execute the same codelets.
    plan_ = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), buf, buf, sign,
                          FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (plan_ == nullptr) throw std::runtime_error("fftw_plan_dft failed");
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
  FftPlan(FftPlan&& o) noexcept : plan_(std::exchange(o.plan_, nullptr)) {}
  FftPlan& operator=(FftPlan&& o) noexcept {
    if (this != &o) {
      reset();
      plan_ = std::exchange(o.plan_, nullptr);
    }
    return *this;
  }
  ~FftPlan() { reset(); }

  void execute(cd* in, cd* out) const {
    fftw_execute_dft(plan_, reinterpret_cast<fftw_complex*>(in),
                     reinterpret_cast<fftw_complex*>(out));
  }

 private:
  void reset() {
    if (plan_ != nullptr) {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
      plan_ = nullptr;
    }
  }
  fftw_plan plan_ = nullptr;
};

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace detail

/// Uniform grid on the flat torus with per-axis periods, plus the Fourier
/// wave-vector tables every spectral operation reads.
class TorusGrid {
 public:
  TorusGrid(int n, std::vector<int> resolution, std::vector<double> periods)
      : n_(n), resolution_(std::move(resolution)), periods_(std::move(periods)) {
    if (n_ != 2 && n_ != 3) {
      throw std::invalid_argument("complex dimension must be 2 or 3, got " + std::to_string(n_));
    }
    const int axes = 2 * n_;
    if (static_cast<int>(resolution_.size()) != axes) {
      throw std::invalid_argument("resolution needs " + std::to_string(axes) + " entries");
    }
    if (periods_.empty()) periods_.assign(axes, 1.0);
    if (static_cast<int>(periods_.size()) != axes) {
      throw std::invalid_argument("periods needs " + std::to_string(axes) + " entries");
    }
    for (int j = 0; j < axes; ++j) {
      const int r = resolution_[j];
      if (!(periods_[j] > 0.0) || !std::isfinite(periods_[j])) {
        throw std::invalid_argument("period on axis " + std::to_string(j) + " must be positive");
      }
      if (r == 1) continue;
      if (!detail::is_power_of_two(r)) {
        throw std::invalid_argument("resolution on axis " + std::to_string(j) +
                                    " is not a power of two: " + std::to_string(r));
      }
      if (r < 4) {
        throw std::invalid_argument("active axis " + std::to_string(j) + " needs resolution >= 4");
      }
      active_.push_back(j);
    }
    size_ = 1;
    for (int r : resolution_) size_ *= static_cast<std::size_t>(r);
    volume_ = 1.0;
    for (double p : periods_) volume_ *= p;

    strides_.assign(axes, 1);
    for (int j = axes - 2; j >= 0; --j) strides_[j] = strides_[j + 1] * resolution_[j + 1];

    wave_.resize(size_ * axes);
    kappa_.resize(size_ * axes);
    kappa_odd_.resize(size_ * axes);
    keep_.resize(size_);
    kappa_sq_.resize(size_);
    for (std::size_t m = 0; m < size_; ++m) {
      bool keep = true;
      double ksq = 0.0;
      for (int j = 0; j < axes; ++j) {
        const int r = resolution_[j];
        const int idx = static_cast<int>((m / strides_[j]) % static_cast<std::size_t>(r));
        const int k = idx < (r + 1) / 2 ? idx : idx - r;
        const double kap = k / periods_[j];
        wave_[m * axes + j] = k;
        kappa_[m * axes + j] = kap;
        // Odd derivatives drop the unpaired Nyquist mode.
        kappa_odd_[m * axes + j] = (r > 1 && 2 * k == -r) ? 0.0 : kap;
        ksq += kap * kap;
        if (std::abs(k) > r / 3) keep = false;
      }
      keep_[m] = keep;
      kappa_sq_[m] = ksq;
    }
    forward_ = detail::FftPlan(resolution_, FFTW_FORWARD);
    inverse_ = detail::FftPlan(resolution_, FFTW_BACKWARD);
  }

  int n() const { return n_; }
  int axes() const { return 2 * n_; }
  const std::vector<int>& resolution() const { return resolution_; }
  const std::vector<double>& periods() const { return periods_; }
  const std::vector<int>& active_axes() const { return active_; }
  std::size_t size() const { return size_; }
  double volume() const { return volume_; }
  std::size_t stride(int axis) const { return strides_[axis]; }

  static int re_axis(int a) { return a; }
  int im_axis(int a) const { return n_ + a; }

  /// Integer wave number of spectral index m along an axis.
  int wave(std::size_t m, int axis) const { return wave_[m * axes() + axis]; }
  /// Wave number scaled by the period, k / P.
  double kappa(std::size_t m, int axis) const { return kappa_[m * axes() + axis]; }
  double kappa_odd(std::size_t m, int axis) const { return kappa_odd_[m * axes() + axis]; }
  double kappa_sq(std::size_t m) const { return kappa_sq_[m]; }
  /// 2/3-rule dealiasing mask.
  bool resolved(std::size_t m) const { return keep_[m]; }

  /// Coordinate of grid point p along an axis.
  double coordinate(std::size_t p, int axis) const {
    const int r = resolution_[axis];
    const auto idx = static_cast<int>((p / strides_[axis]) % static_cast<std::size_t>(r));
    return periods_[axis] * idx / r;
  }

  /// Flat spectral index of an integer wave vector (entries wrapped into range).
  std::size_t mode_index(std::span<const int> k) const {
    std::size_t m = 0;
    for (int j = 0; j < axes(); ++j) {
      const int r = resolution_[j];
      const int idx = ((k[j] % r) + r) % r;
      m += static_cast<std::size_t>(idx) * strides_[j];
    }
    return m;
  }

  void forward(cd* in, cd* out) const {
    forward_.execute(in, out);
    const double s = 1.0 / static_cast<double>(size_);
    for (std::size_t i = 0; i < size_; ++i) out[i] *= s;
  }
  void inverse(cd* in, cd* out) const { inverse_.execute(in, out); }

  bool same_shape(const TorusGrid& o) const {
    return n_ == o.n_ && resolution_ == o.resolution_ && periods_ == o.periods_;
  }

 private:
  int n_;
  std::vector<int> resolution_;
  std::vector<double> periods_;
  std::vector<int> active_;
  std::size_t size_ = 0;
  double volume_ = 1.0;
  std::vector<std::size_t> strides_;
  std::vector<int> wave_;
  std::vector<double> kappa_;
  std::vector<double> kappa_odd_;
  std::vector<double> kappa_sq_;
  std::vector<bool> keep_;
  detail::FftPlan forward_;
  detail::FftPlan inverse_;
};

inline GridPtr make_grid(int n, std::vector<int> resolution, std::vector<double> periods = {}) {
  return std::make_shared<const TorusGrid>(n, std::move(resolution), std::move(periods));
}

/// Real scalar function sampled on a grid.
class ScalarField {
 public:
  ScalarField() = default;
  explicit ScalarField(GridPtr grid, double fill = 0.0)
      : grid_(std::move(grid)), values_(grid_->size(), fill) {}
  ScalarField(GridPtr grid, std::vector<double> values)
      : grid_(std::move(grid)), values_(std::move(values)) {
    if (values_.size() != grid_->size()) throw std::invalid_argument("field size mismatch");
  }

  template <class F>
  static ScalarField from_function(GridPtr grid, F&& f) {
    ScalarField out(grid);
    std::vector<double> x(grid->axes());
    for (std::size_t p = 0; p < grid->size(); ++p) {
      for (int j = 0; j < grid->axes(); ++j) x[j] = grid->coordinate(p, j);
      out.values_[p] = f(std::span<const double>(x));
    }
    return out;
  }

  const GridPtr& grid() const { return grid_; }
  std::size_t size() const { return values_.size(); }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  double mean() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s / static_cast<double>(values_.size());
  }
  double max_abs() const {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }
  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  ScalarField& operator+=(const ScalarField& o) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ScalarField& operator-=(const ScalarField& o) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ScalarField& operator*=(double c) {
    for (double& v : values_) v *= c;
    return *this;
  }
  ScalarField& operator+=(double c) {
    for (double& v : values_) v += c;
    return *this;
  }
  friend ScalarField operator+(ScalarField a, const ScalarField& b) { return a += b; }
  friend ScalarField operator-(ScalarField a, const ScalarField& b) { return a -= b; }
  friend ScalarField operator*(double c, ScalarField a) { return a *= c; }
  friend ScalarField operator+(ScalarField a, double c) { return a += c; }

 private:
  GridPtr grid_;
  std::vector<double> values_;
};

/// Complex value per grid point (derivative intermediates).
struct ComplexField {
  GridPtr grid;
  std::vector<cd> values;

  ComplexField() = default;
  explicit ComplexField(GridPtr g) : grid(std::move(g)), values(grid->size()) {}
  ComplexField(GridPtr g, std::vector<cd> v) : grid(std::move(g)), values(std::move(v)) {}
  std::size_t size() const { return values.size(); }
};

// ---- transforms -----------------------------------------------------------

/// Fourier coefficients normalized so the zero mode equals the field mean.
inline Spectrum to_spectral(const ScalarField& f) {
  const auto& g = *f.grid();
  Spectrum buf(f.values().begin(), f.values().end());
  g.forward(buf.data(), buf.data());
  return buf;
}

inline Spectrum to_spectral(const ComplexField& f) {
  Spectrum buf = f.values;
  f.grid->forward(buf.data(), buf.data());
  return buf;
}

inline ComplexField to_physical_complex(const GridPtr& grid, Spectrum coeffs) {
  grid->inverse(coeffs.data(), coeffs.data());
  return ComplexField(grid, std::move(coeffs));
}

/// Inverse transform keeping the real part; the caller owns the symmetry of
/// the coefficients.
inline ScalarField to_physical(const GridPtr& grid, Spectrum coeffs) {
  grid->inverse(coeffs.data(), coeffs.data());
  ScalarField out(grid);
  for (std::size_t i = 0; i < coeffs.size(); ++i) out[i] = coeffs[i].real();
  return out;
}

/// Zeroes every mode outside the 2/3-rule band.
inline void dealias(const TorusGrid& g, Spectrum& coeffs) {
  for (std::size_t m = 0; m < coeffs.size(); ++m) {
    if (!g.resolved(m)) coeffs[m] = 0.0;
  }
}

inline ScalarField dealiased(const ScalarField& f) {
  auto c = to_spectral(f);
  dealias(*f.grid(), c);
  return to_physical(f.grid(), std::move(c));
}

/// L2 mean square of coefficients; equals mean(f^2) by Parseval.
inline double spectral_power(const Spectrum& c) {
  double s = 0.0;
  for (const cd& v : c) s += std::norm(v);
  return s;
}

// ---- derivative multipliers ------------------------------------------------

/// Symbol of d/dz_a at spectral index m: pi (i kx + ky).
inline cd dz_symbol(const TorusGrid& g, std::size_t m, int a) {
  return kPi * cd(g.kappa_odd(m, g.re_axis(a)), 0.0) * cd(0.0, 1.0) +
         kPi * g.kappa_odd(m, g.im_axis(a));
}
/// Symbol of d/dzbar_a: pi (i kx - ky).
inline cd dzbar_symbol(const TorusGrid& g, std::size_t m, int a) {
  return cd(0.0, kPi * g.kappa_odd(m, g.re_axis(a))) - kPi * g.kappa_odd(m, g.im_axis(a));
}

/// Symbol of d^2/(dz_a dzbar_b). Same-axis products keep the Nyquist mode so
/// the pure second derivatives are even real multipliers.
inline cd mixed_symbol(const TorusGrid& g, std::size_t m, int a, int b) {
  const int xa = g.re_axis(a), ya = g.im_axis(a), xb = g.re_axis(b), yb = g.im_axis(b);
  auto prod = [&](int i, int j) {
    return i == j ? g.kappa(m, i) * g.kappa(m, i) : g.kappa_odd(m, i) * g.kappa_odd(m, j);
  };
  // (i A + B)(i C - D) = -(AC + BD) + i (BC - AD), times pi^2.
  const double re = -(prod(xa, xb) + prod(ya, yb));
  const double im = prod(ya, xb) - prod(xa, yb);
  return kPi * kPi * cd(re, im);
}

inline Spectrum apply_symbol(const Spectrum& c, const std::vector<cd>& symbol) {
  Spectrum out(c.size());
  for (std::size_t m = 0; m < c.size(); ++m) out[m] = c[m] * symbol[m];
  return out;
}

/// Complex derivative d/dz_a, a in [0, n).
inline ComplexField d_z(const ScalarField& f, int a) {
  const auto& g = *f.grid();
  auto c = to_spectral(f);
  for (std::size_t m = 0; m < c.size(); ++m) c[m] *= dz_symbol(g, m, a);
  return to_physical_complex(f.grid(), std::move(c));
}

inline ComplexField d_zbar(const ScalarField& f, int a) {
  const auto& g = *f.grid();
  auto c = to_spectral(f);
  for (std::size_t m = 0; m < c.size(); ++m) c[m] *= dzbar_symbol(g, m, a);
  return to_physical_complex(f.grid(), std::move(c));
}

inline ComplexField d_z(const ComplexField& f, int a) {
  const auto& g = *f.grid;
  auto c = to_spectral(f);
  for (std::size_t m = 0; m < c.size(); ++m) c[m] *= dz_symbol(g, m, a);
  return to_physical_complex(f.grid, std::move(c));
}

inline ComplexField d_zbar(const ComplexField& f, int a) {
  const auto& g = *f.grid;
  auto c = to_spectral(f);
  for (std::size_t m = 0; m < c.size(); ++m) c[m] *= dzbar_symbol(g, m, a);
  return to_physical_complex(f.grid, std::move(c));
}

/// Symbol of the complex Laplacian sum_a d_a dbar_a = Delta_real / 4.
inline double laplacian_symbol(const TorusGrid& g, std::size_t m) {
  double s = 0.0;
  for (int a = 0; a < g.n(); ++a) s += mixed_symbol(g, m, a, a).real();
  return s;
}

/// Delta_C f = sum_a d^2 f / dz_a dzbar_a. Throws if the result is not real.
inline ScalarField complex_laplacian(const ScalarField& f) {
  const auto& g = *f.grid();
  auto c = to_spectral(f);
  for (std::size_t m = 0; m < c.size(); ++m) c[m] *= laplacian_symbol(g, m);
  auto z = to_physical_complex(f.grid(), std::move(c));
  ScalarField out(f.grid());
  const double scale = std::max(1.0, f.max_abs());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (std::abs(z.values[i].imag()) > 1e-10 * scale) {
      throw std::runtime_error("complex_laplacian: imaginary residue above 1e-10");
    }
    out[i] = z.values[i].real();
  }
  return out;
}

/// Cyclic shift by whole grid cells along each axis.
inline ScalarField translate(const ScalarField& f, std::span<const int> cells) {
  const auto& g = *f.grid();
  ScalarField out(f.grid());
  for (std::size_t p = 0; p < g.size(); ++p) {
    std::size_t q = 0;
    for (int j = 0; j < g.axes(); ++j) {
      const int r = g.resolution()[j];
      const auto idx = static_cast<int>((p / g.stride(j)) % static_cast<std::size_t>(r));
      q += static_cast<std::size_t>(((idx + cells[j]) % r + r) % r) * g.stride(j);
    }
    out[q] = f[p];
  }
  return out;
}

// ---- snapshot files ----------------------------------------------------------

struct SnapshotHeader {
  int n = 0;
  std::vector<int> resolution;
  std::vector<double> periods;
  std::vector<int> active_axes;
  std::string field_name;
  double time = 0.0;
};

inline nlohmann::ordered_json snapshot_header_json(const TorusGrid& g, const std::string& name,
                                                   double time) {
  nlohmann::ordered_json h;
  h["n"] = g.n();
  h["resolution"] = g.resolution();
  h["periods"] = g.periods();
  h["active_axes"] = g.active_axes();
  h["field_name"] = name;
  h["time"] = time;
  return h;
}

/// One JSON header line, then little-endian float64 values in storage order.
inline void write_snapshot(std::ostream& os, const ScalarField& f, const std::string& name,
                           double time) {
  os << snapshot_header_json(*f.grid(), name, time).dump() << '\n';
  for (double v : f.values()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    os.write(bytes, 8);
  }
}

inline void write_snapshot(const std::string& path, const ScalarField& f, const std::string& name,
                           double time) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open snapshot for writing: " + path);
  write_snapshot(os, f, name, time);
  if (!os) throw std::runtime_error("failed writing snapshot: " + path);
}

inline std::pair<ScalarField, SnapshotHeader> read_snapshot(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("snapshot: missing header line");
  const auto h = nlohmann::json::parse(line);
  SnapshotHeader hdr;
  hdr.n = h.at("n").get<int>();
  hdr.resolution = h.at("resolution").get<std::vector<int>>();
  hdr.periods = h.at("periods").get<std::vector<double>>();
  hdr.active_axes = h.at("active_axes").get<std::vector<int>>();
  hdr.field_name = h.at("field_name").get<std::string>();
  hdr.time = h.at("time").get<double>();
  auto grid = make_grid(hdr.n, hdr.resolution, hdr.periods);
  ScalarField f(grid);
  for (std::size_t i = 0; i < f.size(); ++i) {
    char bytes[8];
    if (!is.read(bytes, 8)) throw std::runtime_error("snapshot: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, bytes, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    f[i] = std::bit_cast<double>(bits);
  }
  if (!f.all_finite()) throw std::runtime_error("snapshot: non-finite values");
  return {std::move(f), std::move(hdr)};
}

inline std::pair<ScalarField, SnapshotHeader> read_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open snapshot: " + path);
  return read_snapshot(is);
}

}  // namespace hermflow
