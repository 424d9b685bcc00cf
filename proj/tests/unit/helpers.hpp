#pragma once

#include <Eigen/Dense>

#include <random>

#include "hermflow/hermflow.hpp"

namespace hermflow::testing {

inline GridPtr reduced_grid(int n, int r = 16, int active = 2) {
  std::vector<int> res(2 * n, 1);
  for (int j = 0; j < active; ++j) res[j] = r;
  return make_grid(n, res);
}

inline ScalarField cos_x1(const GridPtr& g, double amp = 1.0) {
  return ScalarField::from_function(g, [amp](std::span<const double> x) { return amp * std::cos(2.0 * kPi * x[0]); });
}

inline Eigen::MatrixXcd random_hermitian(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Eigen::MatrixXcd A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = cd(d(rng), d(rng));
  return scale * 0.5 * (A + A.adjoint());
}

inline double max_abs(const ScalarField& f) { return f.max_abs(); }

}  // namespace hermflow::testing
