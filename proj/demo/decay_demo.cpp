// Smallest end-to-end use of the library: evolve a single Fourier mode on the
// n = 2 torus and compare the measured decay of |Q|^2 with 2 lambda1.

#include <cstdio>

#include "hermflow/hermflow.hpp"

int main() {
  using namespace hermflow;
  const auto grid = make_grid(2, {16, 16, 1, 1});
  const auto u0 = ScalarField::from_function(grid, [](std::span<const double> x) {
    return 1e-6 * std::cos(2.0 * kPi * x[0]);
  });

  FlowParams params;
  params.T_max = 1.0;
  const FlowRun run = run_flow(u0, params);

  const double lambda1 = spectrum(L_flat(grid)).lambda1;
  const DecayFit fit = decay_fit(run, lambda1);
  std::printf("status      %s after %ld steps, t = %.4f\n", to_string(run.final_state.status),
              run.final_state.steps, run.final_state.t);
  std::printf("fitted rate %.6f\n2 lambda1   %.6f\nR^2         %.12f\n", fit.rate, 2.0 * lambda1, fit.r_squared);
  return fit.matches_linear_rate() ? 0 : 1;
}
