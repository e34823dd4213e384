// Integrates the paper_ap initial data with GAP, PSI and BUG at a few Knudsen numbers and prints
// the errors against the full reference and against the diffusion limit.
//
//   ./gap_vs_reference [n_x] [n_mu] [rank]

#include "lrgap/lrgap.hpp"

#include <cstdio>
#include <cstdlib>

using namespace lrgap;

int main(int argc, char** argv)
{
  const Index nx = argc > 1 ? std::atol(argv[1]) : 200;
  const Index nmu = argc > 2 ? std::atol(argv[2]) : 32;
  const Index rank = argc > 3 ? std::atol(argv[3]) : 5;
  const double t_final = 1.0;

  const SpatialGrid grid = uniform_grid(0.0, 2.0, nx);
  const AngularQuadrature quad = gauss_legendre(nmu);
  Matrix f0(nx, nmu);
  for (Index i = 0; i < nx; ++i)
    for (Index j = 0; j < nmu; ++j) {
      const double x = grid.points[i];
      const double mu = quad.nodes[j];
      f0(i, j) = ((x - 1) * (x - 1) + 1) * (1 + mu * mu);
    }
  const LowRankState initial = from_full(f0, rank, grid, quad).state;

  StepConfig cfg;
  cfg.dt = 0.1;
  std::printf("%8s %6s %14s %14s\n", "eps", "scheme", "err vs ref", "err vs limit");
  for (double eps : {1.0, 1e-2, 1e-4}) {
    const RteModel model(grid, quad, eps);
    StepConfig whole = cfg;
    whole.dt = t_final;
    const Matrix ref = reference_step(model, f0, whole);
    const Vector limit = diffusion_limit_density(model, density(model, f0), t_final);
    for (Scheme s : {Scheme::gap, Scheme::psi, Scheme::bug}) {
      const char* name = s == Scheme::gap ? "gap" : s == Scheme::psi ? "psi" : "bug";
      try {
        const auto result = integrate(model, initial, s, cfg, static_cast<Index>(t_final / cfg.dt + 0.5));
        const ErrorReport e = error_report(result.full, ref, model);
        const Vector rho = density(model, result.full);
        const double vs_limit = weighted_norm(Vector(rho - limit), model.wx()) / weighted_norm(limit, model.wx());
        std::printf("%8.0e %6s %14.3e %14.3e\n", eps, name, e.rel_l2_full, vs_limit);
      } catch (const Error& e) {
        std::printf("%8.0e %6s   failed: %s\n", eps, name, e.what());
      }
    }
  }
}
