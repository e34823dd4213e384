#pragma once

// Spatial grid, periodic finite-difference stencils and Gauss-Legendre angular quadrature.

#include "errors.hpp"
#include "types.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace lrgap {

/// Uniform periodic grid on [a, b): the right endpoint is identified with `a`.
struct SpatialGrid {
  double a = 0.0;
  double b = 1.0;
  Index n_x = 0;
  double dx = 0.0;
  Vector points;

  double length() const { return b - a; }
};

inline SpatialGrid uniform_grid(double a, double b, Index n_x)
{
  detail::require(std::isfinite(a) && std::isfinite(b) && b > a,
                  "uniform_grid: require b > a, got a=" + std::to_string(a) + " b=" + std::to_string(b));
  detail::require(n_x >= 2, "uniform_grid: require n_x >= 2, got " + std::to_string(n_x));

  SpatialGrid grid;
  grid.a = a;
  grid.b = b;
  grid.n_x = n_x;
  grid.dx = (b - a) / static_cast<double>(n_x);
  grid.points.resize(n_x);
  for (Index i = 0; i < n_x; ++i) grid.points[i] = a + static_cast<double>(i) * grid.dx;
  return grid;
}

/// Nodes in ascending order on (-1, 1) with positive weights summing to 2.
struct AngularQuadrature {
  Vector nodes;
  Vector weights;

  Index size() const { return nodes.size(); }
};

namespace detail {

/// P_n(x) and P_n'(x) by the three-term recurrence.
inline std::pair<double, double> legendre_with_derivative(Index n, double x)
{
  double p_prev = 1.0;
  double p = x;
  for (Index k = 2; k <= n; ++k) {
    const double kk = static_cast<double>(k);
    const double p_next = ((2.0 * kk - 1.0) * x * p - (kk - 1.0) * p_prev) / kk;
    p_prev = p;
    p = p_next;
  }
  const double nn = static_cast<double>(n);
  const double dp = nn * (x * p - p_prev) / (x * x - 1.0);
  return {p, dp};
}

} // namespace detail

/// n-point Gauss-Legendre rule on [-1, 1].
///
/// Roots are found by Newton iteration on P_n from Chebyshev-like initial guesses
/// cos(pi (4i+3) / (4n+2)); each root is refined until the update drops below 1e-15
/// (at most 100 iterations) and mirrored to enforce exact symmetry.
inline AngularQuadrature gauss_legendre(Index n)
{
  detail::require(n >= 1, "gauss_legendre: require n >= 1, got " + std::to_string(n));

  AngularQuadrature quad;
  quad.nodes.resize(n);
  quad.weights.resize(n);
  if (n == 1) {
    quad.nodes[0] = 0.0;
    quad.weights[0] = 2.0;
    return quad;
  }

  const Index half = (n + 1) / 2;
  const double nn = static_cast<double>(n);
  for (Index i = 0; i < half; ++i) {
    // i-th largest root
    double x = std::cos(std::numbers::pi * (4.0 * static_cast<double>(i) + 3.0) / (4.0 * nn + 2.0));
    for (int iter = 0; iter < 100; ++iter) {
      const auto [p, dp] = detail::legendre_with_derivative(n, x);
      const double step = p / dp;
      x -= step;
      if (std::abs(step) <= 1e-15) break;
    }
    const auto [p, dp] = detail::legendre_with_derivative(n, x);
    (void)p;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    const Index hi = n - 1 - i;
    if (hi == i) { // middle node of odd rules
      quad.nodes[i] = 0.0;
      quad.weights[i] = w;
    } else {
      quad.nodes[hi] = x;
      quad.nodes[i] = -x;
      quad.weights[hi] = w;
      quad.weights[i] = w;
    }
  }
  return quad;
}

/// Centered first-derivative and three-point second-derivative stencils, periodic wrap.
struct DiffMatrices {
  SparseMatrix d_x;
  SparseMatrix d_xx;
};

inline DiffMatrices build_diff_matrices(const SpatialGrid& grid)
{
  detail::require(grid.n_x >= 2 && grid.dx > 0.0, "build_diff_matrices: invalid grid");
  const Index n = grid.n_x;
  const double h = grid.dx;

  std::vector<Triplet> first;
  std::vector<Triplet> second;
  first.reserve(2 * n);
  second.reserve(3 * n);
  for (Index i = 0; i < n; ++i) {
    const Index right = (i + 1) % n;
    const Index left = (i + n - 1) % n;
    first.emplace_back(i, right, 1.0 / (2.0 * h));
    first.emplace_back(i, left, -1.0 / (2.0 * h));
    second.emplace_back(i, i, -2.0 / (h * h));
    second.emplace_back(i, right, 1.0 / (h * h));
    second.emplace_back(i, left, 1.0 / (h * h));
  }

  DiffMatrices diff;
  diff.d_x.resize(n, n);
  diff.d_xx.resize(n, n);
  diff.d_x.setFromTriplets(first.begin(), first.end());
  diff.d_xx.setFromTriplets(second.begin(), second.end());
  diff.d_x.prune(0.0);
  return diff;
}

} // namespace lrgap
