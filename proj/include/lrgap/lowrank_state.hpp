#pragma once

// Construction of low-rank states from full matrices, error metrics and a plain-text checkpoint format.

#include "errors.hpp"
#include "grid.hpp"
#include "rte_model.hpp"
#include "state.hpp"
#include "weighted_linalg.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

namespace lrgap {

struct FromFullResult {
  LowRankState state;
  double delta0 = 0.0; ///< weighted norm of the discarded part f - x s v^T
  Vector singular_values;
};

/// Weighted best rank-r approximation with a deterministic sign per singular pair
/// (first non-negligible entry of each x column positive).
inline FromFullResult from_full(const Matrix& f, Index r, const SpatialGrid& grid, const AngularQuadrature& quad)
{
  const WeightVector wx = WeightVector::uniform(grid.n_x, grid.dx);
  const WeightVector wmu(quad.weights);
  const WeightedSvd svd = weighted_truncated_svd(f, r, wx, wmu);

  FromFullResult out;
  out.state.x = svd.x;
  out.state.s = svd.s;
  out.state.v = svd.v;
  for (Index k = 0; k < r; ++k) {
    const auto column = out.state.x.col(k);
    const double threshold = 1e-8 * column.cwiseAbs().maxCoeff();
    for (Index i = 0; i < column.size(); ++i) {
      if (std::abs(column[i]) > threshold) {
        if (column[i] < 0.0) {
          out.state.x.col(k) *= -1.0;
          out.state.v.col(k) *= -1.0;
        }
        break;
      }
    }
  }
  const Vector& sigma = svd.singular_values;
  out.delta0 = sigma.size() > r ? sigma.tail(sigma.size() - r).norm() : 0.0;
  out.singular_values = sigma;
  return out;
}

/// Weighted norm of x s v^T; equals ||s||_F for orthonormal factors.
inline double state_norm(const LowRankState& state) { return state.s.norm(); }

struct OrthonormalityDefects {
  double x = 0.0;
  double v = 0.0;

  double max() const { return std::max(x, v); }
};

inline OrthonormalityDefects orthonormality_defects(const RteModel& model, const LowRankState& state)
{
  return {orthonormality_defect(state.x, model.wx()), orthonormality_defect(state.v, model.wmu())};
}

struct ErrorReport {
  double rel_l2_density = 0.0;
  double rel_l2_full = 0.0;
  double mass = 0.0; ///< dx * 1^T f w_mu of the approximation
  Vector sigma_spectrum; ///< weighted singular values of the reference, descending
};

/// dx * 1^T f w_mu.
inline double total_mass(const RteModel& model, const Matrix& f)
{
  return model.grid().dx * (f * model.quad().weights).sum();
}

inline ErrorReport error_report(const Matrix& approx, const Matrix& reference, const RteModel& model)
{
  detail::check_shape(model, approx, "error_report(approx)");
  detail::check_shape(model, reference, "error_report(reference)");
  const double ref_norm = weighted_norm(reference, model.wx(), model.wmu());
  const Vector rho_ref = density(model, reference);
  const double rho_ref_norm = weighted_norm(rho_ref, model.wx());
  if (!(ref_norm > 0.0) || !(rho_ref_norm > 0.0))
    throw InvalidArgument("error_report: reference has zero norm, relative errors undefined");

  ErrorReport report;
  report.rel_l2_full = weighted_norm(Matrix(approx - reference), model.wx(), model.wmu()) / ref_norm;
  report.rel_l2_density = weighted_norm(Vector(density(model, approx) - rho_ref), model.wx()) / rho_ref_norm;
  report.mass = total_mass(model, approx);
  report.sigma_spectrum = weighted_singular_values(reference, model.wx(), model.wmu());
  return report;
}

inline ErrorReport error_report(const LowRankState& approx, const Matrix& reference, const RteModel& model)
{
  return error_report(reconstruct(approx), reference, model);
}

// Checkpoint format (text, whitespace separated, values in %.17g):
//   lrgap-state 1
//   <n_x> <n_mu> <rank>
//   X  followed by n_x rows of rank values
//   S  followed by rank rows of rank values
//   V  followed by n_mu rows of rank values

namespace detail {

inline void write_block(std::ostream& out, const char* tag, const Matrix& m)
{
  out << tag << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) out << (j ? " " : "") << m(i, j);
    out << '\n';
  }
}

inline Matrix read_block(std::istream& in, const char* tag, Index rows, Index cols)
{
  std::string token;
  if (!(in >> token) || token != tag) throw InvalidArgument(std::string("read_state: expected block ") + tag);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      if (!(in >> m(i, j))) throw InvalidArgument(std::string("read_state: truncated block ") + tag);
  return m;
}

} // namespace detail

inline void write_state(std::ostream& out, const LowRankState& state)
{
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::setprecision(17);
  out << "lrgap-state 1\n" << state.x.rows() << ' ' << state.v.rows() << ' ' << state.rank() << '\n';
  detail::write_block(out, "X", state.x);
  detail::write_block(out, "S", state.s);
  detail::write_block(out, "V", state.v);
  out.flags(flags);
  out.precision(precision);
}

inline LowRankState read_state(std::istream& in)
{
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "lrgap-state" || version != 1)
    throw InvalidArgument("read_state: not an lrgap-state v1 stream");
  Index nx = 0, nmu = 0, r = 0;
  if (!(in >> nx >> nmu >> r) || nx < 1 || nmu < 1 || r < 1) throw InvalidArgument("read_state: bad header");
  LowRankState state;
  state.x = detail::read_block(in, "X", nx, r);
  state.s = detail::read_block(in, "S", r, r);
  state.v = detail::read_block(in, "V", nmu, r);
  return state;
}

} // namespace lrgap
