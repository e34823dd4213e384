#pragma once

// Discrete scaled radiative transfer equation
//   dF/dt = -(1/eps) D_x F diag(mu) + (1/eps^2) (F W_mu - F),   W_mu = (1/2) w_mu 1^T,
// its Galerkin substep matrices and the Kronecker operators that propagate the factors.
// Vectorisation is column-major throughout.

#include "errors.hpp"
#include "expm.hpp"
#include "grid.hpp"
#include "spectral.hpp"
#include "state.hpp"
#include "types.hpp"
#include "weighted_linalg.hpp"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace lrgap {

class RteModel {
public:
  RteModel(SpatialGrid grid, AngularQuadrature quad, double eps)
      : grid_(std::move(grid)), quad_(std::move(quad)), eps_(eps)
  {
    if (!(eps_ > 0.0 && eps_ <= 10.0))
      throw InvalidArgument("RteModel: eps must lie in (0, 10], got " + std::to_string(eps_));
    detail::require(grid_.n_x >= 2, "RteModel: grid needs at least 2 points");
    detail::require(quad_.size() >= 1 && quad_.weights.size() == quad_.size(), "RteModel: invalid quadrature");
    diff_ = build_diff_matrices(grid_);
    wx_ = WeightVector::uniform(grid_.n_x, grid_.dx);
    wmu_ = WeightVector(quad_.weights);
    w_mu_matrix_ = 0.5 * quad_.weights * Vector::Ones(quad_.size()).transpose();
  }

  const SpatialGrid& grid() const { return grid_; }
  const AngularQuadrature& quad() const { return quad_; }
  const DiffMatrices& diff() const { return diff_; }
  double eps() const { return eps_; }
  Index n_x() const { return grid_.n_x; }
  Index n_mu() const { return quad_.size(); }
  const WeightVector& wx() const { return wx_; }
  const WeightVector& wmu() const { return wmu_; }
  const Vector& mu() const { return quad_.nodes; }
  /// (1/2) w_mu 1^T: right multiplication replaces each row by its angular average.
  const Matrix& w_mu_matrix() const { return w_mu_matrix_; }

  /// Same discretisation at another Knudsen number.
  RteModel with_eps(double eps) const { return RteModel(grid_, quad_, eps); }

private:
  SpatialGrid grid_;
  AngularQuadrature quad_;
  double eps_;
  DiffMatrices diff_;
  WeightVector wx_;
  WeightVector wmu_;
  Matrix w_mu_matrix_;
};

namespace detail {

inline void check_shape(const RteModel& model, const Matrix& f, const char* where)
{
  if (f.rows() != model.n_x() || f.cols() != model.n_mu()) {
    std::ostringstream msg;
    msg << where << ": expected " << model.n_x() << "x" << model.n_mu() << " matrix, got " << f.rows() << "x"
        << f.cols();
    throw InvalidArgument(msg.str());
  }
}

inline void check_orthonormal(const Matrix& basis, const WeightVector& w, const char* factor, double tol = 1e-8)
{
  if (basis.rows() != w.size())
    throw PreconditionViolation(std::string(factor) + " has " + std::to_string(basis.rows()) + " rows, expected " +
                                std::to_string(w.size()));
  const double defect = orthonormality_defect(basis, w);
  if (!(defect <= tol)) {
    std::ostringstream msg;
    msg << "factor " << factor << " is not orthonormal in its weighted inner product (defect " << defect << ")";
    throw PreconditionViolation(msg.str());
  }
}

/// (1/2) F w_mu, the row-wise angular average.
inline Vector angular_average(const RteModel& model, const Matrix& f) { return 0.5 * (f * model.quad().weights); }

} // namespace detail

/// Right-hand side of the semi-discrete equation.
inline Matrix full_rhs(const RteModel& model, const Matrix& f)
{
  detail::check_shape(model, f, "full_rhs");
  const double eps = model.eps();
  Matrix transport = model.diff().d_x * f;
  transport *= model.mu().asDiagonal();
  Matrix collision = detail::angular_average(model, f) * Vector::Ones(model.n_mu()).transpose() - f;
  return -(1.0 / eps) * transport + (1.0 / (eps * eps)) * collision;
}

/// rho = (1/2) F w_mu.
inline Vector density(const RteModel& model, const Matrix& f)
{
  detail::check_shape(model, f, "density");
  return detail::angular_average(model, f);
}

/// Above this many nonzeros operators are exposed matrix-free.
inline constexpr Index max_materialized_nonzeros = 1'000'000;

/// -(1/eps) diag(mu) (x) D_x + (1/eps^2) (W_mu^T (x) I - I) on vec(F).
inline SparseOperator full_operator(const RteModel& model)
{
  const Index nx = model.n_x();
  const Index nmu = model.n_mu();
  const Index dim = nx * nmu;
  const double eps = model.eps();
  const Index nonzeros = nmu * (2 * nx) + nmu * nmu * nx;

  if (nonzeros > max_materialized_nonzeros) {
    auto apply = [model](const Vector& in, Vector& out) {
      const Eigen::Map<const Matrix> f(in.data(), model.n_x(), model.n_mu());
      out = Eigen::Map<const Vector>(full_rhs(model, Matrix(f)).data(), in.size());
    };
    return SparseOperator("full RTE operator", dim, apply);
  }

  std::vector<Triplet> entries;
  entries.reserve(static_cast<std::size_t>(nonzeros + dim));
  const SparseMatrix& dx = model.diff().d_x;
  const Vector& w = model.quad().weights;
  for (Index m = 0; m < nmu; ++m) {
    const double coeff = -model.mu()[m] / eps;
    for (Index i = 0; i < nx; ++i)
      for (SparseMatrix::InnerIterator it(dx, i); it; ++it) entries.emplace_back(m * nx + i, m * nx + it.col(), coeff * it.value());
    for (Index m2 = 0; m2 < nmu; ++m2) {
      const double c = 0.5 * w[m2] / (eps * eps);
      for (Index i = 0; i < nx; ++i) entries.emplace_back(m * nx + i, m2 * nx + i, c);
    }
  }
  for (Index k = 0; k < dim; ++k) entries.emplace_back(k, k, -1.0 / (eps * eps));
  SparseMatrix matrix(dim, dim);
  matrix.setFromTriplets(entries.begin(), entries.end());
  return SparseOperator("full RTE operator", std::move(matrix));
}

struct SubstepMatrices {
  Matrix a_x;  ///< X^T diag(dx) D_x X
  Matrix b_mu; ///< V^T diag(mu) diag(w_mu) V
  Matrix c_mu; ///< V^T W_mu diag(w_mu) V = (1/2) (V^T w)(V^T w)^T
  /// Collision coupling C_mu - I evaluated without cancellation, -D^T diag(w_mu) D with D = V - 1 (1/2) w^T V.
  /// Empty means c_mu - I is used as is.
  Matrix g_mu;
};

namespace detail {

inline Matrix collision_block(const Matrix& c_mu, const Matrix& g_mu)
{
  if (g_mu.size() != 0) return g_mu;
  return c_mu - Matrix::Identity(c_mu.rows(), c_mu.cols());
}

} // namespace detail

inline Matrix spatial_coupling(const RteModel& model, const Matrix& x_basis)
{
  detail::check_orthonormal(x_basis, model.wx(), "X");
  return x_basis.transpose() * (model.grid().dx * (model.diff().d_x * x_basis));
}

inline void angular_couplings(const RteModel& model, const Matrix& v_basis, Matrix& b_mu, Matrix& c_mu,
                              Matrix* g_mu = nullptr)
{
  detail::check_orthonormal(v_basis, model.wmu(), "V");
  const Vector& w = model.quad().weights;
  b_mu = v_basis.transpose() * (model.mu().cwiseProduct(w).asDiagonal() * v_basis);
  const Vector projected = v_basis.transpose() * w;
  c_mu = 0.5 * projected * projected.transpose();
  if (g_mu) {
    // Isotropic columns give D = O(ulp), so the stiff 1/eps^2 term stays clean.
    const Matrix d = v_basis - Vector::Ones(v_basis.rows()) * (0.5 * projected.transpose());
    *g_mu = -(d.transpose() * (w.asDiagonal() * d));
  }
}

inline SubstepMatrices assemble_substeps(const RteModel& model, const Matrix& x_basis, const Matrix& v_basis)
{
  SubstepMatrices sub;
  sub.a_x = spatial_coupling(model, x_basis);
  angular_couplings(model, v_basis, sub.b_mu, sub.c_mu, &sub.g_mu);
  return sub;
}

/// -(1/eps) A_x (x) diag(mu) + (1/eps^2) (I_r (x) W_mu^T - I) acting on vec(L), L = V S^T (n_mu x r).
inline SparseOperator operator_L(const RteModel& model, const SubstepMatrices& sub)
{
  const Index nmu = model.n_mu();
  const Index r = sub.a_x.rows();
  const double eps = model.eps();
  const Vector& w = model.quad().weights;
  std::vector<Triplet> entries;
  entries.reserve(static_cast<std::size_t>(r * r * nmu + r * nmu * nmu + r * nmu));
  for (Index p = 0; p < r; ++p) {
    for (Index q = 0; q < r; ++q) {
      const double a = sub.a_x(p, q);
      if (a == 0.0) continue;
      for (Index m = 0; m < nmu; ++m) entries.emplace_back(p * nmu + m, q * nmu + m, -a * model.mu()[m] / eps);
    }
    for (Index m = 0; m < nmu; ++m)
      for (Index m2 = 0; m2 < nmu; ++m2) entries.emplace_back(p * nmu + m, p * nmu + m2, 0.5 * w[m2] / (eps * eps));
  }
  for (Index k = 0; k < r * nmu; ++k) entries.emplace_back(k, k, -1.0 / (eps * eps));
  SparseMatrix matrix(r * nmu, r * nmu);
  matrix.setFromTriplets(entries.begin(), entries.end());
  return SparseOperator("L-step operator", std::move(matrix));
}

/// -(1/eps) B_mu^T (x) D_x + (1/eps^2) (C_mu^T (x) I_nx - I) acting on vec(K), K = X S (n_x x r).
inline SparseOperator operator_K(const RteModel& model, const SubstepMatrices& sub)
{
  const Index nx = model.n_x();
  const Index r = sub.b_mu.rows();
  const double eps = model.eps();
  const SparseMatrix& dx = model.diff().d_x;
  const Matrix collision = detail::collision_block(sub.c_mu, sub.g_mu);
  std::vector<Triplet> entries;
  entries.reserve(static_cast<std::size_t>(r * r * 3 * nx + r * nx));
  for (Index p = 0; p < r; ++p) {
    for (Index q = 0; q < r; ++q) {
      const double b = sub.b_mu(q, p);
      const double c = collision(q, p);
      if (b != 0.0) {
        for (Index i = 0; i < nx; ++i)
          for (SparseMatrix::InnerIterator it(dx, i); it; ++it)
            entries.emplace_back(p * nx + i, q * nx + it.col(), -b * it.value() / eps);
      }
      if (c != 0.0)
        for (Index i = 0; i < nx; ++i) entries.emplace_back(p * nx + i, q * nx + i, c / (eps * eps));
    }
  }
  SparseMatrix matrix(r * nx, r * nx);
  matrix.setFromTriplets(entries.begin(), entries.end());
  return SparseOperator("K-step operator", std::move(matrix));
}

/// Galerkin coefficient generator G(S) = -(1/eps) A_x S B_mu + (1/eps^2)(S C_mu - S) on vec(S).
inline Matrix operator_S_dense(const RteModel& model, const SubstepMatrices& sub)
{
  const Index r = sub.a_x.rows();
  const double eps = model.eps();
  const Matrix collision = detail::collision_block(sub.c_mu, sub.g_mu);
  Matrix g = Matrix::Zero(r * r, r * r);
  for (Index p = 0; p < r; ++p) {
    for (Index q = 0; q < r; ++q) {
      g.block(p * r, q * r, r, r) += (-sub.b_mu(q, p) / eps) * sub.a_x;
      g.block(p * r, q * r, r, r) += (collision(q, p) / (eps * eps)) * Matrix::Identity(r, r);
    }
  }
  return g;
}

/// exp((t/3) D_xx) rho0, the discrete diffusion limit, by exact diagonalisation of the circulant D_xx.
inline Vector diffusion_limit_density(const RteModel& model, const Vector& rho0, double t)
{
  detail::require(t >= 0.0, "diffusion_limit_density: t must be >= 0");
  detail::require(rho0.size() == model.n_x(), "diffusion_limit_density: rho0 length mismatch");
  if (t == 0.0) return rho0;
  const PeriodicSpectrum spectrum(model.grid());
  ComplexMatrix modes = spectrum.forward(rho0);
  for (Index k = 0; k < spectrum.size(); ++k) modes(k, 0) *= std::exp((t / 3.0) * spectrum.second_derivative_symbol(k));
  return spectrum.inverse_real(modes).col(0);
}

/// Weighted norm of (I - P)[full_rhs(f)] for f = X S V^T, P the tangent-space projector
/// P(g) = P_X g + g P_V - P_X g P_V.
inline double tangent_residual(const RteModel& model, const LowRankState& state)
{
  detail::check_orthonormal(state.x, model.wx(), "X");
  detail::check_orthonormal(state.v, model.wmu(), "V");
  const Matrix f = reconstruct(state);
  const Matrix g = full_rhs(model, f);
  const Matrix xg = weighted_inner(state.x, g, model.wx());                          // r x n_mu
  const Matrix gv = g * (model.quad().weights.asDiagonal() * state.v);                // n_x x r
  const Matrix xgv = xg * (model.quad().weights.asDiagonal() * state.v);              // r x r
  const Matrix projected = state.x * xg + gv * state.v.transpose() - state.x * xgv * state.v.transpose();
  return weighted_norm(Matrix(g - projected), model.wx(), model.wmu());
}

} // namespace lrgap
