#pragma once

// Exact exponential propagators for the RTE flows, obtained by block-diagonalising each operator.
//
// The DFT in x diagonalises D_x, so the full operator splits into one n_mu x n_mu block per
// Fourier mode and the K-step operator into one r x r block per mode. The L-step operator splits
// along the eigenvectors of the skew matrix A_x. Each block exponential is computed by Pade
// scaling-and-squaring, or by a Taylor action when the block norm is small enough for that to be
// cheaper; both are accurate to near unit roundoff.

#include "expm.hpp"
#include "rte_model.hpp"
#include "spectral.hpp"
#include "types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace lrgap {

namespace detail {

inline constexpr double block_tolerance = 1e-15;

/// y * exp(t * n) for a row vector y.
inline Eigen::RowVectorXcd row_exponential(const ComplexMatrix& n, double t, const Eigen::RowVectorXcd& y,
                                           const char* name)
{
  const Index dim = n.rows();
  const Complex shift = n.trace() / static_cast<double>(dim);
  ComplexMatrix shifted_t = n.transpose();
  shifted_t.diagonal().array() -= shift;
  const double norm = std::abs(t) * one_norm(shifted_t);
  const double pade_cost = (7.0 + std::max(0.0, std::log2(std::max(norm, 1.0) / 5.37))) * static_cast<double>(dim);
  const double taylor_cost = 18.0 * std::max(1.0, std::ceil(norm));

  if (taylor_cost <= pade_cost) {
    const ComplexMatrix nt = n.transpose();
    auto apply = [&nt](const ComplexVector& in, ComplexVector& out) { out.noalias() = nt * in; };
    ComplexVector column = y.transpose();
    return taylor_action(apply, shift, one_norm(shifted_t), t, column, block_tolerance, name,
                         std::numeric_limits<Index>::max(), nullptr)
        .transpose();
  }
  const ComplexMatrix propagator = dense_expm<Complex>(ComplexMatrix(t * n), std::numeric_limits<Index>::max());
  return y * propagator;
}

/// y * exp(t (W_mu - I) / eps^2) in closed form: W_mu is a projector, so the average is kept exactly.
inline Eigen::RowVectorXcd collision_exponential(const RteModel& model, double t, const Eigen::RowVectorXcd& y)
{
  const Complex average = 0.5 * (y * model.quad().weights.cast<Complex>())(0);
  const double decay = std::exp(-t / (model.eps() * model.eps()));
  return (decay * (y.array() - average) + average).matrix();
}

inline void check_finite(const Matrix& m, const char* name, double t)
{
  if (!m.allFinite()) {
    std::ostringstream msg;
    msg << name << " at t=" << t << ": non-finite values after propagation";
    throw NumericalFailure(msg.str());
  }
}

} // namespace detail

/// exp(t A_full) applied to F.
inline Matrix propagate_full(const RteModel& model, const Matrix& f, double t)
{
  detail::check_shape(model, f, "propagate_full");
  if (t == 0.0) return f;
  const PeriodicSpectrum spectrum(model.grid());
  const double eps = model.eps();
  const Index nmu = model.n_mu();
  ComplexMatrix modes = spectrum.forward(f);

  ComplexMatrix generator(nmu, nmu);
  const ComplexMatrix collision = (model.w_mu_matrix() - Matrix::Identity(nmu, nmu)).cast<Complex>() / (eps * eps);
  for (Index k = 0; k <= spectrum.size() / 2; ++k) {
    generator = collision;
    const double lambda = spectrum.first_derivative_symbol(k);
    if (lambda == 0.0) {
      modes.row(k) = detail::collision_exponential(model, t, modes.row(k));
      const Index partner = spectrum.partner(k);
      if (partner != k) modes.row(partner) = modes.row(k).conjugate();
      continue;
    }
    for (Index m = 0; m < nmu; ++m) generator(m, m) += Complex(0.0, -lambda * model.mu()[m] / eps);
    modes.row(k) = detail::row_exponential(generator, t, modes.row(k), "full RTE propagator");
    const Index partner = spectrum.partner(k);
    if (partner != k) modes.row(partner) = modes.row(k).conjugate();
  }
  Matrix out = spectrum.inverse_real(modes);
  detail::check_finite(out, "full RTE propagator", t);
  return out;
}

/// exp(t A_K) applied to K (n_x x r), generator K' = -(1/eps) D_x K B + (1/eps^2)(K C - K).
/// A non-empty g_mu replaces C - I (see SubstepMatrices::g_mu).
inline Matrix propagate_K(const RteModel& model, const Matrix& b_mu, const Matrix& c_mu, const Matrix& k_factor, double t,
                          const Matrix& g_mu = Matrix())
{
  detail::require(k_factor.rows() == model.n_x(), "propagate_K: K has wrong row count");
  if (t == 0.0) return k_factor;
  const Index r = k_factor.cols();
  const PeriodicSpectrum spectrum(model.grid());
  const double eps = model.eps();
  ComplexMatrix modes = spectrum.forward(k_factor);

  const ComplexMatrix collision = detail::collision_block(c_mu, g_mu).cast<Complex>() / (eps * eps);
  const ComplexMatrix transport = b_mu.cast<Complex>() * Complex(0.0, -1.0 / eps);
  for (Index k = 0; k <= spectrum.size() / 2; ++k) {
    const ComplexMatrix generator = collision + spectrum.first_derivative_symbol(k) * transport;
    const ComplexMatrix propagator = dense_expm<Complex>(ComplexMatrix(t * generator), std::numeric_limits<Index>::max());
    modes.row(k) = modes.row(k) * propagator;
    const Index partner = spectrum.partner(k);
    if (partner != k) modes.row(partner) = modes.row(k).conjugate();
  }
  Matrix out = spectrum.inverse_real(modes);
  detail::check_finite(out, "K-step propagator", t);
  return out;
}

/// exp(t A_L) applied to L (n_mu x r), generator L^T' = -(1/eps) A_x L^T diag(mu) + (1/eps^2)(L^T W - L^T).
inline Matrix propagate_L(const RteModel& model, const Matrix& a_x, const Matrix& l_factor, double t)
{
  detail::require(l_factor.rows() == model.n_mu(), "propagate_L: L has wrong row count");
  detail::require(a_x.rows() == l_factor.cols() && a_x.cols() == l_factor.cols(), "propagate_L: A_x size mismatch");
  if (t == 0.0) return l_factor;
  const Index nmu = model.n_mu();
  const double eps = model.eps();

  // i*A_x is Hermitian for skew A_x: A_x = U diag(-i theta) U^H.
  const Matrix skew = 0.5 * (a_x - a_x.transpose());
  const ComplexMatrix hermitian = Complex(0.0, 1.0) * skew.cast<Complex>();
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> eig(hermitian);
  const ComplexMatrix& u = eig.eigenvectors();
  const Vector& theta = eig.eigenvalues();

  ComplexMatrix rows = u.adjoint() * l_factor.transpose().cast<Complex>(); // r x n_mu
  const ComplexMatrix collision = (model.w_mu_matrix() - Matrix::Identity(nmu, nmu)).cast<Complex>() / (eps * eps);
  ComplexMatrix generator(nmu, nmu);
  for (Index j = 0; j < rows.rows(); ++j) {
    generator = collision;
    for (Index m = 0; m < nmu; ++m) generator(m, m) += Complex(0.0, theta[j] * model.mu()[m] / eps);
    rows.row(j) = detail::row_exponential(generator, t, rows.row(j), "L-step propagator");
  }
  Matrix out = (u * rows).real().transpose();
  detail::check_finite(out, "L-step propagator", t);
  return out;
}

} // namespace lrgap
