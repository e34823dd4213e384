#pragma once

// Dense matrix exponential and the action exp(tA) v for sparse operators.

#include "errors.hpp"
#include "types.hpp"

#include <Eigen/LU>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

namespace lrgap {

/// A linear map known through its matrix-vector product, optionally backed by an explicit sparse matrix.
class SparseOperator {
public:
  using ApplyFn = std::function<void(const Vector&, Vector&)>;

  SparseOperator(std::string name, SparseMatrix matrix) : name_(std::move(name)), dim_(matrix.rows())
  {
    detail::require(matrix.rows() == matrix.cols(), "SparseOperator '" + name_ + "': matrix must be square");
    matrix.makeCompressed();
    matrix_ = std::move(matrix);
  }

  SparseOperator(std::string name, Index dim, ApplyFn apply) : name_(std::move(name)), dim_(dim), apply_(std::move(apply))
  {
    detail::require(dim > 0 && static_cast<bool>(apply_), "SparseOperator '" + name_ + "': invalid matrix-free operator");
  }

  const std::string& name() const { return name_; }
  Index dim() const { return dim_; }
  const SparseMatrix* matrix() const { return matrix_ ? &*matrix_ : nullptr; }

  void apply(const Vector& in, Vector& out) const
  {
    if (in.size() != dim_)
      throw InvalidArgument("SparseOperator '" + name_ + "': vector length " + std::to_string(in.size()) +
                            " != dim " + std::to_string(dim_));
    if (matrix_)
      out.noalias() = *matrix_ * in;
    else
      apply_(in, out);
  }

  Vector apply(const Vector& in) const
  {
    Vector out(dim_);
    apply(in, out);
    return out;
  }

  /// Dense copy, for small operators in tests and oracles.
  Matrix to_dense() const
  {
    if (matrix_) return Matrix(*matrix_);
    Matrix dense(dim_, dim_);
    Vector e = Vector::Zero(dim_);
    Vector column(dim_);
    for (Index j = 0; j < dim_; ++j) {
      e[j] = 1.0;
      apply(e, column);
      dense.col(j) = column;
      e[j] = 0.0;
    }
    return dense;
  }

private:
  std::string name_;
  Index dim_ = 0;
  std::optional<SparseMatrix> matrix_;
  ApplyFn apply_;
};

namespace detail {

template <typename Derived>
double one_norm(const Eigen::MatrixBase<Derived>& a)
{
  if (a.cols() == 0) return 0.0;
  return a.cwiseAbs().colwise().sum().maxCoeff();
}

/// ||a - shift I||_1 without forming the shifted matrix.
inline double one_norm(const SparseMatrix& a, double shift = 0.0)
{
  Vector column_sums = Vector::Zero(a.cols());
  Vector diagonal = Vector::Zero(a.cols());
  for (Index row = 0; row < a.outerSize(); ++row) {
    for (SparseMatrix::InnerIterator it(a, row); it; ++it) {
      if (it.row() == it.col())
        diagonal[it.col()] += it.value();
      else
        column_sums[it.col()] += std::abs(it.value());
    }
  }
  column_sums += (diagonal.array() - shift).abs().matrix();
  return a.cols() > 0 ? column_sums.maxCoeff() : 0.0;
}

// Pade degrees and the 1-norm bounds below which each is accurate to unit roundoff.
inline constexpr std::array<int, 5> pade_degrees{3, 5, 7, 9, 13};
inline constexpr std::array<double, 5> pade_theta{1.495585217958292e-2, 2.539398330063230e-1, 9.504178996162932e-1,
                                                   2.097847961257068e0, 5.371920351148152e0};

inline const double* pade_coefficients(int degree)
{
  static constexpr double b3[] = {120., 60., 12., 1.};
  static constexpr double b5[] = {30240., 15120., 3360., 420., 30., 1.};
  static constexpr double b7[] = {17297280., 8648640., 1995840., 277200., 25200., 1512., 56., 1.};
  static constexpr double b9[] = {17643225600., 8821612800., 2075673600., 302702400., 30270240.,
                                  2162160.,     110880.,      3960.,        90.,        1.};
  static constexpr double b13[] = {64764752532480000., 32382376266240000., 7771770303897600., 1187353796428800.,
                                   129060195264000.,   10559470521600.,    670442572800.,    33522128640.,
                                   1323241920.,        40840800.,          960960.,          16380.,
                                   182.,               1.};
  switch (degree) {
  case 3: return b3;
  case 5: return b5;
  case 7: return b7;
  case 9: return b9;
  default: return b13;
  }
}

} // namespace detail

/// Pade scaling-and-squaring exponential of a square dense matrix (real or complex).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dense_expm(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& a,
                                                                 Index dense_limit = 2000)
{
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (a.rows() != a.cols()) throw InvalidArgument("dense_expm: matrix is not square");
  if (a.rows() > dense_limit)
    throw SizeCapExceeded("dense_expm: dimension " + std::to_string(a.rows()) + " exceeds dense limit " +
                          std::to_string(dense_limit));
  const Index n = a.rows();
  if (n == 0) return a;
  if (!a.allFinite()) throw NumericalFailure("dense_expm: input contains non-finite entries");

  const Mat identity = Mat::Identity(n, n);
  const double norm = detail::one_norm(a);

  auto pade = [&](const Mat& m, int degree) -> Mat {
    const double* b = detail::pade_coefficients(degree);
    const Mat m2 = m * m;
    Mat u;
    Mat v;
    if (degree == 13) {
      const Mat m4 = m2 * m2;
      const Mat m6 = m4 * m2;
      const Mat inner_u = b[13] * m6 + b[11] * m4 + b[9] * m2;
      const Mat inner_v = b[12] * m6 + b[10] * m4 + b[8] * m2;
      u = m * (m6 * inner_u + b[7] * m6 + b[5] * m4 + b[3] * m2 + b[1] * identity);
      v = m6 * inner_v + b[6] * m6 + b[4] * m4 + b[2] * m2 + b[0] * identity;
    } else {
      Mat power = identity;
      Mat odd = Mat::Zero(n, n);
      Mat even = Mat::Zero(n, n);
      for (int k = 0; 2 * k <= degree; ++k) {
        even += b[2 * k] * power;
        odd += b[2 * k + 1] * power;
        power = power * m2;
      }
      u = m * odd;
      v = even;
    }
    return (v - u).partialPivLu().solve(v + u);
  };

  for (std::size_t i = 0; i + 1 < detail::pade_degrees.size(); ++i) {
    if (norm <= detail::pade_theta[i]) return pade(a, detail::pade_degrees[i]);
  }

  int squarings = 0;
  if (norm > detail::pade_theta.back())
    squarings = static_cast<int>(std::ceil(std::log2(norm / detail::pade_theta.back())));
  Mat result = pade(a / std::ldexp(1.0, squarings), 13);
  for (int k = 0; k < squarings; ++k) result = result * result;
  if (!result.allFinite()) throw NumericalFailure("dense_expm: overflow (1-norm " + std::to_string(norm) + ")");
  return result;
}

inline Matrix dense_expm(const Matrix& a, Index dense_limit = 2000) { return dense_expm<double>(a, dense_limit); }

struct ExpmvStats {
  Index substeps = 0;
  Index matvecs = 0;
};

namespace detail {

/// Truncated Taylor series with time-step scaling for exp(t A) v.
///
/// `apply` realises A, `shift` is subtracted from A (its exponential is reapplied per substep),
/// `norm` bounds ||A - shift I||_1. The interval is split into s substeps with t*norm/s <= 1 and
/// per substep terms are summed until two successive terms fall below (tol/s) of the accumulated
/// norm, at most 60 terms.
template <typename VectorType, typename Apply, typename Scalar>
VectorType taylor_action(const Apply& apply, Scalar shift, double norm, double t, VectorType v, double tol,
                         const std::string& name, Index max_substeps, ExpmvStats* stats)
{
  if (t == 0.0 || v.size() == 0) return v;
  const double scaled = std::abs(t) * norm;
  const double substeps_real = std::max(1.0, std::ceil(scaled));
  if (substeps_real > static_cast<double>(max_substeps)) {
    std::ostringstream msg;
    msg << "expmv of '" << name << "' at t=" << t << ": needs " << substeps_real
        << " Taylor substeps (budget " << max_substeps << "); operator too stiff for the Taylor kernel";
    throw NumericalFailure(msg.str());
  }
  const Index substeps = static_cast<Index>(substeps_real);
  const double h = t / static_cast<double>(substeps);
  const Scalar shift_factor = std::exp(Scalar(h) * shift);
  const double step_tol = tol / static_cast<double>(substeps);

  VectorType term;
  VectorType next;
  for (Index s = 0; s < substeps; ++s) {
    term = v;
    double previous_term_norm = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= 60; ++k) {
      apply(term, next);
      next -= shift * term;
      next *= Scalar(h / static_cast<double>(k));
      term.swap(next);
      v += term;
      if (stats) ++stats->matvecs;
      const double term_norm = term.template lpNorm<1>();
      const double accumulated = v.template lpNorm<1>();
      if (term_norm + previous_term_norm <= step_tol * accumulated) break;
      previous_term_norm = term_norm;
    }
    v *= shift_factor;
    if (!v.allFinite()) {
      std::ostringstream msg;
      msg << "expmv of '" << name << "' at t=" << t << ": non-finite values after substep " << s;
      throw NumericalFailure(msg.str());
    }
  }
  if (stats) stats->substeps += substeps;
  return v;
}

inline double power_iteration_norm(const SparseOperator& op, int iterations = 8)
{
  Vector x = Vector::Ones(op.dim()) / std::sqrt(static_cast<double>(op.dim()));
  Vector y(op.dim());
  double estimate = 0.0;
  for (int it = 0; it < iterations; ++it) {
    op.apply(x, y);
    const double n = y.norm();
    estimate = std::max(estimate, n);
    if (n == 0.0) break;
    x = y / n;
  }
  return 2.0 * estimate * std::sqrt(static_cast<double>(op.dim()));
}

} // namespace detail

struct ExpmvOptions {
  double tol = 1e-10;
  Index max_substeps = 2'000'000;
};

/// w ~= exp(t A) v with relative accuracy tol, using only products with A.
inline Vector expmv(const SparseOperator& op, double t, const Vector& v, const ExpmvOptions& options = {},
                    ExpmvStats* stats = nullptr)
{
  detail::require(options.tol > 0.0, "expmv: tol must be positive");
  if (v.size() != op.dim())
    throw InvalidArgument("expmv: vector length " + std::to_string(v.size()) + " != operator dim " +
                          std::to_string(op.dim()));
  if (t == 0.0) return v;

  double shift = 0.0;
  double norm = 0.0;
  if (const SparseMatrix* m = op.matrix()) {
    shift = m->diagonal().sum() / static_cast<double>(op.dim());
    norm = detail::one_norm(*m, shift);
  } else {
    norm = detail::power_iteration_norm(op);
  }
  auto apply = [&op](const Vector& in, Vector& out) { op.apply(in, out); };
  return detail::taylor_action(apply, shift, norm, t, Vector(v), options.tol, op.name(), options.max_substeps, stats);
}

inline Vector expmv(const SparseOperator& op, double t, const Vector& v, double tol)
{
  ExpmvOptions options;
  options.tol = tol;
  return expmv(op, t, v, options);
}

} // namespace lrgap
