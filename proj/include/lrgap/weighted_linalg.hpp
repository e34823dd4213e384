#pragma once

// Linear algebra in diagonally weighted inner products <a, b>_w = a^T diag(w) b.

#include "errors.hpp"
#include "types.hpp"

#include <Eigen/Householder>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace lrgap {

/// Strictly positive diagonal weights of a discrete inner product.
class WeightVector {
public:
  WeightVector() = default;

  explicit WeightVector(Vector entries) : entries_(std::move(entries))
  {
    detail::require(entries_.size() > 0, "WeightVector: empty");
    for (Index i = 0; i < entries_.size(); ++i) {
      if (!(entries_[i] > 0.0) || !std::isfinite(entries_[i]))
        throw InvalidArgument("WeightVector: entry " + std::to_string(i) + " is not positive");
    }
  }

  static WeightVector uniform(Index n, double value) { return WeightVector(Vector::Constant(n, value)); }

  const Vector& values() const { return entries_; }
  Index size() const { return entries_.size(); }
  double operator[](Index i) const { return entries_[i]; }
  Vector sqrt() const { return entries_.cwiseSqrt(); }

private:
  Vector entries_;
};

/// a^T diag(w) b.
inline Matrix weighted_inner(const Matrix& a, const Matrix& b, const WeightVector& w)
{
  if (a.rows() != w.size() || b.rows() != w.size())
    throw InvalidArgument("weighted_inner: row counts " + std::to_string(a.rows()) + ", " +
                          std::to_string(b.rows()) + " do not match weight length " + std::to_string(w.size()));
  return a.transpose() * (w.values().asDiagonal() * b);
}

inline double weighted_norm(const Vector& a, const WeightVector& w)
{
  return std::sqrt(a.cwiseAbs2().dot(w.values()));
}

/// sqrt(sum_ij wx_i wmu_j f_ij^2).
inline double weighted_norm(const Matrix& f, const WeightVector& wx, const WeightVector& wmu)
{
  if (f.rows() != wx.size() || f.cols() != wmu.size())
    throw InvalidArgument("weighted_norm: shape does not match weights");
  return std::sqrt((wx.values().asDiagonal() * f.cwiseAbs2() * wmu.values().asDiagonal()).sum());
}

/// max |q^T diag(w) q - I|.
inline double orthonormality_defect(const Matrix& q, const WeightVector& w)
{
  if (q.cols() == 0) return 0.0;
  const Matrix gram = weighted_inner(q, q, w);
  return (gram - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

struct QrResult {
  Matrix q;
  Matrix r_factor;
  std::vector<Index> replaced_columns;
  bool householder_prepass = false;
};

struct MgsOptions {
  /// Relative threshold below which a projected column counts as rank deficient.
  double rank_tol = 1e-10;
  /// Condition estimate above which a weighted Householder QR runs first.
  double householder_condition = 1e8;
  /// Seed of the per-call stream that generates replacement columns.
  std::uint64_t seed = 0x5eed5eedULL;
};

namespace detail {

// Two passes of projection against q(:, 0..j-1); coefficients accumulate into coeffs.
inline void project_out(const Matrix& q, Index j, const WeightVector& w, Vector& column, Vector& coeffs)
{
  coeffs.setZero(j);
  for (int pass = 0; pass < 2; ++pass) {
    for (Index k = 0; k < j; ++k) {
      const double c = q.col(k).dot(w.values().cwiseProduct(column));
      column.noalias() -= c * q.col(k);
      coeffs[k] += c;
    }
  }
}

// Core modified Gram-Schmidt with reorthogonalisation on columns already scaled to unit w-norm
// (zero columns stay zero). r_scaled receives the triangular factor of the scaled input.
inline void mgs_core(const Matrix& a, const WeightVector& w, const MgsOptions& options, const Vector& original_norms,
                     Matrix& q, Matrix& r_scaled, std::vector<Index>& replaced)
{
  const Index m = a.rows();
  const Index r = a.cols();
  q.setZero(m, r);
  r_scaled.setZero(r, r);
  std::mt19937_64 stream(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double absolute_floor = 64.0 * std::numeric_limits<double>::epsilon();

  Vector column(m);
  Vector coeffs;
  for (Index j = 0; j < r; ++j) {
    column = a.col(j);
    const double reference = original_norms[j] > 0.0 ? 1.0 : 0.0;
    project_out(q, j, w, column, coeffs);
    r_scaled.col(j).head(j) = coeffs;
    const double remaining = weighted_norm(column, w);
    if (remaining > std::max(options.rank_tol * reference, absolute_floor)) {
      q.col(j) = column / remaining;
      r_scaled(j, j) = remaining;
      continue;
    }

    // Rank deficient: substitute a pseudorandom direction orthogonal to the previous columns.
    replaced.push_back(j);
    Vector fallback(m);
    double fallback_norm = 0.0;
    for (int attempt = 0; attempt < 16 && fallback_norm <= 1e-3; ++attempt) {
      for (Index i = 0; i < m; ++i) fallback[i] = normal(stream);
      const double initial = weighted_norm(fallback, w);
      fallback /= initial;
      Vector ignored;
      project_out(q, j, w, fallback, ignored);
      fallback_norm = weighted_norm(fallback, w);
    }
    if (fallback_norm <= 1e-3) throw DegenerateState("weighted_mgs: cannot complete basis, m < r?");
    q.col(j) = fallback / fallback_norm;
    r_scaled(j, j) = q.col(j).dot(w.values().cwiseProduct(column));
  }
}

} // namespace detail

/// Modified Gram-Schmidt QR in the w-inner product: a = q * r_factor with q^T diag(w) q = I.
///
/// Columns are pre-scaled to unit w-norm and each is projected twice against its predecessors.
/// A column whose remaining norm is below rank_tol (relative) is replaced by a seeded random
/// direction orthonormal to the previous ones; its diagonal entry of r_factor holds the tiny
/// projection of the residual on the new direction. When the condition estimate from the first
/// pass exceeds householder_condition, q is recomputed by MGS on the orthonormal factor of a
/// weighted Householder QR and the triangular factors are combined.
inline QrResult weighted_mgs(const Matrix& a, const WeightVector& w, const MgsOptions& options = {})
{
  const Index m = a.rows();
  const Index r = a.cols();
  if (m != w.size()) throw InvalidArgument("weighted_mgs: matrix has " + std::to_string(m) + " rows, weights " +
                                           std::to_string(w.size()));
  if (r < 1 || m < r)
    throw InvalidArgument("weighted_mgs: require m >= r >= 1, got m=" + std::to_string(m) + " r=" + std::to_string(r));
  if (!a.allFinite()) throw NumericalFailure("weighted_mgs: input contains non-finite entries");

  Vector norms(r);
  Matrix scaled = a;
  for (Index j = 0; j < r; ++j) {
    norms[j] = weighted_norm(Vector(a.col(j)), w);
    if (norms[j] > 0.0) scaled.col(j) /= norms[j];
  }

  QrResult result;
  Matrix r_scaled;
  detail::mgs_core(scaled, w, options, norms, result.q, r_scaled, result.replaced_columns);

  double largest = 0.0;
  double smallest = std::numeric_limits<double>::infinity();
  for (Index j = 0; j < r; ++j) {
    if (std::find(result.replaced_columns.begin(), result.replaced_columns.end(), j) != result.replaced_columns.end())
      continue;
    largest = std::max(largest, std::abs(r_scaled(j, j)));
    smallest = std::min(smallest, std::abs(r_scaled(j, j)));
  }
  const bool ill_conditioned = smallest > 0.0 && largest / smallest > options.householder_condition;

  if (ill_conditioned) {
    const Vector sqrt_w = w.sqrt();
    const Matrix weighted = sqrt_w.asDiagonal() * scaled;
    Eigen::HouseholderQR<Matrix> householder(weighted);
    const Matrix thin_q = householder.householderQ() * Matrix::Identity(m, r);
    const Matrix r_house = householder.matrixQR().topRows(r).triangularView<Eigen::Upper>();
    const Matrix q_w = sqrt_w.cwiseInverse().asDiagonal() * thin_q;

    Matrix q2;
    Matrix r2;
    std::vector<Index> unused;
    detail::mgs_core(q_w, w, options, Vector::Ones(r), q2, r2, unused);
    r_scaled = r2 * r_house;
    result.q = q2;
    result.householder_prepass = true;
    result.replaced_columns.clear();
    for (Index j = 0; j < r; ++j) {
      if (norms[j] == 0.0 || std::abs(r_scaled(j, j)) <= options.rank_tol) result.replaced_columns.push_back(j);
    }
  }

  result.r_factor = r_scaled * norms.asDiagonal();
  return result;
}

struct WeightedSvd {
  Matrix x;                ///< n_x x r, wx-orthonormal
  Matrix s;                ///< r x r diagonal, nonincreasing
  Matrix v;                ///< n_mu x r, wmu-orthonormal
  double sigma_tail = 0.0; ///< first discarded singular value
  Vector singular_values;  ///< full weighted spectrum
};

/// Singular values of diag(sqrt wx) f diag(sqrt wmu), descending.
inline Vector weighted_singular_values(const Matrix& f, const WeightVector& wx, const WeightVector& wmu)
{
  if (f.rows() != wx.size() || f.cols() != wmu.size())
    throw InvalidArgument("weighted_singular_values: shape does not match weights");
  const Matrix scaled = wx.sqrt().asDiagonal() * f * wmu.sqrt().asDiagonal();
  Eigen::BDCSVD<Matrix> svd(scaled);
  return svd.singularValues();
}

/// Weighted best rank-r approximation x * s * v^T of f.
inline WeightedSvd weighted_truncated_svd(const Matrix& f, Index r, const WeightVector& wx, const WeightVector& wmu)
{
  if (f.rows() != wx.size() || f.cols() != wmu.size())
    throw InvalidArgument("weighted_truncated_svd: shape does not match weights");
  const Index full = std::min(f.rows(), f.cols());
  if (r < 1 || r > full)
    throw InvalidArgument("weighted_truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                          std::to_string(full) + "]");

  const Vector sqrt_x = wx.sqrt();
  const Vector sqrt_mu = wmu.sqrt();
  const Matrix scaled = sqrt_x.asDiagonal() * f * sqrt_mu.asDiagonal();
  Eigen::BDCSVD<Matrix> svd(scaled, Eigen::ComputeThinU | Eigen::ComputeThinV);

  WeightedSvd out;
  out.singular_values = svd.singularValues();
  out.x = sqrt_x.cwiseInverse().asDiagonal() * svd.matrixU().leftCols(r);
  out.v = sqrt_mu.cwiseInverse().asDiagonal() * svd.matrixV().leftCols(r);
  out.s = out.singular_values.head(r).asDiagonal();
  out.sigma_tail = r < full ? out.singular_values[r] : 0.0;
  return out;
}

} // namespace lrgap
