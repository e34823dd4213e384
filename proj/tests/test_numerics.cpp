// Grid, quadrature, weighted linear algebra and matrix exponential kernels.

#include "lrgap/expm.hpp"
#include "lrgap/grid.hpp"
#include "lrgap/weighted_linalg.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace lrgap;

namespace {

Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

SparseMatrix random_sparse(Index n, double density, std::uint64_t seed, double scale = 1.0)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> value(-1.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<Triplet> t;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (i == j || coin(rng) < density) t.emplace_back(i, j, scale * value(rng));
  SparseMatrix m(n, n);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

} // namespace

// ---------------------------------------------------------------- quadrature

TEST(GaussLegendre, OnePointIsMidpointRule)
{
  const auto q = gauss_legendre(1);
  ASSERT_EQ(q.size(), 1);
  EXPECT_EQ(q.nodes[0], 0.0);
  EXPECT_EQ(q.weights[0], 2.0);
}

TEST(GaussLegendre, TwoPointRoots)
{
  const auto q = gauss_legendre(2);
  const double root = 1.0 / std::sqrt(3.0);
  EXPECT_NEAR(q.nodes[0], -root, 1e-15);
  EXPECT_NEAR(q.nodes[1], root, 1e-15);
  EXPECT_NEAR(q.weights[0], 1.0, 1e-15);
  EXPECT_NEAR(q.weights[1], 1.0, 1e-15);
}

TEST(GaussLegendre, ThreePointRule)
{
  // roots 0, +-sqrt(3/5), weights 8/9, 5/9
  const auto q = gauss_legendre(3);
  EXPECT_NEAR(q.nodes[0], -std::sqrt(0.6), 1e-15);
  EXPECT_EQ(q.nodes[1], 0.0);
  EXPECT_NEAR(q.weights[0], 5.0 / 9.0, 1e-15);
  EXPECT_NEAR(q.weights[1], 8.0 / 9.0, 1e-15);
}

TEST(GaussLegendre, SecondMomentTwentyPoints)
{
  const auto q = gauss_legendre(20);
  EXPECT_NEAR(q.weights.dot(q.nodes.cwiseAbs2()), 2.0 / 3.0, 1e-13);
}

TEST(GaussLegendre, ZeroPointsRejected) { EXPECT_THROW(gauss_legendre(0), InvalidArgument); }

TEST(GaussLegendre, PropertiesUpTo64)
{
  for (Index n = 1; n <= 64; ++n) {
    const auto q = gauss_legendre(n);
    ASSERT_EQ(q.size(), n);
    EXPECT_NEAR(q.weights.sum(), 2.0, 1e-13) << n;
    for (Index j = 0; j < n; ++j) {
      EXPECT_GT(q.weights[j], 0.0);
      EXPECT_GT(q.nodes[j], -1.0);
      EXPECT_LT(q.nodes[j], 1.0);
      EXPECT_NEAR(q.nodes[j], -q.nodes[n - 1 - j], 1e-13);
      if (j > 0) EXPECT_LT(q.nodes[j - 1], q.nodes[j]);
    }
    for (Index k = 0; k <= 2 * n - 1; ++k) {
      const double integral = q.weights.dot(q.nodes.array().pow(static_cast<double>(k)).matrix());
      if (k % 2 == 1) {
        EXPECT_NEAR(integral, 0.0, 1e-13) << "n=" << n << " k=" << k;
      } else {
        const double exact = 2.0 / static_cast<double>(k + 1);
        EXPECT_NEAR(integral, exact, 1e-12 * exact) << "n=" << n << " k=" << k;
      }
    }
  }
}

// ---------------------------------------------------------------- grid and stencils

TEST(UniformGrid, SmallGrid)
{
  const auto g = uniform_grid(0.0, 2.0, 4);
  EXPECT_DOUBLE_EQ(g.dx, 0.5);
  const double expected[] = {0.0, 0.5, 1.0, 1.5};
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.points[i], expected[i]);
  EXPECT_DOUBLE_EQ(g.points[3] + g.dx, g.b);
}

TEST(UniformGrid, FineResolution) { EXPECT_NEAR(uniform_grid(0.0, 2.0, 1000).dx, 0.002, 1e-16); }

TEST(UniformGrid, MinimalGrid)
{
  const auto g = uniform_grid(0.0, 1.0, 2);
  EXPECT_DOUBLE_EQ(g.points[0], 0.0);
  EXPECT_DOUBLE_EQ(g.points[1], 0.5);
}

TEST(UniformGrid, InvalidInput)
{
  EXPECT_THROW(uniform_grid(1.0, 1.0, 4), InvalidArgument);
  EXPECT_THROW(uniform_grid(2.0, 1.0, 4), InvalidArgument);
  EXPECT_THROW(uniform_grid(0.0, 1.0, 1), InvalidArgument);
}

TEST(DiffMatrices, StencilRowWithWrap)
{
  const auto d = build_diff_matrices(uniform_grid(0.0, 2.0, 4));
  const Matrix dx(d.d_x);
  const double row0[] = {0.0, 1.0, 0.0, -1.0};
  for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(dx(0, j), row0[j]);
  const Matrix dxx(d.d_xx);
  EXPECT_DOUBLE_EQ(dxx(0, 0), -8.0);
  EXPECT_DOUBLE_EQ(dxx(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(dxx(0, 3), 4.0);
}

TEST(DiffMatrices, StructuralIdentities)
{
  for (Index n : {2, 3, 4, 7, 50}) {
    const auto d = build_diff_matrices(uniform_grid(-1.0, 3.0, n));
    const Matrix dx(d.d_x);
    const Matrix dxx(d.d_xx);
    EXPECT_LE(max_abs(dx + dx.transpose()), 1e-15) << n;
    EXPECT_LE(dx.rowwise().sum().cwiseAbs().maxCoeff(), 1e-15 * max_abs(dx) + 0.0);
    EXPECT_LE(dx.colwise().sum().cwiseAbs().maxCoeff(), 1e-15 * max_abs(dx) + 0.0);
    EXPECT_LE(max_abs(dxx - dxx.transpose()), 0.0);
    EXPECT_LE(dxx.rowwise().sum().cwiseAbs().maxCoeff(), 1e-15 * max_abs(dxx));
    EXPECT_LE(d.d_x.nonZeros(), 3 * n);
    EXPECT_LE(d.d_xx.nonZeros(), 3 * n);
  }
}

TEST(DiffMatrices, ConstantsAreInKernel)
{
  const auto d = build_diff_matrices(uniform_grid(0.0, 2.0, 37));
  const Vector ones = Vector::Ones(37);
  EXPECT_LE((d.d_x * ones).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DiffMatrices, SecondOrderDerivativeOfSine)
{
  const auto g = uniform_grid(0.0, 2.0, 200);
  const auto d = build_diff_matrices(g);
  const double pi = std::numbers::pi;
  const Vector f = (pi * g.points.array()).sin().matrix();
  const Vector exact = pi * (pi * g.points.array()).cos().matrix();
  const double bound = (pi * g.dx) * (pi * g.dx) * pi / 6.0 * 2.0;
  EXPECT_LE((d.d_x * f - exact).cwiseAbs().maxCoeff(), bound);
}

TEST(DiffMatrices, FourierEigenvalues)
{
  const auto g = uniform_grid(0.0, 2.0, 64);
  const auto d = build_diff_matrices(g);
  const double pi = std::numbers::pi;
  const ComplexMatrix dx = Matrix(d.d_x).cast<Complex>();
  for (int k = 1; k <= 10; ++k) {
    ComplexVector e(g.n_x);
    for (Index i = 0; i < g.n_x; ++i) e[i] = std::exp(Complex(0.0, k * pi * g.points[i]));
    const Complex lambda(0.0, std::sin(k * pi * g.dx) / g.dx);
    EXPECT_LE((dx * e - lambda * e).cwiseAbs().maxCoeff(), 1e-12) << k;
  }
}

// ---------------------------------------------------------------- weighted products

TEST(WeightedInner, Examples)
{
  const auto q = gauss_legendre(20);
  const WeightVector w(q.weights);
  const Matrix ones = Matrix::Ones(20, 1);
  EXPECT_NEAR(weighted_inner(ones, ones, w)(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(weighted_inner(ones, Matrix(q.nodes), w)(0, 0), 0.0, 1e-14);

  const Matrix id = Matrix::Identity(2, 2);
  const Matrix g = weighted_inner(id, id, WeightVector::uniform(2, 2.0));
  EXPECT_TRUE(g.isApprox(2.0 * id, 0.0));
}

TEST(WeightedInner, DimensionMismatch)
{
  EXPECT_THROW(weighted_inner(Matrix::Ones(3, 1), Matrix::Ones(3, 1), WeightVector::uniform(4, 1.0)),
               InvalidArgument);
  EXPECT_THROW(weighted_inner(Matrix::Ones(3, 1), Matrix::Ones(4, 1), WeightVector::uniform(3, 1.0)),
               InvalidArgument);
}

TEST(WeightVector, RejectsNonPositive)
{
  Vector v(3);
  v << 1.0, 0.0, 2.0;
  EXPECT_THROW(WeightVector{v}, InvalidArgument);
  v[1] = -1.0;
  EXPECT_THROW(WeightVector{v}, InvalidArgument);
}

// ---------------------------------------------------------------- weighted MGS

TEST(WeightedMgs, IdentityUnitWeights)
{
  const auto qr = weighted_mgs(Matrix::Identity(2, 2), WeightVector::uniform(2, 1.0));
  EXPECT_LE(max_abs(qr.q - Matrix::Identity(2, 2)), 1e-15);
  EXPECT_LE(max_abs(qr.r_factor - Matrix::Identity(2, 2)), 1e-15);
  EXPECT_TRUE(qr.replaced_columns.empty());
}

TEST(WeightedMgs, IdentityWeightTwo)
{
  const auto qr = weighted_mgs(Matrix::Identity(2, 2), WeightVector::uniform(2, 2.0));
  EXPECT_LE(max_abs(qr.q - Matrix::Identity(2, 2) / std::sqrt(2.0)), 1e-15);
  EXPECT_LE(max_abs(qr.r_factor - std::sqrt(2.0) * Matrix::Identity(2, 2)), 1e-15);
}

TEST(WeightedMgs, HandGramSchmidt)
{
  Matrix a(2, 2);
  a << 1, 1, 1, -1;
  const auto qr = weighted_mgs(a, WeightVector::uniform(2, 1.0));
  const double h = 1.0 / std::sqrt(2.0);
  Matrix q(2, 2);
  q << h, h, h, -h;
  EXPECT_LE(max_abs(qr.q - q), 1e-15);
  EXPECT_LE(max_abs(qr.r_factor - std::sqrt(2.0) * Matrix::Identity(2, 2)), 1e-15);
}

TEST(WeightedMgs, TooManyColumns)
{
  EXPECT_THROW(weighted_mgs(Matrix::Ones(2, 3), WeightVector::uniform(2, 1.0)), InvalidArgument);
}

TEST(WeightedMgs, RandomInputsOrthonormalAndReconstruct)
{
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> wdist(0.01, 3.0);
  for (int trial = 0; trial < 25; ++trial) {
    const Index m = 5 + trial;
    const Index r = 1 + trial % 5;
    Vector wv(m);
    for (Index i = 0; i < m; ++i) wv[i] = wdist(rng);
    const WeightVector w(wv);
    const Matrix a = random_matrix(m, r, 100 + trial);
    const auto qr = weighted_mgs(a, w);
    EXPECT_LE(orthonormality_defect(qr.q, w), 1e-12);
    EXPECT_TRUE(qr.replaced_columns.empty());
    EXPECT_LE(max_abs(Matrix(qr.r_factor.triangularView<Eigen::StrictlyLower>())), 0.0);
    for (Index j = 0; j < r; ++j) {
      const Vector col = a.col(j);
      EXPECT_LE(weighted_norm(Vector(qr.q * qr.r_factor.col(j) - col), w), 1e-10 * weighted_norm(col, w));
    }
  }
}

TEST(WeightedMgs, RankDeficientColumnsAreReplacedDeterministically)
{
  const Matrix base = random_matrix(30, 2, 3);
  Matrix a(30, 4);
  a << base.col(0), base.col(1), 2.0 * base.col(0) - base.col(1), Matrix::Zero(30, 1);
  const WeightVector w = WeightVector::uniform(30, 0.1);
  const auto first = weighted_mgs(a, w);
  const auto second = weighted_mgs(a, w);
  EXPECT_EQ(first.replaced_columns, (std::vector<Index>{2, 3}));
  EXPECT_LE(orthonormality_defect(first.q, w), 1e-12);
  EXPECT_EQ(first.q, second.q);
  for (Index j = 0; j < 4; ++j)
    EXPECT_LE(weighted_norm(Vector(first.q * first.r_factor.col(j) - a.col(j)), w),
              1e-9 * std::max(1.0, weighted_norm(Vector(a.col(j)), w)));

  MgsOptions other;
  other.seed = 99;
  const auto reseeded = weighted_mgs(a, w, other);
  EXPECT_GT(max_abs(reseeded.q.col(3) - first.q.col(3)), 1e-3);
}

TEST(WeightedMgs, IllConditionedInputUsesHouseholderPrepass)
{
  Matrix a = random_matrix(40, 3, 11);
  a.col(2) = a.col(0) + 1e-9 * a.col(2);
  const WeightVector w = WeightVector::uniform(40, 0.05);
  const auto qr = weighted_mgs(a, w);
  EXPECT_TRUE(qr.householder_prepass);
  EXPECT_LE(orthonormality_defect(qr.q, w), 1e-12);
  EXPECT_LE(weighted_norm(Vector(qr.q * qr.r_factor.col(2) - a.col(2)), w), 1e-10 * weighted_norm(Vector(a.col(2)), w));
}

// ---------------------------------------------------------------- weighted SVD

TEST(WeightedSvd, ExactRankOne)
{
  const auto g = uniform_grid(0.0, 2.0, 30);
  const auto q = gauss_legendre(12);
  const WeightVector wx = WeightVector::uniform(30, g.dx);
  const WeightVector wmu(q.weights);
  const Matrix f = random_matrix(30, 1, 5) * random_matrix(1, 12, 6);
  const auto svd = weighted_truncated_svd(f, 1, wx, wmu);
  EXPECT_LE(weighted_norm(Matrix(f - svd.x * svd.s * svd.v.transpose()), wx, wmu), 1e-12 * weighted_norm(f, wx, wmu));
  EXPECT_LE(svd.sigma_tail, 1e-12 * svd.s(0, 0));
}

TEST(WeightedSvd, KnownWeightedSpectrum)
{
  const auto q = gauss_legendre(10);
  const WeightVector wx = WeightVector::uniform(25, 0.08);
  const WeightVector wmu(q.weights);
  const auto xq = weighted_mgs(random_matrix(25, 2, 1), wx).q;
  const auto vq = weighted_mgs(random_matrix(10, 2, 2), wmu).q;
  const Matrix f = 3.0 * xq.col(0) * vq.col(0).transpose() + 1.0 * xq.col(1) * vq.col(1).transpose();
  const auto svd = weighted_truncated_svd(f, 1, wx, wmu);
  EXPECT_NEAR(svd.s(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(svd.sigma_tail, 1.0, 1e-12);
}

TEST(WeightedSvd, FullRankIsExact)
{
  const WeightVector wx = WeightVector::uniform(9, 0.3);
  const WeightVector wmu(gauss_legendre(6).weights);
  const Matrix f = random_matrix(9, 6, 4);
  const auto svd = weighted_truncated_svd(f, 6, wx, wmu);
  EXPECT_LE(max_abs(f - svd.x * svd.s * svd.v.transpose()), 1e-11 * max_abs(f));
  EXPECT_EQ(svd.sigma_tail, 0.0);
  EXPECT_LE(orthonormality_defect(svd.x, wx), 1e-12);
  EXPECT_LE(orthonormality_defect(svd.v, wmu), 1e-12);
}

TEST(WeightedSvd, RankOutOfRange)
{
  const WeightVector wx = WeightVector::uniform(4, 1.0);
  const WeightVector wmu = WeightVector::uniform(3, 1.0);
  EXPECT_THROW(weighted_truncated_svd(Matrix::Ones(4, 3), 0, wx, wmu), InvalidArgument);
  EXPECT_THROW(weighted_truncated_svd(Matrix::Ones(4, 3), 4, wx, wmu), InvalidArgument);
}

TEST(WeightedSvd, TruncationOptimality)
{
  const WeightVector wx = WeightVector::uniform(20, 0.1);
  const WeightVector wmu(gauss_legendre(30).weights);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix f = random_matrix(20, 30, 40 + seed);
    const Vector sigma = weighted_singular_values(f, wx, wmu);
    for (Index r = 1; r <= 20; ++r) {
      const auto svd = weighted_truncated_svd(f, r, wx, wmu);
      const double error = weighted_norm(Matrix(f - svd.x * svd.s * svd.v.transpose()), wx, wmu);
      const double tail = r < 20 ? sigma.tail(20 - r).norm() : 0.0;
      EXPECT_NEAR(error, tail, 1e-10 * std::max(tail, sigma[0] * 1e-3)) << r;
    }
  }
}

// ---------------------------------------------------------------- dense expm

TEST(DenseExpm, Zero) { EXPECT_LE(max_abs(dense_expm(Matrix::Zero(5, 5)) - Matrix::Identity(5, 5)), 0.0); }

TEST(DenseExpm, Diagonal)
{
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = -1.0;
  const Matrix e = dense_expm(a);
  EXPECT_NEAR(e(0, 0), std::exp(1.0), 1e-13);
  EXPECT_NEAR(e(1, 1), std::exp(-1.0), 1e-13);
  EXPECT_NEAR(e(0, 1), 0.0, 1e-13);
}

TEST(DenseExpm, RotationGenerator)
{
  Matrix a(2, 2);
  a << 0, 1, -1, 0;
  Matrix expected(2, 2);
  expected << std::cos(1.0), std::sin(1.0), -std::sin(1.0), std::cos(1.0);
  EXPECT_LE(max_abs(dense_expm(a) - expected), 1e-12);
}

TEST(DenseExpm, AgreesWithEigenMatrixFunctions)
{
  for (int trial = 0; trial < 10; ++trial) {
    const double scale = std::pow(10.0, 0.5 * trial - 3.0);
    const Matrix a = scale * random_matrix(12, 12, 200 + trial);
    const Matrix ours = dense_expm(a);
    const Matrix eigen = a.exp();
    EXPECT_LE(max_abs(ours - eigen), 1e-11 * max_abs(eigen)) << scale;
  }
}

TEST(DenseExpm, ComplexHermitianGeneratorIsUnitary)
{
  const Matrix h = random_matrix(8, 8, 17);
  const ComplexMatrix a = Complex(0.0, 3.0) * (h + h.transpose()).cast<Complex>();
  const ComplexMatrix u = dense_expm<Complex>(a);
  EXPECT_LE((u.adjoint() * u - ComplexMatrix::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DenseExpm, SizeLimit)
{
  EXPECT_THROW(dense_expm(Matrix::Zero(11, 11), 10), InvalidArgument);
  EXPECT_THROW(dense_expm(Matrix::Zero(3, 4)), InvalidArgument);
}

// ---------------------------------------------------------------- expmv

TEST(Expmv, ZeroTimeReturnsInput)
{
  const SparseOperator op("random", random_sparse(30, 0.2, 1));
  const Vector v = random_matrix(30, 1, 2);
  EXPECT_EQ(expmv(op, 0.0, v), v);
}

TEST(Expmv, DiagonalOperator)
{
  SparseMatrix d(6, 6);
  const double entries[] = {-3.0, -1.0, 0.0, 0.5, 1.0, 2.0};
  for (int i = 0; i < 6; ++i) d.insert(i, i) = entries[i];
  const SparseOperator op("diag", d);
  const Vector v = Vector::Ones(6);
  const Vector w = expmv(op, 0.7, v, 1e-12);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(w[i], std::exp(0.7 * entries[i]), 1e-12 * std::exp(0.7 * entries[i]));
}

TEST(Expmv, RandomDenseOracle)
{
  const Matrix a = random_matrix(20, 20, 77);
  const SparseOperator op("dense20", SparseMatrix(a.sparseView()));
  const Vector v = random_matrix(20, 1, 78);
  const Vector expected = dense_expm(a) * v;
  EXPECT_LE((expmv(op, 1.0, v, 1e-10) - expected).norm(), 1e-9 * expected.norm());
}

TEST(Expmv, MatrixFreeOperatorMatchesMaterialised)
{
  const SparseMatrix a = random_sparse(40, 0.1, 31);
  const SparseOperator op("explicit", a);
  const SparseOperator free("free", 40, [a](const Vector& in, Vector& out) { out = a * in; });
  const Vector v = random_matrix(40, 1, 32);
  const Vector expected = dense_expm(Matrix(0.8 * Matrix(a))) * v;
  EXPECT_LE((expmv(free, 0.8, v, 1e-11) - expected).norm(), 1e-9 * expected.norm());
  EXPECT_LE((expmv(op, 0.8, v, 1e-11) - expected).norm(), 1e-9 * expected.norm());
}

TEST(Expmv, SemigroupProperty)
{
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Index n = 100 + 130 * static_cast<Index>(seed);
    const SparseOperator op("random", random_sparse(n, 5.0 / static_cast<double>(n), 300 + seed));
    const Vector v = random_matrix(n, 1, 400 + seed);
    const double tol = 1e-10;
    const Vector once = expmv(op, 0.9, v, tol);
    const Vector twice = expmv(op, 0.5, expmv(op, 0.4, v, tol), tol);
    EXPECT_LE((once - twice).norm(), 10.0 * tol * once.norm()) << n;
  }
}

TEST(Expmv, SkewOperatorPreservesWeightedNorm)
{
  // A = diag(w)^{-1} (M - M^T) is skew in the w inner product.
  const Index n = 60;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> wdist(0.5, 2.0);
  Vector w(n);
  for (Index i = 0; i < n; ++i) w[i] = wdist(rng);
  const Matrix m = random_matrix(n, n, 6);
  const Matrix a = w.cwiseInverse().asDiagonal() * (m - m.transpose());
  const SparseOperator op("skew", SparseMatrix(a.sparseView()));
  const Vector v = random_matrix(n, 1, 7);
  const WeightVector weights(w);
  const double tol = 1e-10;
  const Vector out = expmv(op, 0.3, v, tol);
  EXPECT_NEAR(weighted_norm(out, weights), weighted_norm(v, weights), 10.0 * tol * weighted_norm(v, weights));
}

TEST(Expmv, StiffDissipativeOperator)
{
  const double eps = 1e-3;
  SparseMatrix a = random_sparse(50, 0.1, 9);
  a = a / (eps * eps);
  SparseMatrix shift(50, 50);
  shift.setIdentity();
  a -= shift * (60.0 / (eps * eps)); // strongly dissipative
  const SparseOperator op("stiff", a);
  const Vector v = random_matrix(50, 1, 10);
  const Vector expected = dense_expm(Matrix(1e-4 * Matrix(a))) * v;
  const Vector got = expmv(op, 1e-4, v, 1e-10);
  EXPECT_LE((got - expected).norm(), 1e-8 * expected.norm());
}

TEST(Expmv, OverflowIsReported)
{
  SparseMatrix a(3, 3);
  a.insert(0, 0) = 800.0;
  a.insert(1, 1) = 1.0;
  a.insert(2, 2) = 1.0;
  const SparseOperator op("blowup", a);
  try {
    expmv(op, 1.0, Vector::Ones(3));
    FAIL() << "expected NumericalFailure";
  } catch (const NumericalFailure& e) {
    EXPECT_NE(std::string(e.what()).find("blowup"), std::string::npos);
  }
}

TEST(Expmv, LengthMismatch)
{
  const SparseOperator op("small", random_sparse(4, 0.5, 1));
  EXPECT_THROW(expmv(op, 1.0, Vector::Ones(5)), InvalidArgument);
}

TEST(SparseOperator, Linearity)
{
  const SparseOperator op("random", random_sparse(80, 0.05, 12));
  std::mt19937_64 rng(13);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 10; ++trial) {
    const Vector u = random_matrix(80, 1, 500 + trial);
    const Vector v = random_matrix(80, 1, 600 + trial);
    const double alpha = normal(rng);
    const double beta = normal(rng);
    const Vector lhs = op.apply(Vector(alpha * u + beta * v));
    const Vector rhs = alpha * op.apply(u) + beta * op.apply(v);
    EXPECT_LE((lhs - rhs).norm(), 1e-12 * std::max(1.0, rhs.norm()));
  }
}
