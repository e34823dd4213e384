#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <complex>

namespace lrgap {

using Index = Eigen::Index;
using Complex = std::complex<double>;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;

} // namespace lrgap
