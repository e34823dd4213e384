#pragma once

// Discrete Fourier diagonalisation of periodic circulant stencils.
//
// On a uniform periodic grid the centered first difference and the three-point second difference
// are circulant; the forward DFT X_k = sum_j x_j exp(-2 pi i jk/n) maps them to
//   D_x  -> i sin(2 pi k/n) / dx
//   D_xx -> -4 sin^2(pi k/n) / dx^2

#include "grid.hpp"
#include "types.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <numbers>

namespace lrgap {

class PeriodicSpectrum {
public:
  explicit PeriodicSpectrum(const SpatialGrid& grid) : n_(grid.n_x), first_(grid.n_x), second_(grid.n_x)
  {
    for (Index k = 0; k < n_; ++k) {
      const double angle = std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_);
      // exact zeros for the constant and the (even n) Nyquist mode
      first_[k] = (k == 0 || 2 * k == n_) ? 0.0 : std::sin(2.0 * angle) / grid.dx;
      const double s = std::sin(angle);
      second_[k] = -4.0 * s * s / (grid.dx * grid.dx);
    }
  }

  Index size() const { return n_; }
  /// Imaginary part of the D_x eigenvalue of mode k.
  double first_derivative_symbol(Index k) const { return first_[k]; }
  /// D_xx eigenvalue of mode k.
  double second_derivative_symbol(Index k) const { return second_[k]; }

  /// Column-wise forward DFT; row k of the result holds mode k.
  ComplexMatrix forward(const Matrix& real_columns) const
  {
    Eigen::FFT<double> fft;
    ComplexMatrix out(n_, real_columns.cols());
    Eigen::VectorXd in(n_);
    Eigen::VectorXcd spectrum(n_);
    for (Index j = 0; j < real_columns.cols(); ++j) {
      in = real_columns.col(j);
      fft.fwd(spectrum, in);
      out.col(j) = spectrum;
    }
    return out;
  }

  /// Inverse of forward() for spectra of real data (Hermitian symmetric columns).
  Matrix inverse_real(const ComplexMatrix& modes) const
  {
    Eigen::FFT<double> fft;
    Matrix out(n_, modes.cols());
    Eigen::VectorXcd spectrum(n_);
    Eigen::VectorXcd values(n_);
    for (Index j = 0; j < modes.cols(); ++j) {
      spectrum = modes.col(j);
      fft.inv(values, spectrum);
      out.col(j) = values.real();
    }
    return out;
  }

  /// Mode paired with k by conjugate symmetry of real data.
  Index partner(Index k) const { return k == 0 ? 0 : n_ - k; }

private:
  Index n_;
  Vector first_;
  Vector second_;
};

} // namespace lrgap
