#pragma once

#include <stdexcept>
#include <string>

namespace lrgap {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
  using Error::Error;
};

/// An input requirement (orthonormality, shape agreement between factors) did not hold.
class PreconditionViolation : public Error {
public:
  using Error::Error;
};

/// Overflow or other non-finite values appeared while propagating.
class NumericalFailure : public Error {
public:
  using Error::Error;
};

/// Every column of a factor collapsed during orthonormalisation.
class DegenerateState : public Error {
public:
  using Error::Error;
};

/// Problem too large for a dense or reference computation.
class SizeCapExceeded : public InvalidArgument {
public:
  using InvalidArgument::InvalidArgument;
};

namespace detail {

inline void require(bool condition, const std::string& message)
{
  if (!condition) throw InvalidArgument(message);
}

} // namespace detail
} // namespace lrgap
