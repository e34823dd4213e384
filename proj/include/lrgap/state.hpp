#pragma once

#include "types.hpp"

namespace lrgap {

/// f = x * s * v^T with x orthonormal in the dx-weighted and v in the w_mu-weighted inner product.
/// s is a general r x r matrix; only truncated SVDs produce a diagonal one.
struct LowRankState {
  Matrix x;
  Matrix s;
  Matrix v;

  Index rank() const { return s.rows(); }
};

inline Matrix reconstruct(const LowRankState& state) { return state.x * state.s * state.v.transpose(); }

} // namespace lrgap
