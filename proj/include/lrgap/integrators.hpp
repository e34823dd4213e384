#pragma once

// One-step maps of the low-rank integrators (GAP, PSI, BUG) and of the full reference solver.
//
// GAP:  L-step with X0 frozen -> V1 = MGS(L1);  K-step from K0 = X0 S0 (V0^T W V1) with V1 frozen
//       -> (X1, S1) = MGS(K1).
// PSI:  L-step as GAP, backward S-step with (X0, V1), K-step from X0 S with V1 frozen.
// BUG:  L-step and K-step from the same initial factors, Galerkin S-step in (X1, V1).
//
// Every linear substep flow is advanced by its exponential (default) or by one implicit Euler step.

#include "errors.hpp"
#include "expm.hpp"
#include "lowrank_state.hpp"
#include "propagators.hpp"
#include "rte_model.hpp"
#include "state.hpp"
#include "weighted_linalg.hpp"

#include <Eigen/LU>
#include <Eigen/SparseLU>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace lrgap {

enum class Scheme { gap, psi, bug, reference };
enum class SubstepSolver { exponential, implicit_euler };

/// How exponential substeps are evaluated.
///   spectral: exact block-diagonalised propagators (stiffness independent)
///   taylor:   expmv (Taylor with scaling) on the materialised Kronecker operators
enum class ExponentialKernel { spectral, taylor };

struct StepConfig {
  double dt = 0.1;
  SubstepSolver substep_solver = SubstepSolver::exponential;
  ExponentialKernel kernel = ExponentialKernel::spectral;
  double expmv_tol = 1e-10;
  double linear_solve_tol = 1e-12;
  double mgs_rank_tol = 1e-10;
  /// Keep V(:,0) proportional to 1 and V(:,1) proportional to mu after every step.
  bool basis_pinning = false;
  std::uint64_t seed = 20250101;

  void validate() const
  {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("StepConfig: dt must be positive");
    if (!(expmv_tol > 0.0 && expmv_tol < 1e-2)) throw InvalidArgument("StepConfig: expmv_tol must lie in (0, 1e-2)");
    if (!(linear_solve_tol > 0.0 && linear_solve_tol < 1e-2))
      throw InvalidArgument("StepConfig: linear_solve_tol must lie in (0, 1e-2)");
  }
};

struct SubstepTrace {
  std::string name;
  double norm_before = 0.0;
  double norm_after = 0.0;
  double orthonormality_defect = 0.0;
  Index replaced_columns = 0;
  std::uint64_t seed = 0;
};

struct StepTrace {
  Index step = 0;
  std::vector<SubstepTrace> substeps;
  double defect_x = 0.0;
  double defect_v = 0.0;
  double norm = 0.0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt)
{
  // splitmix64 finaliser
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline MgsOptions mgs_options(const StepConfig& cfg, std::uint64_t salt)
{
  MgsOptions options;
  options.rank_tol = cfg.mgs_rank_tol;
  options.seed = mix_seed(cfg.seed, salt);
  return options;
}

inline Vector vec(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Matrix unvec(const Vector& v, Index rows, Index cols) { return Eigen::Map<const Matrix>(v.data(), rows, cols); }

/// One implicit Euler step (I - dt A) y1 = y0 with a sparse direct solve and iterative refinement.
inline Vector implicit_euler(const SparseOperator& op, double dt, const Vector& y0, double tol)
{
  const SparseMatrix* a = op.matrix();
  if (!a) throw InvalidArgument("implicit Euler needs a materialised operator ('" + op.name() + "')");
  SparseMatrix system(a->rows(), a->cols());
  system.setIdentity();
  system -= dt * (*a);
  Eigen::SparseMatrix<double> column_major = system;
  column_major.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(column_major);
  if (lu.info() != Eigen::Success) throw NumericalFailure("implicit Euler: factorisation of '" + op.name() + "' failed");
  Vector y = lu.solve(y0);
  const double reference = std::max(y0.norm(), std::numeric_limits<double>::min());
  for (int refinement = 0; refinement < 5; ++refinement) {
    const Vector residual = y0 - column_major * y;
    if (residual.norm() <= tol * reference) break;
    y += lu.solve(residual);
  }
  if (!y.allFinite()) throw NumericalFailure("implicit Euler on '" + op.name() + "': non-finite solution");
  return y;
}

inline Matrix flow_L(const RteModel& model, const Matrix& a_x, const Matrix& l_factor, const StepConfig& cfg)
{
  if (cfg.substep_solver == SubstepSolver::exponential && cfg.kernel == ExponentialKernel::spectral)
    return propagate_L(model, a_x, l_factor, cfg.dt);
  SubstepMatrices sub;
  sub.a_x = a_x;
  const SparseOperator op = operator_L(model, sub);
  const Vector start = vec(l_factor);
  const Vector end = cfg.substep_solver == SubstepSolver::implicit_euler
                         ? implicit_euler(op, cfg.dt, start, cfg.linear_solve_tol)
                         : expmv(op, cfg.dt, start, cfg.expmv_tol);
  return unvec(end, l_factor.rows(), l_factor.cols());
}

inline Matrix flow_K(const RteModel& model, const SubstepMatrices& sub, const Matrix& k_factor, const StepConfig& cfg)
{
  if (cfg.substep_solver == SubstepSolver::exponential && cfg.kernel == ExponentialKernel::spectral)
    return propagate_K(model, sub.b_mu, sub.c_mu, k_factor, cfg.dt, sub.g_mu);
  const SparseOperator op = operator_K(model, sub);
  const Vector start = vec(k_factor);
  const Vector end = cfg.substep_solver == SubstepSolver::implicit_euler
                         ? implicit_euler(op, cfg.dt, start, cfg.linear_solve_tol)
                         : expmv(op, cfg.dt, start, cfg.expmv_tol);
  return unvec(end, k_factor.rows(), k_factor.cols());
}

/// S-step flow dS/dt = direction * G(S) on the dense r^2 x r^2 Galerkin generator.
inline Matrix flow_S(const RteModel& model, const SubstepMatrices& sub, const Matrix& s, double direction,
                     const StepConfig& cfg)
{
  const Index r = s.rows();
  const Matrix generator = direction * operator_S_dense(model, sub);
  Vector result;
  if (cfg.substep_solver == SubstepSolver::implicit_euler) {
    const Matrix system = Matrix::Identity(r * r, r * r) - cfg.dt * generator;
    result = system.partialPivLu().solve(vec(s));
  } else {
    result = dense_expm(Matrix(cfg.dt * generator)) * vec(s);
  }
  if (!result.allFinite()) throw NumericalFailure("S-step: non-finite coefficients");
  return unvec(result, r, r);
}

inline double weighted_factor_norm(const Matrix& m, const WeightVector& w)
{
  return std::sqrt((w.values().asDiagonal() * m.cwiseAbs2()).sum());
}

inline QrResult orthonormalise(const Matrix& factor, const WeightVector& w, const StepConfig& cfg, std::uint64_t salt,
                               const char* what)
{
  QrResult qr = weighted_mgs(factor, w, mgs_options(cfg, salt));
  if (static_cast<Index>(qr.replaced_columns.size()) == factor.cols())
    throw DegenerateState(std::string(what) + ": every column collapsed during orthonormalisation");
  return qr;
}

inline void record(StepTrace* trace, SubstepTrace entry)
{
  if (trace) trace->substeps.push_back(std::move(entry));
}

/// Replaces V by an orthonormal basis whose first columns are 1/sqrt(2) and sqrt(3/2) mu, projecting S.
inline LowRankState pin_basis(const RteModel& model, LowRankState state, const StepConfig& cfg)
{
  const Index r = state.rank();
  if (r < 2 || model.n_mu() < 2) return state;
  Matrix candidates(model.n_mu(), r + 2);
  candidates.col(0) = Vector::Constant(model.n_mu(), 1.0 / std::sqrt(2.0));
  candidates.col(1) = std::sqrt(1.5) * model.mu();
  candidates.rightCols(r) = state.v;
  const QrResult qr = weighted_mgs(candidates, model.wmu(), mgs_options(cfg, 99));
  const Matrix pinned = qr.q.leftCols(r);
  state.s = state.s * weighted_inner(state.v, pinned, model.wmu());
  state.v = pinned;
  return state;
}

inline void finish_trace(StepTrace* trace, const RteModel& model, const LowRankState& state)
{
  if (!trace) return;
  const OrthonormalityDefects d = orthonormality_defects(model, state);
  trace->defect_x = d.x;
  trace->defect_v = d.v;
  trace->norm = state_norm(state);
}

/// Shared first substep of all three schemes: L = V S^T evolved with X frozen, V1 = MGS(L1).
inline QrResult l_step(const RteModel& model, const LowRankState& state, const StepConfig& cfg, StepTrace* trace)
{
  const Matrix a_x = spatial_coupling(model, state.x);
  const Matrix l0 = state.v * state.s.transpose();
  const Matrix l1 = flow_L(model, a_x, l0, cfg);
  QrResult qr = orthonormalise(l1, model.wmu(), cfg, 1, "L-step");
  record(trace, {"L-step", weighted_factor_norm(l0, model.wmu()), weighted_factor_norm(l1, model.wmu()),
                 orthonormality_defect(qr.q, model.wmu()), static_cast<Index>(qr.replaced_columns.size()),
                 mix_seed(cfg.seed, 1)});
  return qr;
}

inline void check_state(const RteModel& model, const LowRankState& state, const char* scheme)
{
  if (state.x.rows() != model.n_x() || state.v.rows() != model.n_mu() || state.s.rows() != state.s.cols() ||
      state.x.cols() != state.s.rows() || state.v.cols() != state.s.cols())
    throw InvalidArgument(std::string(scheme) + ": state factor shapes are inconsistent with the model");
  check_orthonormal(state.x, model.wx(), "X");
  check_orthonormal(state.v, model.wmu(), "V");
}

} // namespace detail

/// Galerkin Alternating Projection step.
inline LowRankState gap_step(const RteModel& model, const LowRankState& state, const StepConfig& cfg,
                             StepTrace* trace = nullptr)
{
  cfg.validate();
  detail::check_state(model, state, "gap_step");
  const QrResult v_qr = detail::l_step(model, state, cfg, trace);
  const Matrix& v1 = v_qr.q;

  const Matrix k0 = state.x * state.s * weighted_inner(state.v, v1, model.wmu());
  SubstepMatrices sub;
  angular_couplings(model, v1, sub.b_mu, sub.c_mu, &sub.g_mu);
  const Matrix k1 = detail::flow_K(model, sub, k0, cfg);
  const QrResult x_qr = detail::orthonormalise(k1, model.wx(), cfg, 2, "K-step");
  detail::record(trace, {"K-step", detail::weighted_factor_norm(k0, model.wx()),
                         detail::weighted_factor_norm(k1, model.wx()), orthonormality_defect(x_qr.q, model.wx()),
                         static_cast<Index>(x_qr.replaced_columns.size()), detail::mix_seed(cfg.seed, 2)});

  LowRankState next{x_qr.q, x_qr.r_factor, v1};
  if (cfg.basis_pinning) next = detail::pin_basis(model, std::move(next), cfg);
  detail::finish_trace(trace, model, next);
  return next;
}

/// Projector-splitting step with the backward coefficient substep.
inline LowRankState psi_step(const RteModel& model, const LowRankState& state, const StepConfig& cfg,
                             StepTrace* trace = nullptr)
{
  cfg.validate();
  detail::check_state(model, state, "psi_step");
  const QrResult v_qr = detail::l_step(model, state, cfg, trace);
  const Matrix& v1 = v_qr.q;

  // l(t1) = X0 L1^T = X0 R^T V1^T
  const Matrix s_hat = v_qr.r_factor.transpose();
  const SubstepMatrices sub = assemble_substeps(model, state.x, v1);
  Matrix s_tilde;
  try {
    s_tilde = detail::flow_S(model, sub, s_hat, -1.0, cfg);
  } catch (const NumericalFailure& e) {
    detail::record(trace, {"S-step (backward)", s_hat.norm(), std::numeric_limits<double>::infinity(), 0.0, 0, 0});
    throw NumericalFailure(std::string("psi_step: backward S-step overflowed (") + e.what() +
                           "); the backward substep amplifies the collision modes by exp(dt/eps^2), "
                           "reduce dt or use gap/bug for small eps");
  }
  detail::record(trace, {"S-step (backward)", s_hat.norm(), s_tilde.norm(), 0.0, 0, 0});

  const Matrix k0 = state.x * s_tilde;
  const Matrix k1 = detail::flow_K(model, sub, k0, cfg);
  const QrResult x_qr = detail::orthonormalise(k1, model.wx(), cfg, 2, "K-step");
  detail::record(trace, {"K-step", detail::weighted_factor_norm(k0, model.wx()),
                         detail::weighted_factor_norm(k1, model.wx()), orthonormality_defect(x_qr.q, model.wx()),
                         static_cast<Index>(x_qr.replaced_columns.size()), detail::mix_seed(cfg.seed, 2)});

  LowRankState next{x_qr.q, x_qr.r_factor, v1};
  if (cfg.basis_pinning) next = detail::pin_basis(model, std::move(next), cfg);
  detail::finish_trace(trace, model, next);
  return next;
}

/// Basis-update & Galerkin step.
inline LowRankState bug_step(const RteModel& model, const LowRankState& state, const StepConfig& cfg,
                             StepTrace* trace = nullptr)
{
  cfg.validate();
  detail::check_state(model, state, "bug_step");
  const QrResult v_qr = detail::l_step(model, state, cfg, trace);
  const Matrix& v1 = v_qr.q;

  SubstepMatrices initial_sub;
  angular_couplings(model, state.v, initial_sub.b_mu, initial_sub.c_mu, &initial_sub.g_mu);
  const Matrix k0 = state.x * state.s;
  const Matrix k1 = detail::flow_K(model, initial_sub, k0, cfg);
  const QrResult x_qr = detail::orthonormalise(k1, model.wx(), cfg, 2, "K-step");
  const Matrix& x1 = x_qr.q;
  detail::record(trace, {"K-step", detail::weighted_factor_norm(k0, model.wx()),
                         detail::weighted_factor_norm(k1, model.wx()), orthonormality_defect(x1, model.wx()),
                         static_cast<Index>(x_qr.replaced_columns.size()), detail::mix_seed(cfg.seed, 2)});

  const Matrix s0 = weighted_inner(x1, state.x, model.wx()) * state.s * weighted_inner(state.v, v1, model.wmu());
  const SubstepMatrices sub = assemble_substeps(model, x1, v1);
  const Matrix s1 = detail::flow_S(model, sub, s0, 1.0, cfg);
  detail::record(trace, {"S-step", s0.norm(), s1.norm(), 0.0, 0, 0});

  LowRankState next{x1, s1, v1};
  if (cfg.basis_pinning) next = detail::pin_basis(model, std::move(next), cfg);
  detail::finish_trace(trace, model, next);
  return next;
}

/// Largest n_x * n_mu accepted by the reference solver.
inline constexpr Index default_reference_cap = 200'000;

/// exp(dt A_full) F, the reference flow of the full semi-discrete system.
inline Matrix reference_step(const RteModel& model, const Matrix& f, const StepConfig& cfg,
                             Index size_cap = default_reference_cap)
{
  cfg.validate();
  detail::check_shape(model, f, "reference_step");
  const Index dim = model.n_x() * model.n_mu();
  if (dim > size_cap) {
    std::ostringstream msg;
    msg << "reference solver: n_x * n_mu = " << model.n_x() << " * " << model.n_mu() << " = " << dim
        << " exceeds the size cap " << size_cap << "; reduce n_x or n_mu";
    throw SizeCapExceeded(msg.str());
  }
  if (cfg.kernel == ExponentialKernel::spectral) return propagate_full(model, f, cfg.dt);
  const SparseOperator op = full_operator(model);
  return detail::unvec(expmv(op, cfg.dt, detail::vec(f), cfg.expmv_tol), f.rows(), f.cols());
}

struct IntegrateOptions {
  bool debug_trace = false;
  /// Reference scheme: one exponential over n_steps * dt instead of n_steps exponentials.
  bool coalesce_reference = true;
  Index reference_cap = default_reference_cap;
};

struct IntegrationResult {
  Scheme scheme = Scheme::gap;
  LowRankState state; ///< empty for the reference scheme
  Matrix full;        ///< final solution as a full matrix
  std::vector<StepTrace> trace;
};

namespace detail {

template <typename Fn>
auto annotate_step(Index step, Fn&& fn) -> decltype(fn())
{
  const std::string prefix = "step " + std::to_string(step) + ": ";
  try {
    return fn();
  } catch (const SizeCapExceeded& e) {
    throw SizeCapExceeded(prefix + e.what());
  } catch (const NumericalFailure& e) {
    throw NumericalFailure(prefix + e.what());
  } catch (const DegenerateState& e) {
    throw DegenerateState(prefix + e.what());
  } catch (const PreconditionViolation& e) {
    throw PreconditionViolation(prefix + e.what());
  }
}

} // namespace detail

inline LowRankState scheme_step(Scheme scheme, const RteModel& model, const LowRankState& state, const StepConfig& cfg,
                                StepTrace* trace = nullptr)
{
  switch (scheme) {
  case Scheme::gap: return gap_step(model, state, cfg, trace);
  case Scheme::psi: return psi_step(model, state, cfg, trace);
  case Scheme::bug: return bug_step(model, state, cfg, trace);
  case Scheme::reference: break;
  }
  throw InvalidArgument("scheme_step: the reference scheme has no low-rank step");
}

/// Advances a low-rank state by n_steps steps of the chosen scheme.
inline IntegrationResult integrate(const RteModel& model, const LowRankState& initial, Scheme scheme,
                                   const StepConfig& cfg, Index n_steps, const IntegrateOptions& options = {})
{
  detail::require(n_steps >= 1, "integrate: n_steps must be >= 1");
  cfg.validate();
  IntegrationResult result;
  result.scheme = scheme;
  if (scheme == Scheme::reference) {
    const Matrix f0 = reconstruct(initial);
    IntegrationResult full_result;
    StepConfig step_cfg = cfg;
    if (options.coalesce_reference) {
      step_cfg.dt = cfg.dt * static_cast<double>(n_steps);
      result.full = detail::annotate_step(1, [&] { return reference_step(model, f0, step_cfg, options.reference_cap); });
    } else {
      result.full = f0;
      for (Index i = 1; i <= n_steps; ++i)
        result.full = detail::annotate_step(i, [&] { return reference_step(model, result.full, cfg, options.reference_cap); });
    }
    return result;
  }

  LowRankState state = initial;
  for (Index i = 1; i <= n_steps; ++i) {
    StepConfig step_cfg = cfg;
    step_cfg.seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(1000 + i));
    StepTrace trace;
    trace.step = i;
    state = detail::annotate_step(i, [&] {
      return scheme_step(scheme, model, state, step_cfg, options.debug_trace ? &trace : nullptr);
    });
    if (options.debug_trace) result.trace.push_back(std::move(trace));
  }
  result.full = reconstruct(state);
  result.state = std::move(state);
  return result;
}

/// Reference integration starting from a full matrix.
inline Matrix integrate_reference(const RteModel& model, const Matrix& f0, const StepConfig& cfg, Index n_steps,
                                  const IntegrateOptions& options = {})
{
  detail::require(n_steps >= 1, "integrate_reference: n_steps must be >= 1");
  if (options.coalesce_reference) {
    StepConfig step_cfg = cfg;
    step_cfg.dt = cfg.dt * static_cast<double>(n_steps);
    return reference_step(model, f0, step_cfg, options.reference_cap);
  }
  Matrix f = f0;
  for (Index i = 1; i <= n_steps; ++i)
    f = detail::annotate_step(i, [&] { return reference_step(model, f, cfg, options.reference_cap); });
  return f;
}

} // namespace lrgap
