#pragma once

// Config-driven experiment drivers behind the `rte` tool: single runs, eps and dt sweeps,
// singular value spectra and scheme comparisons. Results go to CSV (tables) and JSON (metadata).

#include "errors.hpp"
#include "grid.hpp"
#include "integrators.hpp"
#include "lowrank_state.hpp"
#include "rte_model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace lrgap {

using Json = nlohmann::ordered_json;

/// Malformed or inconsistent configuration; the message starts with the offending field path.
class ConfigError : public InvalidArgument {
public:
  using InvalidArgument::InvalidArgument;
};

struct FourierTerm {
  double amplitude = 1.0;
  double wavenumber = 0.0;
  int power = 0;
  bool cosine = false;

  bool operator==(const FourierTerm&) const = default;
};

enum class InitialKind { paper_ap, paper_dt, custom_poly_fourier };
enum class ReferenceMode { coalesced, stepped };

struct RunConfig {
  double a = 0.0;
  double b = 2.0;
  Index n_x = 200;
  Index n_mu = 100;
  Index rank = 5;
  std::vector<double> eps{1.0};
  std::vector<double> dt{0.1};
  double t_final = 1.0;
  Scheme integrator = Scheme::gap;
  InitialKind initial = InitialKind::paper_ap;
  std::vector<FourierTerm> terms; ///< custom_poly_fourier only
  SubstepSolver substep_solver = SubstepSolver::exponential;
  ExponentialKernel kernel = ExponentialKernel::spectral;
  double expmv_tol = 1e-10;
  double linear_solve_tol = 1e-12;
  std::string output_dir;
  std::uint64_t seed = 20250101;
  bool basis_pinning = false;
  bool debug_trace = false;
  ReferenceMode reference_mode = ReferenceMode::coalesced;
  double reference_dt = 0.01;
  Index reference_cap = default_reference_cap;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename Enum>
struct EnumName {
  Enum value;
  const char* name;
};

inline constexpr EnumName<Scheme> scheme_names[] = {
    {Scheme::gap, "gap"}, {Scheme::psi, "psi"}, {Scheme::bug, "bug"}, {Scheme::reference, "reference"}};
inline constexpr EnumName<InitialKind> initial_names[] = {{InitialKind::paper_ap, "paper_ap"},
                                                          {InitialKind::paper_dt, "paper_dt"},
                                                          {InitialKind::custom_poly_fourier, "custom_poly_fourier"}};
inline constexpr EnumName<SubstepSolver> solver_names[] = {{SubstepSolver::exponential, "exponential"},
                                                           {SubstepSolver::implicit_euler, "implicit_euler"}};
inline constexpr EnumName<ExponentialKernel> kernel_names[] = {{ExponentialKernel::spectral, "spectral"},
                                                               {ExponentialKernel::taylor, "taylor"}};
inline constexpr EnumName<ReferenceMode> reference_mode_names[] = {{ReferenceMode::coalesced, "coalesced"},
                                                                   {ReferenceMode::stepped, "stepped"}};

template <typename Enum, std::size_t N>
const char* enum_to_string(const EnumName<Enum> (&table)[N], Enum value)
{
  for (const auto& entry : table)
    if (entry.value == value) return entry.name;
  return "?";
}

template <typename Enum, std::size_t N>
Enum enum_from_json(const EnumName<Enum> (&table)[N], const Json& j, const std::string& path)
{
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  const auto text = j.get<std::string>();
  std::string allowed;
  for (const auto& entry : table) {
    if (text == entry.name) return entry.value;
    allowed += std::string(allowed.empty() ? "" : ", ") + entry.name;
  }
  throw ConfigError(path + ": unknown value '" + text + "' (expected one of " + allowed + ")");
}

inline double number_at(const Json& j, const std::string& path)
{
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  return j.get<double>();
}

inline Index integer_at(const Json& j, const std::string& path)
{
  if (!j.is_number_integer() && !(j.is_number() && std::floor(j.get<double>()) == j.get<double>()))
    throw ConfigError(path + ": expected an integer");
  return static_cast<Index>(j.get<double>());
}

inline bool bool_at(const Json& j, const std::string& path)
{
  if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
  return j.get<bool>();
}

inline std::vector<double> number_list_at(const Json& j, const std::string& path)
{
  if (j.is_number()) return {j.get<double>()};
  if (!j.is_array() || j.empty()) throw ConfigError(path + ": expected a number or a non-empty list of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number_at(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline Json number_list_to_json(const std::vector<double>& values)
{
  if (values.size() == 1) return values.front();
  return Json(values);
}

} // namespace detail

inline const char* to_string(Scheme s) { return detail::enum_to_string(detail::scheme_names, s); }
inline const char* to_string(InitialKind k) { return detail::enum_to_string(detail::initial_names, k); }
inline const char* to_string(SubstepSolver s) { return detail::enum_to_string(detail::solver_names, s); }
inline const char* to_string(ExponentialKernel k) { return detail::enum_to_string(detail::kernel_names, k); }
inline const char* to_string(ReferenceMode m) { return detail::enum_to_string(detail::reference_mode_names, m); }

inline Json to_json(const RunConfig& c)
{
  Json initial;
  initial["type"] = to_string(c.initial);
  if (c.initial == InitialKind::custom_poly_fourier) {
    Json terms = Json::array();
    for (const auto& t : c.terms)
      terms.push_back({{"amplitude", t.amplitude},
                       {"wavenumber", t.wavenumber},
                       {"power", t.power},
                       {"basis", t.cosine ? "cos" : "sin"}});
    initial["terms"] = terms;
  }
  Json j;
  j["domain"] = {c.a, c.b};
  j["n_x"] = c.n_x;
  j["n_mu"] = c.n_mu;
  j["rank"] = c.rank;
  j["eps"] = detail::number_list_to_json(c.eps);
  j["dt"] = detail::number_list_to_json(c.dt);
  j["t_final"] = c.t_final;
  j["integrator"] = to_string(c.integrator);
  j["initial_condition"] = initial;
  j["substep_solver"] = to_string(c.substep_solver);
  j["kernel"] = to_string(c.kernel);
  j["expmv_tol"] = c.expmv_tol;
  j["linear_solve_tol"] = c.linear_solve_tol;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  j["basis_pinning"] = c.basis_pinning;
  j["debug_trace"] = c.debug_trace;
  j["reference_mode"] = to_string(c.reference_mode);
  j["reference_dt"] = c.reference_dt;
  j["reference_cap"] = c.reference_cap;
  return j;
}

inline void validate(const RunConfig& c)
{
  if (!(c.b > c.a)) throw ConfigError("domain: right endpoint must exceed the left one");
  if (c.n_x < 2) throw ConfigError("n_x: must be >= 2");
  if (c.n_mu < 2) throw ConfigError("n_mu: must be >= 2");
  if (c.rank < 1 || c.rank > std::min(c.n_x, c.n_mu)) throw ConfigError("rank: must lie in [1, min(n_x, n_mu)]");
  if (c.eps.empty()) throw ConfigError("eps: must not be empty");
  for (std::size_t i = 0; i < c.eps.size(); ++i)
    if (!(c.eps[i] > 0.0 && c.eps[i] <= 10.0)) throw ConfigError("eps[" + std::to_string(i) + "]: must lie in (0, 10]");
  if (c.dt.empty()) throw ConfigError("dt: must not be empty");
  if (!(c.t_final > 0.0) || !std::isfinite(c.t_final)) throw ConfigError("t_final: must be positive");
  for (std::size_t i = 0; i < c.dt.size(); ++i) {
    const std::string path = "dt[" + std::to_string(i) + "]";
    if (!(c.dt[i] > 0.0)) throw ConfigError(path + ": must be positive");
    const double steps = std::round(c.t_final / c.dt[i]);
    if (steps < 1.0 || std::abs(steps * c.dt[i] - c.t_final) > 1e-9 * c.t_final)
      throw ConfigError(path + ": does not divide t_final");
  }
  if (!(c.expmv_tol > 0.0 && c.expmv_tol < 1e-2)) throw ConfigError("expmv_tol: must lie in (0, 1e-2)");
  if (!(c.linear_solve_tol > 0.0 && c.linear_solve_tol < 1e-2))
    throw ConfigError("linear_solve_tol: must lie in (0, 1e-2)");
  if (c.initial == InitialKind::custom_poly_fourier && c.terms.empty())
    throw ConfigError("initial_condition.terms: custom_poly_fourier needs at least one term");
  for (std::size_t i = 0; i < c.terms.size(); ++i)
    if (c.terms[i].power < 0)
      throw ConfigError("initial_condition.terms[" + std::to_string(i) + "].power: must be >= 0");
  if (!(c.reference_dt > 0.0)) throw ConfigError("reference_dt: must be positive");
  if (c.reference_mode == ReferenceMode::stepped) {
    const double steps = std::round(c.t_final / c.reference_dt);
    if (steps < 1.0 || std::abs(steps * c.reference_dt - c.t_final) > 1e-9 * c.t_final)
      throw ConfigError("reference_dt: does not divide t_final");
  }
  if (c.reference_cap < 0) throw ConfigError("reference_cap: must be >= 0 (0 disables the reference)");
}

inline RunConfig config_from_json(const Json& j)
{
  using namespace detail;
  if (!j.is_object()) throw ConfigError("<root>: expected an object");
  static const char* known[] = {"domain",         "n_x",       "n_mu",          "rank",          "eps",
                                "dt",             "t_final",   "integrator",    "initial_condition",
                                "substep_solver", "kernel",    "expmv_tol",     "linear_solve_tol",
                                "output_dir",     "seed",      "basis_pinning", "debug_trace",
                                "reference_mode", "reference_dt", "reference_cap"};
  for (const auto& item : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return item.key() == k; }) ==
        std::end(known))
      throw ConfigError(item.key() + ": unknown field");

  RunConfig c;
  if (j.contains("domain")) {
    const Json& d = j["domain"];
    if (!d.is_array() || d.size() != 2) throw ConfigError("domain: expected [a, b]");
    c.a = number_at(d[0], "domain[0]");
    c.b = number_at(d[1], "domain[1]");
  }
  if (j.contains("n_x")) c.n_x = integer_at(j["n_x"], "n_x");
  if (j.contains("n_mu")) c.n_mu = integer_at(j["n_mu"], "n_mu");
  if (j.contains("rank")) c.rank = integer_at(j["rank"], "rank");
  if (j.contains("eps")) c.eps = number_list_at(j["eps"], "eps");
  if (j.contains("dt")) c.dt = number_list_at(j["dt"], "dt");
  if (j.contains("t_final")) c.t_final = number_at(j["t_final"], "t_final");
  if (j.contains("integrator")) c.integrator = enum_from_json(scheme_names, j["integrator"], "integrator");
  if (j.contains("initial_condition")) {
    const Json& ic = j["initial_condition"];
    if (ic.is_string()) {
      c.initial = enum_from_json(initial_names, ic, "initial_condition");
    } else if (ic.is_object()) {
      if (!ic.contains("type")) throw ConfigError("initial_condition.type: missing");
      c.initial = enum_from_json(initial_names, ic["type"], "initial_condition.type");
      if (ic.contains("terms")) {
        const Json& terms = ic["terms"];
        if (!terms.is_array()) throw ConfigError("initial_condition.terms: expected a list");
        for (std::size_t i = 0; i < terms.size(); ++i) {
          const std::string path = "initial_condition.terms[" + std::to_string(i) + "]";
          const Json& t = terms[i];
          if (!t.is_object()) throw ConfigError(path + ": expected an object");
          FourierTerm term;
          if (t.contains("amplitude")) term.amplitude = number_at(t["amplitude"], path + ".amplitude");
          if (t.contains("wavenumber")) term.wavenumber = number_at(t["wavenumber"], path + ".wavenumber");
          if (t.contains("power")) term.power = static_cast<int>(integer_at(t["power"], path + ".power"));
          if (t.contains("basis")) {
            if (!t["basis"].is_string()) throw ConfigError(path + ".basis: expected \"sin\" or \"cos\"");
            const auto basis = t["basis"].get<std::string>();
            if (basis != "sin" && basis != "cos") throw ConfigError(path + ".basis: expected \"sin\" or \"cos\"");
            term.cosine = basis == "cos";
          }
          c.terms.push_back(term);
        }
      }
    } else {
      throw ConfigError("initial_condition: expected a name or an object with a type");
    }
  }
  if (j.contains("substep_solver"))
    c.substep_solver = enum_from_json(solver_names, j["substep_solver"], "substep_solver");
  if (j.contains("kernel")) c.kernel = enum_from_json(kernel_names, j["kernel"], "kernel");
  if (j.contains("expmv_tol")) c.expmv_tol = number_at(j["expmv_tol"], "expmv_tol");
  if (j.contains("linear_solve_tol")) c.linear_solve_tol = number_at(j["linear_solve_tol"], "linear_solve_tol");
  if (j.contains("output_dir")) {
    if (!j["output_dir"].is_string()) throw ConfigError("output_dir: expected a string");
    c.output_dir = j["output_dir"].get<std::string>();
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0))
      throw ConfigError("seed: expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("basis_pinning")) c.basis_pinning = bool_at(j["basis_pinning"], "basis_pinning");
  if (j.contains("debug_trace")) c.debug_trace = bool_at(j["debug_trace"], "debug_trace");
  if (j.contains("reference_mode"))
    c.reference_mode = enum_from_json(reference_mode_names, j["reference_mode"], "reference_mode");
  if (j.contains("reference_dt")) c.reference_dt = number_at(j["reference_dt"], "reference_dt");
  if (j.contains("reference_cap")) c.reference_cap = integer_at(j["reference_cap"], "reference_cap");
  validate(c);
  return c;
}

/// Applies `dotted.key=value`; the value is read as JSON, falling back to a plain string.
inline void apply_override(Json& j, const std::string& assignment)
{
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment + ": override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key + ": empty path component in override");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = Json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {})
{
  Json j = Json::parse(text, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("<root>: config is not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {})
{
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), overrides);
}

// ---------------------------------------------------------------------------------------------

/// n_steps = round(t_final / dt); rejects dt that does not divide t_final.
inline Index step_count(double t_final, double dt)
{
  const double steps = std::round(t_final / dt);
  if (steps < 1.0 || std::abs(steps * dt - t_final) > 1e-9 * t_final) {
    std::ostringstream msg;
    msg << "dt = " << dt << " does not divide t_final = " << t_final;
    throw ConfigError(msg.str());
  }
  return static_cast<Index>(steps);
}

inline Matrix initial_condition(const RunConfig& c, const SpatialGrid& grid, const AngularQuadrature& quad)
{
  Matrix f(grid.n_x, quad.size());
  const double pi = std::numbers::pi;
  for (Index i = 0; i < grid.n_x; ++i) {
    const double x = grid.points[i];
    for (Index j = 0; j < quad.size(); ++j) {
      const double mu = quad.nodes[j];
      double value = 0.0;
      switch (c.initial) {
      case InitialKind::paper_ap: value = ((x - 1.0) * (x - 1.0) + 1.0) * (1.0 + mu * mu); break;
      case InitialKind::paper_dt:
        value = 1.0;
        for (int k = 1; k <= 10; ++k) value += std::pow(10.0, -k) * std::sin(k * pi * x) * std::pow(mu, k);
        break;
      case InitialKind::custom_poly_fourier:
        for (const auto& t : c.terms) {
          const double phase = t.wavenumber * pi * x;
          value += t.amplitude * (t.cosine ? std::cos(phase) : std::sin(phase)) * std::pow(mu, t.power);
        }
        break;
      }
      f(i, j) = value;
    }
  }
  return f;
}

struct Problem {
  SpatialGrid grid;
  AngularQuadrature quad;
  Matrix f0;
};

inline Problem make_problem(const RunConfig& c)
{
  Problem p{uniform_grid(c.a, c.b, c.n_x), gauss_legendre(c.n_mu), {}};
  p.f0 = initial_condition(c, p.grid, p.quad);
  return p;
}

inline StepConfig step_config(const RunConfig& c, double dt)
{
  StepConfig s;
  s.dt = dt;
  s.substep_solver = c.substep_solver;
  s.kernel = c.kernel;
  s.expmv_tol = c.expmv_tol;
  s.linear_solve_tol = c.linear_solve_tol;
  s.basis_pinning = c.basis_pinning;
  s.seed = c.seed;
  return s;
}

inline bool reference_fits(const RunConfig& c) { return c.n_x * c.n_mu <= c.reference_cap; }

/// Reference solution at t_final (coalesced or stepped with reference_dt).
inline Matrix reference_solution(const RunConfig& c, const RteModel& model, const Matrix& f0)
{
  IntegrateOptions options;
  options.reference_cap = c.reference_cap;
  if (c.reference_mode == ReferenceMode::coalesced) {
    options.coalesce_reference = true;
    return integrate_reference(model, f0, step_config(c, c.t_final), 1, options);
  }
  options.coalesce_reference = false;
  return integrate_reference(model, f0, step_config(c, c.reference_dt), step_count(c.t_final, c.reference_dt),
                             options);
}

inline Json trace_to_json(const std::vector<StepTrace>& trace)
{
  Json steps = Json::array();
  for (const auto& t : trace) {
    Json subs = Json::array();
    for (const auto& s : t.substeps)
      subs.push_back({{"name", s.name},
                      {"norm_before", s.norm_before},
                      {"norm_after", s.norm_after},
                      {"orthonormality_defect", s.orthonormality_defect},
                      {"replaced_columns", s.replaced_columns},
                      {"seed", s.seed}});
    steps.push_back(
        {{"step", t.step}, {"defect_x", t.defect_x}, {"defect_v", t.defect_v}, {"norm", t.norm}, {"substeps", subs}});
  }
  return steps;
}

// ---------------------------------------------------------------------------------------------

struct RunResult {
  RunConfig config;
  double eps = 0.0;
  double dt = 0.0;
  Index n_steps = 0;
  bool has_reference = false;
  double rel_l2_density = 0.0; ///< vs reference (if has_reference)
  double rel_l2_full = 0.0;    ///< vs reference (if has_reference)
  double rel_l2_density_limit = 0.0; ///< vs the diffusion limit exp(T/3 D_xx) rho0
  double mass = 0.0;
  double initial_mass = 0.0;
  double delta0 = 0.0;
  double sigma_tail = 0.0;     ///< sigma_{r+1} of the weighted reference (0 without reference)
  double sigma_tail_rel = 0.0; ///< sigma_tail / ||reference||_w
  std::vector<double> sigma_spectrum;
  double wall_time_seconds = 0.0;
  std::vector<std::string> warnings;
  Json steps = Json::array();
};

inline Json to_json(const RunResult& r)
{
  Json j;
  j["config"] = to_json(r.config);
  j["eps"] = r.eps;
  j["dt"] = r.dt;
  j["n_steps"] = r.n_steps;
  j["has_reference"] = r.has_reference;
  j["rel_l2_density"] = r.rel_l2_density;
  j["rel_l2_full"] = r.rel_l2_full;
  j["rel_l2_density_limit"] = r.rel_l2_density_limit;
  j["mass"] = r.mass;
  j["initial_mass"] = r.initial_mass;
  j["delta0"] = r.delta0;
  j["sigma_tail"] = r.sigma_tail;
  j["sigma_tail_rel"] = r.sigma_tail_rel;
  j["sigma_spectrum"] = r.sigma_spectrum;
  j["warnings"] = r.warnings;
  j["steps"] = r.steps;
  j["wall_time_seconds"] = r.wall_time_seconds;
  return j;
}

inline RunResult run_result_from_json(const Json& j)
{
  RunResult r;
  r.config = config_from_json(j.at("config"));
  r.eps = j.at("eps").get<double>();
  r.dt = j.at("dt").get<double>();
  r.n_steps = j.at("n_steps").get<Index>();
  r.has_reference = j.at("has_reference").get<bool>();
  r.rel_l2_density = j.at("rel_l2_density").get<double>();
  r.rel_l2_full = j.at("rel_l2_full").get<double>();
  r.rel_l2_density_limit = j.at("rel_l2_density_limit").get<double>();
  r.mass = j.at("mass").get<double>();
  r.initial_mass = j.at("initial_mass").get<double>();
  r.delta0 = j.at("delta0").get<double>();
  r.sigma_tail = j.at("sigma_tail").get<double>();
  r.sigma_tail_rel = j.at("sigma_tail_rel").get<double>();
  r.sigma_spectrum = j.at("sigma_spectrum").get<std::vector<double>>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  r.steps = j.at("steps");
  r.wall_time_seconds = j.at("wall_time_seconds").get<double>();
  return r;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point start)
{
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline double relative_density_error(const RteModel& model, const Vector& rho, const Vector& reference)
{
  const double denominator = weighted_norm(reference, model.wx());
  if (!(denominator > 0.0)) throw InvalidArgument("relative density error: reference density has zero norm");
  return weighted_norm(Vector(rho - reference), model.wx()) / denominator;
}

inline std::string describe(double eps, double dt)
{
  std::ostringstream s;
  s << "eps=" << eps << ", dt=" << dt << ": ";
  return s.str();
}

template <typename E>
[[noreturn]] void rethrow_with(const std::string& prefix, const E& e)
{
  throw E(prefix + e.what());
}

/// Runs fn with the prefix prepended to library errors, keeping the error category.
template <typename Fn>
auto with_context(const std::string& prefix, Fn&& fn) -> decltype(fn())
{
  try {
    return fn();
  } catch (const ConfigError& e) {
    rethrow_with(prefix, e);
  } catch (const SizeCapExceeded& e) {
    rethrow_with(prefix, e);
  } catch (const NumericalFailure& e) {
    rethrow_with(prefix, e);
  } catch (const DegenerateState& e) {
    rethrow_with(prefix, e);
  } catch (const PreconditionViolation& e) {
    rethrow_with(prefix, e);
  } catch (const InvalidArgument& e) {
    rethrow_with(prefix, e);
  }
}

} // namespace detail

/// Runs job(i) for i in [0, n) on up to `workers` threads. The error of the lowest failing index is rethrown.
template <typename Job>
void run_jobs(std::size_t n, int workers, Job&& job)
{
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// One integration at (eps, dt) with all metrics. `reference` may be passed in to share it across runs.
inline RunResult run_single(const RunConfig& c, double eps, double dt, const Matrix* reference = nullptr)
{
  validate(c);
  const auto start = std::chrono::steady_clock::now();
  return detail::with_context(detail::describe(eps, dt), [&] {
    const Problem p = make_problem(c);
    const RteModel model(p.grid, p.quad, eps);
    RunResult r;
    r.config = c;
    r.eps = eps;
    r.dt = dt;
    r.n_steps = step_count(c.t_final, dt);
    r.initial_mass = total_mass(model, p.f0);

    const FromFullResult initial = from_full(p.f0, c.rank, p.grid, p.quad);
    r.delta0 = initial.delta0;
    const double f0_norm = weighted_norm(p.f0, model.wx(), model.wmu());
    if (c.integrator != Scheme::reference && f0_norm > 0.0 && initial.delta0 > 1e-3 * f0_norm) {
      std::ostringstream msg;
      msg << "rank " << c.rank << " discards a relative part " << initial.delta0 / f0_norm << " of the initial data";
      r.warnings.push_back(msg.str());
    }

    IntegrateOptions options;
    options.debug_trace = c.debug_trace;
    options.reference_cap = c.reference_cap;
    options.coalesce_reference = c.reference_mode == ReferenceMode::coalesced;
    Matrix final_state;
    if (c.integrator == Scheme::reference) {
      final_state = reference ? *reference : reference_solution(c, model, p.f0);
    } else {
      IntegrationResult result = integrate(model, initial.state, c.integrator, step_config(c, dt), r.n_steps, options);
      final_state = std::move(result.full);
      if (c.debug_trace) r.steps = trace_to_json(result.trace);
    }
    r.mass = total_mass(model, final_state);

    const Vector rho0 = density(model, p.f0);
    const Vector limit = diffusion_limit_density(model, rho0, c.t_final);
    r.rel_l2_density_limit = detail::relative_density_error(model, density(model, final_state), limit);

    Matrix owned_reference;
    const Matrix* ref = reference;
    if (!ref && reference_fits(c)) {
      owned_reference = c.integrator == Scheme::reference ? final_state : reference_solution(c, model, p.f0);
      ref = &owned_reference;
    }
    if (ref) {
      const ErrorReport report = error_report(final_state, *ref, model);
      r.has_reference = true;
      r.rel_l2_density = report.rel_l2_density;
      r.rel_l2_full = report.rel_l2_full;
      r.sigma_spectrum.assign(report.sigma_spectrum.data(),
                              report.sigma_spectrum.data() + report.sigma_spectrum.size());
      if (c.rank < static_cast<Index>(r.sigma_spectrum.size())) r.sigma_tail = r.sigma_spectrum[c.rank];
      r.sigma_tail_rel = r.sigma_tail / weighted_norm(*ref, model.wx(), model.wmu());
    } else {
      r.warnings.push_back("reference skipped: n_x * n_mu exceeds reference_cap");
    }
    r.wall_time_seconds = detail::seconds_since(start);
    return r;
  });
}

// ---------------------------------------------------------------------------------------------

struct SweepEpsRow {
  double eps = 0.0;
  double rel_l2_density = 0.0; ///< vs diffusion limit
  double wall_time_seconds = 0.0;
};

/// One run per eps against the diffusion-limit density; rows in input order.
inline std::vector<SweepEpsRow> sweep_eps(const RunConfig& c, int workers = 1)
{
  validate(c);
  for (std::size_t i = 1; i < c.eps.size(); ++i)
    if (!(c.eps[i] < c.eps[i - 1])) throw ConfigError("eps: sweep-eps needs a strictly descending list");
  if (c.dt.size() != 1) throw ConfigError("dt: sweep-eps needs a single time step");
  if (c.integrator == Scheme::reference) throw ConfigError("integrator: sweep-eps needs a low-rank integrator");
  RunConfig base = c;
  base.reference_cap = 0; // errors are taken against the diffusion limit only
  std::vector<SweepEpsRow> rows(c.eps.size());
  run_jobs(rows.size(), workers, [&](std::size_t i) {
    const RunResult r = run_single(base, c.eps[i], c.dt.front());
    rows[i] = {c.eps[i], r.rel_l2_density_limit, r.wall_time_seconds};
  });
  return rows;
}

struct SweepDtRow {
  double dt = 0.0;
  Index n_steps = 0;
  double rel_l2_full = 0.0;
  double rel_l2_density = 0.0;
  double sigma_tail = 0.0;
  double sigma_tail_rel = 0.0;
  double wall_time_seconds = 0.0;
};

struct SweepDtResult {
  std::vector<SweepDtRow> rows;
  std::optional<double> slope; ///< least squares order on rows above the saturation threshold
  Index fit_rows = 0;
  double sigma_tail = 0.0;
  double sigma_tail_rel = 0.0;
};

/// Least squares slope of log(error) vs log(dt) over rows with error > threshold (needs two distinct dt).
inline std::optional<double> fit_slope(const std::vector<double>& dts, const std::vector<double>& errors,
                                       double threshold, Index* used = nullptr)
{
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < dts.size(); ++i)
    if (errors[i] > threshold && dts[i] > 0.0 && std::isfinite(errors[i])) {
      lx.push_back(std::log(dts[i]));
      ly.push_back(std::log(errors[i]));
    }
  if (used) *used = static_cast<Index>(lx.size());
  if (lx.size() < 2) return std::nullopt;
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i] / n;
    my += ly[i] / n;
  }
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) return std::nullopt;
  return sxy / sxx;
}

/// One reference solve, then one run per dt. Saturation threshold for the fit: 10 sigma_{r+1}, relative.
inline SweepDtResult sweep_dt(const RunConfig& c, int workers = 1)
{
  validate(c);
  if (c.eps.size() != 1) throw ConfigError("eps: sweep-dt needs a single eps");
  if (!reference_fits(c))
    throw SizeCapExceeded("sweep-dt: n_x * n_mu = " + std::to_string(c.n_x * c.n_mu) + " exceeds reference_cap " +
                          std::to_string(c.reference_cap));
  const double eps = c.eps.front();
  const Problem p = make_problem(c);
  const RteModel model(p.grid, p.quad, eps);
  const Matrix reference =
      detail::with_context(detail::describe(eps, c.t_final), [&] { return reference_solution(c, model, p.f0); });

  SweepDtResult out;
  out.rows.resize(c.dt.size());
  run_jobs(out.rows.size(), workers, [&](std::size_t i) {
    const RunResult r = run_single(c, eps, c.dt[i], &reference);
    out.rows[i] = {c.dt[i], r.n_steps, r.rel_l2_full, r.rel_l2_density, r.sigma_tail, r.sigma_tail_rel,
                   r.wall_time_seconds};
  });
  out.sigma_tail = out.rows.front().sigma_tail;
  out.sigma_tail_rel = out.rows.front().sigma_tail_rel;
  std::vector<double> dts, errs;
  for (const auto& row : out.rows) {
    dts.push_back(row.dt);
    errs.push_back(row.rel_l2_full);
  }
  out.slope = fit_slope(dts, errs, 10.0 * out.sigma_tail_rel, &out.fit_rows);
  return out;
}

struct SingvalRow {
  Index index = 0;
  double sigma = 0.0;
  double sigma_rel = 0.0; ///< sigma / sigma_1
};

/// Weighted singular values of the reference solution at t_final (first eps entry).
inline std::vector<SingvalRow> singvals(const RunConfig& c)
{
  validate(c);
  if (!reference_fits(c))
    throw SizeCapExceeded("singvals: n_x * n_mu = " + std::to_string(c.n_x * c.n_mu) + " exceeds reference_cap " +
                          std::to_string(c.reference_cap));
  const Problem p = make_problem(c);
  const RteModel model(p.grid, p.quad, c.eps.front());
  const Matrix reference = detail::with_context(detail::describe(c.eps.front(), c.t_final),
                                                [&] { return reference_solution(c, model, p.f0); });
  const Vector sigma = weighted_singular_values(reference, model.wx(), model.wmu());
  std::vector<SingvalRow> rows;
  for (Index k = 0; k < sigma.size(); ++k)
    rows.push_back({k + 1, sigma[k], sigma[0] > 0.0 ? sigma[k] / sigma[0] : 0.0});
  return rows;
}

struct CompareRow {
  Scheme scheme = Scheme::gap;
  std::string status = "ok";
  double rel_l2_density = 0.0;
  double rel_l2_full = 0.0;
  double mass = 0.0;
  double wall_time_seconds = 0.0;
  std::string message;
};

/// Reference, GAP, PSI and BUG at the first (eps, dt). A failing low-rank scheme is reported as diverged.
inline std::vector<CompareRow> compare(const RunConfig& c, int workers = 1)
{
  validate(c);
  if (!reference_fits(c))
    throw SizeCapExceeded("compare: n_x * n_mu = " + std::to_string(c.n_x * c.n_mu) + " exceeds reference_cap " +
                          std::to_string(c.reference_cap));
  const double eps = c.eps.front();
  const double dt = c.dt.front();
  const Problem p = make_problem(c);
  const RteModel model(p.grid, p.quad, eps);
  const Matrix reference =
      detail::with_context(detail::describe(eps, c.t_final), [&] { return reference_solution(c, model, p.f0); });

  const Scheme schemes[] = {Scheme::reference, Scheme::gap, Scheme::psi, Scheme::bug};
  std::vector<CompareRow> rows(4);
  run_jobs(rows.size(), workers, [&](std::size_t i) {
    RunConfig one = c;
    one.integrator = schemes[i];
    CompareRow row;
    row.scheme = schemes[i];
    try {
      const RunResult r = run_single(one, eps, dt, &reference);
      row.rel_l2_density = r.rel_l2_density;
      row.rel_l2_full = r.rel_l2_full;
      row.mass = r.mass;
      row.wall_time_seconds = r.wall_time_seconds;
      if (!std::isfinite(r.rel_l2_full)) row.status = "diverged";
    } catch (const NumericalFailure& e) {
      row.status = "diverged";
      row.message = e.what();
    } catch (const DegenerateState& e) {
      row.status = "diverged";
      row.message = e.what();
    }
    if (row.status == "diverged") {
      row.rel_l2_density = row.rel_l2_full = row.mass = std::numeric_limits<double>::quiet_NaN();
    }
    rows[i] = row;
  });
  return rows;
}

// ---------------------------------------------------------------------------------------------
// CSV output: header row, fixed column order, %.16e numbers.

namespace csv {

inline constexpr const char* errors_header = "scheme,eps,dt,n_steps,rel_l2_density,rel_l2_full,mass,sigma_tail";
inline constexpr const char* sweep_eps_header = "eps,rel_l2_density,wall_time_seconds";
inline constexpr const char* sweep_dt_header =
    "dt,n_steps,rel_l2_full,rel_l2_density,sigma_tail,sigma_tail_rel,wall_time_seconds";
inline constexpr const char* singvals_header = "index,sigma,sigma_rel";
inline constexpr const char* compare_header = "scheme,status,rel_l2_density,rel_l2_full,mass,wall_time_seconds";

inline std::string num(double v)
{
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.16e", v);
  return buffer;
}

inline void write_errors(std::ostream& out, const RunResult& r)
{
  out << errors_header << '\n'
      << to_string(r.config.integrator) << ',' << num(r.eps) << ',' << num(r.dt) << ',' << r.n_steps << ','
      << num(r.rel_l2_density) << ',' << num(r.rel_l2_full) << ',' << num(r.mass) << ',' << num(r.sigma_tail) << '\n';
}

inline void write_sweep_eps(std::ostream& out, const std::vector<SweepEpsRow>& rows)
{
  out << sweep_eps_header << '\n';
  for (const auto& r : rows) out << num(r.eps) << ',' << num(r.rel_l2_density) << ',' << num(r.wall_time_seconds) << '\n';
}

inline void write_sweep_dt(std::ostream& out, const std::vector<SweepDtRow>& rows)
{
  out << sweep_dt_header << '\n';
  for (const auto& r : rows)
    out << num(r.dt) << ',' << r.n_steps << ',' << num(r.rel_l2_full) << ',' << num(r.rel_l2_density) << ','
        << num(r.sigma_tail) << ',' << num(r.sigma_tail_rel) << ',' << num(r.wall_time_seconds) << '\n';
}

inline void write_singvals(std::ostream& out, const std::vector<SingvalRow>& rows)
{
  out << singvals_header << '\n';
  for (const auto& r : rows) out << r.index << ',' << num(r.sigma) << ',' << num(r.sigma_rel) << '\n';
}

inline void write_compare(std::ostream& out, const std::vector<CompareRow>& rows)
{
  out << compare_header << '\n';
  for (const auto& r : rows)
    out << to_string(r.scheme) << ',' << r.status << ',' << num(r.rel_l2_density) << ',' << num(r.rel_l2_full) << ','
        << num(r.mass) << ',' << num(r.wall_time_seconds) << '\n';
}

} // namespace csv

// ---------------------------------------------------------------------------------------------
// Command drivers: compute, then write files into out_dir.

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& dir, const char* name)
{
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / name);
  if (!out) throw Error("cannot write " + (dir / name).string());
  return out;
}

inline void write_json(const std::filesystem::path& dir, const char* name, const Json& j)
{
  auto out = open_output(dir, name);
  out << j.dump(2) << '\n';
}

} // namespace detail

inline RunResult cmd_run(const RunConfig& c, const std::filesystem::path& out_dir)
{
  if (c.eps.size() != 1 || c.dt.size() != 1) throw ConfigError("eps/dt: run needs a single eps and a single dt");
  if (c.integrator == Scheme::reference && !reference_fits(c))
    throw SizeCapExceeded("reference solver: n_x * n_mu = " + std::to_string(c.n_x * c.n_mu) +
                          " exceeds reference_cap " + std::to_string(c.reference_cap) + "; reduce n_x or n_mu");
  const RunResult r = run_single(c, c.eps.front(), c.dt.front());
  detail::write_json(out_dir, "result.json", to_json(r));
  if (r.has_reference) {
    auto out = detail::open_output(out_dir, "errors.csv");
    csv::write_errors(out, r);
  }
  return r;
}

inline std::vector<SweepEpsRow> cmd_sweep_eps(const RunConfig& c, const std::filesystem::path& out_dir, int workers)
{
  const auto start = std::chrono::steady_clock::now();
  const auto rows = sweep_eps(c, workers);
  auto out = detail::open_output(out_dir, "sweep_eps.csv");
  csv::write_sweep_eps(out, rows);
  Json j;
  j["config"] = to_json(c);
  j["command"] = "sweep-eps";
  j["rows"] = rows.size();
  j["wall_time_seconds"] = detail::seconds_since(start);
  detail::write_json(out_dir, "result.json", j);
  return rows;
}

inline SweepDtResult cmd_sweep_dt(const RunConfig& c, const std::filesystem::path& out_dir, int workers)
{
  const auto start = std::chrono::steady_clock::now();
  const auto result = sweep_dt(c, workers);
  auto out = detail::open_output(out_dir, "sweep_dt.csv");
  csv::write_sweep_dt(out, result.rows);
  Json j;
  j["config"] = to_json(c);
  j["command"] = "sweep-dt";
  j["slope"] = result.slope ? Json(*result.slope) : Json(nullptr);
  j["fit_rows"] = result.fit_rows;
  j["sigma_tail"] = result.sigma_tail;
  j["sigma_tail_rel"] = result.sigma_tail_rel;
  j["wall_time_seconds"] = detail::seconds_since(start);
  detail::write_json(out_dir, "result.json", j);
  return result;
}

inline std::vector<SingvalRow> cmd_singvals(const RunConfig& c, const std::filesystem::path& out_dir)
{
  const auto rows = singvals(c);
  auto out = detail::open_output(out_dir, "singvals.csv");
  csv::write_singvals(out, rows);
  return rows;
}

inline std::vector<CompareRow> cmd_compare(const RunConfig& c, const std::filesystem::path& out_dir, int workers)
{
  const auto rows = compare(c, workers);
  auto out = detail::open_output(out_dir, "compare.csv");
  csv::write_compare(out, rows);
  Json messages = Json::object();
  for (const auto& r : rows)
    if (!r.message.empty()) messages[to_string(r.scheme)] = r.message;
  Json j;
  j["config"] = to_json(c);
  j["command"] = "compare";
  j["failures"] = messages;
  detail::write_json(out_dir, "result.json", j);
  return rows;
}

} // namespace lrgap
