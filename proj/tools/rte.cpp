// rte: command line front end for the low-rank RTE experiments.
//
//   rte run|sweep-eps|sweep-dt|singvals|compare --config <path> [--out <dir>] [--workers <n>]
//       [--override key=value ...]
//
// Output directory: --out, else the config's output_dir, else $RTE_OUTPUT_DIR, else ./rte_out.
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 numerical failure, 4 size cap rejection.

#include "lrgap/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, numerical_failure = 3, size_cap = 4 };

std::filesystem::path output_dir(const std::string& flag, const lrgap::RunConfig& config)
{
  if (!flag.empty()) return flag;
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv("RTE_OUTPUT_DIR"); env && *env) return env;
  return "rte_out";
}

void print_warnings(const std::vector<std::string>& warnings)
{
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Low-rank integrators for the scaled 1x1v radiative transfer equation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  int workers = 1;
  std::vector<std::string> overrides;

  const char* names[] = {"run", "sweep-eps", "sweep-dt", "singvals", "compare"};
  const char* help[] = {"single integration with metrics (result.json, errors.csv)",
                        "GAP error against the diffusion limit for each eps (sweep_eps.csv)",
                        "error against the reference for each dt, with fitted order (sweep_dt.csv)",
                        "weighted singular values of the reference solution (singvals.csv)",
                        "reference, gap, psi and bug side by side (compare.csv)"};
  for (int i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_flag, "output directory");
    sub->add_option("--workers", workers, "concurrent sweep jobs")->check(CLI::PositiveNumber);
    sub->add_option("--override", overrides, "override a config field, key=value (repeatable)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const lrgap::RunConfig config = lrgap::load_config(config_path, overrides);
    const auto dir = output_dir(out_flag, config);

    if (command == "run") {
      const auto result = lrgap::cmd_run(config, dir);
      print_warnings(result.warnings);
      std::cout << lrgap::to_string(config.integrator) << " eps=" << result.eps << " dt=" << result.dt
                << " steps=" << result.n_steps << " density error vs diffusion limit " << result.rel_l2_density_limit;
      if (result.has_reference) std::cout << ", full error vs reference " << result.rel_l2_full;
      std::cout << '\n';
    } else if (command == "sweep-eps") {
      for (const auto& row : lrgap::cmd_sweep_eps(config, dir, workers))
        std::cout << "eps=" << row.eps << " rel_l2_density=" << row.rel_l2_density << '\n';
    } else if (command == "sweep-dt") {
      const auto result = lrgap::cmd_sweep_dt(config, dir, workers);
      for (const auto& row : result.rows) std::cout << "dt=" << row.dt << " rel_l2_full=" << row.rel_l2_full << '\n';
      std::cout << "sigma_{r+1}/||F|| = " << result.sigma_tail_rel << ", slope = ";
      if (result.slope)
        std::cout << *result.slope;
      else
        std::cout << "n/a";
      std::cout << " (" << result.fit_rows << " rows)\n";
    } else if (command == "singvals") {
      const auto rows = lrgap::cmd_singvals(config, dir);
      std::cout << rows.size() << " singular values, sigma_1 = " << rows.front().sigma << '\n';
    } else {
      for (const auto& row : lrgap::cmd_compare(config, dir, workers))
        std::cout << lrgap::to_string(row.scheme) << ' ' << row.status << " rel_l2_full=" << row.rel_l2_full << '\n';
    }
    std::cout << "output: " << dir.string() << '\n';
    return ok;
  } catch (const lrgap::SizeCapExceeded& e) {
    std::cerr << "size cap: " << e.what() << '\n';
    return size_cap;
  } catch (const lrgap::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const lrgap::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const lrgap::DegenerateState& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const lrgap::PreconditionViolation& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
}
