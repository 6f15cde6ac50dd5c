#include <CLI11.hpp>

#include <cstdio>
#include <memory>
#include <string>

#include "tsph.h"

namespace {

enum Exit { kSuccess = 0, kConfigError = 1, kRuntimeError = 2 };

int exit_code(tsph_status s) {
  return s == TSPH_ERR_CONFIG || s == TSPH_ERR_INVALID_ARGUMENT ? kConfigError : kRuntimeError;
}

int report(tsph_status s, const char* what) {
  std::fprintf(stderr, "tsph: %s: %s: %s\n", what, tsph_status_name(s), tsph_last_error());
  return exit_code(s);
}

using Config = std::unique_ptr<tsph_config, decltype(&tsph_config_destroy)>;
using Run = std::unique_ptr<tsph_run, decltype(&tsph_run_destroy)>;

}  // namespace

int main(int argc, char** argv) {
  tsph_config* raw = nullptr;
  if (auto s = tsph_config_create(&raw); s != TSPH_OK) return report(s, "config");
  Config cfg(raw, tsph_config_destroy);

  // Defaults shown in --help come from the library.
  const auto int_default = [&](const char* key) {
    int64_t v = 0;
    tsph_config_get_int(cfg.get(), key, &v);
    return v;
  };
  const auto real_default = [&](const char* key) {
    double v = 0;
    tsph_config_get_double(cfg.get(), key, &v);
    return v;
  };

  struct IntOpt { const char* flag; const char* key; const char* help; int64_t value; };
  struct RealOpt { const char* flag; const char* key; const char* help; double value; };
  IntOpt ints[] = {
      {"--n", "n", "particle count", int_default("n")},
      {"--clumps", "clumps", "clump count (clustered ICs)", int_default("clumps")},
      {"--steps", "steps", "time steps (at least 3)", int_default("steps")},
      {"--ranks", "ranks", "simulated ranks", int_default("ranks")},
      {"--workers", "workers", "worker threads per rank", int_default("workers")},
      {"--seed", "seed", "RNG seed for the ICs", int_default("seed")},
      {"--repart-period", "repart_period", "steps between repartitions (0: never)", int_default("repart_period")},
      {"--split-threshold", "split_threshold", "particles per leaf before a cell splits", int_default("split_threshold")},
  };
  RealOpt reals[] = {
      {"--box", "box", "periodic box edge", real_default("box")},
      {"--clump-radius", "clump_radius", "Gaussian clump width", real_default("clump_radius")},
      {"--clump-fraction", "clump_fraction", "share of particles in clumps", real_default("clump_fraction")},
      {"--gamma", "gamma", "adiabatic index", real_default("gamma")},
      {"--eta-neigh", "eta_neigh", "target weighted neighbour count", real_default("eta_neigh")},
      {"--dt", "dt", "fixed timestep (0: CFL estimate at t = 0)", real_default("dt")},
  };

  CLI::App app{"Task-parallel SPH density and force benchmark"};
  for (auto& o : ints) app.add_option(o.flag, o.value, o.help)->capture_default_str();
  for (auto& o : reals) app.add_option(o.flag, o.value, o.help)->capture_default_str();
  std::string ic = "uniform";
  app.add_option("--ic", ic, "initial conditions")->check(CLI::IsMember({"uniform", "clustered"}))->capture_default_str();
  std::string out_dir = ".";
  app.add_option("--out-dir", out_dir, "directory for CSV reports and the snapshot")->capture_default_str();
  bool trace = false, text_snapshot = false, barriered = false;
  app.add_flag("--trace", trace, "also write the per-task trace of the last step");
  app.add_flag("--text-snapshot", text_snapshot, "write the snapshot records as text");
  app.add_flag("--barriered", barriered, "flush communication between phases (reference mode)");
  std::string baseline;
  app.add_option("--baseline", baseline, "timing.csv of a baseline run; adds speed-up and efficiency");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kSuccess : kConfigError;
  }

  for (const auto& o : ints) {
    if (auto s = tsph_config_set_int(cfg.get(), o.key, o.value); s != TSPH_OK) return report(s, o.flag);
  }
  for (const auto& o : reals) {
    if (auto s = tsph_config_set_double(cfg.get(), o.key, o.value); s != TSPH_OK) return report(s, o.flag);
  }
  if (auto s = tsph_config_set_string(cfg.get(), "ic", ic.c_str()); s != TSPH_OK) return report(s, "--ic");
  if (auto s = tsph_config_set_int(cfg.get(), "barriered", barriered ? 1 : 0); s != TSPH_OK) return report(s, "--barriered");
  if (auto s = tsph_config_validate(cfg.get()); s != TSPH_OK) return report(s, "config");

  tsph_run* run_raw = nullptr;
  if (auto s = tsph_run_simulation(cfg.get(), &run_raw); s != TSPH_OK) return report(s, "run");
  Run run(run_raw, tsph_run_destroy);

  if (auto s = tsph_run_emit_reports(run.get(), out_dir.c_str(), trace ? 1 : 0,
                                     baseline.empty() ? nullptr : baseline.c_str(), text_snapshot ? 1 : 0);
      s != TSPH_OK) {
    return report(s, "reports");
  }

  int steps = 0, repartitions = 0;
  double mean = 0, imbalance = 0, dt = 0;
  tsph_run_step_count(run.get(), &steps);
  tsph_run_mean_step_ms(run.get(), &mean);
  tsph_run_imbalance(run.get(), &imbalance);
  tsph_run_timestep(run.get(), &dt);
  tsph_run_repartition_count(run.get(), &repartitions);
  int64_t messages = 0, bytes = 0;
  if (steps > 0) tsph_run_step_messages(run.get(), steps - 1, &messages, &bytes);
  std::printf("steps %d  dt %.6g  mean step %.3f ms (steps 2..%d)\n", steps, dt, mean, steps - 1);
  std::printf("rank imbalance %.3f  repartitions %d  last step %lld messages, %lld bytes\n", imbalance, repartitions,
              static_cast<long long>(messages), static_cast<long long>(bytes));
  std::printf("reports written to %s\n", out_dir.c_str());
  return kSuccess;
}
