#include "tsph.h"

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "tsph/harness.hpp"

struct tsph_config {
  tsph::harness::RunConfig cfg;
};

struct tsph_run {
  tsph::harness::RunResult result;
};

namespace {

thread_local std::string last_error;

tsph_status fail(tsph_status s, std::string msg) {
  last_error = std::move(msg);
  return s;
}

tsph_status ok() {
  last_error.clear();
  return TSPH_OK;
}

template <class F>
tsph_status guarded(F&& f) {
  try {
    return f();
  } catch (const tsph::ConfigError& e) {
    return fail(TSPH_ERR_CONFIG, e.what());
  } catch (const tsph::harness::IoError& e) {
    return fail(TSPH_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(TSPH_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(TSPH_ERR_RUNTIME, "unknown error");
  }
}

tsph_status null_arg(const char* what) { return fail(TSPH_ERR_INVALID_ARGUMENT, std::string("null ") + what); }

tsph_status unknown_key(const char* kind, const char* key) {
  return fail(TSPH_ERR_INVALID_ARGUMENT, std::string("unknown ") + kind + " key '" + key + "'");
}

// Integer keys map to fields of differing widths; read and write through these.
bool set_int_field(tsph::harness::RunConfig& c, std::string_view k, std::int64_t v) {
  const auto narrow = [&](int& f) { f = static_cast<int>(v); };
  if (k == "n") c.n = v;
  else if (k == "steps") narrow(c.steps);
  else if (k == "repart_period") narrow(c.repart_period);
  else if (k == "ranks") narrow(c.ranks);
  else if (k == "workers") narrow(c.workers);
  else if (k == "seed") c.seed = static_cast<std::uint64_t>(v);
  else if (k == "clumps") narrow(c.clumps);
  else if (k == "split_threshold") narrow(c.split_threshold);
  else if (k == "barriered") c.barriered = v != 0;
  else return false;
  return true;
}

bool get_int_field(const tsph::harness::RunConfig& c, std::string_view k, std::int64_t& v) {
  if (k == "n") v = c.n;
  else if (k == "steps") v = c.steps;
  else if (k == "repart_period") v = c.repart_period;
  else if (k == "ranks") v = c.ranks;
  else if (k == "workers") v = c.workers;
  else if (k == "seed") v = static_cast<std::int64_t>(c.seed);
  else if (k == "clumps") v = c.clumps;
  else if (k == "split_threshold") v = c.split_threshold;
  else if (k == "barriered") v = c.barriered ? 1 : 0;
  else return false;
  return true;
}

double* double_field(tsph::harness::RunConfig& c, std::string_view k) {
  if (k == "box") return &c.box;
  if (k == "clump_radius") return &c.clump_radius;
  if (k == "clump_fraction") return &c.clump_fraction;
  if (k == "jitter") return &c.jitter;
  if (k == "gamma") return &c.gamma;
  if (k == "eta_neigh") return &c.eta_neigh;
  if (k == "dt") return &c.dt;
  return nullptr;
}

bool in_int_range(std::string_view k, std::int64_t v) {
  if (k == "n" || k == "seed" || k == "barriered") return true;
  return v >= INT32_MIN && v <= INT32_MAX;
}

const tsph::harness::StepRecord* step_at(const tsph_run* run, int index) {
  const auto& steps = run->result.report.steps;
  if (index < 0 || static_cast<std::size_t>(index) >= steps.size()) return nullptr;
  return &steps[static_cast<std::size_t>(index)];
}

}  // namespace

extern "C" {

const char* tsph_last_error(void) { return last_error.c_str(); }

const char* tsph_status_name(tsph_status s) {
  switch (s) {
    case TSPH_OK: return "ok";
    case TSPH_ERR_CONFIG: return "config error";
    case TSPH_ERR_RUNTIME: return "runtime error";
    case TSPH_ERR_INVALID_ARGUMENT: return "invalid argument";
    case TSPH_ERR_IO: return "i/o error";
  }
  return "unknown status";
}

tsph_status tsph_config_create(tsph_config** out) {
  if (!out) return null_arg("output pointer");
  return guarded([&] {
    *out = new tsph_config{};
    return ok();
  });
}

void tsph_config_destroy(tsph_config* cfg) { delete cfg; }

tsph_status tsph_config_set_int(tsph_config* cfg, const char* key, int64_t value) {
  if (!cfg || !key) return null_arg("config or key");
  if (!in_int_range(key, value)) return fail(TSPH_ERR_INVALID_ARGUMENT, std::string("value out of range for '") + key + "'");
  if (!set_int_field(cfg->cfg, key, value)) return unknown_key("integer", key);
  return ok();
}

tsph_status tsph_config_set_double(tsph_config* cfg, const char* key, double value) {
  if (!cfg || !key) return null_arg("config or key");
  double* f = double_field(cfg->cfg, key);
  if (!f) return unknown_key("real", key);
  *f = value;
  return ok();
}

tsph_status tsph_config_set_string(tsph_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_arg("config, key or value");
  if (std::string_view(key) != "ic") return unknown_key("string", key);
  const std::string_view v(value);
  if (v == "uniform") cfg->cfg.ic = tsph::harness::IcMode::kUniform;
  else if (v == "clustered") cfg->cfg.ic = tsph::harness::IcMode::kClustered;
  else return fail(TSPH_ERR_CONFIG, std::string("ic must be 'uniform' or 'clustered', got '") + value + "'");
  return ok();
}

tsph_status tsph_config_get_int(const tsph_config* cfg, const char* key, int64_t* value) {
  if (!cfg || !key || !value) return null_arg("config, key or value");
  std::int64_t v = 0;
  if (!get_int_field(cfg->cfg, key, v)) return unknown_key("integer", key);
  *value = v;
  return ok();
}

tsph_status tsph_config_get_double(const tsph_config* cfg, const char* key, double* value) {
  if (!cfg || !key || !value) return null_arg("config, key or value");
  const double* f = double_field(const_cast<tsph::harness::RunConfig&>(cfg->cfg), key);
  if (!f) return unknown_key("real", key);
  *value = *f;
  return ok();
}

tsph_status tsph_config_validate(const tsph_config* cfg) {
  if (!cfg) return null_arg("config");
  return guarded([&] {
    cfg->cfg.validate();
    return ok();
  });
}

tsph_status tsph_run_simulation(const tsph_config* cfg, tsph_run** out) {
  if (!cfg || !out) return null_arg("config or output pointer");
  *out = nullptr;
  return guarded([&] {
    auto run = std::make_unique<tsph_run>();
    run->result = tsph::harness::run_simulation(cfg->cfg);
    *out = run.release();
    return ok();
  });
}

void tsph_run_destroy(tsph_run* run) { delete run; }

tsph_status tsph_run_step_count(const tsph_run* run, int* steps) {
  if (!run || !steps) return null_arg("run or output");
  *steps = static_cast<int>(run->result.report.steps.size());
  return ok();
}

tsph_status tsph_run_step_wall_ms(const tsph_run* run, int index, double* ms) {
  if (!run || !ms) return null_arg("run or output");
  const auto* s = step_at(run, index);
  if (!s) return fail(TSPH_ERR_INVALID_ARGUMENT, "step index out of range");
  *ms = s->wall_ms;
  return ok();
}

tsph_status tsph_run_step_messages(const tsph_run* run, int index, int64_t* messages, int64_t* bytes) {
  if (!run || !messages || !bytes) return null_arg("run or output");
  const auto* s = step_at(run, index);
  if (!s) return fail(TSPH_ERR_INVALID_ARGUMENT, "step index out of range");
  *messages = s->messages;
  *bytes = s->bytes;
  return ok();
}

tsph_status tsph_run_mean_step_ms(const tsph_run* run, double* ms) {
  if (!run || !ms) return null_arg("run or output");
  *ms = run->result.report.mean_step_ms;
  return ok();
}

tsph_status tsph_run_imbalance(const tsph_run* run, double* ratio) {
  if (!run || !ratio) return null_arg("run or output");
  *ratio = run->result.report.imbalance;
  return ok();
}

tsph_status tsph_run_timestep(const tsph_run* run, double* dt) {
  if (!run || !dt) return null_arg("run or output");
  *dt = run->result.report.dt;
  return ok();
}

tsph_status tsph_run_repartition_count(const tsph_run* run, int* count) {
  if (!run || !count) return null_arg("run or output");
  *count = static_cast<int>(run->result.report.repartition_steps.size());
  return ok();
}

tsph_status tsph_run_particle_count(const tsph_run* run, int64_t* n) {
  if (!run || !n) return null_arg("run or output");
  *n = static_cast<int64_t>(run->result.particles.size());
  return ok();
}

tsph_status tsph_run_particle(const tsph_run* run, int64_t index, tsph_particle* out) {
  if (!run || !out) return null_arg("run or output");
  const auto& ps = run->result.particles;
  if (index < 0 || static_cast<std::size_t>(index) >= ps.size()) {
    return fail(TSPH_ERR_INVALID_ARGUMENT, "particle index out of range");
  }
  const auto& p = ps[static_cast<std::size_t>(index)];
  *out = tsph_particle{p.id, {p.x.x, p.x.y, p.x.z}, {p.v.x, p.v.y, p.v.z}, p.m, p.h, p.u,
                       p.rho, {p.a.x, p.a.y, p.a.z}, p.u_dot};
  return ok();
}

tsph_status tsph_run_emit_reports(const tsph_run* run, const char* out_dir, int trace, const char* baseline_timing,
                                  int text_snapshot) {
  if (!run || !out_dir) return null_arg("run or output directory");
  return guarded([&] {
    tsph::harness::ReportPaths paths;
    paths.out_dir = out_dir;
    paths.trace = trace != 0;
    if (baseline_timing) paths.baseline_timing = baseline_timing;
    paths.text_snapshot = text_snapshot != 0;
    tsph::harness::emit_reports(run->result, paths);
    return ok();
  });
}

}  // extern "C"
