#include "tsph/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace tsph::harness {

namespace {

// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
// unlike std::uniform_real_distribution.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Irwin-Hall sum of twelve uniforms: unit variance, only additions.
double near_gaussian(std::mt19937_64& rng) {
  double s = 0.0;
  for (int i = 0; i < 12; ++i) s += unit(rng);
  return s - 6.0;
}

// Smoothing length that puts eta_neigh neighbours inside h at the local number
// density, counted over the 3x3x3 block of coarse cells (about eight particles
// each) around the particle.
void seed_smoothing_lengths(std::vector<sph::Particle>& ps, const RunConfig& cfg) {
  const int m = std::max(3, static_cast<int>(std::cbrt(static_cast<double>(ps.size()) / 8.0)));
  const double edge = cfg.box / m;
  const auto cell = [&](double x) { return std::clamp(static_cast<int>(x / edge), 0, m - 1); };
  const auto flat = [&](int i, int j, int k) {
    const auto w = [&](int a) { return static_cast<std::size_t>((a + m) % m); };
    return (w(i) * static_cast<std::size_t>(m) + w(j)) * static_cast<std::size_t>(m) + w(k);
  };
  std::vector<std::int64_t> counts(static_cast<std::size_t>(m) * m * m, 0);
  for (const auto& p : ps) ++counts[flat(cell(p.x.x), cell(p.x.y), cell(p.x.z))];
  std::vector<std::int64_t> block(counts.size(), 0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int k = 0; k < m; ++k)
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            for (int dk = -1; dk <= 1; ++dk) block[flat(i, j, k)] += counts[flat(i + di, j + dj, k + dk)];
  const double volume = 27.0 * edge * edge * edge;
  const double h_cap = 0.95 * cfg.box / 3.0;
  for (auto& p : ps) {
    const double density = static_cast<double>(block[flat(cell(p.x.x), cell(p.x.y), cell(p.x.z))]) / volume;
    p.h = std::min(std::cbrt(3.0 * cfg.eta_neigh / (4.0 * std::numbers::pi * density)), h_cap);
  }
}

std::ofstream open_out(const std::filesystem::path& p, bool binary = false) {
  std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot write " + p.string());
  out << std::setprecision(17);
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& p) {
  out.flush();
  if (!out) throw IoError("write failed: " + p.string());
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("snapshot truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

constexpr int kSnapshotDoubles = 18;

std::array<double, kSnapshotDoubles> snapshot_fields(const sph::Particle& p) {
  return {p.x.x, p.x.y, p.x.z, p.v.x, p.v.y, p.v.z, p.m, p.h, p.u,
          p.rho, p.omega, p.a.x, p.a.y, p.a.z, p.u_dot, p.a_prev.x, p.a_prev.y, p.a_prev.z};
}

void set_snapshot_fields(sph::Particle& p, const std::array<double, kSnapshotDoubles>& f) {
  p.x = {f[0], f[1], f[2]};
  p.v = {f[3], f[4], f[5]};
  p.m = f[6];
  p.h = f[7];
  p.u = f[8];
  p.rho = f[9];
  p.omega = f[10];
  p.a = {f[11], f[12], f[13]};
  p.u_dot = f[14];
  p.a_prev = {f[15], f[16], f[17]};
}

}  // namespace

void RunConfig::validate() const {
  if (n <= 0) throw ConfigError("particle count must be positive");
  if (!(box > 0.0)) throw ConfigError("box edge must be positive");
  if (steps < 3) throw ConfigError("need at least 3 steps: the timing mean excludes the first and last");
  if (repart_period < 0) throw ConfigError("repartition period must be non-negative");
  if (ranks < 1) throw ConfigError("rank count must be at least 1");
  if (workers < 1) throw ConfigError("workers per rank must be at least 1");
  if (!(dt >= 0.0)) throw ConfigError("dt must be non-negative (0 selects the CFL estimate)");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("jitter must lie in [0, 1)");
  if (split_threshold < 1) throw ConfigError("split threshold must be at least 1");
  if (ic == IcMode::kClustered) {
    if (clumps < 1) throw ConfigError("clustered ICs need at least one clump");
    if (!(clump_radius > 0.0)) throw ConfigError("clump radius must be positive");
    if (clump_radius >= 0.5 * box) throw ConfigError("clump radius must be smaller than half the box");
    if (!(clump_fraction >= 0.0 && clump_fraction <= 1.0)) throw ConfigError("clump fraction must lie in [0, 1]");
  }
  sph::SphConfig s;
  s.gamma = gamma;
  s.eta_neigh = eta_neigh;
  s.validate();
}

exchange::EngineConfig RunConfig::engine_config() const {
  exchange::EngineConfig e;
  e.sph.gamma = gamma;
  e.sph.eta_neigh = eta_neigh;
  e.ranks = ranks;
  e.workers = workers;
  e.barriered = barriered;
  e.grid.split_threshold = split_threshold;
  return e;
}

std::vector<sph::Particle> generate_ics(const RunConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto n = static_cast<std::size_t>(cfg.n);
  std::vector<sph::Particle> ps(n);
  const Vec3 box{cfg.box, cfg.box, cfg.box};

  if (cfg.ic == IcMode::kUniform) {
    std::size_t side = 1;
    while (side * side * side < n) ++side;
    const double spacing = cfg.box / static_cast<double>(side);
    // A full lattice, or n sites drawn without replacement when n is not a cube.
    std::vector<std::size_t> sites(side * side * side);
    for (std::size_t i = 0; i < sites.size(); ++i) sites[i] = i;
    if (sites.size() != n) {
      for (std::size_t i = sites.size() - 1; i > 0; --i) std::swap(sites[i], sites[rng() % (i + 1)]);
      sites.resize(n);
      std::sort(sites.begin(), sites.end());
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t s = sites[i];
      const std::size_t c[3] = {s / (side * side), (s / side) % side, s % side};
      for (int k = 0; k < 3; ++k) {
        ps[i].x[k] = (static_cast<double>(c[k]) + 0.5 + cfg.jitter * (unit(rng) - 0.5)) * spacing;
      }
    }
  } else {
    std::vector<Vec3> centres(static_cast<std::size_t>(cfg.clumps));
    for (auto& c : centres) c = Vec3{unit(rng), unit(rng), unit(rng)} * cfg.box;
    const auto in_clumps = static_cast<std::size_t>(std::llround(cfg.clump_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      if (i < in_clumps) {
        const Vec3& c = centres[i % centres.size()];
        const Vec3 d{near_gaussian(rng), near_gaussian(rng), near_gaussian(rng)};
        ps[i].x = c + d * cfg.clump_radius;
      } else {
        ps[i].x = Vec3{unit(rng), unit(rng), unit(rng)} * cfg.box;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = ps[i];
    p.id = i;
    p.x = sph::wrap(p.x, box);
    p.m = 1.0 / static_cast<double>(n);
    p.u = 1.0;
  }
  seed_smoothing_lengths(ps, cfg);
  return ps;
}

double initial_timestep(const std::vector<sph::Particle>& ps, const RunConfig& cfg) {
  sph::SphConfig s;
  s.gamma = cfg.gamma;
  return sph::cfl_timestep(ps, s);
}

double protocol_mean(const std::vector<double>& per_step_ms) {
  if (per_step_ms.size() < 3) throw ConfigError("timing mean needs at least 3 steps");
  double sum = 0.0;
  for (std::size_t i = 1; i + 1 < per_step_ms.size(); ++i) sum += per_step_ms[i];
  return sum / static_cast<double>(per_step_ms.size() - 2);
}

RunResult run_simulation(const RunConfig& cfg) { return run_simulation(cfg, generate_ics(cfg)); }

RunResult run_simulation(const RunConfig& cfg, std::vector<sph::Particle> ics) {
  cfg.validate();
  RunResult res;
  res.config = cfg;
  auto& rep = res.report;
  rep.dt = cfg.dt > 0.0 ? cfg.dt : initial_timestep(ics, cfg);
  rep.ranks = cfg.ranks;
  rep.workers = cfg.workers;
  rep.rank_task_seconds.assign(static_cast<std::size_t>(cfg.ranks), 0.0);

  exchange::Engine engine(std::move(ics), {cfg.box, cfg.box, cfg.box}, cfg.engine_config());
  std::vector<double> wall;
  for (int s = 1; s <= cfg.steps; ++s) {
    StepRecord rec;
    rec.step = s;
    if (cfg.repart_period > 0 && s > 1 && (s - 1) % cfg.repart_period == 0) {
      engine.repartition();
      rec.repartitioned = true;
      rep.repartition_steps.push_back(s);
    }
    const auto st = engine.step(rep.dt);
    rec.wall_ms = 1e3 * st.wall_seconds;
    rec.attempts = st.attempts;
    rec.rebuilt = st.rebuilt;
    rec.messages = st.messages;
    rec.bytes = st.bytes;
    for (std::size_t r = 0; r < st.rank_busy_seconds.size(); ++r) rep.rank_task_seconds[r] += st.rank_busy_seconds[r];
    wall.push_back(rec.wall_ms);
    rep.steps.push_back(rec);
  }
  rep.mean_step_ms = protocol_mean(wall);
  double max = 0.0, sum = 0.0;
  for (double t : rep.rank_task_seconds) {
    max = std::max(max, t);
    sum += t;
  }
  rep.imbalance = sum > 0.0 ? max / (sum / cfg.ranks) : 1.0;
  for (int r = 0; r < cfg.ranks; ++r) rep.rank_particles.push_back(engine.rank_particle_count(r));

  res.particles = engine.particles();
  res.graph = engine.measured_graph();
  res.assignment = engine.assignment();
  std::ostringstream trace;
  for (int r = 0; r < cfg.ranks; ++r) {
    sched::write_trace_csv(trace, engine.rank_scheduler(r), engine.rank_report(r), r, r == 0);
  }
  res.trace_csv = trace.str();
  return res;
}

void write_timing_csv(std::ostream& out, const TimingReport& r) {
  const auto prec = out.precision(17);
  out << kTimingCsvHeader << '\n';
  for (const auto& s : r.steps) {
    out << s.step << ',' << s.wall_ms << ',' << s.attempts << ',' << (s.rebuilt ? 1 : 0) << ','
        << (s.repartitioned ? 1 : 0) << ',' << s.messages << ',' << s.bytes << '\n';
  }
  out << "# mean_step_ms," << r.mean_step_ms << '\n';
  out << "# ranks," << r.ranks << '\n';
  out << "# workers," << r.workers << '\n';
  out << "# dt," << r.dt << '\n';
  out << "# imbalance," << r.imbalance << '\n';
  out.precision(prec);
}

TimingReport read_timing_csv(std::istream& in) {
  TimingReport r;
  std::string line;
  if (!std::getline(in, line) || line != kTimingCsvHeader) throw IoError("not a timing CSV: bad header");
  bool have_mean = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      const std::string key = line.substr(2, comma - 2);
      const double v = std::stod(line.substr(comma + 1));
      if (key == "mean_step_ms") {
        r.mean_step_ms = v;
        have_mean = true;
      } else if (key == "ranks") {
        r.ranks = static_cast<int>(v);
      } else if (key == "workers") {
        r.workers = static_cast<int>(v);
      } else if (key == "dt") {
        r.dt = v;
      } else if (key == "imbalance") {
        r.imbalance = v;
      }
      continue;
    }
    StepRecord s;
    char c;
    int rebuilt = 0, repart = 0;
    std::istringstream row(line);
    row >> s.step >> c >> s.wall_ms >> c >> s.attempts >> c >> rebuilt >> c >> repart >> c >> s.messages >> c >> s.bytes;
    if (!row) throw IoError("malformed timing row: " + line);
    s.rebuilt = rebuilt != 0;
    s.repartitioned = repart != 0;
    r.steps.push_back(s);
  }
  if (!have_mean) throw IoError("timing CSV lacks the mean_step_ms summary line");
  return r;
}

void write_rank_csv(std::ostream& out, const TimingReport& r) {
  const auto prec = out.precision(17);
  out << kRankCsvHeader << '\n';
  for (std::size_t k = 0; k < r.rank_task_seconds.size(); ++k) {
    out << k << ',' << (k < r.rank_particles.size() ? r.rank_particles[k] : 0) << ',' << r.rank_task_seconds[k] << '\n';
  }
  out.precision(prec);
}

void write_scaling_csv(std::ostream& out, const TimingReport& r, const TimingReport* baseline) {
  const auto prec = out.precision(17);
  if (!baseline) {
    out << kScalingCsvHeader << '\n' << r.ranks << ',' << r.workers << ',' << r.mean_step_ms << '\n';
    out.precision(prec);
    return;
  }
  const double speedup = baseline->mean_step_ms / r.mean_step_ms;
  const double scale = static_cast<double>(r.ranks * r.workers) / static_cast<double>(baseline->ranks * baseline->workers);
  out << kScalingBaselineCsvHeader << '\n';
  out << baseline->ranks << ',' << baseline->workers << ',' << baseline->mean_step_ms << ",1,1\n";
  out << r.ranks << ',' << r.workers << ',' << r.mean_step_ms << ',' << speedup << ',' << speedup / scale << '\n';
  out.precision(prec);
}

void emit_reports(const RunResult& result, const ReportPaths& paths) {
  namespace fs = std::filesystem;
  const fs::path dir(paths.out_dir.empty() ? "." : paths.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());

  std::optional<TimingReport> base;
  if (paths.baseline_timing) {
    std::ifstream in(*paths.baseline_timing);
    if (!in) throw IoError("cannot read baseline " + *paths.baseline_timing);
    base = read_timing_csv(in);
  }
  const auto write = [&](const char* name, auto&& fn, bool binary = false) {
    const fs::path p = dir / name;
    auto out = open_out(p, binary);
    fn(out);
    finish(out, p);
  };
  write("timing.csv", [&](std::ostream& o) { write_timing_csv(o, result.report); });
  write("ranks.csv", [&](std::ostream& o) { write_rank_csv(o, result.report); });
  write("partition.csv", [&](std::ostream& o) {
    partition::write_partition_csv(o, result.graph, result.assignment, result.config.ranks);
  });
  write("scaling.csv", [&](std::ostream& o) { write_scaling_csv(o, result.report, base ? &*base : nullptr); });
  if (paths.trace) write("trace.csv", [&](std::ostream& o) { o << result.trace_csv; });
  SnapshotHeader h;
  h.n = static_cast<std::int64_t>(result.particles.size());
  h.box = result.config.box;
  h.gamma = result.config.gamma;
  h.step = static_cast<int>(result.report.steps.size());
  h.dt = result.report.dt;
  h.text = paths.text_snapshot;
  write("snapshot.dat", [&](std::ostream& o) { write_snapshot(o, h, result.particles); }, !paths.text_snapshot);
}

void write_snapshot(std::ostream& out, const SnapshotHeader& h, const std::vector<sph::Particle>& ps) {
  out << std::setprecision(17);
  out << "TSPH-SNAPSHOT 1\n"
      << "format " << (h.text ? "text" : "binary") << '\n'
      << "n " << ps.size() << '\n'
      << "box " << h.box << '\n'
      << "gamma " << h.gamma << '\n'
      << "step " << h.step << '\n'
      << "dt " << h.dt << '\n'
      << "fields id x y z vx vy vz m h u rho omega ax ay az u_dot ax_prev ay_prev az_prev\n"
      << "end\n";
  for (const auto& p : ps) {
    const auto f = snapshot_fields(p);
    if (h.text) {
      out << p.id;
      for (double v : f) out << ' ' << v;
      out << '\n';
    } else {
      put_u64(out, p.id);
      for (double v : f) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

std::vector<sph::Particle> read_snapshot(std::istream& in, SnapshotHeader* header) {
  SnapshotHeader h;
  std::string line;
  if (!std::getline(in, line) || line != "TSPH-SNAPSHOT 1") throw IoError("not a snapshot");
  while (std::getline(in, line) && line != "end") {
    std::istringstream kv(line);
    std::string key;
    kv >> key;
    if (key == "format") {
      std::string f;
      kv >> f;
      h.text = f == "text";
    } else if (key == "n") {
      kv >> h.n;
    } else if (key == "box") {
      kv >> h.box;
    } else if (key == "gamma") {
      kv >> h.gamma;
    } else if (key == "step") {
      kv >> h.step;
    } else if (key == "dt") {
      kv >> h.dt;
    }
  }
  if (line != "end") throw IoError("snapshot header not terminated");
  std::vector<sph::Particle> ps(static_cast<std::size_t>(h.n));
  for (auto& p : ps) {
    std::array<double, kSnapshotDoubles> f{};
    if (h.text) {
      in >> p.id;
      for (double& v : f) in >> v;
      if (!in) throw IoError("snapshot truncated");
    } else {
      p.id = get_u64(in);
      for (double& v : f) v = std::bit_cast<double>(get_u64(in));
    }
    set_snapshot_fields(p, f);
  }
  if (header) *header = h;
  return ps;
}

}  // namespace tsph::harness
