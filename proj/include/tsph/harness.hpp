#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tsph/engine.hpp"
#include "tsph/sph.hpp"

namespace tsph::harness {

enum class IcMode { kUniform, kClustered };

struct RunConfig {
  std::int64_t n = 4096;
  double box = 1.0;
  IcMode ic = IcMode::kUniform;
  int clumps = 8;
  // Gaussian standard deviation of each clump, in box units of length.
  double clump_radius = 0.05;
  // Share of particles placed in clumps; the rest form a uniform background.
  double clump_fraction = 0.5;
  // Lattice jitter as a fraction of the lattice spacing.
  double jitter = 0.05;
  double gamma = 5.0 / 3.0;
  double eta_neigh = 48.0;
  double dt = 0.0;  // 0: CFL estimate at t = 0
  int steps = 100;
  int repart_period = 100;  // 0 disables repartitioning
  int ranks = 1;
  int workers = 1;
  std::uint64_t seed = 1;
  bool barriered = false;
  int split_threshold = 100;

  void validate() const;
  exchange::EngineConfig engine_config() const;
};

// Deterministic for a given seed on every platform: uniforms are built from the
// top 53 bits of a 64-bit Mersenne Twister stream and clump offsets are sums of
// uniforms, so no libm call touches the positions.
std::vector<sph::Particle> generate_ics(const RunConfig& cfg);

// 0.1 * min h / c_s with c_s = sqrt(gamma (gamma - 1) u).
double initial_timestep(const std::vector<sph::Particle>& ps, const RunConfig& cfg);

struct StepRecord {
  int step = 0;  // 1-based
  double wall_ms = 0.0;
  int attempts = 1;
  bool rebuilt = false;
  bool repartitioned = false;
  std::int64_t messages = 0;
  std::int64_t bytes = 0;
};

struct TimingReport {
  std::vector<StepRecord> steps;
  // Mean wall time of steps 2 .. steps-1.
  double mean_step_ms = 0.0;
  std::vector<double> rank_task_seconds;
  std::vector<std::int64_t> rank_particles;
  double imbalance = 1.0;  // max / mean of rank_task_seconds
  double dt = 0.0;
  int workers = 1;
  int ranks = 1;
  std::vector<int> repartition_steps;
};

// Mean of all but the first and last entries. Needs at least three.
double protocol_mean(const std::vector<double>& per_step_ms);

struct RunResult {
  TimingReport report;
  std::vector<sph::Particle> particles;  // final state, ordered by id
  partition::CellGraph graph;            // measured costs of the last step
  partition::Assignment assignment;
  std::string trace_csv;                 // task trace of the last step, all ranks
  RunConfig config;
};

// ICs, engine set-up, the timed step loop and repartitioning on cadence.
// Errors come out as exchange::StepFailure (step and task context) or the
// module's own exception.
RunResult run_simulation(const RunConfig& cfg);
RunResult run_simulation(const RunConfig& cfg, std::vector<sph::Particle> ics);

inline constexpr const char* kTimingCsvHeader = "step,wall_ms,attempts,rebuilt,repartitioned,messages,bytes";
inline constexpr const char* kRankCsvHeader = "rank,particles,task_seconds";
inline constexpr const char* kScalingCsvHeader = "ranks,workers,mean_step_ms";
inline constexpr const char* kScalingBaselineCsvHeader = "ranks,workers,mean_step_ms,speedup,efficiency";

void write_timing_csv(std::ostream& out, const TimingReport& r);
void write_rank_csv(std::ostream& out, const TimingReport& r);
// Speed-up and efficiency columns appear only when a baseline is given;
// efficiency = speedup / (workers * ranks relative to the baseline's).
void write_scaling_csv(std::ostream& out, const TimingReport& r, const TimingReport* baseline);
// Reads the mean and parallelism back from a timing CSV written above.
TimingReport read_timing_csv(std::istream& in);

struct ReportPaths {
  std::string out_dir;
  bool trace = false;
  std::optional<std::string> baseline_timing;
  bool text_snapshot = false;
};

// timing.csv, ranks.csv, partition.csv, scaling.csv, snapshot.dat and, with
// `trace`, trace.csv. Throws IoError when a file cannot be written.
void emit_reports(const RunResult& result, const ReportPaths& paths);

class IoError : public Error {
 public:
  using Error::Error;
};

struct SnapshotHeader {
  std::int64_t n = 0;
  double box = 0.0;
  double gamma = 0.0;
  int step = 0;
  double dt = 0.0;
  bool text = false;
};

// Text header, then one record per particle (id, x, v, m, h, u, rho, omega,
// a, u_dot, previous a) as little-endian binary or, in text mode, as decimal lines.
void write_snapshot(std::ostream& out, const SnapshotHeader& h, const std::vector<sph::Particle>& ps);
std::vector<sph::Particle> read_snapshot(std::istream& in, SnapshotHeader* header = nullptr);

}  // namespace tsph::harness
