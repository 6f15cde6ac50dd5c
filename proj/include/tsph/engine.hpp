#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <memory>
#include <vector>

#include "tsph/common.hpp"
#include "tsph/grid.hpp"
#include "tsph/partition.hpp"
#include "tsph/sched.hpp"
#include "tsph/sph.hpp"
#include "tsph/transport.hpp"
#include "tsph/wire.hpp"

namespace tsph::exchange {

// Send/recv additions to one rank's blueprint. Indices refer to bp.tasks.
struct CommPlan {
  std::size_t sends = 0;
  std::size_t recvs = 0;
  // Per top-level index and phase (0 density, 1 force): the recv task, or -1.
  std::array<std::vector<int>, 2> recv_task;
  // Barriered mode only: per phase, an external task that completes once every
  // rank has applied all of that phase's messages.
  std::array<int, 2> barrier{-1, -1};
};

// consumers[t] lists the ranks that mirror local top cell t as a proxy. With
// `barriered` every phase waits for all of its messages before computing.
// Throws DomainError if a task touching a proxy cell ends up without a
// dependency on the matching recv.
CommPlan plan_communications(grid::Grid& g, grid::Blueprint& bp, int rank,
                             const std::vector<std::vector<int>>& consumers, bool barriered);

// Ranks needing a proxy of each top cell: owners of a non-empty neighbouring
// top cell, other than the cell's own owner. Empty cells have no consumers.
std::vector<std::vector<int>> proxy_consumers(const grid::Grid& topology, const partition::Assignment& a,
                                              const std::vector<std::int64_t>& occupancy);

struct EngineConfig {
  sph::SphConfig sph;
  grid::GridConfig grid;
  int ranks = 1;
  int workers = 1;
  // Reference mode: communication is flushed between the density and force phases.
  bool barriered = false;
  // Top-level cells are at least this factor times the largest h wide.
  double top_margin = 1.25;
  std::chrono::milliseconds protocol_timeout{30000};
  int max_step_attempts = 4;
};

struct StepStats {
  std::uint32_t step = 0;
  double wall_seconds = 0.0;
  int attempts = 0;
  bool rebuilt = false;
  std::int64_t messages = 0;  // density and force messages of the final attempt
  std::int64_t bytes = 0;
  std::vector<double> rank_busy_seconds;
  std::vector<double> rank_wall_seconds;
};

struct RebuildStats {
  std::int64_t migrated = 0;
  std::int64_t migrate_messages = 0;
  std::int64_t proxy_messages = 0;
  bool regridded = false;
};

// A failed step: which step, rank and task, plus the original exception.
class StepFailure : public Error {
 public:
  StepFailure(const std::string& what, std::uint32_t step, int rank, sched::TaskId task, std::exception_ptr cause);
  std::uint32_t step() const { return step_; }
  int rank() const { return rank_; }
  sched::TaskId task() const { return task_; }
  std::exception_ptr cause() const { return cause_; }

 private:
  std::uint32_t step_;
  int rank_;
  sched::TaskId task_;
  std::exception_ptr cause_;
};

// Multi-rank SPH engine. Ranks live in one process, each with its own grid,
// blueprint and scheduler; they exchange data only through the Transport.
class Engine {
 public:
  Engine(std::vector<sph::Particle> particles, const Vec3& box, EngineConfig cfg,
         std::shared_ptr<Transport> transport = nullptr);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  // One density + force + kick step. Rebuilds first if the grids no longer
  // cover every interaction, and retries after a rebuild when a smoothing
  // length outgrows its cell.
  StepStats step(double dt);

  // Migrates particles to the owners given by `next` (or the current
  // assignment) and rebuilds every rank's grid, proxies and task graph.
  RebuildStats rebuild(const partition::Assignment* next = nullptr);

  // Cell graph from the measured task times of the last step.
  partition::CellGraph measured_graph() const;
  // Recomputes the assignment from measured costs; migrates unless skipped.
  partition::RepartitionResult repartition(double min_gain = 0.05);

  // Owned particles of every rank, ordered by id.
  std::vector<sph::Particle> particles() const;
  const partition::Assignment& assignment() const { return assignment_; }
  int ranks() const { return cfg_.ranks; }
  std::uint32_t steps_done() const { return step_; }
  const Vec3& box() const { return box_; }
  std::array<int, 3> dims() const { return dims_; }
  const EngineConfig& config() const { return cfg_; }

  const grid::Grid& rank_grid(int r) const;
  const grid::Blueprint& rank_blueprint(int r) const;
  const sched::Scheduler& rank_scheduler(int r) const;
  const sched::RunReport& rank_report(int r) const;
  const CommPlan& rank_plan(int r) const;
  std::int64_t rank_particle_count(int r) const;
  // Number of send tasks over all ranks: messages one step must produce.
  std::int64_t expected_messages_per_step() const;
  Transport& transport() { return *transport_; }

 private:
  struct Rank;

  void run_ranks(double dt);
  void execute(Rank& r, const grid::TaskSpec& t, double dt);
  void pump(Rank& r, int worker);
  bool coverage_ok() const;
  double max_h() const;
  partition::Assignment estimate_partition(const std::vector<sph::Particle>& all) const;
  void set_dims(double h_top);
  grid::Grid topology() const;
  // owned[r]: particles rank r owns under assignment_, positions wrapped.
  void build_ranks(std::vector<std::vector<sph::Particle>> owned, RebuildStats& st);
  // Data messages of one full-record exchange, per receiving rank.
  std::vector<std::vector<Message>> receive_all(Phase phase, std::uint32_t round);

  Vec3 box_;
  EngineConfig cfg_;
  std::shared_ptr<Transport> transport_;
  std::array<int, 3> dims_{0, 0, 0};
  partition::Assignment assignment_;
  std::vector<std::unique_ptr<Rank>> ranks_;
  std::uint32_t step_ = 0;
  std::uint32_t exchange_round_ = 0;
  double h_top_ = 0.0;
  std::atomic<bool> abort_{false};
  // Some smoothing length outgrew its cell; the attempt will be repeated.
  std::atomic<bool> retry_{false};
  // Messages applied in the current attempt, per phase, over all ranks.
  std::array<std::atomic<std::int64_t>, 2> applied_{};
  std::array<std::int64_t, 2> expected_applied_{0, 0};
};

}  // namespace tsph::exchange
