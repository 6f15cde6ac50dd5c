#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "tsph/common.hpp"

namespace tsph::sched {

enum class TaskKind : std::uint8_t {
  kSort,
  kDensitySelf,
  kDensityPair,
  kGhost,
  kForceSelf,
  kForcePair,
  kKick,
  kSend,
  kRecv,
};

std::string_view to_string(TaskKind kind);
bool is_communication(TaskKind kind);

using TaskId = std::int32_t;
using ResourceId = std::uint64_t;

struct TaskDescriptor {
  TaskId id = -1;
  TaskKind kind = TaskKind::kSort;
  std::vector<std::uint64_t> cell_refs;
  int wait_count = 0;
  std::vector<TaskId> unlocks;
  // Sorted ascending; locks are always taken in this order.
  std::vector<ResourceId> resources;
  double cost_estimate = 0.0;
  std::optional<double> cost_measured;
  // Completed from outside the worker loop (see Scheduler::try_complete_external).
  bool external = false;
};

struct TaskTiming {
  std::int64_t start_ns = -1;
  std::int64_t end_ns = -1;
  int worker = -1;
};

struct RunReport {
  std::vector<TaskTiming> timings;
  std::int64_t wall_ns = 0;
  std::vector<double> worker_busy_seconds;

  double busy_seconds() const;
};

class TaskFailure : public Error {
 public:
  TaskFailure(TaskId id, const std::string& what);
  TaskId task_id() const { return id_; }

 private:
  TaskId id_;
};

class CycleError : public Error {
 public:
  explicit CycleError(std::vector<TaskId> witness);
  const std::vector<TaskId>& witness() const { return witness_; }

 private:
  std::vector<TaskId> witness_;
};

// Dependency- and conflict-aware task executor. Tasks are declared, wired and
// sealed once; run() may then be called repeatedly on the same graph.
class Scheduler {
 public:
  using Body = std::function<void(const TaskDescriptor&, int worker)>;
  using IdleHook = std::function<void(int worker)>;

  Scheduler();
  ~Scheduler();
  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;
  Scheduler(Scheduler&&) noexcept;
  Scheduler& operator=(Scheduler&&) noexcept;

  TaskId declare_task(TaskKind kind, std::vector<std::uint64_t> cell_refs,
                      std::vector<ResourceId> resources, double cost_estimate,
                      bool external = false);
  void add_dependency(TaskId dependent, TaskId prerequisite);
  void seal();

  bool sealed() const { return sealed_; }
  std::size_t size() const { return tasks_.size(); }
  const TaskDescriptor& task(TaskId id) const;
  const std::vector<TaskDescriptor>& tasks() const { return tasks_; }
  // Tasks with no unresolved dependency once sealed.
  std::vector<TaskId> runnable() const;

  // Executes every non-external task exactly once on `workers` threads.
  // External tasks are finished through try_complete_external, normally from
  // `idle`, which idle workers call between task acquisitions.
  RunReport run(int workers, const Body& body, const IdleHook& idle = {});

  // Valid only inside run(): an external task whose prerequisites are done.
  bool is_armed(TaskId id) const;
  // Locks the task's resources, calls `apply`, and resolves its dependents.
  // Returns false (without calling apply) if not armed or a resource is busy.
  bool try_complete_external(TaskId id, int worker, const std::function<void()>& apply);

 private:
  struct Runtime;

  void check_id(TaskId id) const;

  std::vector<TaskDescriptor> tasks_;
  bool sealed_ = false;
  // Filled by seal(): dense lock slots per task, and the initial ready set.
  std::vector<std::vector<int>> lock_slots_;
  int n_locks_ = 0;
  std::vector<TaskId> initial_ready_;
  Runtime* rt_ = nullptr;
};

// CSV: id,kind,rank,worker,start_ns,end_ns,cost_estimate
void write_trace_csv(std::ostream& out, const Scheduler& sched, const RunReport& report, int rank,
                     bool header = true);
inline constexpr std::string_view kTraceCsvHeader =
    "id,kind,rank,worker,start_ns,end_ns,cost_estimate";

}  // namespace tsph::sched
