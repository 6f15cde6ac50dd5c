#include "tsph/sched.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>

namespace tsph::sched {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kSort: return "sort";
    case TaskKind::kDensitySelf: return "density_self";
    case TaskKind::kDensityPair: return "density_pair";
    case TaskKind::kGhost: return "ghost";
    case TaskKind::kForceSelf: return "force_self";
    case TaskKind::kForcePair: return "force_pair";
    case TaskKind::kKick: return "kick";
    case TaskKind::kSend: return "send";
    case TaskKind::kRecv: return "recv";
  }
  return "unknown";
}

bool is_communication(TaskKind kind) { return kind == TaskKind::kSend || kind == TaskKind::kRecv; }

double RunReport::busy_seconds() const {
  double total = 0.0;
  for (double b : worker_busy_seconds) total += b;
  return total;
}

TaskFailure::TaskFailure(TaskId id, const std::string& what)
    : Error("task " + std::to_string(id) + " failed: " + what), id_(id) {}

namespace {

std::string describe_cycle(const std::vector<TaskId>& witness) {
  std::string s = "dependency cycle:";
  for (TaskId t : witness) s += " " + std::to_string(t);
  return s;
}

// Owner works at the back, thieves take from the front.
class WorkDeque {
 public:
  void push_back(TaskId id) {
    std::lock_guard lock(mu_);
    q_.push_back(id);
  }
  void push_front(TaskId id) {
    std::lock_guard lock(mu_);
    q_.push_front(id);
  }
  bool pop_back(TaskId& id) {
    std::lock_guard lock(mu_);
    if (q_.empty()) return false;
    id = q_.back();
    q_.pop_back();
    return true;
  }
  bool steal_front(TaskId& id) {
    std::lock_guard lock(mu_);
    if (q_.empty()) return false;
    id = q_.front();
    q_.pop_front();
    return true;
  }

 private:
  std::mutex mu_;
  std::deque<TaskId> q_;
};

enum : std::uint8_t { kPending = 0, kArmed = 1, kDone = 2, kClaimed = 3 };

using Clock = std::chrono::steady_clock;

}  // namespace

CycleError::CycleError(std::vector<TaskId> witness)
    : Error(describe_cycle(witness)), witness_(std::move(witness)) {}

struct Scheduler::Runtime {
  Runtime(const Scheduler& s, int workers)
      : tasks(s.tasks_),
        lock_slots(s.lock_slots_),
        wait(new std::atomic<int>[s.tasks_.size()]),
        state(new std::atomic<std::uint8_t>[s.tasks_.size()]),
        locks(new std::atomic<int>[static_cast<std::size_t>(s.n_locks_)]),
        deques(static_cast<std::size_t>(workers)),
        total(static_cast<int>(s.tasks_.size())),
        timings(s.tasks_.size()),
        busy(static_cast<std::size_t>(workers), 0.0),
        t0(Clock::now()) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      wait[i].store(tasks[i].wait_count, std::memory_order_relaxed);
      state[i].store(kPending, std::memory_order_relaxed);
    }
    for (int i = 0; i < s.n_locks_; ++i) locks[i].store(-1, std::memory_order_relaxed);
  }

  std::int64_t now_ns() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();
  }

  bool try_lock(TaskId id) {
    const auto& slots = lock_slots[static_cast<std::size_t>(id)];
    for (std::size_t k = 0; k < slots.size(); ++k) {
      int expected = -1;
      if (!locks[slots[k]].compare_exchange_strong(expected, id, std::memory_order_acquire)) {
        for (std::size_t r = 0; r < k; ++r) locks[slots[r]].store(-1, std::memory_order_release);
        return false;
      }
    }
    return true;
  }

  void unlock(TaskId id) {
    for (int slot : lock_slots[static_cast<std::size_t>(id)]) {
      locks[slot].store(-1, std::memory_order_release);
    }
  }

  void signal() {
    generation.fetch_add(1, std::memory_order_release);
    if (sleepers.load(std::memory_order_acquire) > 0) {
      std::lock_guard lock(cv_mu);
      cv.notify_all();
    }
  }

  // Largest cost at the back so the owner pops it first.
  void push_ready(std::vector<TaskId>& ready, int worker) {
    if (ready.empty()) return;
    std::sort(ready.begin(), ready.end(), [&](TaskId a, TaskId b) {
      const auto& ta = tasks[static_cast<std::size_t>(a)];
      const auto& tb = tasks[static_cast<std::size_t>(b)];
      if (ta.cost_estimate != tb.cost_estimate) return ta.cost_estimate < tb.cost_estimate;
      return a > b;
    });
    for (TaskId t : ready) {
      if (is_communication(tasks[static_cast<std::size_t>(t)].kind)) {
        comm.push_back(t);
      } else {
        deques[static_cast<std::size_t>(worker)].push_back(t);
      }
    }
    signal();
  }

  void complete(TaskId id, int worker) {
    std::vector<TaskId> ready;
    bool armed_any = false;
    for (TaskId d : tasks[static_cast<std::size_t>(id)].unlocks) {
      if (wait[d].fetch_sub(1, std::memory_order_acq_rel) == 1) {
        if (tasks[static_cast<std::size_t>(d)].external) {
          state[d].store(kArmed, std::memory_order_release);
          armed_any = true;
        } else {
          ready.push_back(d);
        }
      }
    }
    state[id].store(kDone, std::memory_order_release);
    push_ready(ready, worker);
    if (armed_any) signal();
    if (done.fetch_add(1, std::memory_order_acq_rel) + 1 == total) {
      std::lock_guard lock(cv_mu);
      finished.store(true, std::memory_order_release);
      cv.notify_all();
    }
  }

  bool acquire(int worker, TaskId& id) {
    if (comm.steal_front(id)) return true;
    if (deques[static_cast<std::size_t>(worker)].pop_back(id)) return true;
    const int n = static_cast<int>(deques.size());
    for (int k = 1; k < n; ++k) {
      if (deques[static_cast<std::size_t>((worker + k) % n)].steal_front(id)) return true;
    }
    return false;
  }

  void fail(TaskId id, const std::string& what) {
    {
      std::lock_guard lock(fail_mu);
      if (!failure) failure.emplace(id, what);
    }
    abort.store(true, std::memory_order_release);
    std::lock_guard lock(cv_mu);
    cv.notify_all();
  }

  bool stopping() const {
    return finished.load(std::memory_order_acquire) || abort.load(std::memory_order_acquire);
  }

  void worker_loop(int worker, const Body& body, const IdleHook& idle) {
    while (!stopping()) {
      TaskId id;
      if (!acquire(worker, id)) {
        const auto gen = generation.load(std::memory_order_acquire);
        if (idle) {
          try {
            idle(worker);
          } catch (const TaskFailure& e) {
            fail(e.task_id(), e.what());
            return;
          } catch (const std::exception& e) {
            fail(-1, e.what());
            return;
          }
        }
        if (generation.load(std::memory_order_acquire) != gen) continue;
        std::unique_lock lock(cv_mu);
        sleepers.fetch_add(1, std::memory_order_acq_rel);
        cv.wait_for(lock, std::chrono::microseconds(200), [&] {
          return stopping() || generation.load(std::memory_order_acquire) != gen;
        });
        sleepers.fetch_sub(1, std::memory_order_acq_rel);
        continue;
      }
      if (!try_lock(id)) {
        deques[static_cast<std::size_t>(worker)].push_front(id);
        std::this_thread::yield();
        continue;
      }
      auto& timing = timings[static_cast<std::size_t>(id)];
      timing.worker = worker;
      timing.start_ns = now_ns();
      try {
        body(tasks[static_cast<std::size_t>(id)], worker);
      } catch (const std::exception& e) {
        unlock(id);
        fail(id, e.what());
        return;
      }
      timing.end_ns = now_ns();
      busy[static_cast<std::size_t>(worker)] += 1e-9 * static_cast<double>(timing.end_ns - timing.start_ns);
      unlock(id);
      complete(id, worker);
      if (idle && !stopping()) {
        try {
          idle(worker);
        } catch (const TaskFailure& e) {
          fail(e.task_id(), e.what());
          return;
        } catch (const std::exception& e) {
          fail(-1, e.what());
          return;
        }
      }
    }
  }

  const std::vector<TaskDescriptor>& tasks;
  const std::vector<std::vector<int>>& lock_slots;
  std::unique_ptr<std::atomic<int>[]> wait;
  std::unique_ptr<std::atomic<std::uint8_t>[]> state;
  std::unique_ptr<std::atomic<int>[]> locks;
  std::vector<WorkDeque> deques;
  WorkDeque comm;
  int total;
  std::atomic<int> done{0};
  std::atomic<bool> finished{false};
  std::atomic<bool> abort{false};
  std::atomic<std::uint64_t> generation{0};
  std::atomic<int> sleepers{0};
  std::mutex cv_mu;
  std::condition_variable cv;
  std::mutex fail_mu;
  std::optional<std::pair<TaskId, std::string>> failure;
  std::vector<TaskTiming> timings;
  std::vector<double> busy;
  Clock::time_point t0;
};

Scheduler::Scheduler() = default;
Scheduler::~Scheduler() = default;

Scheduler::Scheduler(Scheduler&& o) noexcept
    : tasks_(std::move(o.tasks_)),
      sealed_(o.sealed_),
      lock_slots_(std::move(o.lock_slots_)),
      n_locks_(o.n_locks_),
      initial_ready_(std::move(o.initial_ready_)) {}

Scheduler& Scheduler::operator=(Scheduler&& o) noexcept {
  tasks_ = std::move(o.tasks_);
  sealed_ = o.sealed_;
  lock_slots_ = std::move(o.lock_slots_);
  n_locks_ = o.n_locks_;
  initial_ready_ = std::move(o.initial_ready_);
  return *this;
}

void Scheduler::check_id(TaskId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tasks_.size()) {
    throw Error("unknown task id " + std::to_string(id));
  }
}

TaskId Scheduler::declare_task(TaskKind kind, std::vector<std::uint64_t> cell_refs,
                               std::vector<ResourceId> resources, double cost_estimate,
                               bool external) {
  if (sealed_) throw Error("declare_task: scheduler is sealed");
  if (cell_refs.empty()) throw Error("declare_task: a task needs at least one cell");
  if (!(cost_estimate >= 0.0)) throw Error("declare_task: cost estimate must be non-negative");
  std::sort(resources.begin(), resources.end());
  if (std::adjacent_find(resources.begin(), resources.end()) != resources.end()) {
    throw Error("declare_task: duplicate resource in list");
  }
  TaskDescriptor t;
  t.id = static_cast<TaskId>(tasks_.size());
  t.kind = kind;
  t.cell_refs = std::move(cell_refs);
  t.resources = std::move(resources);
  t.cost_estimate = cost_estimate;
  t.external = external;
  tasks_.push_back(std::move(t));
  return tasks_.back().id;
}

void Scheduler::add_dependency(TaskId dependent, TaskId prerequisite) {
  if (sealed_) throw Error("add_dependency: scheduler is sealed");
  check_id(dependent);
  check_id(prerequisite);
  tasks_[static_cast<std::size_t>(dependent)].wait_count += 1;
  tasks_[static_cast<std::size_t>(prerequisite)].unlocks.push_back(dependent);
}

void Scheduler::seal() {
  const std::size_t n = tasks_.size();
  // Kahn's algorithm; anything left over sits on or behind a cycle.
  std::vector<int> indeg(n);
  std::vector<TaskId> frontier;
  for (std::size_t i = 0; i < n; ++i) {
    indeg[i] = tasks_[i].wait_count;
    if (indeg[i] == 0) frontier.push_back(static_cast<TaskId>(i));
  }
  std::vector<TaskId> ready = frontier;
  std::size_t seen = 0;
  while (!frontier.empty()) {
    TaskId t = frontier.back();
    frontier.pop_back();
    ++seen;
    for (TaskId d : tasks_[static_cast<std::size_t>(t)].unlocks) {
      if (--indeg[static_cast<std::size_t>(d)] == 0) frontier.push_back(d);
    }
  }
  if (seen != n) {
    std::vector<std::vector<TaskId>> prereqs(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (TaskId d : tasks_[i].unlocks) prereqs[static_cast<std::size_t>(d)].push_back(static_cast<TaskId>(i));
    }
    TaskId cur = -1;
    for (std::size_t i = 0; i < n && cur < 0; ++i) {
      if (indeg[i] > 0) cur = static_cast<TaskId>(i);
    }
    // Walk backwards through unresolved prerequisites until a task repeats.
    std::vector<int> pos(n, -1);
    std::vector<TaskId> path;
    while (pos[static_cast<std::size_t>(cur)] < 0) {
      pos[static_cast<std::size_t>(cur)] = static_cast<int>(path.size());
      path.push_back(cur);
      for (TaskId p : prereqs[static_cast<std::size_t>(cur)]) {
        if (indeg[static_cast<std::size_t>(p)] > 0) {
          cur = p;
          break;
        }
      }
    }
    std::vector<TaskId> witness(path.begin() + pos[static_cast<std::size_t>(cur)], path.end());
    std::reverse(witness.begin(), witness.end());
    throw CycleError(std::move(witness));
  }

  std::map<ResourceId, int> dense;
  lock_slots_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    for (ResourceId r : tasks_[i].resources) {
      auto [it, inserted] = dense.try_emplace(r, static_cast<int>(dense.size()));
      lock_slots_[i].push_back(it->second);
    }
  }
  n_locks_ = static_cast<int>(dense.size());
  std::sort(ready.begin(), ready.end());
  initial_ready_ = std::move(ready);
  sealed_ = true;
}

const TaskDescriptor& Scheduler::task(TaskId id) const {
  check_id(id);
  return tasks_[static_cast<std::size_t>(id)];
}

std::vector<TaskId> Scheduler::runnable() const {
  if (!sealed_) throw Error("runnable: scheduler not sealed");
  return initial_ready_;
}

RunReport Scheduler::run(int workers, const Body& body, const IdleHook& idle) {
  if (!sealed_) throw Error("run: scheduler not sealed");
  if (workers < 1) throw Error("run: need at least one worker");
  RunReport report;
  if (tasks_.empty()) {
    report.worker_busy_seconds.assign(static_cast<std::size_t>(workers), 0.0);
    return report;
  }
  Runtime rt(*this, workers);
  rt_ = &rt;

  // Initial ready set: communication first, then descending cost, spread round-robin.
  std::vector<TaskId> order;
  std::vector<TaskId> comm;
  for (TaskId t : initial_ready_) {
    const auto& d = tasks_[static_cast<std::size_t>(t)];
    if (d.external) {
      rt.state[t].store(kArmed, std::memory_order_relaxed);
    } else if (is_communication(d.kind)) {
      comm.push_back(t);
    } else {
      order.push_back(t);
    }
  }
  for (TaskId t : comm) rt.comm.push_back(t);
  std::stable_sort(order.begin(), order.end(), [&](TaskId a, TaskId b) {
    return tasks_[static_cast<std::size_t>(a)].cost_estimate > tasks_[static_cast<std::size_t>(b)].cost_estimate;
  });
  std::vector<std::vector<TaskId>> per_worker(static_cast<std::size_t>(workers));
  for (std::size_t k = 0; k < order.size(); ++k) per_worker[k % static_cast<std::size_t>(workers)].push_back(order[k]);
  for (int w = 0; w < workers; ++w) {
    auto& list = per_worker[static_cast<std::size_t>(w)];
    for (auto it = list.rbegin(); it != list.rend(); ++it) rt.deques[static_cast<std::size_t>(w)].push_back(*it);
  }

  {
    std::vector<std::jthread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&rt, &body, &idle, w] { rt.worker_loop(w, body, idle); });
    }
  }
  rt_ = nullptr;
  report.wall_ns = rt.now_ns();

  if (rt.failure) {
    throw TaskFailure(rt.failure->first, rt.failure->second);
  }
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    const auto& tm = rt.timings[i];
    tasks_[i].cost_measured = 1e-9 * static_cast<double>(tm.end_ns - tm.start_ns);
  }
  report.timings = std::move(rt.timings);
  report.worker_busy_seconds = std::move(rt.busy);
  return report;
}

bool Scheduler::is_armed(TaskId id) const {
  if (rt_ == nullptr) return false;
  check_id(id);
  return rt_->state[id].load(std::memory_order_acquire) == kArmed;
}

bool Scheduler::try_complete_external(TaskId id, int worker, const std::function<void()>& apply) {
  if (rt_ == nullptr) throw Error("try_complete_external: scheduler is not running");
  check_id(id);
  Runtime& rt = *rt_;
  std::uint8_t expected = kArmed;
  if (!rt.state[id].compare_exchange_strong(expected, kClaimed, std::memory_order_acq_rel)) return false;
  if (!rt.try_lock(id)) {
    rt.state[id].store(kArmed, std::memory_order_release);
    return false;
  }
  auto& timing = rt.timings[static_cast<std::size_t>(id)];
  timing.worker = worker;
  timing.start_ns = rt.now_ns();
  try {
    apply();
  } catch (const std::exception& e) {
    rt.unlock(id);
    throw TaskFailure(id, e.what());
  }
  timing.end_ns = rt.now_ns();
  if (worker >= 0 && static_cast<std::size_t>(worker) < rt.busy.size()) {
    rt.busy[static_cast<std::size_t>(worker)] += 1e-9 * static_cast<double>(timing.end_ns - timing.start_ns);
  }
  rt.unlock(id);
  rt.complete(id, worker < 0 ? 0 : worker);
  return true;
}

void write_trace_csv(std::ostream& out, const Scheduler& sched, const RunReport& report, int rank,
                     bool header) {
  if (header) out << kTraceCsvHeader << '\n';
  for (const auto& t : sched.tasks()) {
    const auto& tm = report.timings.at(static_cast<std::size_t>(t.id));
    out << t.id << ',' << to_string(t.kind) << ',' << rank << ',' << tm.worker << ',' << tm.start_ns
        << ',' << tm.end_ns << ',' << t.cost_estimate << '\n';
  }
}

}  // namespace tsph::sched
