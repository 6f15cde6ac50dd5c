#include "tsph/engine.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace tsph::exchange {

using grid::CellIndex;
using sched::TaskKind;
using Clock = std::chrono::steady_clock;

namespace {

// Thrown from idle hooks of healthy ranks once another rank has failed.
class RunAborted : public Error {
 public:
  RunAborted() : Error("aborted: another rank failed") {}
};

bool is_density_side(TaskKind k) {
  return k == TaskKind::kSort || k == TaskKind::kDensitySelf || k == TaskKind::kDensityPair;
}

bool touches(const grid::TaskSpec& t, CellIndex c) { return t.ci == c || t.cj == c; }

bool has_dep(const grid::TaskSpec& t, int d) { return std::find(t.deps.begin(), t.deps.end(), d) != t.deps.end(); }

void add_dep(grid::TaskSpec& t, int d) {
  if (!has_dep(t, d)) t.deps.push_back(d);
}

double max_h_in(const grid::Grid& g, CellIndex c) {
  const auto& cell = g.cells[static_cast<std::size_t>(c)];
  double h = 0.0;
  for (std::int32_t p = cell.begin; p < cell.end; ++p) h = std::max(h, g.particles[static_cast<std::size_t>(p)].h);
  return h;
}

}  // namespace

StepFailure::StepFailure(const std::string& what, std::uint32_t step, int rank, sched::TaskId task,
                         std::exception_ptr cause)
    : Error(what), step_(step), rank_(rank), task_(task), cause_(std::move(cause)) {}

std::vector<std::vector<int>> proxy_consumers(const grid::Grid& topology, const partition::Assignment& a,
                                              const std::vector<std::int64_t>& occupancy) {
  const int n = topology.num_top();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    if (occupancy[static_cast<std::size_t>(t)] == 0) continue;
    std::set<int> ranks;
    for (int nb : topology.top_neighbours(t)) {
      if (occupancy[static_cast<std::size_t>(nb)] == 0) continue;
      const int r = a[static_cast<std::size_t>(nb)];
      if (r != a[static_cast<std::size_t>(t)]) ranks.insert(r);
    }
    out[static_cast<std::size_t>(t)].assign(ranks.begin(), ranks.end());
  }
  return out;
}

CommPlan plan_communications(grid::Grid& g, grid::Blueprint& bp, int rank,
                             const std::vector<std::vector<int>>& consumers, bool barriered) {
  CommPlan plan;
  const int n_top = g.num_top();
  for (auto& v : plan.recv_task) v.assign(static_cast<std::size_t>(n_top), -1);
  auto& T = bp.tasks;
  const std::size_t n_compute = T.size();
  const auto cell = [&](CellIndex c) -> const grid::Cell& { return g.cells[static_cast<std::size_t>(c)]; };

  std::vector<int> ghost_of(g.cells.size(), -1);
  std::vector<int> all_ghosts;
  for (std::size_t i = 0; i < n_compute; ++i) {
    if (T[i].kind == TaskKind::kGhost) {
      ghost_of[static_cast<std::size_t>(T[i].ci)] = static_cast<int>(i);
      all_ghosts.push_back(static_cast<int>(i));
    }
  }

  // Owner side: one send per (non-empty local top, consumer, phase).
  for (int t = 0; t < n_top; ++t) {
    const CellIndex root = g.top[static_cast<std::size_t>(t)];
    if (root < 0 || !cell(root).local || cell(root).count() == 0) continue;
    std::vector<int> ghosts;
    for (CellIndex l : g.leaves_under(root)) {
      if (ghost_of[static_cast<std::size_t>(l)] >= 0) ghosts.push_back(ghost_of[static_cast<std::size_t>(l)]);
    }
    for (int d : consumers[static_cast<std::size_t>(t)]) {
      if (d == rank) continue;
      grid::TaskSpec sd;
      sd.kind = TaskKind::kSend;
      sd.ci = root;
      sd.comm_top = t;
      sd.comm_phase = 0;
      sd.comm_peer = d;
      sd.cost_estimate = static_cast<double>(cell(root).count());
      const int sd_id = static_cast<int>(T.size());
      T.push_back(sd);
      // Ghosts rewrite h, which the density message carries.
      for (int gh : ghosts) add_dep(T[static_cast<std::size_t>(gh)], sd_id);

      grid::TaskSpec sf = sd;
      sf.comm_phase = 1;
      sf.deps = barriered ? all_ghosts : ghosts;
      T.push_back(sf);
      plan.sends += 2;
    }
  }

  // Consumer side: two recvs per proxy top.
  std::vector<int> all_recv_density, all_recv_force;
  for (int t = 0; t < n_top; ++t) {
    const CellIndex root = g.top[static_cast<std::size_t>(t)];
    if (root < 0 || cell(root).local) continue;
    const auto leaves = g.leaves_under(root);
    grid::TaskSpec rd;
    rd.kind = TaskKind::kRecv;
    rd.ci = root;
    rd.comm_top = t;
    rd.comm_phase = 0;
    rd.comm_peer = cell(root).owner_rank;
    rd.cost_estimate = static_cast<double>(cell(root).count());
    const int rd_id = static_cast<int>(T.size());
    T.push_back(rd);

    grid::TaskSpec rf = rd;
    rf.comm_phase = 1;
    rf.deps = {rd_id};
    const int rf_id = rd_id + 1;
    for (std::size_t i = 0; i < n_compute; ++i) {
      auto& task = T[i];
      const bool hit = std::any_of(leaves.begin(), leaves.end(), [&](CellIndex l) { return touches(task, l); });
      if (!hit) continue;
      if (task.kind == TaskKind::kSort || task.kind == TaskKind::kDensityPair) add_dep(task, rd_id);
      // The proxy stays untouched for the whole density phase.
      if (task.kind == TaskKind::kDensityPair) add_dep(rf, static_cast<int>(i));
      if (task.kind == TaskKind::kForcePair) add_dep(task, rf_id);
    }
    T.push_back(rf);
    plan.recv_task[0][static_cast<std::size_t>(t)] = rd_id;
    plan.recv_task[1][static_cast<std::size_t>(t)] = rf_id;
    all_recv_density.push_back(rd_id);
    all_recv_force.push_back(rf_id);
    plan.recvs += 2;
  }

  if (barriered) {
    // Global flush: compute of each phase waits for every rank's messages.
    for (int phase = 0; phase < 2; ++phase) {
      grid::TaskSpec b;
      b.kind = TaskKind::kRecv;
      b.comm_phase = phase;
      b.deps = phase == 0 ? all_recv_density : all_recv_force;
      plan.barrier[static_cast<std::size_t>(phase)] = static_cast<int>(T.size());
      T.push_back(b);
    }
    for (std::size_t i = 0; i < n_compute; ++i) {
      auto& task = T[i];
      if (task.kind == TaskKind::kSort || task.kind == TaskKind::kDensitySelf) {
        add_dep(task, plan.barrier[0]);
      } else if (task.kind == TaskKind::kForceSelf || task.kind == TaskKind::kForcePair) {
        add_dep(task, plan.barrier[1]);
      }
    }
  }

  // Every task reading proxy data must wait for the message that carries it.
  for (std::size_t i = 0; i < n_compute; ++i) {
    const auto& task = T[i];
    for (CellIndex c : {task.ci, task.cj}) {
      if (c < 0 || cell(c).local) continue;
      const int t = cell(c).top;
      int need = -1;
      if (is_density_side(task.kind)) need = plan.recv_task[0][static_cast<std::size_t>(t)];
      if (task.kind == TaskKind::kForcePair) need = plan.recv_task[1][static_cast<std::size_t>(t)];
      if (task.kind == TaskKind::kDensitySelf || task.kind == TaskKind::kForceSelf || task.kind == TaskKind::kGhost ||
          task.kind == TaskKind::kKick || need < 0 || !has_dep(task, need)) {
        throw DomainError("planning bug: rank " + std::to_string(rank) + " task " + std::to_string(i) + " (" +
                          std::string(sched::to_string(task.kind)) + ") reads proxy cell " +
                          std::to_string(cell(c).id) + " without a matching recv");
      }
    }
  }
  return plan;
}

struct Engine::Rank {
  int id = 0;
  grid::Grid grid;
  grid::Blueprint bp;
  CommPlan plan;
  sched::Scheduler sched;
  sched::RunReport report;
  // Per cell: density pair partners and the shift that brings them next to it.
  std::vector<std::vector<std::pair<CellIndex, Vec3>>> partners;
  std::int64_t local_count = 0;
  double drift = 0.0;
  std::vector<sph::Particle> saved;

  std::mutex pending_mu;
  std::vector<std::pair<sched::TaskId, Message>> pending;
  std::unique_ptr<std::atomic<bool>[]> received;
  std::atomic<std::int64_t> received_count{0};
  std::atomic<bool> needs_rebuild{false};
  Clock::time_point run_start;

  std::mutex fail_mu;
  std::exception_ptr failure;
  sched::TaskId failed_task = -1;

  void record(sched::TaskId task, std::exception_ptr e) {
    std::lock_guard lock(fail_mu);
    if (!failure) {
      failure = std::move(e);
      failed_task = task;
    }
  }

  std::span<sph::Particle> local() { return {grid.particles.data(), static_cast<std::size_t>(local_count)}; }
};

Engine::Engine(std::vector<sph::Particle> particles, const Vec3& box, EngineConfig cfg,
               std::shared_ptr<Transport> transport)
    : box_(box), cfg_(std::move(cfg)), transport_(std::move(transport)) {
  if (!(box.x > 0 && box.y > 0 && box.z > 0)) throw ConfigError("box edges must be positive");
  if (cfg_.ranks < 1) throw ConfigError("rank count must be at least 1");
  if (cfg_.workers < 1) throw ConfigError("workers per rank must be at least 1");
  if (cfg_.max_step_attempts < 1) throw ConfigError("max_step_attempts must be at least 1");
  if (!(cfg_.top_margin >= 1.0)) throw ConfigError("top_margin must be at least 1");
  if (particles.empty()) throw ConfigError("no particles");
  const double min_box = std::min({box.x, box.y, box.z});
  cfg_.sph.h_max = std::min(cfg_.sph.h_max, min_box / 3.0);
  cfg_.sph.validate();
  if (!transport_) transport_ = std::make_shared<LoopbackTransport>();

  double mh = 0.0;
  for (auto& p : particles) {
    if (!std::isfinite(p.x.x) || !std::isfinite(p.x.y) || !std::isfinite(p.x.z)) {
      throw DomainError("particle " + std::to_string(p.id) + " has a non-finite position");
    }
    if (!(p.h > 0.0)) throw ConfigError("particle " + std::to_string(p.id) + " needs a positive smoothing length");
    p.x = sph::wrap(p.x, box_);
    mh = std::max(mh, p.h);
  }
  for (int r = 0; r < cfg_.ranks; ++r) {
    ranks_.push_back(std::make_unique<Rank>());
    ranks_.back()->id = r;
  }
  set_dims(mh * cfg_.top_margin);
  assignment_ = estimate_partition(particles);

  const auto topo = topology();
  std::vector<std::vector<sph::Particle>> owned(static_cast<std::size_t>(cfg_.ranks));
  for (auto& p : particles) {
    owned[static_cast<std::size_t>(assignment_[static_cast<std::size_t>(topo.top_index_of(p.x))])].push_back(p);
  }
  RebuildStats st;
  build_ranks(std::move(owned), st);
}

Engine::~Engine() = default;

void Engine::set_dims(double h_top) {
  const double min_box = std::min({box_.x, box_.y, box_.z});
  h_top_ = std::min(h_top, min_box / 3.0 * (1.0 - 1e-12));
  dims_ = grid::grid_dims(box_, h_top_, cfg_.grid);
}

grid::Grid Engine::topology() const { return grid::build_grid_from_slices(box_, dims_, {}, cfg_.grid); }

partition::Assignment Engine::estimate_partition(const std::vector<sph::Particle>& all) const {
  const auto n = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
  if (cfg_.ranks == 1) return partition::Assignment(n, 0);
  auto g = grid::build_grid(all, box_, h_top_, cfg_.grid);
  const auto bp = grid::make_tasks(g, cfg_.grid);
  std::vector<double> costs;
  costs.reserve(bp.tasks.size());
  for (const auto& t : bp.tasks) costs.push_back(t.cost_estimate);
  const auto cg = partition::build_cell_graph(g, bp, costs);
  return partition::GreedyKlPartitioner{}.partition(cg, cfg_.ranks);
}

double Engine::max_h() const {
  double h = 0.0;
  for (const auto& r : ranks_) {
    for (std::int64_t i = 0; i < r->local_count; ++i) h = std::max(h, r->grid.particles[static_cast<std::size_t>(i)].h);
  }
  return h;
}

bool Engine::coverage_ok() const {
  return std::all_of(ranks_.begin(), ranks_.end(),
                     [](const auto& r) { return grid::coverage_valid(r->grid, grid::max_drift(r->grid)); });
}

std::vector<std::vector<Message>> Engine::receive_all(Phase phase, std::uint32_t round) {
  const int k = cfg_.ranks;
  std::vector<std::vector<Message>> out(static_cast<std::size_t>(k));
  std::vector<std::vector<char>> marker(static_cast<std::size_t>(k), std::vector<char>(static_cast<std::size_t>(k), 0));
  std::vector<int> markers(static_cast<std::size_t>(k), 0);
  std::vector<std::int64_t> expected(static_cast<std::size_t>(k), 0);
  const auto deadline = Clock::now() + cfg_.protocol_timeout;
  const auto complete = [&] {
    for (int r = 0; r < k; ++r) {
      if (markers[static_cast<std::size_t>(r)] != k - 1 ||
          static_cast<std::int64_t>(out[static_cast<std::size_t>(r)].size()) != expected[static_cast<std::size_t>(r)]) {
        return false;
      }
    }
    return true;
  };
  while (!complete()) {
    bool any = false;
    for (int r = 0; r < k; ++r) {
      for (auto& bytes : transport_->poll(r)) {
        any = true;
        Message m = decode(bytes);
        if (m.header.phase != phase || m.header.step != round) {
          throw ProtocolError("rank " + std::to_string(r) + " got " + m.header.describe() + " while waiting for " +
                              to_string(phase) + " round " + std::to_string(round));
        }
        if (m.header.cell & kMarkerCell) {
          const auto src = static_cast<int>(m.header.cell & ~kMarkerCell);
          if (src < 0 || src >= k || src == r || marker[static_cast<std::size_t>(r)][static_cast<std::size_t>(src)]) {
            throw ProtocolError("rank " + std::to_string(r) + " got an unexpected marker " + m.header.describe());
          }
          marker[static_cast<std::size_t>(r)][static_cast<std::size_t>(src)] = 1;
          ++markers[static_cast<std::size_t>(r)];
          expected[static_cast<std::size_t>(r)] += m.header.count;
        } else {
          out[static_cast<std::size_t>(r)].push_back(std::move(m));
        }
      }
    }
    if (any) continue;
    if (Clock::now() > deadline) {
      throw ProtocolError("timed out waiting for " + to_string(phase) + " messages of round " + std::to_string(round));
    }
    std::this_thread::sleep_for(std::chrono::microseconds(50));
  }
  return out;
}

RebuildStats Engine::rebuild(const partition::Assignment* next) {
  RebuildStats st;
  const int k = cfg_.ranks;
  std::vector<std::vector<sph::Particle>> held(static_cast<std::size_t>(k));
  double mh = 0.0;
  for (int r = 0; r < k; ++r) {
    auto& rk = *ranks_[static_cast<std::size_t>(r)];
    auto& mine = held[static_cast<std::size_t>(r)];
    mine.assign(rk.local().begin(), rk.local().end());
    for (auto& p : mine) {
      if (!std::isfinite(p.x.x) || !std::isfinite(p.x.y) || !std::isfinite(p.x.z)) {
        throw DomainError("particle " + std::to_string(p.id) + " left the box: non-finite position");
      }
      p.x = sph::wrap(p.x, box_);
      mh = std::max(mh, p.h);
    }
  }

  const double min_top = std::min({box_.x / dims_[0], box_.y / dims_[1], box_.z / dims_[2]});
  partition::Assignment target = next ? *next : assignment_;
  if (mh > min_top) {
    set_dims(mh * cfg_.top_margin);
    std::vector<sph::Particle> all;
    for (const auto& v : held) all.insert(all.end(), v.begin(), v.end());
    target = estimate_partition(all);
    st.regridded = true;
  }
  if (target.size() != static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2])) {
    throw ConfigError("assignment covers " + std::to_string(target.size()) + " cells, grid has " +
                      std::to_string(dims_[0] * dims_[1] * dims_[2]));
  }
  for (int a : target) {
    if (a < 0 || a >= k) throw ConfigError("assignment names unknown rank " + std::to_string(a));
  }

  // Ship every particle whose top cell now belongs to another rank.
  const auto topo = topology();
  const std::uint32_t round = ++exchange_round_;
  const std::int64_t sent0 = transport_->messages_sent();
  std::vector<std::vector<sph::Particle>> owned(static_cast<std::size_t>(k));
  for (int r = 0; r < k; ++r) {
    std::map<std::pair<int, int>, std::vector<sph::Particle>> out;  // (dest, top)
    for (auto& p : held[static_cast<std::size_t>(r)]) {
      const int t = topo.top_index_of(p.x);
      const int dest = target[static_cast<std::size_t>(t)];
      if (dest == r) {
        owned[static_cast<std::size_t>(r)].push_back(p);
      } else {
        out[{dest, t}].push_back(p);
        ++st.migrated;
      }
    }
    std::vector<std::uint32_t> per_dest(static_cast<std::size_t>(k), 0);
    for (const auto& [key, ps] : out) {
      transport_->send(r, key.first, encode(make_message(Phase::kMigrate, round, grid::make_cell_id(key.second, 0), ps)));
      ++per_dest[static_cast<std::size_t>(key.first)];
    }
    for (int d = 0; d < k; ++d) {
      if (d != r) transport_->send(r, d, encode(make_marker(Phase::kMigrate, round, r, per_dest[static_cast<std::size_t>(d)])));
    }
  }
  auto arrived = receive_all(Phase::kMigrate, round);
  for (int r = 0; r < k; ++r) {
    for (const auto& m : arrived[static_cast<std::size_t>(r)]) {
      const int t = grid::top_of(m.header.cell);
      if (t < 0 || t >= topo.num_top() || target[static_cast<std::size_t>(t)] != r) {
        throw ProtocolError("rank " + std::to_string(r) + " received migrants it does not own: " + m.header.describe());
      }
      auto ps = decode_full(m);
      owned[static_cast<std::size_t>(r)].insert(owned[static_cast<std::size_t>(r)].end(), ps.begin(), ps.end());
    }
  }
  st.migrate_messages = transport_->messages_sent() - sent0;
  assignment_ = std::move(target);
  build_ranks(std::move(owned), st);
  return st;
}

void Engine::build_ranks(std::vector<std::vector<sph::Particle>> owned, RebuildStats& st) {
  const int k = cfg_.ranks;
  const auto topo = topology();
  const int n_top = topo.num_top();

  // Per-rank top slices, ordered by id so owner and consumers build identical trees.
  std::vector<std::vector<grid::TopSlice>> slices(static_cast<std::size_t>(k));
  std::vector<std::vector<int>> slice_of(static_cast<std::size_t>(k), std::vector<int>(static_cast<std::size_t>(n_top), -1));
  for (int t = 0; t < n_top; ++t) {
    const int r = assignment_[static_cast<std::size_t>(t)];
    slice_of[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)] = static_cast<int>(slices[static_cast<std::size_t>(r)].size());
    slices[static_cast<std::size_t>(r)].push_back({t, r, true, {}});
  }
  std::vector<std::int64_t> occupancy(static_cast<std::size_t>(n_top), 0);
  for (int r = 0; r < k; ++r) {
    for (auto& p : owned[static_cast<std::size_t>(r)]) {
      const int t = topo.top_index_of(p.x);
      if (assignment_[static_cast<std::size_t>(t)] != r) {
        throw DomainError("particle " + std::to_string(p.id) + " sits on rank " + std::to_string(r) +
                          " but its cell belongs to rank " + std::to_string(assignment_[static_cast<std::size_t>(t)]));
      }
      slices[static_cast<std::size_t>(r)][static_cast<std::size_t>(slice_of[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)])]
          .particles.push_back(p);
      ++occupancy[static_cast<std::size_t>(t)];
    }
    for (auto& s : slices[static_cast<std::size_t>(r)]) {
      std::sort(s.particles.begin(), s.particles.end(),
                [](const sph::Particle& a, const sph::Particle& b) { return a.id < b.id; });
    }
  }
  const auto consumers = proxy_consumers(topo, assignment_, occupancy);

  // Proxy contents travel through the transport like any other data.
  const std::uint32_t round = ++exchange_round_;
  const std::int64_t sent0 = transport_->messages_sent();
  for (int r = 0; r < k; ++r) {
    std::vector<std::uint32_t> per_dest(static_cast<std::size_t>(k), 0);
    for (const auto& s : slices[static_cast<std::size_t>(r)]) {
      for (int d : consumers[static_cast<std::size_t>(s.top)]) {
        transport_->send(r, d, encode(make_message(Phase::kProxy, round, grid::make_cell_id(s.top, 0), s.particles)));
        ++per_dest[static_cast<std::size_t>(d)];
      }
    }
    for (int d = 0; d < k; ++d) {
      if (d != r) transport_->send(r, d, encode(make_marker(Phase::kProxy, round, r, per_dest[static_cast<std::size_t>(d)])));
    }
  }
  auto proxies = receive_all(Phase::kProxy, round);
  st.proxy_messages = transport_->messages_sent() - sent0;

  for (int r = 0; r < k; ++r) {
    auto& rk = *ranks_[static_cast<std::size_t>(r)];
    auto mine = std::move(slices[static_cast<std::size_t>(r)]);
    for (const auto& m : proxies[static_cast<std::size_t>(r)]) {
      const int t = grid::top_of(m.header.cell);
      if (t < 0 || t >= n_top || assignment_[static_cast<std::size_t>(t)] == r) {
        throw ProtocolError("rank " + std::to_string(r) + " got a proxy it cannot hold: " + m.header.describe());
      }
      mine.push_back({t, assignment_[static_cast<std::size_t>(t)], false, decode_full(m)});
    }
    rk.grid = grid::build_grid_from_slices(box_, dims_, std::move(mine), cfg_.grid);
    rk.local_count = rk.grid.local_count();
    rk.bp = grid::make_tasks(rk.grid, cfg_.grid);
    rk.plan = plan_communications(rk.grid, rk.bp, r, consumers, cfg_.barriered);

    sched::Scheduler s;
    for (const auto& t : rk.bp.tasks) {
      s.declare_task(t.kind, grid::task_cells(rk.grid, t), grid::task_resources(rk.grid, t), t.cost_estimate,
                     t.kind == TaskKind::kRecv);
    }
    for (std::size_t i = 0; i < rk.bp.tasks.size(); ++i) {
      for (int d : rk.bp.tasks[i].deps) s.add_dependency(static_cast<sched::TaskId>(i), d);
    }
    s.seal();
    rk.sched = std::move(s);
    rk.report = {};

    rk.partners.assign(rk.grid.cells.size(), {});
    for (const auto& t : rk.bp.tasks) {
      if (t.kind != TaskKind::kDensityPair) continue;
      rk.partners[static_cast<std::size_t>(t.ci)].push_back({t.cj, t.shift});
      rk.partners[static_cast<std::size_t>(t.cj)].push_back({t.ci, -t.shift});
    }
    rk.received = std::make_unique<std::atomic<bool>[]>(rk.bp.tasks.size());
    rk.pending.clear();
    rk.needs_rebuild = false;
  }
  expected_applied_ = {0, 0};
  for (const auto& rk : ranks_) {
    for (std::size_t phase = 0; phase < 2; ++phase) {
      for (int id : rk->plan.recv_task[phase]) expected_applied_[phase] += id >= 0 ? 1 : 0;
    }
  }
}

StepStats Engine::step(double dt) {
  if (!(dt > 0.0)) dt = cfg_.sph.dt;
  if (!(dt > 0.0)) {
    std::vector<sph::Particle> all = particles();
    dt = sph::cfl_timestep(all, cfg_.sph);
  }
  StepStats st;
  st.step = step_;
  const auto t0 = Clock::now();
  if (!coverage_ok()) {
    rebuild();
    st.rebuilt = true;
  }
  for (int attempt = 1;; ++attempt) {
    st.attempts = attempt;
    retry_ = false;
    for (auto& rp : ranks_) {
      auto& r = *rp;
      ++r.grid.epoch;
      r.drift = grid::max_drift(r.grid);
      for (auto& p : r.local()) {
        sph::reset_density(p);
        sph::reset_force(p);
      }
      r.saved.assign(r.local().begin(), r.local().end());
      r.needs_rebuild = false;
      r.pending.clear();
      r.received_count = 0;
      for (std::size_t i = 0; i < r.bp.tasks.size(); ++i) r.received[i] = false;
      r.failure = nullptr;
      r.failed_task = -1;
    }
    for (auto& a : applied_) a = 0;
    const auto m0 = transport_->messages_sent();
    const auto b0 = transport_->bytes_sent();
    run_ranks(dt);
    st.messages = transport_->messages_sent() - m0;
    st.bytes = transport_->bytes_sent() - b0;
    if (!retry_) break;
    if (attempt >= cfg_.max_step_attempts) {
      throw DomainError("step " + std::to_string(step_) + ": smoothing lengths still outgrow their cells after " +
                        std::to_string(attempt) + " rebuilds");
    }
    // Start over from the saved state, keeping the better h guesses.
    for (auto& rp : ranks_) {
      auto cur = rp->local();
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const double h = cur[i].h;
        cur[i] = rp->saved[i];
        if (std::isfinite(h) && h > 0.0) cur[i].h = h;
      }
    }
    rebuild();
    st.rebuilt = true;
  }
  for (const auto& r : ranks_) {
    st.rank_busy_seconds.push_back(r->report.busy_seconds());
    st.rank_wall_seconds.push_back(1e-9 * static_cast<double>(r->report.wall_ns));
  }
  st.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  ++step_;
  return st;
}

void Engine::run_ranks(double dt) {
  abort_ = false;
  {
    std::vector<std::jthread> threads;
    for (auto& rp : ranks_) {
      threads.emplace_back([this, &r = *rp, dt] {
        const auto body = [&](const sched::TaskDescriptor& t, int) {
          try {
            execute(r, r.bp.tasks[static_cast<std::size_t>(t.id)], dt);
          } catch (...) {
            r.record(t.id, std::current_exception());
            abort_ = true;
            throw;
          }
        };
        const auto idle = [&](int worker) {
          if (abort_) throw RunAborted();
          try {
            pump(r, worker);
          } catch (const sched::TaskFailure&) {
            abort_ = true;
            throw;
          } catch (...) {
            r.record(-1, std::current_exception());
            abort_ = true;
            throw;
          }
        };
        r.run_start = Clock::now();
        try {
          r.report = r.sched.run(cfg_.workers, body, idle);
        } catch (...) {
          abort_ = true;
          std::lock_guard lock(r.fail_mu);
          if (!r.failure) r.failed_task = -2;  // aborted because of another rank
        }
      });
    }
  }
  for (auto& rp : ranks_) {
    auto& r = *rp;
    if (!r.failure) continue;
    std::string what = "unknown error";
    try {
      std::rethrow_exception(r.failure);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    std::ostringstream msg;
    msg << "step " << step_ << ", rank " << r.id << ", ";
    if (r.failed_task >= 0) {
      const auto& t = r.bp.tasks[static_cast<std::size_t>(r.failed_task)];
      msg << "task " << r.failed_task << " (" << sched::to_string(t.kind) << " cells";
      for (auto c : grid::task_cells(r.grid, t)) msg << ' ' << c;
      msg << ")";
    } else {
      msg << "transport";
    }
    msg << ": " << what;
    throw StepFailure(msg.str(), step_, r.id, r.failed_task, r.failure);
  }
  for (auto& rp : ranks_) {
    if (rp->failed_task == -2) throw StepFailure("step " + std::to_string(step_) + ": run aborted", step_, rp->id, -1, nullptr);
  }
}

void Engine::execute(Rank& r, const grid::TaskSpec& t, double dt) {
  auto& g = r.grid;
  auto& P = g.particles;
  const auto cell = [&](CellIndex c) -> const grid::Cell& { return g.cells[static_cast<std::size_t>(c)]; };
  const double gamma = cfg_.sph.gamma;

  switch (t.kind) {
    case TaskKind::kSort:
      grid::sort_cell(g, t.ci);
      return;

    case TaskKind::kDensitySelf: {
      const auto& c = cell(t.ci);
      for (std::int32_t i = c.begin; i < c.end; ++i) {
        auto& pi = P[static_cast<std::size_t>(i)];
        sph::density_accumulate(pi, pi.m, 0.0);
        for (std::int32_t j = i + 1; j < c.end; ++j) {
          auto& pj = P[static_cast<std::size_t>(j)];
          const double rr = norm(pi.x - pj.x);
          if (rr < pi.h) sph::density_accumulate(pi, pj.m, rr);
          if (rr < pj.h) sph::density_accumulate(pj, pi.m, rr);
        }
      }
      return;
    }

    case TaskKind::kDensityPair: {
      const bool la = cell(t.ci).local, lb = cell(t.cj).local;
      double h_cut = 0.0;
      if (la) h_cut = std::max(h_cut, max_h_in(g, t.ci));
      if (lb) h_cut = std::max(h_cut, max_h_in(g, t.cj));
      for (const auto& pc : grid::pair_prune(g, t.ci, t.cj, t.shift, t.axis, h_cut)) {
        auto& pi = P[static_cast<std::size_t>(pc.i)];
        auto& pj = P[static_cast<std::size_t>(pc.j)];
        const double rr = norm(pi.x - (pj.x + t.shift));
        if (la && rr < pi.h) sph::density_accumulate(pi, pj.m, rr);
        if (lb && rr < pj.h) sph::density_accumulate(pj, pi.m, rr);
      }
      return;
    }

    case TaskKind::kGhost: {
      // Runs even when a retry is already due so every particle contributes its h guess.
      const auto& c = cell(t.ci);
      const double limit = g.leaf_limit(t.ci) - 2.0 * r.drift;
      const auto& partners = r.partners[static_cast<std::size_t>(t.ci)];
      for (std::int32_t i = c.begin; i < c.end; ++i) {
        const auto recompute = [&](sph::Particle& p) {
          sph::reset_density(p);
          sph::density_accumulate(p, p.m, 0.0);
          for (std::int32_t j = c.begin; j < c.end; ++j) {
            if (j == i) continue;
            const auto& pj = P[static_cast<std::size_t>(j)];
            const double rr = norm(p.x - pj.x);
            if (rr < p.h) sph::density_accumulate(p, pj.m, rr);
          }
          for (const auto& [pc, shift] : partners) {
            const auto& other = cell(pc);
            for (std::int32_t j = other.begin; j < other.end; ++j) {
              const auto& pj = P[static_cast<std::size_t>(j)];
              const double rr = norm(p.x - (pj.x + shift));
              if (rr < p.h) sph::density_accumulate(p, pj.m, rr);
            }
          }
        };
        const auto res = sph::adapt_smoothing(P[static_cast<std::size_t>(i)], cfg_.sph, recompute, limit);
        if (res.status == sph::AdaptStatus::kNeedsRebuild) {
          r.needs_rebuild = true;
          retry_ = true;
        }
      }
      return;
    }

    case TaskKind::kForceSelf: {
      if (retry_) return;
      const auto& c = cell(t.ci);
      for (std::int32_t i = c.begin; i < c.end; ++i) {
        auto& pi = P[static_cast<std::size_t>(i)];
        for (std::int32_t j = i + 1; j < c.end; ++j) {
          auto& pj = P[static_cast<std::size_t>(j)];
          const Vec3 dx = pi.x - pj.x;
          if (norm(dx) < std::max(pi.h, pj.h)) sph::force_accumulate(pi, pj, dx, gamma);
        }
      }
      return;
    }

    case TaskKind::kForcePair: {
      if (retry_) return;
      const bool la = cell(t.ci).local, lb = cell(t.cj).local;
      const double h_cut = std::max(max_h_in(g, t.ci), max_h_in(g, t.cj));
      for (const auto& pc : grid::pair_prune(g, t.ci, t.cj, t.shift, t.axis, h_cut)) {
        auto& pi = P[static_cast<std::size_t>(pc.i)];
        auto& pj = P[static_cast<std::size_t>(pc.j)];
        const Vec3 dx = pi.x - (pj.x + t.shift);
        if (!(norm(dx) < std::max(pi.h, pj.h))) continue;
        if (la && lb) {
          sph::force_accumulate(pi, pj, dx, gamma);
        } else if (la) {
          sph::force_accumulate_one_sided(pi, pj, dx, gamma);
        } else {
          sph::force_accumulate_one_sided(pj, pi, -dx, gamma);
        }
      }
      return;
    }

    case TaskKind::kKick: {
      if (retry_) return;
      const auto& c = cell(t.ci);
      const Vec3 centre = c.bounds.centre();
      for (std::int32_t i = c.begin; i < c.end; ++i) {
        auto& p = P[static_cast<std::size_t>(i)];
        sph::kick(p, dt, box_, cfg_.sph.u_floor);
        // Keep positions continuous around the leaf so pair shifts stay valid.
        p.x = centre + sph::min_image(p.x, centre, box_);
      }
      return;
    }

    case TaskKind::kSend: {
      const auto& root = cell(g.top[static_cast<std::size_t>(t.comm_top)]);
      const std::span<const sph::Particle> ps(P.data() + root.begin, static_cast<std::size_t>(root.count()));
      const Phase phase = t.comm_phase == 0 ? Phase::kDensity : Phase::kForce;
      transport_->send(r.id, t.comm_peer, encode(make_message(phase, step_, grid::make_cell_id(t.comm_top, 0), ps)));
      return;
    }

    case TaskKind::kRecv:
      throw DomainError("recv tasks complete only through the transport");
  }
}

void Engine::pump(Rank& r, int worker) {
  std::unique_lock lock(r.pending_mu, std::try_to_lock);
  if (!lock.owns_lock()) return;
  for (auto& bytes : transport_->poll(r.id)) {
    Message m = decode(bytes);
    const auto& h = m.header;
    if (h.phase != Phase::kDensity && h.phase != Phase::kForce) {
      throw ProtocolError("rank " + std::to_string(r.id) + ": unexpected message during a step " + h.describe());
    }
    if (h.step != step_) {
      throw ProtocolError("rank " + std::to_string(r.id) + ": message for another step during step " +
                          std::to_string(step_) + " " + h.describe());
    }
    const int t = grid::top_of(h.cell);
    const int phase = static_cast<int>(h.phase);
    if (t < 0 || t >= r.grid.num_top() || h.cell != grid::make_cell_id(t, 0) ||
        r.plan.recv_task[static_cast<std::size_t>(phase)][static_cast<std::size_t>(t)] < 0) {
      throw ProtocolError("rank " + std::to_string(r.id) + ": message for unknown cell " + h.describe());
    }
    const sched::TaskId id = r.plan.recv_task[static_cast<std::size_t>(phase)][static_cast<std::size_t>(t)];
    if (r.received[static_cast<std::size_t>(id)].exchange(true)) {
      throw ProtocolError("rank " + std::to_string(r.id) + ": duplicate message " + h.describe());
    }
    ++r.received_count;
    r.pending.emplace_back(id, std::move(m));
  }

  for (auto it = r.pending.begin(); it != r.pending.end();) {
    const sched::TaskId id = it->first;
    if (!r.sched.is_armed(id)) {
      ++it;
      continue;
    }
    const Message& m = it->second;
    const bool done = r.sched.try_complete_external(id, worker, [&] {
      try {
        const auto& root = r.grid.cells[static_cast<std::size_t>(r.grid.top[static_cast<std::size_t>(grid::top_of(m.header.cell))])];
        apply_payload(m, std::span<sph::Particle>(r.grid.particles.data() + root.begin, static_cast<std::size_t>(root.count())));
      } catch (...) {
        r.record(id, std::current_exception());
        throw;
      }
    });
    if (done) applied_[static_cast<std::size_t>(m.header.phase)].fetch_add(1);
    it = done ? r.pending.erase(it) : it + 1;
  }
  for (std::size_t phase = 0; phase < 2; ++phase) {
    const int b = r.plan.barrier[phase];
    if (b >= 0 && r.sched.is_armed(b) && applied_[phase].load() == expected_applied_[phase]) {
      r.sched.try_complete_external(b, worker, [] {});
    }
  }

  if (r.received_count < static_cast<std::int64_t>(r.plan.recvs) && Clock::now() - r.run_start > cfg_.protocol_timeout) {
    throw ProtocolError("rank " + std::to_string(r.id) + ": " +
                        std::to_string(static_cast<std::int64_t>(r.plan.recvs) - r.received_count) + " of " +
                        std::to_string(r.plan.recvs) + " messages still missing in step " + std::to_string(step_));
  }
}

partition::CellGraph Engine::measured_graph() const {
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<std::pair<int, std::vector<grid::CellId>>, Acc> acc;
  for (const auto& r : ranks_) {
    for (std::size_t i = 0; i < r->bp.tasks.size(); ++i) {
      const auto& t = r->bp.tasks[i];
      if (sched::is_communication(t.kind)) continue;
      const auto& d = r->sched.task(static_cast<sched::TaskId>(i));
      auto& a = acc[{static_cast<int>(t.kind), grid::task_cells(r->grid, t)}];
      a.sum += d.cost_measured.value_or(t.cost_estimate);
      ++a.n;
    }
  }
  std::vector<partition::TaskCost> costs;
  costs.reserve(acc.size());
  for (const auto& [key, a] : acc) costs.push_back({key.second, a.sum / a.n});
  const auto topo = topology();
  auto g = partition::build_cell_graph(topo.num_top(), costs);
  partition::add_neighbour_edges(g, topo);
  return g;
}

partition::RepartitionResult Engine::repartition(double min_gain) {
  const auto g = measured_graph();
  auto res = partition::repartition(g, assignment_, cfg_.ranks, partition::GreedyKlPartitioner{}, min_gain);
  if (!res.skipped) rebuild(&res.assignment);
  return res;
}

std::vector<sph::Particle> Engine::particles() const {
  std::vector<sph::Particle> out;
  for (const auto& r : ranks_) {
    for (std::int64_t i = 0; i < r->local_count; ++i) {
      out.push_back(r->grid.particles[static_cast<std::size_t>(i)]);
      out.back().x = sph::wrap(out.back().x, box_);
    }
  }
  std::sort(out.begin(), out.end(), [](const sph::Particle& a, const sph::Particle& b) { return a.id < b.id; });
  return out;
}

const grid::Grid& Engine::rank_grid(int r) const { return ranks_.at(static_cast<std::size_t>(r))->grid; }
const grid::Blueprint& Engine::rank_blueprint(int r) const { return ranks_.at(static_cast<std::size_t>(r))->bp; }
const sched::Scheduler& Engine::rank_scheduler(int r) const { return ranks_.at(static_cast<std::size_t>(r))->sched; }
const sched::RunReport& Engine::rank_report(int r) const { return ranks_.at(static_cast<std::size_t>(r))->report; }
const CommPlan& Engine::rank_plan(int r) const { return ranks_.at(static_cast<std::size_t>(r))->plan; }
std::int64_t Engine::rank_particle_count(int r) const { return ranks_.at(static_cast<std::size_t>(r))->local_count; }

std::int64_t Engine::expected_messages_per_step() const {
  std::int64_t n = 0;
  for (const auto& r : ranks_) n += static_cast<std::int64_t>(r->plan.sends);
  return n;
}

}  // namespace tsph::exchange
