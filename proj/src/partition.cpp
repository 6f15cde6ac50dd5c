#include "tsph/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <queue>
#include <string>

namespace tsph::partition {

namespace {

constexpr double kRelEps = 1e-12;

std::uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

bool less_rel(double a, double b) { return a < b - kRelEps * std::max(std::abs(a), std::abs(b)); }

struct Objective {
  double max = 0.0;
  double sumsq = 0.0;
};

Objective objective_of(const std::vector<double>& loads) {
  Objective o;
  for (double l : loads) {
    o.max = std::max(o.max, l);
    o.sumsq += l * l;
  }
  return o;
}

bool better(const Objective& n, const Objective& c) {
  if (less_rel(n.max, c.max)) return true;
  if (less_rel(c.max, n.max)) return false;
  return less_rel(n.sumsq, c.sumsq);
}

void check_k(const CellGraph& g, int k) {
  if (k < 1) throw ConfigError("rank count must be at least 1");
  if (g.size() == 0) throw ConfigError("cannot partition an empty cell graph");
  if (k > 1 && k > g.non_empty_count()) {
    throw ConfigError("rank count " + std::to_string(k) + " exceeds the " + std::to_string(g.non_empty_count()) +
                      " non-empty cells; use fewer ranks");
  }
}

std::vector<double> loads_of(const CellGraph& g, const Assignment& a, int k) {
  std::vector<double> loads(static_cast<std::size_t>(k), 0.0);
  for (int v = 0; v < g.size(); ++v) loads[static_cast<std::size_t>(a[static_cast<std::size_t>(v)])] += g.node_weight[static_cast<std::size_t>(v)];
  for (const auto& e : g.edges) {
    const int ra = a[static_cast<std::size_t>(e.a)], rb = a[static_cast<std::size_t>(e.b)];
    loads[static_cast<std::size_t>(ra)] += e.w;
    if (rb != ra) loads[static_cast<std::size_t>(rb)] += e.w;
  }
  return loads;
}

std::vector<int> bfs_hops(const CellGraph& g, int src) {
  std::vector<int> d(static_cast<std::size_t>(g.size()), std::numeric_limits<int>::max());
  std::queue<int> q;
  d[static_cast<std::size_t>(src)] = 0;
  q.push(src);
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    for (auto [u, e] : g.adj[static_cast<std::size_t>(v)]) {
      if (d[static_cast<std::size_t>(u)] == std::numeric_limits<int>::max()) {
        d[static_cast<std::size_t>(u)] = d[static_cast<std::size_t>(v)] + 1;
        q.push(u);
      }
    }
  }
  return d;
}

std::vector<int> pick_seeds(const CellGraph& g, int k) {
  std::vector<int> seeds;
  int first = -1;
  for (int v = 0; v < g.size() && first < 0; ++v) {
    if (g.non_empty(v)) first = v;
  }
  seeds.push_back(first);
  std::vector<int> dist = bfs_hops(g, first);
  while (static_cast<int>(seeds.size()) < k) {
    int best = -1;
    for (int v = 0; v < g.size(); ++v) {
      if (!g.non_empty(v) || std::find(seeds.begin(), seeds.end(), v) != seeds.end()) continue;
      if (best < 0 || dist[static_cast<std::size_t>(v)] > dist[static_cast<std::size_t>(best)]) best = v;
    }
    seeds.push_back(best);
    const auto d = bfs_hops(g, best);
    for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = std::min(dist[i], d[i]);
  }
  return seeds;
}

Assignment grow_regions(const CellGraph& g, int k, const std::vector<int>& seeds) {
  const auto n = static_cast<std::size_t>(g.size());
  Assignment a(n, -1);
  std::vector<double> load(static_cast<std::size_t>(k), 0.0);
  // Per rank: frontier node -> summed weight of edges into the rank.
  std::vector<std::unordered_map<int, double>> frontier(static_cast<std::size_t>(k));
  std::size_t assigned = 0;

  const auto assign = [&](int v, int r) {
    a[static_cast<std::size_t>(v)] = r;
    ++assigned;
    load[static_cast<std::size_t>(r)] += g.node_weight[static_cast<std::size_t>(v)];
    for (auto [u, e] : g.adj[static_cast<std::size_t>(v)]) {
      if (a[static_cast<std::size_t>(u)] != r) load[static_cast<std::size_t>(r)] += g.edges[static_cast<std::size_t>(e)].w;
      if (a[static_cast<std::size_t>(u)] < 0) frontier[static_cast<std::size_t>(r)][u] += g.edges[static_cast<std::size_t>(e)].w;
    }
    for (auto& f : frontier) f.erase(v);
  };

  for (int r = 0; r < k; ++r) assign(seeds[static_cast<std::size_t>(r)], r);

  std::vector<int> order(static_cast<std::size_t>(k));
  while (assigned < n) {
    for (int r = 0; r < k; ++r) order[static_cast<std::size_t>(r)] = r;
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
      return less_rel(load[static_cast<std::size_t>(x)], load[static_cast<std::size_t>(y)]);
    });
    bool grown = false;
    for (int r : order) {
      const auto& f = frontier[static_cast<std::size_t>(r)];
      if (f.empty()) continue;
      int best = -1;
      double best_w = 0.0;
      for (const auto& [v, w] : f) {
        if (best < 0) {
          best = v;
          best_w = w;
          continue;
        }
        const double nv = g.node_weight[static_cast<std::size_t>(v)], nb = g.node_weight[static_cast<std::size_t>(best)];
        bool take;
        if (less_rel(best_w, w)) {
          take = true;
        } else if (less_rel(w, best_w)) {
          take = false;
        } else if (less_rel(nb, nv)) {
          take = true;
        } else if (less_rel(nv, nb)) {
          take = false;
        } else {
          take = v < best;
        }
        if (take) {
          best = v;
          best_w = w;
        }
      }
      assign(best, r);
      grown = true;
      break;
    }
    if (!grown) {
      // Disconnected remainder: hand its lowest id to the lightest rank.
      int v = 0;
      while (a[static_cast<std::size_t>(v)] >= 0) ++v;
      assign(v, order.front());
    }
  }
  return a;
}

}  // namespace

CellGraph::CellGraph(int n_nodes)
    : node_weight(static_cast<std::size_t>(n_nodes), 0.0), adj(static_cast<std::size_t>(n_nodes)) {}

int CellGraph::find_edge(int a, int b) const {
  auto it = edge_index_.find(edge_key(a, b));
  return it == edge_index_.end() ? -1 : it->second;
}

void CellGraph::add_node_weight(int v, double w) {
  if (v < 0 || v >= size()) throw DomainError("unknown cell graph node " + std::to_string(v));
  if (!(w >= 0.0)) throw DomainError("negative task cost");
  node_weight[static_cast<std::size_t>(v)] += w;
}

void CellGraph::add_edge_weight(int a, int b, double w) {
  if (a < 0 || a >= size() || b < 0 || b >= size()) {
    throw DomainError("unknown cell graph edge " + std::to_string(a) + "-" + std::to_string(b));
  }
  if (a == b) {
    add_node_weight(a, w);
    return;
  }
  if (!(w >= 0.0)) throw DomainError("negative task cost");
  int e = find_edge(a, b);
  if (e < 0) {
    e = static_cast<int>(edges.size());
    edges.push_back({std::min(a, b), std::max(a, b), 0.0});
    edge_index_[edge_key(a, b)] = e;
    adj[static_cast<std::size_t>(a)].emplace_back(b, e);
    adj[static_cast<std::size_t>(b)].emplace_back(a, e);
  }
  edges[static_cast<std::size_t>(e)].w += w;
}

double CellGraph::edge_weight(int a, int b) const {
  const int e = find_edge(a, b);
  return e < 0 ? 0.0 : edges[static_cast<std::size_t>(e)].w;
}

double CellGraph::total() const {
  double t = 0.0;
  for (double w : node_weight) t += w;
  for (const auto& e : edges) t += e.w;
  return t;
}

int CellGraph::non_empty_count() const {
  return static_cast<int>(std::count_if(node_weight.begin(), node_weight.end(), [](double w) { return w > 0.0; }));
}

CellGraph build_cell_graph(int n_nodes, std::span<const TaskCost> tasks) {
  CellGraph g(n_nodes);
  for (const auto& t : tasks) {
    if (t.cells.empty() || t.cells.size() > 2) throw DomainError("task must reference one or two cells");
    const int a = grid::top_of(t.cells[0]);
    const int b = grid::top_of(t.cells.back());
    if (a >= n_nodes || b >= n_nodes) {
      throw DomainError("task references unknown cell " + std::to_string(a >= n_nodes ? t.cells[0] : t.cells.back()));
    }
    g.add_edge_weight(a, b, t.cost);
  }
  return g;
}

void add_neighbour_edges(CellGraph& g, const grid::Grid& grid) {
  for (int t = 0; t < grid.num_top(); ++t) {
    for (int n : grid.top_neighbours(t)) {
      if (n > t) g.add_edge_weight(t, n, 0.0);
    }
  }
}

CellGraph build_cell_graph(const grid::Grid& grid, const grid::Blueprint& bp, std::span<const double> costs) {
  if (costs.size() != bp.tasks.size()) throw DomainError("one cost per blueprint task required");
  std::vector<TaskCost> tc;
  tc.reserve(bp.tasks.size());
  for (std::size_t i = 0; i < bp.tasks.size(); ++i) {
    const auto& t = bp.tasks[i];
    if (sched::is_communication(t.kind)) continue;
    for (grid::CellId id : grid::task_cells(grid, t)) {
      if (grid.find_cell(id) < 0) throw DomainError("task " + std::to_string(i) + " references unknown cell " + std::to_string(id));
    }
    tc.push_back({grid::task_cells(grid, t), costs[i]});
  }
  CellGraph g = build_cell_graph(grid.num_top(), tc);
  add_neighbour_edges(g, grid);
  return g;
}

Loads evaluate_partition(const CellGraph& g, const Assignment& a, int k) {
  if (static_cast<int>(a.size()) != g.size()) throw DomainError("assignment size does not match the cell graph");
  for (int r : a) {
    if (r < 0 || r >= k) throw DomainError("assignment rank " + std::to_string(r) + " outside [0, k)");
  }
  Loads out;
  out.per_rank = loads_of(g, a, k);
  double sum = 0.0;
  for (double l : out.per_rank) {
    out.max = std::max(out.max, l);
    sum += l;
  }
  out.mean = sum / k;
  out.imbalance = out.mean > 0.0 ? out.max / out.mean : 1.0;
  return out;
}

Assignment GreedyKlPartitioner::partition(const CellGraph& g, int k) const {
  check_k(g, k);
  if (k == 1) return Assignment(static_cast<std::size_t>(g.size()), 0);
  return refine(g, grow_regions(g, k, pick_seeds(g, k)), k);
}

namespace {

struct Refiner {
  const CellGraph& g;
  int k;
  Assignment& a;
  std::vector<double> load;
  std::vector<int> non_empty;
  Objective cur;

  Refiner(const CellGraph& graph, int ranks, Assignment& assignment)
      : g(graph), k(ranks), a(assignment), load(loads_of(graph, assignment, ranks)),
        non_empty(static_cast<std::size_t>(ranks), 0) {
    for (int v = 0; v < g.size(); ++v) {
      if (g.non_empty(v)) ++non_empty[static_cast<std::size_t>(a[static_cast<std::size_t>(v)])];
    }
    cur = objective_of(load);
  }

  bool movable(int v) const {
    return !(g.non_empty(v) && non_empty[static_cast<std::size_t>(a[static_cast<std::size_t>(v)])] == 1);
  }

  std::vector<double> loads_after(int v, int to) const {
    std::vector<double> t = load;
    const int from = a[static_cast<std::size_t>(v)];
    const double w = g.node_weight[static_cast<std::size_t>(v)];
    t[static_cast<std::size_t>(from)] -= w;
    t[static_cast<std::size_t>(to)] += w;
    for (auto [u, e] : g.adj[static_cast<std::size_t>(v)]) {
      const int ru = a[static_cast<std::size_t>(u)];
      const double ew = g.edges[static_cast<std::size_t>(e)].w;
      if (ru != from) t[static_cast<std::size_t>(from)] -= ew;
      if (ru != to) t[static_cast<std::size_t>(to)] += ew;
    }
    return t;
  }

  std::vector<int> targets(int v) const {
    // Every other rank: a node need not border its destination.
    std::vector<int> out;
    for (int r = 0; r < k; ++r) {
      if (r != a[static_cast<std::size_t>(v)]) out.push_back(r);
    }
    return out;
  }

  void apply(int v, int to, std::vector<double> new_load) {
    const int from = a[static_cast<std::size_t>(v)];
    a[static_cast<std::size_t>(v)] = to;
    if (g.non_empty(v)) {
      --non_empty[static_cast<std::size_t>(from)];
      ++non_empty[static_cast<std::size_t>(to)];
    }
    load = std::move(new_load);
    cur = objective_of(load);
  }

  // Single-node moves while any strictly improves the objective.
  bool descend() {
    bool any = false;
    for (int pass = 0; pass < 10000; ++pass) {
      bool moved = false;
      for (int v = 0; v < g.size(); ++v) {
        if (!movable(v)) continue;
        int best_to = -1;
        Objective best = cur;
        std::vector<double> best_load;
        for (int to : targets(v)) {
          auto t = loads_after(v, to);
          const Objective o = objective_of(t);
          if (better(o, best)) {
            best = o;
            best_to = to;
            best_load = std::move(t);
          }
        }
        if (best_to >= 0) {
          apply(v, best_to, std::move(best_load));
          moved = any = true;
        }
      }
      if (!moved) break;
    }
    return any;
  }

  // One Kernighan-Lin style pass: take the best move even when it worsens the
  // objective, lock the node, and finally roll back to the best prefix.
  bool hill_climb(int patience) {
    std::vector<char> locked(static_cast<std::size_t>(g.size()), 0);
    std::vector<std::pair<int, int>> history;  // (node, previous rank)
    const Objective start = cur;
    Objective best = cur;
    std::size_t best_len = 0;
    while (static_cast<int>(history.size() - best_len) < patience) {
      int mv = -1, mto = -1;
      Objective mo;
      std::vector<double> mload;
      for (int v = 0; v < g.size(); ++v) {
        if (locked[static_cast<std::size_t>(v)] || !movable(v)) continue;
        for (int to : targets(v)) {
          auto t = loads_after(v, to);
          const Objective o = objective_of(t);
          if (mv < 0 || better(o, mo)) {
            mv = v;
            mto = to;
            mo = o;
            mload = std::move(t);
          }
        }
      }
      if (mv < 0) break;
      history.emplace_back(mv, a[static_cast<std::size_t>(mv)]);
      locked[static_cast<std::size_t>(mv)] = 1;
      apply(mv, mto, std::move(mload));
      if (better(cur, best)) {
        best = cur;
        best_len = history.size();
      }
    }
    while (history.size() > best_len) {
      auto [v, prev] = history.back();
      history.pop_back();
      apply(v, prev, loads_after(v, prev));
    }
    load = loads_of(g, a, k);
    cur = objective_of(load);
    return better(cur, start);
  }
};

}  // namespace

Assignment GreedyKlPartitioner::refine(const CellGraph& g, Assignment a, int k) const {
  check_k(g, k);
  if (k == 1) return Assignment(static_cast<std::size_t>(g.size()), 0);
  Refiner r(g, k, a);
  const int patience = std::clamp(g.size() / 8, 16, 64);
  for (int round = 0; round < 100; ++round) {
    r.descend();
    if (!r.hill_climb(patience)) break;
  }
  return a;
}

RepartitionResult repartition(const CellGraph& g, const Assignment& current, int k, const Partitioner& p,
                              double min_gain) {
  RepartitionResult out;
  out.assignment = current;
  out.old_max = evaluate_partition(g, current, k).max;
  out.new_max = out.old_max;

  Assignment fresh = p.partition(g, k);
  Assignment refined = p.refine(g, current, k);
  const double fm = evaluate_partition(g, fresh, k).max;
  const double rm = evaluate_partition(g, refined, k).max;
  Assignment& cand = less_rel(fm, rm) ? fresh : refined;
  const double cm = std::min(fm, rm);
  if (!(out.old_max > 0.0) || (out.old_max - cm) < min_gain * out.old_max) return out;

  out.skipped = false;
  out.new_max = cm;
  for (int v = 0; v < g.size(); ++v) {
    if (cand[static_cast<std::size_t>(v)] != current[static_cast<std::size_t>(v)]) {
      out.moves.push_back({v, current[static_cast<std::size_t>(v)], cand[static_cast<std::size_t>(v)]});
    }
  }
  out.assignment = std::move(cand);
  return out;
}

void write_partition_csv(std::ostream& out, const CellGraph& g, const Assignment& a, int k) {
  const Loads l = evaluate_partition(g, a, k);
  out << kPartitionCsvHeader << '\n';
  out.precision(17);
  for (int v = 0; v < g.size(); ++v) {
    out << v << ',' << a[static_cast<std::size_t>(v)] << ',' << g.node_weight[static_cast<std::size_t>(v)] << '\n';
  }
  out << "# imbalance," << l.imbalance << '\n';
}

}  // namespace tsph::partition
