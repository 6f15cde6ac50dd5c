#include "tsph/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>

namespace tsph::grid {

using sched::TaskKind;

const std::array<Vec3, kNumAxes>& sort_axes() {
  static const std::array<Vec3, kNumAxes> axes = [] {
    std::array<Vec3, kNumAxes> out{};
    int n = 0;
    for (int i = -1; i <= 1; ++i)
      for (int j = -1; j <= 1; ++j)
        for (int k = -1; k <= 1; ++k) {
          const int first = i != 0 ? i : (j != 0 ? j : k);
          if (first <= 0) continue;
          Vec3 v{double(i), double(j), double(k)};
          out[static_cast<std::size_t>(n++)] = v * (1.0 / norm(v));
        }
    return out;
  }();
  return axes;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double min_component(const Vec3& v) { return std::min({v.x, v.y, v.z}); }

// Euclidean distance between box a and box b translated by shift.
double box_gap(const Box& a, const Box& b, const Vec3& shift) {
  Vec3 d;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(a.lo[k], b.lo[k] + shift[k]);
    const double hi = std::min(a.hi[k], b.hi[k] + shift[k]);
    d[k] = std::max(0.0, lo - hi);
  }
  return norm(d);
}

int choose_axis(const Box& a, const Box& b, const Vec3& shift) {
  const Vec3 d = b.centre() + shift - a.centre();
  const Vec3 sa = a.size(), sb = b.size();
  int c[3];
  for (int k = 0; k < 3; ++k) {
    const double tol = 0.25 * (sa[k] + sb[k]);
    c[k] = d[k] > tol ? 1 : (d[k] < -tol ? -1 : 0);
  }
  const int first = c[0] != 0 ? c[0] : (c[1] != 0 ? c[1] : c[2]);
  if (first == 0) return 0;
  if (first < 0) {
    for (int& x : c) x = -x;
  }
  const Vec3 want = Vec3{double(c[0]), double(c[1]), double(c[2])} * (1.0 / norm(Vec3{double(c[0]), double(c[1]), double(c[2])}));
  const auto& axes = sort_axes();
  for (int a_idx = 0; a_idx < kNumAxes; ++a_idx) {
    if (norm(axes[static_cast<std::size_t>(a_idx)] - want) < 1e-12) return a_idx;
  }
  return 0;
}

double cell_h_max(const Grid& g, const Cell& c) {
  double h = 0.0;
  for (std::int32_t p = c.begin; p < c.end; ++p) h = std::max(h, g.particles[static_cast<std::size_t>(p)].h);
  return h;
}

class TreeBuilder {
 public:
  TreeBuilder(Grid& g, const GridConfig& cfg) : g_(g), cfg_(cfg) {}

  CellIndex build(const Box& box, std::int32_t begin, std::int32_t end, int top, int owner, bool local,
                  int depth, CellIndex parent, std::uint32_t& counter) {
    const auto idx = static_cast<CellIndex>(g_.cells.size());
    Cell c;
    c.id = make_cell_id(top, counter++);
    if (counter >= (1u << kLocalIdBits)) throw DomainError("cell tree too deep for the id space");
    c.bounds = box;
    c.begin = begin;
    c.end = end;
    c.parent = parent;
    c.depth = depth;
    c.top = top;
    c.owner_rank = owner;
    c.local = local;
    c.h_limit = kInf;
    g_.cells.push_back(c);
    g_.cells[static_cast<std::size_t>(idx)].h_max = cell_h_max(g_, g_.cells[static_cast<std::size_t>(idx)]);

    if (end - begin > cfg_.split_threshold && depth < cfg_.max_depth) {
      const Vec3 mid = box.centre();
      // Stable counting sort by octant.
      std::array<std::int32_t, 9> offsets{};
      std::vector<int> oct(static_cast<std::size_t>(end - begin));
      for (std::int32_t p = begin; p < end; ++p) {
        const auto& x = g_.particles[static_cast<std::size_t>(p)].x;
        const int o = (x.x >= mid.x ? 4 : 0) | (x.y >= mid.y ? 2 : 0) | (x.z >= mid.z ? 1 : 0);
        oct[static_cast<std::size_t>(p - begin)] = o;
        ++offsets[static_cast<std::size_t>(o + 1)];
      }
      for (int o = 0; o < 8; ++o) offsets[static_cast<std::size_t>(o + 1)] += offsets[static_cast<std::size_t>(o)];
      std::vector<sph::Particle> tmp(static_cast<std::size_t>(end - begin));
      auto fill = offsets;
      for (std::int32_t p = begin; p < end; ++p) {
        const int o = oct[static_cast<std::size_t>(p - begin)];
        tmp[static_cast<std::size_t>(fill[static_cast<std::size_t>(o)]++)] = g_.particles[static_cast<std::size_t>(p)];
      }
      std::copy(tmp.begin(), tmp.end(), g_.particles.begin() + begin);

      std::array<Box, 8> boxes;
      bool ok = true;
      for (int o = 0; o < 8; ++o) {
        Box b;
        b.lo = {o & 4 ? mid.x : box.lo.x, o & 2 ? mid.y : box.lo.y, o & 1 ? mid.z : box.lo.z};
        b.hi = {o & 4 ? box.hi.x : mid.x, o & 2 ? box.hi.y : mid.y, o & 1 ? box.hi.z : mid.z};
        boxes[static_cast<std::size_t>(o)] = b;
        double hm = 0.0;
        for (std::int32_t p = begin + offsets[static_cast<std::size_t>(o)]; p < begin + offsets[static_cast<std::size_t>(o + 1)]; ++p) {
          hm = std::max(hm, g_.particles[static_cast<std::size_t>(p)].h);
        }
        if (min_component(b.size()) < hm) ok = false;
      }
      if (ok) {
        g_.cells[static_cast<std::size_t>(idx)].split = true;
        for (int o = 0; o < 8; ++o) {
          const CellIndex child = build(boxes[static_cast<std::size_t>(o)], begin + offsets[static_cast<std::size_t>(o)],
                                        begin + offsets[static_cast<std::size_t>(o + 1)], top, owner, local,
                                        depth + 1, idx, counter);
          g_.cells[static_cast<std::size_t>(idx)].children[static_cast<std::size_t>(o)] = child;
        }
      }
    }
    if (!g_.cells[static_cast<std::size_t>(idx)].split) g_.leaves.push_back(idx);
    return idx;
  }

 private:
  Grid& g_;
  const GridConfig& cfg_;
};

}  // namespace

std::array<int, 3> Grid::top_coords(int t) const {
  return {t / (dims[1] * dims[2]), (t / dims[2]) % dims[1], t % dims[2]};
}

int Grid::top_index(std::array<int, 3> c) const {
  for (int k = 0; k < 3; ++k) c[static_cast<std::size_t>(k)] = ((c[static_cast<std::size_t>(k)] % dims[static_cast<std::size_t>(k)]) + dims[static_cast<std::size_t>(k)]) % dims[static_cast<std::size_t>(k)];
  return (c[0] * dims[1] + c[1]) * dims[2] + c[2];
}

int Grid::top_index_of(const Vec3& x) const {
  std::array<int, 3> c{};
  for (int k = 0; k < 3; ++k) {
    int i = static_cast<int>(std::floor(x[k] / top_edge[k]));
    c[static_cast<std::size_t>(k)] = std::clamp(i, 0, dims[static_cast<std::size_t>(k)] - 1);
  }
  return top_index(c);
}

Vec3 Grid::neighbour_shift(int a, int b) const {
  const auto ca = top_coords(a), cb = top_coords(b);
  Vec3 s;
  for (int k = 0; k < 3; ++k) {
    const int d = cb[static_cast<std::size_t>(k)] - ca[static_cast<std::size_t>(k)];
    if (d > 1) s[k] = -box[k];
    if (d < -1) s[k] = box[k];
  }
  return s;
}

std::vector<int> Grid::top_neighbours(int t) const {
  const auto c = top_coords(t);
  std::vector<int> out;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) {
        if (i == 0 && j == 0 && k == 0) continue;
        const int n = top_index({c[0] + i, c[1] + j, c[2] + k});
        if (n != t && std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
      }
  std::sort(out.begin(), out.end());
  return out;
}

CellIndex Grid::find_cell(CellId id) const {
  const int t = top_of(id);
  if (t < 0 || t >= num_top()) return -1;
  CellIndex c = top[static_cast<std::size_t>(t)];
  if (c < 0) return -1;
  // Preorder numbering: the subtree of a top cell is contiguous in `cells`.
  const auto local = static_cast<std::int64_t>(id & ((CellId{1} << kLocalIdBits) - 1));
  const auto idx = static_cast<std::int64_t>(c) + local;
  if (idx >= static_cast<std::int64_t>(cells.size()) || cells[static_cast<std::size_t>(idx)].id != id) return -1;
  return static_cast<CellIndex>(idx);
}

double Grid::leaf_limit(CellIndex leaf) const {
  double lim = kInf;
  for (CellIndex c = leaf; c >= 0; c = cells[static_cast<std::size_t>(c)].parent) {
    lim = std::min(lim, cells[static_cast<std::size_t>(c)].h_limit);
  }
  return lim;
}

CellIndex Grid::leaf_of(std::int32_t p) const {
  auto it = std::upper_bound(leaves.begin(), leaves.end(), p, [&](std::int32_t v, CellIndex l) {
    return v < cells[static_cast<std::size_t>(l)].begin;
  });
  while (it != leaves.begin()) {
    --it;
    const auto& c = cells[static_cast<std::size_t>(*it)];
    if (p >= c.begin && p < c.end) return *it;
    if (c.begin < p) break;
  }
  return -1;
}

std::vector<CellIndex> Grid::leaves_under(CellIndex c) const {
  std::vector<CellIndex> out;
  std::vector<CellIndex> stack{c};
  while (!stack.empty()) {
    CellIndex x = stack.back();
    stack.pop_back();
    const auto& cell = cells[static_cast<std::size_t>(x)];
    if (!cell.split) {
      out.push_back(x);
      continue;
    }
    for (int o = 7; o >= 0; --o) stack.push_back(cell.children[static_cast<std::size_t>(o)]);
  }
  return out;
}

std::int64_t Grid::local_count() const {
  std::int64_t n = 0;
  for (CellIndex t : top) {
    if (t >= 0 && cells[static_cast<std::size_t>(t)].local) n += cells[static_cast<std::size_t>(t)].count();
  }
  return n;
}

std::array<int, 3> grid_dims(const Vec3& box, double h_max_global, const GridConfig& cfg) {
  if (!(box.x > 0 && box.y > 0 && box.z > 0)) throw ConfigError("box edges must be positive");
  if (!(h_max_global > 0.0)) throw ConfigError("global h_max must be positive");
  std::array<int, 3> d{};
  for (int k = 0; k < 3; ++k) {
    const double n = std::floor(box[k] / h_max_global);
    if (n < 3.0) {
      throw ConfigError("fewer than 3 top-level cells per axis (box " + std::to_string(box[k]) +
                        ", h_max " + std::to_string(h_max_global) +
                        "): use a larger box or smaller smoothing lengths");
    }
    d[static_cast<std::size_t>(k)] = static_cast<int>(std::min<double>(n, cfg.max_top_per_axis));
  }
  return d;
}

Grid build_grid_from_slices(const Vec3& box, std::array<int, 3> dims, std::vector<TopSlice> slices,
                            const GridConfig& cfg) {
  Grid g;
  g.box = box;
  g.dims = dims;
  g.top_edge = {box.x / dims[0], box.y / dims[1], box.z / dims[2]};
  g.top.assign(static_cast<std::size_t>(g.num_top()), -1);

  std::stable_sort(slices.begin(), slices.end(), [](const TopSlice& a, const TopSlice& b) {
    if (a.local != b.local) return a.local;
    return a.top < b.top;
  });
  std::size_t total = 0;
  for (const auto& s : slices) total += s.particles.size();
  g.particles.reserve(total);

  TreeBuilder builder(g, cfg);
  const double top_limit = min_component(g.top_edge);
  for (auto& s : slices) {
    if (s.top < 0 || s.top >= g.num_top()) throw DomainError("slice for unknown top cell " + std::to_string(s.top));
    if (g.top[static_cast<std::size_t>(s.top)] >= 0) throw DomainError("duplicate slice for top cell " + std::to_string(s.top));
    const auto begin = static_cast<std::int32_t>(g.particles.size());
    g.particles.insert(g.particles.end(), s.particles.begin(), s.particles.end());
    const auto end = static_cast<std::int32_t>(g.particles.size());
    const auto c = g.top_coords(s.top);
    Box b;
    b.lo = {c[0] * g.top_edge.x, c[1] * g.top_edge.y, c[2] * g.top_edge.z};
    b.hi = {(c[0] + 1) * g.top_edge.x, (c[1] + 1) * g.top_edge.y, (c[2] + 1) * g.top_edge.z};
    std::uint32_t counter = 0;
    const CellIndex root = builder.build(b, begin, end, s.top, s.owner, s.local, 0, -1, counter);
    g.cells[static_cast<std::size_t>(root)].h_limit = top_limit;
    g.top[static_cast<std::size_t>(s.top)] = root;
  }
  return g;
}

Grid build_grid(std::vector<sph::Particle> particles, const Vec3& box, double h_max_global,
                const GridConfig& cfg) {
  const auto dims = grid_dims(box, h_max_global, cfg);
  const Vec3 edge{box.x / dims[0], box.y / dims[1], box.z / dims[2]};
  std::vector<TopSlice> slices(static_cast<std::size_t>(dims[0] * dims[1] * dims[2]));
  for (std::size_t t = 0; t < slices.size(); ++t) slices[t].top = static_cast<int>(t);
  for (auto& p : particles) {
    for (int k = 0; k < 3; ++k) {
      if (!(p.x[k] >= 0.0 && p.x[k] < box[k])) {
        throw DomainError("particle " + std::to_string(p.id) + " lies outside the periodic box");
      }
    }
    std::array<int, 3> c{};
    for (int k = 0; k < 3; ++k) {
      c[static_cast<std::size_t>(k)] = std::clamp(static_cast<int>(std::floor(p.x[k] / edge[k])), 0, dims[static_cast<std::size_t>(k)] - 1);
    }
    slices[static_cast<std::size_t>((c[0] * dims[1] + c[1]) * dims[2] + c[2])].particles.push_back(p);
  }
  return build_grid_from_slices(box, dims, std::move(slices), cfg);
}

std::size_t Blueprint::count(sched::TaskKind kind) const {
  return static_cast<std::size_t>(std::count_if(tasks.begin(), tasks.end(), [&](const TaskSpec& t) { return t.kind == kind; }));
}

namespace {

struct PairRecord {
  CellIndex a, b;
  Vec3 shift;
};

class TaskMaker {
 public:
  TaskMaker(Grid& g, const GridConfig& cfg) : g_(g), cfg_(cfg) {}

  Blueprint make() {
    for (auto& c : g_.cells) c.sort_mask = 0;
    for (int t = 0; t < g_.num_top(); ++t) {
      const CellIndex c = g_.top[static_cast<std::size_t>(t)];
      if (c >= 0 && cell(c).local) recurse_self(c);
    }
    for (int t = 0; t < g_.num_top(); ++t) {
      const CellIndex a = g_.top[static_cast<std::size_t>(t)];
      if (a < 0) continue;
      for (int n : g_.top_neighbours(t)) {
        if (n <= t) continue;
        const CellIndex b = g_.top[static_cast<std::size_t>(n)];
        if (b < 0 || (!cell(a).local && !cell(b).local)) continue;
        recurse_pair(a, b, g_.neighbour_shift(t, n));
      }
    }
    return emit();
  }

 private:
  Cell& cell(CellIndex c) { return g_.cells[static_cast<std::size_t>(c)]; }

  void recurse_self(CellIndex c) {
    if (cell(c).count() == 0) return;
    if (!cell(c).split) {
      selfs_.push_back(c);
      return;
    }
    const auto kids = cell(c).children;
    for (CellIndex k : kids) recurse_self(k);
    for (int i = 0; i < 8; ++i)
      for (int j = i + 1; j < 8; ++j) recurse_pair(kids[static_cast<std::size_t>(i)], kids[static_cast<std::size_t>(j)], {});
  }

  void recurse_pair(CellIndex a, CellIndex b, const Vec3& shift) {
    if (cell(a).count() == 0 || cell(b).count() == 0) return;
    const bool sa = cell(a).split, sb = cell(b).split;
    if (!sa && !sb) {
      pairs_.push_back({a, b, shift});
      return;
    }
    std::vector<CellIndex> as, bs;
    if (sa) {
      as.assign(cell(a).children.begin(), cell(a).children.end());
    } else {
      as.push_back(a);
    }
    if (sb) {
      bs.assign(cell(b).children.begin(), cell(b).children.end());
    } else {
      bs.push_back(b);
    }
    const double reach = (1.0 + cfg_.pair_slack) * std::max(cell(a).h_max, cell(b).h_max);
    for (CellIndex x : as) {
      for (CellIndex y : bs) {
        if (cell(x).count() == 0 || cell(y).count() == 0) continue;
        const double gap = box_gap(cell(x).bounds, cell(y).bounds, shift);
        if (gap < reach) {
          recurse_pair(x, y, shift);
        } else {
          cell(x).h_limit = std::min(cell(x).h_limit, gap);
          cell(y).h_limit = std::min(cell(y).h_limit, gap);
        }
      }
    }
  }

  Blueprint emit() {
    Blueprint bp;
    auto& T = bp.tasks;
    const auto n = [&](CellIndex c) { return static_cast<double>(cell(c).count()); };

    // Sorts: every local leaf, plus proxy leaves that take part in a pair.
    std::vector<char> needs_sort(g_.cells.size(), 0);
    for (CellIndex l : g_.leaves) {
      if (cell(l).local && cell(l).count() > 0) needs_sort[static_cast<std::size_t>(l)] = 1;
    }
    std::vector<int> pair_axis;
    for (const auto& p : pairs_) {
      const int axis = choose_axis(cell(p.a).bounds, cell(p.b).bounds, p.shift);
      pair_axis.push_back(axis);
      cell(p.a).sort_mask = static_cast<std::uint16_t>(cell(p.a).sort_mask | (1u << axis));
      cell(p.b).sort_mask = static_cast<std::uint16_t>(cell(p.b).sort_mask | (1u << axis));
      needs_sort[static_cast<std::size_t>(p.a)] = needs_sort[static_cast<std::size_t>(p.b)] = 1;
    }
    std::vector<int> sort_of(g_.cells.size(), -1);
    for (std::size_t c = 0; c < g_.cells.size(); ++c) {
      if (!needs_sort[c]) continue;
      TaskSpec t;
      t.kind = TaskKind::kSort;
      t.ci = static_cast<CellIndex>(c);
      const double m = n(t.ci);
      t.cost_estimate = m * std::log2(m + 2.0);
      sort_of[c] = static_cast<int>(T.size());
      T.push_back(t);
    }

    std::vector<std::vector<int>> density_of(g_.cells.size()), force_of(g_.cells.size());
    for (CellIndex c : selfs_) {
      TaskSpec t;
      t.kind = TaskKind::kDensitySelf;
      t.ci = c;
      t.cost_estimate = 0.5 * n(c) * n(c) + n(c);
      density_of[static_cast<std::size_t>(c)].push_back(static_cast<int>(T.size()));
      T.push_back(t);
    }
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const auto& p = pairs_[k];
      TaskSpec t;
      t.kind = TaskKind::kDensityPair;
      t.ci = p.a;
      t.cj = p.b;
      t.shift = p.shift;
      t.axis = pair_axis[k];
      t.deps = {sort_of[static_cast<std::size_t>(p.a)], sort_of[static_cast<std::size_t>(p.b)]};
      t.cost_estimate = n(p.a) * n(p.b);
      density_of[static_cast<std::size_t>(p.a)].push_back(static_cast<int>(T.size()));
      density_of[static_cast<std::size_t>(p.b)].push_back(static_cast<int>(T.size()));
      T.push_back(t);
    }

    std::vector<int> ghost_of(g_.cells.size(), -1);
    for (CellIndex l : g_.leaves) {
      if (!cell(l).local || cell(l).count() == 0) continue;
      TaskSpec t;
      t.kind = TaskKind::kGhost;
      t.ci = l;
      t.deps = density_of[static_cast<std::size_t>(l)];
      t.cost_estimate = n(l);
      ghost_of[static_cast<std::size_t>(l)] = static_cast<int>(T.size());
      T.push_back(t);
    }

    for (CellIndex c : selfs_) {
      TaskSpec t;
      t.kind = TaskKind::kForceSelf;
      t.ci = c;
      t.deps = {ghost_of[static_cast<std::size_t>(c)]};
      t.cost_estimate = 1.5 * (0.5 * n(c) * n(c) + n(c));
      force_of[static_cast<std::size_t>(c)].push_back(static_cast<int>(T.size()));
      T.push_back(t);
    }
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const auto& p = pairs_[k];
      TaskSpec t;
      t.kind = TaskKind::kForcePair;
      t.ci = p.a;
      t.cj = p.b;
      t.shift = p.shift;
      t.axis = pair_axis[k];
      for (CellIndex c : {p.a, p.b}) {
        if (ghost_of[static_cast<std::size_t>(c)] >= 0) t.deps.push_back(ghost_of[static_cast<std::size_t>(c)]);
      }
      t.cost_estimate = 1.5 * n(p.a) * n(p.b);
      force_of[static_cast<std::size_t>(p.a)].push_back(static_cast<int>(T.size()));
      force_of[static_cast<std::size_t>(p.b)].push_back(static_cast<int>(T.size()));
      T.push_back(t);
    }

    for (CellIndex l : g_.leaves) {
      if (!cell(l).local || cell(l).count() == 0) continue;
      TaskSpec t;
      t.kind = TaskKind::kKick;
      t.ci = l;
      t.deps = force_of[static_cast<std::size_t>(l)];
      t.cost_estimate = n(l);
      T.push_back(t);
    }
    return bp;
  }

  Grid& g_;
  const GridConfig& cfg_;
  std::vector<CellIndex> selfs_;
  std::vector<PairRecord> pairs_;
};

}  // namespace

Blueprint make_tasks(Grid& grid, const GridConfig& cfg) {
  const double top_limit = min_component(grid.top_edge);
  for (auto& c : grid.cells) c.h_limit = c.parent < 0 ? top_limit : kInf;
  return TaskMaker(grid, cfg).make();
}

std::vector<CellId> task_cells(const Grid& grid, const TaskSpec& t) {
  if (t.comm_top >= 0) return {make_cell_id(t.comm_top, 0)};
  if (t.ci < 0) return {make_cell_id(0, 0)};
  std::vector<CellId> out{grid.cells[static_cast<std::size_t>(t.ci)].id};
  if (t.cj >= 0) out.push_back(grid.cells[static_cast<std::size_t>(t.cj)].id);
  return out;
}

std::vector<sched::ResourceId> task_resources(const Grid& grid, const TaskSpec& t) {
  switch (t.kind) {
    case TaskKind::kSort:
    case TaskKind::kSend:
      return {};
    case TaskKind::kRecv: {
      if (t.comm_top < 0) return {};
      std::vector<sched::ResourceId> out;
      const CellIndex root = grid.top[static_cast<std::size_t>(t.comm_top)];
      for (CellIndex l : grid.leaves_under(root)) out.push_back(grid.cells[static_cast<std::size_t>(l)].id);
      return out;
    }
    default: {
      std::vector<sched::ResourceId> out{grid.cells[static_cast<std::size_t>(t.ci)].id};
      if (t.cj >= 0) out.push_back(grid.cells[static_cast<std::size_t>(t.cj)].id);
      return out;
    }
  }
}

void sort_cell(Grid& grid, CellIndex c) {
  auto& cell = grid.cells[static_cast<std::size_t>(c)];
  const auto& axes = sort_axes();
  for (int a = 0; a < kNumAxes; ++a) {
    auto& entries = cell.sorts[static_cast<std::size_t>(a)];
    entries.clear();
    if (!(cell.sort_mask & (1u << a))) continue;
    entries.reserve(static_cast<std::size_t>(cell.count()));
    for (std::int32_t p = cell.begin; p < cell.end; ++p) {
      entries.push_back({dot(grid.particles[static_cast<std::size_t>(p)].x, axes[static_cast<std::size_t>(a)]), p - cell.begin});
    }
    std::sort(entries.begin(), entries.end(), [](const SortEntry& x, const SortEntry& y) {
      return x.proj != y.proj ? x.proj < y.proj : x.index < y.index;
    });
  }
  cell.sort_epoch = grid.epoch;
}

std::vector<PairCandidate> pair_prune(const Grid& grid, CellIndex ci, CellIndex cj, const Vec3& shift,
                                      int axis, double h_cut) {
  const auto& a = grid.cells[static_cast<std::size_t>(ci)];
  const auto& b = grid.cells[static_cast<std::size_t>(cj)];
  const auto ax = static_cast<std::size_t>(axis);
  for (const Cell* c : {&a, &b}) {
    if (c->sort_epoch != grid.epoch || !(c->sort_mask & (1u << axis)) ||
        c->sorts[ax].size() != static_cast<std::size_t>(c->count())) {
      throw StaleSortError("stale sort of cell " + std::to_string(c->id) + " along axis " +
                           std::to_string(axis) + ": rebuild required");
    }
  }
  const double off = dot(shift, sort_axes()[ax]);
  const auto& sa = a.sorts[ax];
  const auto& sb = b.sorts[ax];
  std::vector<PairCandidate> out;
  std::size_t lo = 0;
  for (const auto& ea : sa) {
    while (lo < sb.size() && sb[lo].proj + off <= ea.proj - h_cut) ++lo;
    for (std::size_t k = lo; k < sb.size() && sb[k].proj + off < ea.proj + h_cut; ++k) {
      out.push_back({a.begin + ea.index, b.begin + sb[k].index});
    }
  }
  std::sort(out.begin(), out.end(), [](const PairCandidate& x, const PairCandidate& y) {
    return x.i != y.i ? x.i < y.i : x.j < y.j;
  });
  return out;
}

double max_drift(const Grid& grid) {
  double worst = 0.0;
  for (CellIndex l : grid.leaves) {
    const auto& c = grid.cells[static_cast<std::size_t>(l)];
    if (!c.local) continue;
    const Vec3 centre = c.bounds.centre();
    const Vec3 half = c.bounds.size() * 0.5;
    for (std::int32_t p = c.begin; p < c.end; ++p) {
      const Vec3 d = sph::min_image(grid.particles[static_cast<std::size_t>(p)].x, centre, grid.box);
      Vec3 excess;
      for (int k = 0; k < 3; ++k) excess[k] = std::max(0.0, std::abs(d[k]) - half[k]);
      worst = std::max(worst, norm(excess));
    }
  }
  return worst;
}

bool coverage_valid(const Grid& grid, double drift) {
  for (CellIndex l : grid.leaves) {
    const auto& c = grid.cells[static_cast<std::size_t>(l)];
    if (!c.local) continue;
    if (drift > 0.5 * min_component(c.bounds.size())) return false;
    const double lim = grid.leaf_limit(l);
    for (std::int32_t p = c.begin; p < c.end; ++p) {
      if (grid.particles[static_cast<std::size_t>(p)].h + 2.0 * drift > lim) return false;
    }
  }
  return true;
}

void dump(std::ostream& out, const Grid& grid, const Blueprint& bp) {
  out << "# grid " << grid.dims[0] << 'x' << grid.dims[1] << 'x' << grid.dims[2] << '\n';
  for (const auto& c : grid.cells) {
    out << "cell " << c.id << " top=" << c.top << " depth=" << c.depth << " n=" << c.count()
        << " split=" << (c.split ? 1 : 0) << " local=" << (c.local ? 1 : 0) << '\n';
  }
  out << "# tasks " << bp.tasks.size() << '\n';
  for (std::size_t i = 0; i < bp.tasks.size(); ++i) {
    const auto& t = bp.tasks[i];
    out << i << ' ' << sched::to_string(t.kind) << " cells=";
    const auto ids = task_cells(grid, t);
    for (std::size_t k = 0; k < ids.size(); ++k) out << (k ? "," : "") << ids[k];
    out << " deps=";
    for (std::size_t k = 0; k < t.deps.size(); ++k) out << (k ? "," : "") << t.deps[k];
    out << '\n';
  }
}

}  // namespace tsph::grid
