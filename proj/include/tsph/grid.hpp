#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "tsph/common.hpp"
#include "tsph/sched.hpp"
#include "tsph/sph.hpp"

namespace tsph::grid {

using CellIndex = std::int32_t;
using CellId = std::uint64_t;

// Global cell ids: top-level index in the high bits, depth-first preorder
// position inside that top cell's tree in the low bits (0 = the top cell).
inline constexpr int kLocalIdBits = 20;
constexpr CellId make_cell_id(int top, std::uint32_t local) {
  return (static_cast<CellId>(top) << kLocalIdBits) | local;
}
constexpr int top_of(CellId id) { return static_cast<int>(id >> kLocalIdBits); }

struct Box {
  Vec3 lo, hi;
  Vec3 centre() const { return (lo + hi) * 0.5; }
  Vec3 size() const { return hi - lo; }
};

// The 13 sort directions: neighbour offsets whose first non-zero component is positive.
inline constexpr int kNumAxes = 13;
const std::array<Vec3, kNumAxes>& sort_axes();

struct SortEntry {
  double proj;
  std::int32_t index;  // offset into the cell's particle range
};

struct Cell {
  CellId id = 0;
  Box bounds;
  std::int32_t begin = 0, end = 0;
  std::array<CellIndex, 8> children{-1, -1, -1, -1, -1, -1, -1, -1};
  CellIndex parent = -1;
  bool split = false;
  int depth = 0;
  int top = -1;
  int owner_rank = 0;
  bool local = true;
  double h_max = 0.0;
  // Largest h + 2 * drift any particle below this cell may reach before the
  // task set stops covering all interacting pairs (own constraint only; see
  // Grid::leaf_limit for the effective value).
  double h_limit = 0.0;
  std::uint16_t sort_mask = 0;
  std::array<std::vector<SortEntry>, kNumAxes> sorts;
  std::int64_t sort_epoch = -1;

  std::int32_t count() const { return end - begin; }
};

struct GridConfig {
  int split_threshold = 100;
  int max_depth = 12;
  // Pair tasks are refined down to sub-cells closer than (1 + pair_slack) * h_max.
  double pair_slack = 0.25;
  int max_top_per_axis = 64;
};

struct TopSlice {
  int top = 0;
  int owner = 0;
  bool local = true;
  std::vector<sph::Particle> particles;
};

class Grid {
 public:
  Vec3 box;
  std::array<int, 3> dims{0, 0, 0};
  Vec3 top_edge;
  std::vector<Cell> cells;
  // Per top-level index: index into `cells`, or -1 when this view lacks it.
  std::vector<CellIndex> top;
  std::vector<sph::Particle> particles;
  std::vector<CellIndex> leaves;
  // Bumped by the engine once per step attempt; sorts from older epochs are stale.
  std::int64_t epoch = 0;

  int num_top() const { return dims[0] * dims[1] * dims[2]; }
  std::array<int, 3> top_coords(int t) const;
  int top_index(std::array<int, 3> c) const;
  int top_index_of(const Vec3& x) const;
  // Periodic image shift to add to positions in top cell `b` to bring them
  // next to top cell `a` (which must be neighbours).
  Vec3 neighbour_shift(int a, int b) const;
  // The up to 26 distinct periodic neighbours of top cell t.
  std::vector<int> top_neighbours(int t) const;

  CellIndex find_cell(CellId id) const;
  // Effective h_limit for a leaf: minimum along its ancestor chain.
  double leaf_limit(CellIndex leaf) const;
  // Leaf containing particle index p.
  CellIndex leaf_of(std::int32_t p) const;
  std::vector<CellIndex> leaves_under(CellIndex c) const;
  std::int64_t local_count() const;
};

std::array<int, 3> grid_dims(const Vec3& box, double h_max_global, const GridConfig& cfg);

// Single-domain build: every particle is local and owned by rank 0.
Grid build_grid(std::vector<sph::Particle> particles, const Vec3& box, double h_max_global,
                const GridConfig& cfg = {});

// Build from per-top-cell slices (local cells plus proxies of remote ones).
Grid build_grid_from_slices(const Vec3& box, std::array<int, 3> dims, std::vector<TopSlice> slices,
                            const GridConfig& cfg = {});

struct TaskSpec {
  sched::TaskKind kind = sched::TaskKind::kSort;
  CellIndex ci = -1;
  CellIndex cj = -1;
  Vec3 shift;     // added to cj positions
  int axis = -1;  // sort axis for pair tasks
  std::vector<int> deps;  // prerequisite task indices
  double cost_estimate = 0.0;
  // Communication tasks only.
  int comm_top = -1;
  int comm_phase = -1;
  int comm_peer = -1;
};

struct Blueprint {
  std::vector<TaskSpec> tasks;

  std::size_t count(sched::TaskKind kind) const;
};

// Generates sort -> density -> ghost -> force -> kick for every local leaf and
// every leaf pair in range with at least one local side. Also fills each
// cell's h_limit and sort_mask.
Blueprint make_tasks(Grid& grid, const GridConfig& cfg = {});

// Cell ids referenced by a task (one or two).
std::vector<CellId> task_cells(const Grid& grid, const TaskSpec& t);
// Leaf cell ids the task must hold exclusively.
std::vector<sched::ResourceId> task_resources(const Grid& grid, const TaskSpec& t);

// Sorts the cell's particles along every axis in its sort_mask.
void sort_cell(Grid& grid, CellIndex c);

class StaleSortError : public DomainError {
 public:
  using DomainError::DomainError;
};

struct PairCandidate {
  std::int32_t i;  // absolute particle index in ci
  std::int32_t j;  // absolute particle index in cj
};

// Particle pairs whose projected separation along `axis` is below h_cut. A
// superset of the truly in-range pairs, a subset of the cross product.
std::vector<PairCandidate> pair_prune(const Grid& grid, CellIndex ci, CellIndex cj, const Vec3& shift,
                                      int axis, double h_cut);

// Maximum distance any local particle has strayed outside its leaf's bounds.
double max_drift(const Grid& grid);

// True when current h values and drifts still keep the task set valid.
bool coverage_valid(const Grid& grid, double drift);

// Text listing of the cell tree and the task graph, for golden-file tests.
void dump(std::ostream& out, const Grid& grid, const Blueprint& bp);

}  // namespace tsph::grid
