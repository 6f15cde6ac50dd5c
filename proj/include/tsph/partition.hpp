#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "tsph/common.hpp"
#include "tsph/grid.hpp"

namespace tsph::partition {

using Assignment = std::vector<int>;  // top-level cell index -> rank

struct Edge {
  int a = 0, b = 0;  // a < b
  double w = 0.0;
};

// Nodes are top-level cells. A task touching one top cell adds to its node
// weight; a task spanning two adds to their edge.
class CellGraph {
 public:
  explicit CellGraph(int n_nodes = 0);

  int size() const { return static_cast<int>(node_weight.size()); }
  void add_node_weight(int v, double w);
  void add_edge_weight(int a, int b, double w);
  double edge_weight(int a, int b) const;
  // Sum of all node and edge weights.
  double total() const;
  int non_empty_count() const;
  bool non_empty(int v) const { return node_weight[static_cast<std::size_t>(v)] > 0.0; }

  std::vector<double> node_weight;
  std::vector<Edge> edges;
  // Per node: (neighbour, edge index).
  std::vector<std::vector<std::pair<int, int>>> adj;

 private:
  int find_edge(int a, int b) const;
  std::unordered_map<std::uint64_t, int> edge_index_;
};

struct TaskCost {
  std::vector<grid::CellId> cells;  // one or two (any depth)
  double cost = 0.0;
};

// Attributes each task's cost to its top-level cells' node or edge. Task cells
// must belong to tops in [0, n_nodes).
CellGraph build_cell_graph(int n_nodes, std::span<const TaskCost> tasks);

// Graph from a single-domain blueprint with the given per-task costs
// (communication tasks are ignored), plus zero-weight edges between all
// periodic top-level neighbours so region growth can cross empty cells.
CellGraph build_cell_graph(const grid::Grid& grid, const grid::Blueprint& bp, std::span<const double> costs);

void add_neighbour_edges(CellGraph& g, const grid::Grid& grid);

struct Loads {
  std::vector<double> per_rank;
  double max = 0.0;
  double mean = 0.0;
  double imbalance = 1.0;  // max / mean
};

// Rank load = its node weights plus every edge incident to one of its nodes
// (cut edges count on both sides).
Loads evaluate_partition(const CellGraph& g, const Assignment& a, int k);

class Partitioner {
 public:
  virtual ~Partitioner() = default;
  virtual Assignment partition(const CellGraph& g, int k) const = 0;
  // Improves an existing assignment.
  virtual Assignment refine(const CellGraph& g, Assignment a, int k) const = 0;
};

// Farthest-point seeds, greedy region growth, then single-node boundary moves
// until none lowers (max load, sum of squared loads).
class GreedyKlPartitioner : public Partitioner {
 public:
  Assignment partition(const CellGraph& g, int k) const override;
  Assignment refine(const CellGraph& g, Assignment a, int k) const override;
};

struct Migration {
  int cell = 0;
  int from = 0;
  int to = 0;
};

struct RepartitionResult {
  Assignment assignment;
  std::vector<Migration> moves;
  bool skipped = true;
  double old_max = 0.0;
  double new_max = 0.0;
};

// Keeps the current assignment unless the best of a fresh partition and a
// refinement of the current one lowers the max rank load by at least
// min_gain (relative).
RepartitionResult repartition(const CellGraph& g, const Assignment& current, int k,
                              const Partitioner& p = GreedyKlPartitioner{}, double min_gain = 0.05);

inline constexpr const char* kPartitionCsvHeader = "cell,rank,node_weight";
// One row per top cell, then "# imbalance,<ratio>".
void write_partition_csv(std::ostream& out, const CellGraph& g, const Assignment& a, int k);

}  // namespace tsph::partition
