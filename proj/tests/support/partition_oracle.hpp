#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "tsph/partition.hpp"

namespace tsph::testing {

// Naive load of one rank: node weights of its members plus every edge with
// at least one endpoint in it.
inline double naive_rank_load(const partition::CellGraph& g, const partition::Assignment& a, int rank) {
  double l = 0.0;
  for (int v = 0; v < g.size(); ++v) {
    if (a[static_cast<std::size_t>(v)] == rank) l += g.node_weight[static_cast<std::size_t>(v)];
  }
  for (const auto& e : g.edges) {
    if (a[static_cast<std::size_t>(e.a)] == rank || a[static_cast<std::size_t>(e.b)] == rank) l += e.w;
  }
  return l;
}

inline double naive_max_load(const partition::CellGraph& g, const partition::Assignment& a, int k) {
  double m = 0.0;
  for (int r = 0; r < k; ++r) m = std::max(m, naive_rank_load(g, a, r));
  return m;
}

// Exhaustive optimum of the max rank load over all 2^n two-way assignments.
inline double brute_force_optimum_k2(const partition::CellGraph& g) {
  const int n = g.size();
  double best = 1e300;
  partition::Assignment a(static_cast<std::size_t>(n));
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    for (int v = 0; v < n; ++v) a[static_cast<std::size_t>(v)] = (mask >> v) & 1u;
    best = std::min(best, naive_max_load(g, a, 2));
  }
  return best;
}

// Connected graph: random spanning tree plus extra edges, positive weights.
inline partition::CellGraph random_connected_graph(std::mt19937_64& rng, int n) {
  partition::CellGraph g(n);
  std::uniform_real_distribution<double> w(0.1, 10.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int v = 0; v < n; ++v) g.add_node_weight(v, w(rng));
  for (int v = 1; v < n; ++v) {
    std::uniform_int_distribution<int> parent(0, v - 1);
    g.add_edge_weight(parent(rng), v, w(rng) * 0.5);
  }
  const double p_extra = u(rng) * 0.5;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      if (g.edge_weight(a, b) == 0.0 && u(rng) < p_extra) g.add_edge_weight(a, b, w(rng) * 0.5);
    }
  return g;
}

// Periodic n^3 lattice graph with 26-neighbour edges and uniform weights.
inline partition::CellGraph periodic_lattice_graph(int n, double node_w, double edge_w) {
  partition::CellGraph g(n * n * n);
  const auto idx = [n](int i, int j, int k) { return (((i + n) % n) * n + (j + n) % n) * n + (k + n) % n; };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const int v = idx(i, j, k);
        g.add_node_weight(v, node_w);
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            for (int dk = -1; dk <= 1; ++dk) {
              const int u = idx(i + di, j + dj, k + dk);
              if (u > v) g.add_edge_weight(v, u, edge_w);
            }
      }
  return g;
}

}  // namespace tsph::testing
