#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eapig/graph.hpp"

namespace eapig {

enum class GreedyDirection {
  FromLogits,  // grow parents of circuit nodes; never leaves childless nodes
  FromInput,   // grow children of circuit nodes; never leaves parentless nodes
};

/// Greedy circuit growth by maximum |score| over the frontier. Ties go to the
/// lower canonical edge index. If fewer than n edges are reachable the
/// smaller circuit is returned and a warning is emitted.
Circuit greedy_search(const ComputationalGraph& g, std::span<const double> scores, std::size_t n,
                      GreedyDirection direction = GreedyDirection::FromLogits);

/// The n edges with largest |score|, ties broken canonically.
Circuit top_n(const ComputationalGraph& g, std::span<const double> scores, std::size_t n);

/// Edges with |score| > tau.
Circuit select_by_threshold(const ComputationalGraph& g, std::span<const double> scores, double tau);

/// Edge indices sorted by descending |score|, ties canonical.
std::vector<EdgeIndex> rank_by_magnitude(std::span<const double> scores);

struct SweepPoint {
  std::size_t n = 0;
  std::size_t edges_before_prune = 0;
  std::size_t edges_after_prune = 0;
  Circuit circuit;  // pruned unless the sweep was run without pruning
};

std::vector<SweepPoint> sweep(const ComputationalGraph& g, std::span<const double> scores,
                              std::span<const std::size_t> n_list, bool prune_circuits = true);

/// 30, 40, ..., 100, 200, ..., 1000 clipped to the edge count.
std::vector<std::size_t> default_sweep_sizes(std::size_t n_edges);

}  // namespace eapig
