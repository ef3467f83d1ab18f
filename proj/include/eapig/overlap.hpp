#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eapig/graph.hpp"

namespace eapig {

/// Circuit nodes used for overlap statistics: endpoints of member edges,
/// excluding the input and logits nodes, which every circuit contains.
std::vector<NodeIndex> comparison_nodes(const ComputationalGraph& g, const Circuit& c);

/// Jaccard similarity. Two empty sets are identical and score 1.
double node_iou(const ComputationalGraph& g, const Circuit& a, const Circuit& b);
double edge_iou(const Circuit& a, const Circuit& b);

struct Recall {
  double node = 0.0;
  double edge = 0.0;
};

/// Recall of `a` on `b`: |A ∩ B| / |B| for nodes and edges. Throws when `b`
/// has no nodes or no edges.
Recall recall(const ComputationalGraph& g, const Circuit& a, const Circuit& b);

/// |A[:n] ∩ B[:n]| / n for each depth n (1 <= n <= ranking length).
std::vector<double> average_overlap(std::span<const EdgeIndex> rank_a,
                                    std::span<const EdgeIndex> rank_b,
                                    std::span<const std::size_t> depths);

struct PrecisionRecallPoint {
  std::size_t n = 0;
  double node_precision = 0.0;
  double node_recall = 0.0;
  double edge_precision = 0.0;
  double edge_recall = 0.0;
};

/// Unpruned top-n circuits against a reference circuit. An empty predicted
/// set has precision 1 (no false positives).
std::vector<PrecisionRecallPoint> precision_recall_curve(const ComputationalGraph& g,
                                                         std::span<const double> scores,
                                                         const Circuit& reference,
                                                         std::span<const std::size_t> n_range);

/// NaN when either input has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// Kendall tau-b in O(n log n). NaN when either input is constant.
double kendall_tau_b(std::span<const double> a, std::span<const double> b);

/// Kendall tau-b between the rankings induced by |a| and |b|.
double kendall_abs(std::span<const double> a, std::span<const double> b);

struct ApproximationError {
  double mean_absolute = 0.0;
  double mean_signed = 0.0;  // mean of approx - reference
};

ApproximationError approximation_error(std::span<const double> approx,
                                       std::span<const double> reference);

/// P(X >= k) for X ~ Hypergeometric(population N, K successes, n draws),
/// summed in log space.
double hypergeom_overlap_pvalue(std::size_t N, std::size_t K, std::size_t n, std::size_t k);

struct OverlapSignificance {
  std::size_t population = 0;
  std::size_t set_a = 0;
  std::size_t set_b = 0;
  std::size_t overlap = 0;
  double p_value = 1.0;
  bool significant = false;  // p < 0.01
};

/// Node-overlap significance of two circuits; the population is every
/// non-input, non-logits node of the graph.
OverlapSignificance node_overlap_significance(const ComputationalGraph& g, const Circuit& a,
                                              const Circuit& b);

}  // namespace eapig
