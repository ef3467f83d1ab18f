#include "eapig/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "eapig/error.hpp"
#include "eapig/log.hpp"

namespace eapig {

namespace {

void check_scores(const ComputationalGraph& g, std::span<const double> scores) {
  if (scores.size() != g.num_edges()) {
    throw ShapeError("got " + std::to_string(scores.size()) + " scores for a graph with " +
                     std::to_string(g.num_edges()) + " edges");
  }
}

// Orders by |score| descending, then by edge index ascending.
struct ByMagnitude {
  std::span<const double> scores;
  bool operator()(EdgeIndex a, EdgeIndex b) const {
    const double ma = std::abs(scores[a]), mb = std::abs(scores[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  }
};

}  // namespace

std::vector<EdgeIndex> rank_by_magnitude(std::span<const double> scores) {
  std::vector<EdgeIndex> order(scores.size());
  std::iota(order.begin(), order.end(), EdgeIndex{0});
  std::sort(order.begin(), order.end(), ByMagnitude{scores});
  return order;
}

Circuit greedy_search(const ComputationalGraph& g, std::span<const double> scores, std::size_t n,
                      GreedyDirection direction) {
  check_scores(g, scores);
  Circuit circuit(g.num_edges());
  std::vector<bool> in_nodes(g.num_nodes(), false);

  // Max-heap on (|score|, -index): the comparator says "a after b".
  auto after = [&](EdgeIndex a, EdgeIndex b) { return ByMagnitude{scores}(b, a); };
  std::priority_queue<EdgeIndex, std::vector<EdgeIndex>, decltype(after)> frontier(after);

  // Incoming edges of v, or outgoing edges when growing from the input.
  auto admit = [&](NodeIndex v) {
    if (in_nodes[v]) return;
    in_nodes[v] = true;
    if (direction == GreedyDirection::FromLogits) {
      for (SlotIndex s : g.node_slots(v)) {
        const auto& info = g.slots()[s];
        for (NodeIndex u = 0; u < info.n_sources; ++u) frontier.push(info.first_edge + u);
      }
    } else {
      for (EdgeIndex e : g.out_edges(v)) frontier.push(e);
    }
  };
  admit(direction == GreedyDirection::FromLogits ? g.logits_node() : g.input_node());

  std::size_t added = 0;
  while (added < n && !frontier.empty()) {
    const EdgeIndex e = frontier.top();
    frontier.pop();
    if (circuit.contains(e)) continue;
    circuit.set(e);
    ++added;
    const auto& edge = g.edges()[e];
    admit(direction == GreedyDirection::FromLogits ? edge.src : edge.dst);
  }
  if (added < n) {
    warn("greedy search requested " + std::to_string(n) + " edges but only " +
         std::to_string(added) + " are reachable");
  }
  return circuit;
}

Circuit top_n(const ComputationalGraph& g, std::span<const double> scores, std::size_t n) {
  check_scores(g, scores);
  n = std::min(n, scores.size());
  std::vector<EdgeIndex> order(scores.size());
  std::iota(order.begin(), order.end(), EdgeIndex{0});
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(n), order.end(),
                    ByMagnitude{scores});
  Circuit c(g.num_edges());
  for (std::size_t i = 0; i < n; ++i) c.set(order[i]);
  return c;
}

Circuit select_by_threshold(const ComputationalGraph& g, std::span<const double> scores,
                            double tau) {
  check_scores(g, scores);
  Circuit c(g.num_edges());
  for (EdgeIndex e = 0; e < scores.size(); ++e) {
    if (std::abs(scores[e]) > tau) c.set(e);
  }
  return c;
}

std::vector<SweepPoint> sweep(const ComputationalGraph& g, std::span<const double> scores,
                              std::span<const std::size_t> n_list, bool prune_circuits) {
  std::vector<SweepPoint> out;
  for (std::size_t n : n_list) {
    SweepPoint p;
    p.n = n;
    Circuit raw = greedy_search(g, scores, n);
    p.edges_before_prune = raw.size();
    p.circuit = prune_circuits ? prune(g, raw) : std::move(raw);
    p.edges_after_prune = p.circuit.size();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::size_t> default_sweep_sizes(std::size_t n_edges) {
  std::vector<std::size_t> out;
  for (std::size_t n = 30; n <= 100; n += 10) out.push_back(n);
  for (std::size_t n = 200; n <= 1000; n += 100) out.push_back(n);
  std::erase_if(out, [&](std::size_t n) { return n > n_edges; });
  return out;
}

}  // namespace eapig
