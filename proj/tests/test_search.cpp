#include <doctest.h>

#include <cmath>
#include <random>

#include "eapig/log.hpp"
#include "eapig/search.hpp"
#include "oracles.hpp"

using namespace eapig;

namespace {

// Rescans every frontier edge at each step.
Circuit naive_greedy(const ComputationalGraph& g, const std::vector<double>& s, std::size_t n) {
  Circuit c(g.num_edges());
  std::vector<bool> nodes(g.num_nodes(), false);
  nodes[g.logits_node()] = true;
  for (std::size_t step = 0; step < n; ++step) {
    std::optional<EdgeIndex> best;
    for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
      if (c.contains(e) || !nodes[g.edges()[e].dst]) continue;
      if (!best || std::abs(s[e]) > std::abs(s[*best])) best = e;
    }
    if (!best) break;
    c.set(*best);
    nodes[g.edges()[*best].src] = true;
  }
  return c;
}

}  // namespace

TEST_SUITE("search") {
  TEST_CASE("greedy matches a rescanning implementation") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    for (int t = 0; t < 60; ++t) {
      const ComputationalGraph g(1 + t % 3, 1 + t % 4);
      std::vector<double> s(g.num_edges());
      for (auto& v : s) v = t % 4 == 0 ? std::round(normal(rng) * 2) : normal(rng);
      const std::size_t n = std::size_t(t * 7) % (g.num_edges() + 1);
      CHECK(greedy_search(g, s, n) == naive_greedy(g, s, n));
    }
  }

  TEST_CASE("greedy and top-n differ when the best edge is disconnected") {
    const ComputationalGraph g(1, 1);
    std::vector<double> s(g.num_edges(), 0.1);
    const EdgeIndex far = *g.find_edge({NodeId::input(), NodeId::head(0, 0), Slot::Q});
    const EdgeIndex into_logits = *g.find_edge({NodeId::mlp(0), NodeId::logits(), Slot::Single});
    s[far] = 10.0;
    s[into_logits] = -0.5;
    const Circuit top = top_n(g, s, 1);
    const Circuit greedy = greedy_search(g, s, 1);
    CHECK(top.contains(far));
    CHECK(greedy.contains(into_logits));
    CHECK(top != greedy);
    CHECK(prune(g, top).size() == 0);
  }

  TEST_CASE("growing from the input keeps every node parented") {
    const ComputationalGraph g(2, 2);
    std::vector<double> s(g.num_edges());
    for (EdgeIndex e = 0; e < s.size(); ++e) s[e] = std::sin(double(e));
    const Circuit c = greedy_search(g, s, 12, GreedyDirection::FromInput);
    CHECK(c.size() == 12);
    std::vector<bool> has_parent(g.num_nodes(), false);
    for (EdgeIndex e : c.members()) has_parent[g.edges()[e].dst] = true;
    for (EdgeIndex e : c.members()) {
      const auto src = g.edges()[e].src;
      CHECK((src == g.input_node() || has_parent[src]));
    }
  }

  TEST_CASE("ties break toward lower edge indices") {
    const ComputationalGraph g(1, 2);
    const std::vector<double> s(g.num_edges(), 1.0);
    CHECK(top_n(g, s, 3).members() == std::vector<EdgeIndex>{0, 1, 2});
    const auto rank = rank_by_magnitude(s);
    for (std::size_t i = 0; i < rank.size(); ++i) CHECK(rank[i] == i);
    const auto& logits_slot = g.slots()[g.slot_index(g.logits_node(), Slot::Single)];
    CHECK(greedy_search(g, s, 1).members() == std::vector<EdgeIndex>{logits_slot.first_edge});
  }

  TEST_CASE("sign does not matter, magnitude does") {
    const ComputationalGraph g(1, 1);
    std::vector<double> s(g.num_edges(), 0.0);
    s[3] = -5.0;
    s[5] = 4.0;
    CHECK(rank_by_magnitude(s)[0] == 3);
    CHECK(rank_by_magnitude(s)[1] == 5);
    CHECK(select_by_threshold(g, s, 4.0).members() == std::vector<EdgeIndex>{3});
    CHECK(select_by_threshold(g, s, 3.9).size() == 2);
  }

  TEST_CASE("requests beyond the edge count warn and return everything reachable") {
    const ComputationalGraph g(1, 1);
    const std::vector<double> s(g.num_edges(), 1.0);
    std::string warned;
    ScopedWarningSink sink([&](const std::string& m) { warned = m; });
    CHECK(greedy_search(g, s, 100).size() == g.num_edges());
    CHECK(warned.find("100") != std::string::npos);
    CHECK(top_n(g, s, 100).size() == g.num_edges());
    CHECK(greedy_search(g, s, 0).size() == 0);
  }

  TEST_CASE("score length must match the graph") {
    const ComputationalGraph g(1, 1);
    CHECK_THROWS(greedy_search(g, std::vector<double>(3, 1.0), 1));
    CHECK_THROWS(top_n(g, std::vector<double>(3, 1.0), 1));
  }

  TEST_CASE("sweep reports sizes before and after pruning") {
    const ComputationalGraph g(2, 2);
    std::vector<double> s(g.num_edges());
    for (EdgeIndex e = 0; e < s.size(); ++e) s[e] = std::cos(3.0 * double(e));
    const std::vector<std::size_t> ns{0, 5, 10, 46};
    const auto pts = sweep(g, s, ns);
    REQUIRE(pts.size() == ns.size());
    for (std::size_t i = 0; i < ns.size(); ++i) {
      CHECK(pts[i].n == ns[i]);
      CHECK(pts[i].edges_before_prune == ns[i]);
      CHECK(pts[i].edges_after_prune == pts[i].circuit.size());
      CHECK(pts[i].circuit == prune(g, greedy_search(g, s, ns[i])));
    }
    const auto raw = sweep(g, s, ns, false);
    for (std::size_t i = 0; i < ns.size(); ++i) CHECK(raw[i].circuit.size() == ns[i]);
  }

  TEST_CASE("default sweep sizes") {
    const auto all = default_sweep_sizes(32491);
    CHECK(all.front() == 30);
    CHECK(all.back() == 1000);
    CHECK(all.size() == 17);
    CHECK(default_sweep_sizes(46) == std::vector<std::size_t>{30, 40});
  }
}
