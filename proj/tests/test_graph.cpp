#include <doctest.h>

#include <random>
#include <set>
#include <tuple>

#include "eapig/error.hpp"
#include "eapig/graph.hpp"
#include "oracles.hpp"

using namespace eapig;

TEST_SUITE("graph") {
  TEST_CASE("edge counts follow the closed form and the pair enumeration") {
    for (std::size_t L = 1; L <= 4; ++L) {
      for (std::size_t H = 1; H <= 5; ++H) {
        const ComputationalGraph g(L, H);
        CHECK(g.num_edges() == ComputationalGraph::expected_edge_count(L, H));
        CHECK(g.num_edges() == oracle::enumerate_edges(L, H).size());
      }
    }
    CHECK(ComputationalGraph(12, 12).num_edges() == 32491);
    CHECK(ComputationalGraph(1, 1).num_edges() == 8);
    CHECK(ComputationalGraph(2, 2).num_edges() == 46);
  }

  TEST_CASE("nodes are in computation order") {
    const ComputationalGraph g(2, 3);
    REQUIRE(g.num_nodes() == 1 + 2 * 4 + 1);
    CHECK(g.nodes()[0].name() == "input");
    CHECK(g.nodes()[g.head_node(0, 2)].name() == "a0.h2");
    CHECK(g.nodes()[g.mlp_node(0)].name() == "m0");
    CHECK(g.nodes()[g.head_node(1, 0)].name() == "a1.h0");
    CHECK(g.nodes()[g.logits_node()].name() == "logits");
    for (NodeIndex i = 0; i < g.num_nodes(); ++i) CHECK(g.node_index(g.nodes()[i]) == i);
  }

  TEST_CASE("node names parse back") {
    for (const char* name : {"input", "a0.h0", "a11.h7", "m3", "logits"}) {
      CHECK(NodeId::parse(name).name() == name);
    }
    for (const char* bad : {"", "a1", "a.h1", "m", "mx", "a1.hx", "h0", "logit", "a-1.h0"}) {
      CHECK_THROWS_AS(NodeId::parse(bad), ParseError);
    }
    CHECK(slot_from_string(to_string(Slot::K)) == Slot::K);
    CHECK(to_string(Slot::Single) == "single");
    CHECK_THROWS_AS(slot_from_string("x"), ParseError);
  }

  TEST_CASE("slot sources are a prefix of the node order") {
    const ComputationalGraph g(3, 2);
    for (const auto& s : g.slots()) {
      for (std::size_t src = 0; src < s.n_sources; ++src) {
        const auto& e = g.edges()[s.first_edge + src];
        CHECK(e.src == src);
        CHECK(e.dst == s.node);
      }
    }
    CHECK(g.slots()[g.slot_index(g.head_node(1, 0), Slot::Q)].n_sources == g.head_node(1, 0));
    CHECK(g.slots()[g.slot_index(g.mlp_node(1), Slot::Single)].n_sources == g.mlp_node(1));
    CHECK(g.slots()[g.slot_index(g.logits_node(), Slot::Single)].n_sources == g.logits_node());
    CHECK(g.node_slots(g.input_node()).empty());
    CHECK(g.node_slots(g.head_node(0, 1)).size() == 3);
    CHECK(g.node_slots(g.mlp_node(2)).size() == 1);
  }

  TEST_CASE("heads of one layer do not feed each other") {
    const ComputationalGraph g(2, 3);
    CHECK_FALSE(g.find_edge({NodeId::head(0, 0), NodeId::head(0, 1), Slot::Q}).has_value());
    CHECK(g.find_edge({NodeId::head(0, 0), NodeId::mlp(0), Slot::Single}).has_value());
    CHECK(g.find_edge({NodeId::head(0, 0), NodeId::head(1, 2), Slot::V}).has_value());
    CHECK_FALSE(g.find_edge({NodeId::mlp(1), NodeId::mlp(0), Slot::Single}).has_value());
    CHECK_FALSE(g.find_edge({NodeId::input(), NodeId::mlp(0), Slot::Q}).has_value());
  }

  TEST_CASE("edge ids round trip and out edges are complete") {
    const ComputationalGraph g(2, 2);
    std::vector<std::size_t> out_count(g.num_nodes(), 0);
    for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
      CHECK(g.find_edge(g.edge_id(e)) == e);
      ++out_count[g.edges()[e].src];
    }
    for (NodeIndex n = 0; n < g.num_nodes(); ++n) {
      CHECK(g.out_edges(n).size() == out_count[n]);
      for (EdgeIndex e : g.out_edges(n)) CHECK(g.edges()[e].src == n);
    }
    CHECK(g.out_edges(g.logits_node()).empty());
  }

  TEST_CASE("circuit membership and node mask") {
    const ComputationalGraph g(1, 2);
    Circuit c = Circuit::empty(g);
    CHECK(c.size() == 0);
    const auto mask0 = c.node_mask(g);
    CHECK(mask0[g.input_node()]);
    CHECK(mask0[g.logits_node()]);
    CHECK_FALSE(mask0[g.mlp_node(0)]);
    const EdgeIndex e = *g.find_edge({NodeId::head(0, 1), NodeId::mlp(0), Slot::Single});
    c.set(e);
    CHECK(c.contains(e));
    CHECK(c.members() == std::vector<EdgeIndex>{e});
    const auto mask = c.node_mask(g);
    CHECK(mask[g.head_node(0, 1)]);
    CHECK(mask[g.mlp_node(0)]);
    CHECK_FALSE(mask[g.head_node(0, 0)]);
    CHECK(Circuit::full(g).size() == g.num_edges());
  }

  TEST_CASE("prune removes dangling edges") {
    const ComputationalGraph g(2, 1);
    auto edge = [&](NodeId a, NodeId b) { return *g.find_edge({a, b, Slot::Single}); };
    Circuit c = Circuit::empty(g);
    c.set(edge(NodeId::input(), NodeId::mlp(0)));
    c.set(edge(NodeId::mlp(0), NodeId::logits()));
    c.set(edge(NodeId::head(0, 0), NodeId::mlp(1)));  // parentless head, childless mlp
    c.set(edge(NodeId::mlp(0), NodeId::mlp(1)));     // childless destination
    const Circuit p = prune(g, c);
    CHECK(p.size() == 2);
    CHECK(p.contains(edge(NodeId::input(), NodeId::mlp(0))));
    CHECK(p.contains(edge(NodeId::mlp(0), NodeId::logits())));
    CHECK(prune(g, Circuit::full(g)) == Circuit::full(g));
    CHECK(prune(g, Circuit::empty(g)) == Circuit::empty(g));
  }

  TEST_CASE("prune agrees with the naive fixpoint on random circuits") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 300; ++t) {
      const ComputationalGraph g(1 + t % 3, 1 + t % 4);
      std::bernoulli_distribution keep(0.05 + 0.9 * double(t % 10) / 10.0);
      Circuit c(g.num_edges());
      for (EdgeIndex e = 0; e < g.num_edges(); ++e) c.set(e, keep(rng));
      const Circuit p = prune(g, c);
      CHECK(p == oracle::naive_prune(g, c));
      CHECK(prune(g, p) == p);
    }
  }
}
