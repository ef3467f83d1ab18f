#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eapig/config.hpp"

namespace eapig {

enum class NodeKind : std::uint8_t { Input, Head, Mlp, Logits };

/// Destination slot of an edge. Heads read three separate residual sums.
enum class Slot : std::uint8_t { Q, K, V, Single };

struct NodeId {
  NodeKind kind = NodeKind::Input;
  std::size_t layer = 0;
  std::size_t index = 0;

  static NodeId input() { return {NodeKind::Input, 0, 0}; }
  static NodeId head(std::size_t layer, std::size_t index) { return {NodeKind::Head, layer, index}; }
  static NodeId mlp(std::size_t layer) { return {NodeKind::Mlp, layer, 0}; }
  static NodeId logits() { return {NodeKind::Logits, 0, 0}; }

  /// "input", "a<layer>.h<index>", "m<layer>" or "logits".
  std::string name() const;
  /// Inverse of name(); throws ParseError.
  static NodeId parse(const std::string& text);

  friend bool operator==(const NodeId&, const NodeId&) = default;
};

std::string to_string(Slot s);
Slot slot_from_string(const std::string& s);

using NodeIndex = std::size_t;
using EdgeIndex = std::size_t;
using SlotIndex = std::size_t;

struct EdgeId {
  NodeId src;
  NodeId dst;
  Slot slot = Slot::Single;
  friend bool operator==(const EdgeId&, const EdgeId&) = default;
};

/// Dense residual-stream graph at head/MLP granularity.
///
/// Nodes are indexed in computation order: input, then for each layer its
/// heads followed by its MLP, then logits. Every node feeds every later node,
/// except that heads of one layer do not feed each other. Because of that
/// ordering the sources of any destination slot are exactly the nodes
/// [0, n_sources), so edge (src, slot) has index slot.first_edge + src.
class ComputationalGraph {
 public:
  struct Edge {
    NodeIndex src;
    NodeIndex dst;
    SlotIndex slot;
  };
  struct SlotInfo {
    NodeIndex node;
    Slot slot;
    EdgeIndex first_edge;
    std::size_t n_sources;
  };

  ComputationalGraph(std::size_t n_layers, std::size_t n_heads);
  explicit ComputationalGraph(const ModelConfig& config)
      : ComputationalGraph(config.n_layers, config.n_heads) {}

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  std::size_t num_slots() const { return slots_.size(); }

  const std::vector<NodeId>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<SlotInfo>& slots() const { return slots_; }

  NodeIndex input_node() const { return 0; }
  NodeIndex logits_node() const { return nodes_.size() - 1; }
  NodeIndex head_node(std::size_t layer, std::size_t head) const {
    return 1 + layer * (n_heads_ + 1) + head;
  }
  NodeIndex mlp_node(std::size_t layer) const { return 1 + layer * (n_heads_ + 1) + n_heads_; }
  NodeIndex node_index(const NodeId& id) const;

  /// Slot indices of a node in q, k, v order (one entry for MLPs and logits,
  /// none for the input node).
  std::span<const SlotIndex> node_slots(NodeIndex node) const {
    return {slot_ids_.data() + slot_offsets_[node], slot_offsets_[node + 1] - slot_offsets_[node]};
  }
  SlotIndex slot_index(NodeIndex node, Slot slot) const;

  std::span<const EdgeIndex> out_edges(NodeIndex node) const { return out_edges_[node]; }

  EdgeId edge_id(EdgeIndex e) const;
  std::optional<EdgeIndex> find_edge(const EdgeId& id) const;

  /// Edge count from the closed form; equals num_edges().
  static std::size_t expected_edge_count(std::size_t n_layers, std::size_t n_heads);

  friend bool operator==(const ComputationalGraph& a, const ComputationalGraph& b) {
    return a.n_layers_ == b.n_layers_ && a.n_heads_ == b.n_heads_;
  }

 private:
  std::size_t n_layers_;
  std::size_t n_heads_;
  std::vector<NodeId> nodes_;
  std::vector<Edge> edges_;
  std::vector<SlotInfo> slots_;
  std::vector<SlotIndex> slot_ids_;
  std::vector<std::size_t> slot_offsets_;
  std::vector<std::vector<EdgeIndex>> out_edges_;
};

/// Edge-membership bitset over a graph's canonical edge order.
class Circuit {
 public:
  Circuit() = default;
  explicit Circuit(std::size_t n_edges, bool all = false) : member_(n_edges, all) {}

  static Circuit full(const ComputationalGraph& g) { return Circuit(g.num_edges(), true); }
  static Circuit empty(const ComputationalGraph& g) { return Circuit(g.num_edges(), false); }

  std::size_t graph_edges() const { return member_.size(); }
  bool contains(EdgeIndex e) const { return member_[e]; }
  void set(EdgeIndex e, bool in = true) { member_[e] = in; }

  std::size_t size() const;
  std::vector<EdgeIndex> members() const;

  /// Endpoints of member edges, plus the input and logits nodes.
  std::vector<bool> node_mask(const ComputationalGraph& g) const;

  friend bool operator==(const Circuit&, const Circuit&) = default;

 private:
  std::vector<bool> member_;
};

/// Removes member edges whose source has no member parents (unless it is the
/// input) or whose destination has no member children (unless it is the
/// logits), to a fixpoint.
Circuit prune(const ComputationalGraph& g, const Circuit& circuit);

}  // namespace eapig
