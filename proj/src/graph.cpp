#include "eapig/graph.hpp"

#include <charconv>

#include "eapig/error.hpp"

namespace eapig {

namespace {

std::size_t parse_count(const std::string& text, std::size_t begin, std::size_t end) {
  std::size_t value = 0;
  const char* first = text.data() + begin;
  const char* last = text.data() + end;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) {
    throw ParseError("invalid node name '" + text + "'");
  }
  return value;
}

}  // namespace

std::string NodeId::name() const {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Logits: return "logits";
    case NodeKind::Mlp: return "m" + std::to_string(layer);
    case NodeKind::Head: return "a" + std::to_string(layer) + ".h" + std::to_string(index);
  }
  return {};
}

NodeId NodeId::parse(const std::string& text) {
  if (text == "input") return input();
  if (text == "logits") return logits();
  if (text.size() > 1 && text[0] == 'm') return mlp(parse_count(text, 1, text.size()));
  if (text.size() > 1 && text[0] == 'a') {
    const auto dot = text.find(".h");
    if (dot != std::string::npos) {
      return head(parse_count(text, 1, dot), parse_count(text, dot + 2, text.size()));
    }
  }
  throw ParseError("invalid node name '" + text + "'");
}

std::string to_string(Slot s) {
  switch (s) {
    case Slot::Q: return "q";
    case Slot::K: return "k";
    case Slot::V: return "v";
    case Slot::Single: return "single";
  }
  return {};
}

Slot slot_from_string(const std::string& s) {
  if (s == "q") return Slot::Q;
  if (s == "k") return Slot::K;
  if (s == "v") return Slot::V;
  if (s == "single") return Slot::Single;
  throw ParseError("invalid slot '" + s + "'");
}

ComputationalGraph::ComputationalGraph(std::size_t n_layers, std::size_t n_heads)
    : n_layers_(n_layers), n_heads_(n_heads) {
  nodes_.push_back(NodeId::input());
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) nodes_.push_back(NodeId::head(l, h));
    nodes_.push_back(NodeId::mlp(l));
  }
  nodes_.push_back(NodeId::logits());

  out_edges_.resize(nodes_.size());
  slot_offsets_.assign(nodes_.size() + 1, 0);
  for (NodeIndex v = 0; v < nodes_.size(); ++v) {
    slot_offsets_[v] = slot_ids_.size();
    const NodeId& id = nodes_[v];
    if (id.kind == NodeKind::Input) continue;

    // Heads of layer l read everything before the layer's first head.
    const std::size_t n_sources =
        id.kind == NodeKind::Head ? head_node(id.layer, 0) : v;
    const Slot head_slots[] = {Slot::Q, Slot::K, Slot::V};
    const Slot single[] = {Slot::Single};
    std::span<const Slot> kinds =
        id.kind == NodeKind::Head ? std::span<const Slot>(head_slots) : std::span<const Slot>(single);
    for (Slot s : kinds) {
      const SlotIndex si = slots_.size();
      slots_.push_back({v, s, edges_.size(), n_sources});
      slot_ids_.push_back(si);
      for (NodeIndex u = 0; u < n_sources; ++u) {
        out_edges_[u].push_back(edges_.size());
        edges_.push_back({u, v, si});
      }
    }
  }
  slot_offsets_[nodes_.size()] = slot_ids_.size();
}

NodeIndex ComputationalGraph::node_index(const NodeId& id) const {
  switch (id.kind) {
    case NodeKind::Input: return input_node();
    case NodeKind::Logits: return logits_node();
    case NodeKind::Mlp:
      if (id.layer >= n_layers_) break;
      return mlp_node(id.layer);
    case NodeKind::Head:
      if (id.layer >= n_layers_ || id.index >= n_heads_) break;
      return head_node(id.layer, id.index);
  }
  throw ParseError("node " + id.name() + " is not in a " + std::to_string(n_layers_) + "x" +
                   std::to_string(n_heads_) + " graph");
}

SlotIndex ComputationalGraph::slot_index(NodeIndex node, Slot slot) const {
  for (SlotIndex s : node_slots(node)) {
    if (slots_[s].slot == slot) return s;
  }
  throw ParseError("node " + nodes_[node].name() + " has no slot " + to_string(slot));
}

EdgeId ComputationalGraph::edge_id(EdgeIndex e) const {
  const Edge& edge = edges_.at(e);
  return {nodes_[edge.src], nodes_[edge.dst], slots_[edge.slot].slot};
}

std::optional<EdgeIndex> ComputationalGraph::find_edge(const EdgeId& id) const {
  NodeIndex src, dst;
  SlotIndex slot;
  try {
    src = node_index(id.src);
    dst = node_index(id.dst);
    slot = slot_index(dst, id.slot);
  } catch (const ParseError&) {
    return std::nullopt;
  }
  const SlotInfo& info = slots_[slot];
  if (src >= info.n_sources) return std::nullopt;
  return info.first_edge + src;
}

std::size_t ComputationalGraph::expected_edge_count(std::size_t L, std::size_t H) {
  // Upstream count for layer l heads is 1 + l(H+1); MLP l also sees its own
  // layer's heads; logits see everything.
  std::size_t total = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t before = 1 + l * (H + 1);
    total += 3 * H * before + before + H;
  }
  return total + 1 + L * (H + 1);
}

std::size_t Circuit::size() const {
  std::size_t n = 0;
  for (bool b : member_) n += b;
  return n;
}

std::vector<EdgeIndex> Circuit::members() const {
  std::vector<EdgeIndex> out;
  for (EdgeIndex e = 0; e < member_.size(); ++e) {
    if (member_[e]) out.push_back(e);
  }
  return out;
}

std::vector<bool> Circuit::node_mask(const ComputationalGraph& g) const {
  std::vector<bool> mask(g.num_nodes(), false);
  mask[g.input_node()] = true;
  mask[g.logits_node()] = true;
  for (EdgeIndex e = 0; e < member_.size(); ++e) {
    if (!member_[e]) continue;
    mask[g.edges()[e].src] = true;
    mask[g.edges()[e].dst] = true;
  }
  return mask;
}

Circuit prune(const ComputationalGraph& g, const Circuit& circuit) {
  if (circuit.graph_edges() != g.num_edges()) {
    throw ShapeError("circuit has " + std::to_string(circuit.graph_edges()) +
                     " edges, graph has " + std::to_string(g.num_edges()));
  }
  // On a DAG the fixpoint keeps exactly the member edges that lie on some
  // member path from input to logits.
  const std::size_t n = g.num_nodes();
  std::vector<bool> from_input(n, false), to_logits(n, false);
  from_input[g.input_node()] = true;
  to_logits[g.logits_node()] = true;

  const auto& edges = g.edges();
  // Edges are grouped by destination in computation order, so one forward
  // sweep settles forward reachability.
  for (EdgeIndex e = 0; e < edges.size(); ++e) {
    if (circuit.contains(e) && from_input[edges[e].src]) from_input[edges[e].dst] = true;
  }
  for (EdgeIndex e = edges.size(); e-- > 0;) {
    if (circuit.contains(e) && to_logits[edges[e].dst]) to_logits[edges[e].src] = true;
  }

  Circuit out(g.num_edges());
  for (EdgeIndex e = 0; e < edges.size(); ++e) {
    if (circuit.contains(e) && from_input[edges[e].src] && to_logits[edges[e].dst]) out.set(e);
  }
  return out;
}

}  // namespace eapig
