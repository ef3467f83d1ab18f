#include "eapig/io.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "eapig/error.hpp"

namespace eapig {

using json = nlohmann::json;

namespace {

json edge_fields(const ComputationalGraph& g, EdgeIndex e) {
  const auto id = g.edge_id(e);
  return json{{"src", id.src.name()}, {"dst", id.dst.name()}, {"slot", to_string(id.slot)}};
}

// Looks up a member of `obj`, reporting `pointer` on failure.
const json& field(const json& obj, const char* key, const std::string& pointer) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError("at " + pointer + ": missing field '" + key + "'");
  }
  return obj.at(key);
}

template <typename V>
V get_as(const json& j, const std::string& pointer) {
  try {
    return j.get<V>();
  } catch (const json::exception& e) {
    throw ParseError("at " + pointer + ": " + e.what());
  }
}

EdgeIndex resolve_edge(const ComputationalGraph& g, const json& edge, const std::string& ptr) {
  EdgeId id;
  try {
    id.src = NodeId::parse(get_as<std::string>(field(edge, "src", ptr), ptr + "/src"));
    id.dst = NodeId::parse(get_as<std::string>(field(edge, "dst", ptr), ptr + "/dst"));
    id.slot = slot_from_string(get_as<std::string>(field(edge, "slot", ptr), ptr + "/slot"));
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    throw ParseError(msg.rfind("at ", 0) == 0 ? msg : "at " + ptr + ": " + msg);
  }
  auto e = g.find_edge(id);
  if (!e) {
    throw ParseError("at " + ptr + ": no edge " + id.src.name() + "->" + id.dst.name() + " (" +
                     to_string(id.slot) + ") in this graph");
  }
  return *e;
}

std::pair<std::size_t, std::size_t> read_shape(const json& doc) {
  const auto& cfg = field(doc, "config", "");
  return {get_as<std::size_t>(field(cfg, "n_layers", "/config"), "/config/n_layers"),
          get_as<std::size_t>(field(cfg, "n_heads", "/config"), "/config/n_heads")};
}

json parse_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(what + ": " + e.what());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json circuit_to_json(const ComputationalGraph& g, const Circuit& circuit,
                     const std::vector<double>* scores, const CircuitMeta& meta) {
  if (circuit.graph_edges() != g.num_edges()) throw ShapeError("circuit does not match graph");
  if (scores && scores->size() != g.num_edges()) throw ShapeError("scores do not match graph");
  json edges = json::array();
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    json entry = edge_fields(g, e);
    if (scores) entry["score"] = (*scores)[e];
    entry["in_circuit"] = circuit.contains(e);
    edges.push_back(std::move(entry));
  }
  return json{{"config", {{"n_layers", g.n_layers()}, {"n_heads", g.n_heads()}}},
              {"edges", std::move(edges)},
              {"meta",
               {{"method", meta.method},
                {"m", meta.m},
                {"loss", meta.loss},
                {"n", meta.n},
                {"strategy", meta.strategy},
                {"pruned", meta.pruned},
                {"task", meta.task},
                {"dataset_hash", meta.dataset_hash},
                {"tool_version", meta.tool_version}}}};
}

CircuitDocument circuit_from_json(const json& doc) {
  CircuitDocument out;
  std::tie(out.n_layers, out.n_heads) = read_shape(doc);
  const ComputationalGraph g(out.n_layers, out.n_heads);
  out.circuit = Circuit(g.num_edges());

  const auto& edges = field(doc, "edges", "");
  if (!edges.is_array()) throw ParseError("at /edges: expected an array");
  std::vector<double> scores(g.num_edges(), 0.0);
  bool any_score = false;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string ptr = "/edges/" + std::to_string(i);
    const EdgeIndex e = resolve_edge(g, edges[i], ptr);
    if (edges[i].contains("score")) {
      scores[e] = get_as<double>(edges[i]["score"], ptr + "/score");
      any_score = true;
    }
    out.circuit.set(e, get_as<bool>(field(edges[i], "in_circuit", ptr), ptr + "/in_circuit"));
  }
  if (any_score) out.scores = std::move(scores);

  if (doc.contains("meta")) {
    const auto& meta = doc["meta"];
    out.meta.method = meta.value("method", std::string());
    out.meta.m = meta.value("m", std::size_t{0});
    out.meta.loss = meta.value("loss", std::string());
    out.meta.n = meta.value("n", std::size_t{0});
    out.meta.strategy = meta.value("strategy", std::string());
    out.meta.pruned = meta.value("pruned", false);
    out.meta.task = meta.value("task", std::string());
    out.meta.dataset_hash = meta.value("dataset_hash", std::string());
    out.meta.tool_version = meta.value("tool_version", std::string());
  }
  return out;
}

CircuitDocument parse_circuit(const std::string& text) {
  return circuit_from_json(parse_text(text, "circuit document"));
}

void save_circuit(const std::filesystem::path& path, const ComputationalGraph& g,
                  const Circuit& circuit, const std::vector<double>* scores,
                  const CircuitMeta& meta) {
  write_text(path, circuit_to_json(g, circuit, scores, meta).dump(1) + "\n");
}

CircuitDocument load_circuit(const std::filesystem::path& path) {
  try {
    return parse_circuit(read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string circuit_to_dot(const ComputationalGraph& g, const Circuit& circuit,
                           const std::vector<double>* scores) {
  std::ostringstream out;
  out << "digraph circuit {\n  rankdir=BT;\n";
  const auto mask = circuit.node_mask(g);
  for (NodeIndex v = 0; v < g.num_nodes(); ++v) {
    if (mask[v]) out << "  \"" << g.nodes()[v].name() << "\";\n";
  }
  for (EdgeIndex e : circuit.members()) {
    const auto id = g.edge_id(e);
    out << "  \"" << id.src.name() << "\" -> \"" << id.dst.name() << "\" [label=\""
        << (id.slot == Slot::Single ? std::string() : to_string(id.slot));
    if (scores) out << (id.slot == Slot::Single ? "" : " ") << format_double((*scores)[e]);
    out << "\"];\n";
  }
  out << "}\n";
  return out.str();
}

json scores_to_json(const ComputationalGraph& g, const EdgeScores& scores,
                    const ScoresProvenance& prov) {
  if (scores.values.size() != g.num_edges()) throw ShapeError("scores do not match graph");
  json edges = json::array();
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    json entry = edge_fields(g, e);
    entry["score"] = scores.values[e];
    edges.push_back(std::move(entry));
  }
  return json{{"config", {{"n_layers", g.n_layers()}, {"n_heads", g.n_heads()}}},
              {"meta",
               {{"method", to_string(scores.method)},
                {"m", scores.steps},
                {"loss", to_string(scores.loss)},
                {"n_examples", scores.n_examples},
                {"task", prov.task},
                {"dataset_hash", prov.dataset_hash},
                {"tool_version", prov.tool_version}}},
              {"edges", std::move(edges)}};
}

ScoresDocument scores_from_json(const json& doc) {
  ScoresDocument out;
  std::tie(out.n_layers, out.n_heads) = read_shape(doc);
  const ComputationalGraph g(out.n_layers, out.n_heads);

  const auto& meta = field(doc, "meta", "");
  try {
    out.scores.method = method_from_string(get_as<std::string>(field(meta, "method", "/meta"), "/meta/method"));
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("at /meta/method: ") + e.what());
  }
  out.scores.steps = get_as<std::size_t>(field(meta, "m", "/meta"), "/meta/m");
  out.scores.n_examples = meta.value("n_examples", std::size_t{0});
  const auto loss = meta.value("loss", std::string("neg-logit-diff"));
  if (loss == "kl") {
    out.scores.loss = {LossKind::Kl, MetricKind::Kl};
  } else if (loss.rfind("neg-", 0) == 0) {
    try {
      out.scores.loss = {LossKind::NegMetric, metric_from_string(loss.substr(4))};
    } catch (const Error& e) {
      throw ParseError(std::string("at /meta/loss: ") + e.what());
    }
  } else {
    throw ParseError("at /meta/loss: unknown loss '" + loss + "'");
  }
  out.provenance.task = meta.value("task", std::string());
  out.provenance.dataset_hash = meta.value("dataset_hash", std::string());
  out.provenance.tool_version = meta.value("tool_version", std::string());

  const auto& edges = field(doc, "edges", "");
  if (!edges.is_array()) throw ParseError("at /edges: expected an array");
  out.scores.values.assign(g.num_edges(), 0.0);
  std::vector<bool> seen(g.num_edges(), false);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string ptr = "/edges/" + std::to_string(i);
    const EdgeIndex e = resolve_edge(g, edges[i], ptr);
    out.scores.values[e] = get_as<double>(field(edges[i], "score", ptr), ptr + "/score");
    seen[e] = true;
  }
  for (EdgeIndex e = 0; e < seen.size(); ++e) {
    if (!seen[e]) {
      const auto id = g.edge_id(e);
      throw ParseError("at /edges: no score for edge " + id.src.name() + "->" + id.dst.name() +
                       " (" + to_string(id.slot) + ")");
    }
  }
  return out;
}

ScoresDocument load_scores(const std::filesystem::path& path) {
  try {
    return scores_from_json(parse_text(read_text(path), "scores document"));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_scores(const std::filesystem::path& path, const ComputationalGraph& g,
                 const EdgeScores& scores, const ScoresProvenance& provenance) {
  write_text(path, scores_to_json(g, scores, provenance).dump(1) + "\n");
}

void write_scores_csv(std::ostream& out, const ComputationalGraph& g, const EdgeScores& scores) {
  out << "src,dst,slot,score,method,m\n";
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    const auto id = g.edge_id(e);
    out << id.src.name() << ',' << id.dst.name() << ',' << to_string(id.slot) << ','
        << format_double(scores.values[e]) << ',' << to_string(scores.method) << ','
        << scores.steps << '\n';
  }
}

std::string file_hash(const std::filesystem::path& path) {
  const std::string bytes = read_text(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace eapig
