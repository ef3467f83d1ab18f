#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "eapig/graph.hpp"
#include "eapig/scoring.hpp"

namespace eapig {

inline constexpr const char* kToolVersion = "0.1.0";

/// Provenance carried by circuit files. `strategy` is greedy, topn,
/// threshold or empty for hand-made circuits.
struct CircuitMeta {
  std::string method;
  std::size_t m = 0;
  std::string loss;
  std::size_t n = 0;
  std::string strategy;
  bool pruned = false;
  std::string task;
  std::string dataset_hash;
  std::string tool_version = kToolVersion;
};

struct CircuitDocument {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  Circuit circuit;
  std::optional<std::vector<double>> scores;
  CircuitMeta meta;
};

/// {config:{n_layers,n_heads}, edges:[{src,dst,slot,score?,in_circuit}], meta:{...}}.
/// Every graph edge is listed in canonical order.
nlohmann::json circuit_to_json(const ComputationalGraph& g, const Circuit& circuit,
                               const std::vector<double>* scores, const CircuitMeta& meta);

/// Throws ParseError with a JSON pointer to the offending field.
CircuitDocument circuit_from_json(const nlohmann::json& doc);
/// Throws ParseError with line/column for malformed text.
CircuitDocument parse_circuit(const std::string& text);

void save_circuit(const std::filesystem::path& path, const ComputationalGraph& g,
                  const Circuit& circuit, const std::vector<double>* scores,
                  const CircuitMeta& meta);
CircuitDocument load_circuit(const std::filesystem::path& path);

/// Graphviz digraph with one statement per member edge.
std::string circuit_to_dot(const ComputationalGraph& g, const Circuit& circuit,
                           const std::vector<double>* scores = nullptr);

struct ScoresProvenance {
  std::string task;
  std::string dataset_hash;
  std::string tool_version = kToolVersion;
};

struct ScoresDocument {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  EdgeScores scores;
  ScoresProvenance provenance;
};

nlohmann::json scores_to_json(const ComputationalGraph& g, const EdgeScores& scores,
                              const ScoresProvenance& provenance);
ScoresDocument scores_from_json(const nlohmann::json& doc);
ScoresDocument load_scores(const std::filesystem::path& path);
void save_scores(const std::filesystem::path& path, const ComputationalGraph& g,
                 const EdgeScores& scores, const ScoresProvenance& provenance);

/// Columns src,dst,slot,score,method,m in canonical edge order.
void write_scores_csv(std::ostream& out, const ComputationalGraph& g, const EdgeScores& scores);

/// 64-bit FNV-1a of the file's bytes as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

/// Formats a double so that it parses back to the same value.
std::string format_double(double v);

}  // namespace eapig
