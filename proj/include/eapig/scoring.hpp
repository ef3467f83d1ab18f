#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "eapig/model.hpp"
#include "eapig/task.hpp"

namespace eapig {

enum class Method {
  Patching,          // exact per-edge activation patching
  Eap,               // (z' - z) . grad L(clean)
  EapIg,             // gradients averaged along the embedding-space path
  EapIgActivations,  // path taken in each sublayer group's outputs in turn
  EapIgPartial,      // every edge mixed between corrupted and live at once
  CleanCorrupted,    // mean of clean and corrupted gradients
};

std::string to_string(Method m);
/// "patching", "eap", "eap-ig", "eap-ig-act", "eap-ig-partial", "clean-corrupted".
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();

struct ScoringConfig {
  LossSpec loss;
  std::size_t ig_steps = 5;
  std::size_t batch_size = 16;
  std::optional<double> threshold;  // selection cutoff for callers; not used when scoring
  unsigned threads = 0;  // 0: hardware concurrency
};

/// One score per edge in canonical order, averaged over examples. Scores
/// estimate L(edge corrupted) - L(clean).
struct EdgeScores {
  Method method = Method::Eap;
  LossSpec loss;
  std::size_t steps = 1;
  std::size_t n_examples = 0;
  std::vector<double> values;
};

template <typename T>
EdgeScores score_edges(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                       Method method, const ScoringConfig& config);

template <typename T>
EdgeScores score_activation_patching(const Transformer<T>& model,
                                     const std::vector<TaskExample>& dataset,
                                     const ScoringConfig& config) {
  return score_edges(model, dataset, Method::Patching, config);
}
template <typename T>
EdgeScores score_eap(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                     const ScoringConfig& config) {
  return score_edges(model, dataset, Method::Eap, config);
}
template <typename T>
EdgeScores score_eap_ig(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                        const ScoringConfig& config) {
  return score_edges(model, dataset, Method::EapIg, config);
}
template <typename T>
EdgeScores score_eap_ig_activations(const Transformer<T>& model,
                                    const std::vector<TaskExample>& dataset,
                                    const ScoringConfig& config) {
  return score_edges(model, dataset, Method::EapIgActivations, config);
}
template <typename T>
EdgeScores score_eap_ig_partial(const Transformer<T>& model,
                                const std::vector<TaskExample>& dataset,
                                const ScoringConfig& config) {
  return score_edges(model, dataset, Method::EapIgPartial, config);
}
template <typename T>
EdgeScores score_clean_corrupted(const Transformer<T>& model,
                                 const std::vector<TaskExample>& dataset,
                                 const ScoringConfig& config) {
  return score_edges(model, dataset, Method::CleanCorrupted, config);
}

/// Sublayer groups whose outputs are computed in parallel: the input node,
/// each layer's block of heads, each MLP. Logits are not a source.
std::vector<std::vector<NodeIndex>> parallel_groups(const ComputationalGraph& g);

}  // namespace eapig
