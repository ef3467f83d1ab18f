#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "eapig/config.hpp"
#include "eapig/graph.hpp"
#include "eapig/tensor.hpp"
#include "eapig/weights.hpp"

namespace eapig {

/// Token ids, row-major [batch, seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;

  int at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

/// Per-node outputs z_u of one forward pass, indexed by NodeIndex (the
/// logits node has no entry), plus the final logits [batch, seq, vocab].
template <typename T>
class ActivationCache {
 public:
  ActivationCache() = default;
  explicit ActivationCache(std::size_t n_nodes) : outputs_(n_nodes) {}

  const Tensor<T>& output(NodeIndex node) const { return *outputs_.at(node); }
  std::shared_ptr<const Tensor<T>> shared_output(NodeIndex node) const { return outputs_.at(node); }
  void set_output(NodeIndex node, Tensor<T> t) {
    outputs_.at(node) = std::make_shared<const Tensor<T>>(std::move(t));
  }
  std::size_t num_outputs() const { return outputs_.size(); }

  Tensor<T> logits;

 private:
  std::vector<std::shared_ptr<const Tensor<T>>> outputs_;
};

/// dL/d(summed input) for every destination slot, indexed by SlotIndex.
template <typename T>
struct GradientCache {
  std::vector<Tensor<T>> slots;
  const Tensor<T>& at(SlotIndex s) const { return slots.at(s); }
};

/// Replacement of one edge's contribution: source + keep * (live - source).
/// keep = 0 is a full patch, keep = 1 leaves the edge live.
template <typename T>
struct EdgePatch {
  std::shared_ptr<const Tensor<T>> source;
  T keep = T(0);
};

/// Edge-level interventions applied on the destination side, slot by slot.
/// Slot offsets are added to a slot's summed input after the edge sum.
template <typename T>
class InterventionSet {
 public:
  void patch(EdgeIndex e, std::shared_ptr<const Tensor<T>> source, T keep = T(0)) {
    patches_[e] = EdgePatch<T>{std::move(source), keep};
  }
  void offset(SlotIndex s, std::shared_ptr<const Tensor<T>> delta) { offsets_[s] = std::move(delta); }

  const EdgePatch<T>* find(EdgeIndex e) const {
    if (patches_.empty()) return nullptr;
    auto it = patches_.find(e);
    return it == patches_.end() ? nullptr : &it->second;
  }
  const Tensor<T>* slot_offset(SlotIndex s) const {
    if (offsets_.empty()) return nullptr;
    auto it = offsets_.find(s);
    return it == offsets_.end() ? nullptr : it->second.get();
  }

  template <typename F>
  void for_each_patch(F&& f) const {
    for (const auto& [e, p] : patches_) f(e, p);
  }

  bool empty() const { return patches_.empty() && offsets_.empty(); }
  std::size_t num_patches() const { return patches_.size(); }

  /// Throws InputError on unknown edges/slots or mismatched shapes.
  void validate(const ComputationalGraph& g, const std::vector<std::size_t>& activation_shape) const;

 private:
  std::unordered_map<EdgeIndex, EdgePatch<T>> patches_;
  std::unordered_map<SlotIndex, std::shared_ptr<const Tensor<T>>> offsets_;
};

/// Patches every non-member edge of `circuit` with the source node's output
/// from `corrupted`.
template <typename T>
InterventionSet<T> corrupt_outside(const ComputationalGraph& g, const Circuit& circuit,
                                   const ActivationCache<T>& corrupted);

/// Returns the loss for `logits` and, when `grad` is non-null, writes
/// dL/dlogits into it (same shape as logits).
template <typename T>
using LogitObjective = std::function<double(const Tensor<T>& logits, Tensor<T>* grad)>;

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  ActivationCache<T> activations;
  GradientCache<T> gradients;
};

/// z' + alpha (z - z'). alpha = 0 and alpha = 1 return the endpoints exactly.
template <typename T>
Tensor<T> interpolate_embeddings(const Tensor<T>& z, const Tensor<T>& z_prime, T alpha);

/// Decoder-only transformer evaluated node by node over the residual-stream
/// graph. Weights are converted to T once; all methods are const and
/// re-entrant.
template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& config, const WeightStore& weights);
  explicit Transformer(const ModelBundle& bundle) : Transformer(bundle.config, bundle.weights) {}

  const ModelConfig& config() const { return config_; }
  const ComputationalGraph& graph() const { return graph_; }

  /// Token plus learned positional embedding: the input node's output.
  Tensor<T> embed(const TokenBatch& tokens) const;

  ActivationCache<T> forward(const Tensor<T>& embeddings,
                             const InterventionSet<T>& interventions = {}) const;
  ActivationCache<T> forward(const TokenBatch& tokens,
                             const InterventionSet<T>& interventions = {}) const {
    return forward(embed(tokens), interventions);
  }

  /// Reverse-mode gradients of `loss` with respect to every slot's summed
  /// input, through the same intervened forward pass.
  BackwardResult<T> node_input_gradients(const Tensor<T>& embeddings, const LogitObjective<T>& loss,
                                         const InterventionSet<T>& interventions = {}) const;

 private:
  struct Layer {
    std::vector<T> ln1_w, ln1_b, W_Q, b_Q, W_K, b_K, W_V, b_V, W_O, b_O;
    std::vector<T> ln2_w, ln2_b, W_in, b_in, W_out, b_out;
  };
  struct Trace;

  ActivationCache<T> run(const Tensor<T>& embeddings, const InterventionSet<T>& iv, Trace* trace) const;

  ModelConfig config_;
  ComputationalGraph graph_;
  std::vector<T> W_E_, W_pos_, lnf_w_, lnf_b_, W_U_, b_U_;
  std::vector<Layer> layers_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace eapig
