#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "eapig/faithfulness.hpp"
#include "eapig/task.hpp"
#include "eapig/weights.hpp"

namespace eapig {

/// Gaussian weights with std 1/sqrt(fan_in); layernorm scales near 1.
WeightStore random_weights(const ModelConfig& config, std::uint64_t seed);

/// Random token pairs that differ in a few positions, with random disjoint
/// answer/wrong sets.
std::vector<TaskExample> random_dataset(const ModelConfig& config, std::size_t n_examples,
                                        std::size_t seq_len, std::uint64_t seed);

/// A hand-wired 2-layer model carrying two independent tasks.
///
/// Task "mlp0": the last token's sign feature is read only by MLP 0, which
/// writes a logit-difference channel; the path input -> m0 -> logits carries
/// the whole signal. Task "mlp1" does the same through MLP 1 with a separate
/// feature and channel. Heads and the remaining MLP units add small
/// task-irrelevant noise.
struct PlantedBundle {
  ModelBundle model;
  Task primary;    // through m0
  Task secondary;  // through m1
};

PlantedBundle planted_bundle(std::uint64_t seed = 7, std::size_t n_examples = 32);

/// Copy of the model with identity MLP activation, no layernorm and zeroed
/// query/key projections, which makes every node affine in its inputs.
ModelBundle linearized(const ModelBundle& bundle);

}  // namespace eapig
