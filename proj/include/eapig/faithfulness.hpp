#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "eapig/graph.hpp"
#include "eapig/model.hpp"
#include "eapig/search.hpp"
#include "eapig/task.hpp"

namespace eapig {

/// A dataset together with the metric it is reported in.
struct Task {
  std::string name;
  std::vector<TaskExample> dataset;
  MetricSpec metric;
};

struct FaithfulnessReport {
  double raw = 0.0;
  double b = 0.0;
  double b_prime = 0.0;
  double normalized = 0.0;
};

/// Dataset-mean metric when every non-member edge carries its source's
/// corrupted-run output and member edges carry the live output.
template <typename T>
double run_with_circuit(const Transformer<T>& model, const Circuit& circuit,
                        const std::vector<TaskExample>& dataset, MetricSpec metric,
                        std::size_t batch_size = 32);

template <typename T>
FaithfulnessReport faithfulness(const Transformer<T>& model, const Circuit& circuit,
                                const std::vector<TaskExample>& dataset, MetricSpec metric,
                                std::size_t batch_size = 32);

/// Same, reusing precomputed baselines.
template <typename T>
FaithfulnessReport faithfulness(const Transformer<T>& model, const Circuit& circuit,
                                const std::vector<TaskExample>& dataset, MetricSpec metric,
                                const Baselines& baselines, std::size_t batch_size = 32);

/// Entry (i, j): faithfulness of circuits[i] on tasks[j] divided by that of
/// circuits[j] on tasks[j]. circuits[i] is the circuit found for tasks[i].
template <typename T>
std::vector<std::vector<double>> cross_task_faithfulness(const Transformer<T>& model,
                                                         const std::vector<Circuit>& circuits,
                                                         const std::vector<Task>& tasks,
                                                         std::size_t batch_size = 32);

struct CurvePoint {
  std::size_t n = 0;
  std::size_t edges = 0;
  double normalized = 0.0;
};

/// Normalized faithfulness of each sweep circuit.
template <typename T>
std::vector<CurvePoint> faithfulness_curve(const Transformer<T>& model,
                                           const std::vector<SweepPoint>& points,
                                           const std::vector<TaskExample>& dataset,
                                           MetricSpec metric, std::size_t batch_size = 32);

}  // namespace eapig
