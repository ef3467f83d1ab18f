#include "eapig/faithfulness.hpp"

#include "eapig/error.hpp"
#include "eapig/numeric.hpp"

namespace eapig {

template <typename T>
double run_with_circuit(const Transformer<T>& model, const Circuit& circuit,
                        const std::vector<TaskExample>& dataset, MetricSpec metric,
                        std::size_t batch_size) {
  const auto& g = model.graph();
  if (circuit.graph_edges() != g.num_edges()) {
    throw ShapeError("circuit covers " + std::to_string(circuit.graph_edges()) +
                     " edges but the model graph has " + std::to_string(g.num_edges()));
  }
  if (dataset.empty()) throw Error("circuit evaluation needs a nonempty dataset");
  std::vector<double> values;
  values.reserve(dataset.size());
  for (const auto& batch : make_batches(dataset, batch_size)) {
    const auto corrupted = model.forward(batch.corrupted);
    const auto iv = corrupt_outside(g, circuit, corrupted);
    const auto patched = model.forward(batch.clean, iv);
    const auto m = batch_metrics(patched.logits, batch, metric.kind);
    values.insert(values.end(), m.begin(), m.end());
  }
  return pairwise_sum(values) / double(values.size());
}

template <typename T>
FaithfulnessReport faithfulness(const Transformer<T>& model, const Circuit& circuit,
                                const std::vector<TaskExample>& dataset, MetricSpec metric,
                                const Baselines& bl, std::size_t batch_size) {
  FaithfulnessReport r;
  r.raw = run_with_circuit(model, circuit, dataset, metric, batch_size);
  r.b = bl.b;
  r.b_prime = bl.b_prime;
  r.normalized = normalize_faithfulness(r.raw, bl);
  return r;
}

template <typename T>
FaithfulnessReport faithfulness(const Transformer<T>& model, const Circuit& circuit,
                                const std::vector<TaskExample>& dataset, MetricSpec metric,
                                std::size_t batch_size) {
  return faithfulness(model, circuit, dataset, metric,
                      baselines(model, dataset, metric, batch_size), batch_size);
}

template <typename T>
std::vector<std::vector<double>> cross_task_faithfulness(const Transformer<T>& model,
                                                         const std::vector<Circuit>& circuits,
                                                         const std::vector<Task>& tasks,
                                                         std::size_t batch_size) {
  if (circuits.size() != tasks.size()) {
    throw Error("cross-task faithfulness needs one circuit per task (" +
                std::to_string(circuits.size()) + " circuits, " + std::to_string(tasks.size()) +
                " tasks)");
  }
  const std::size_t n = tasks.size();
  std::vector<std::vector<double>> raw(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    const auto bl = baselines(model, tasks[j].dataset, tasks[j].metric, batch_size);
    for (std::size_t i = 0; i < n; ++i) {
      raw[i][j] =
          faithfulness(model, circuits[i], tasks[j].dataset, tasks[j].metric, bl, batch_size)
              .normalized;
    }
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    if (raw[j][j] == 0.0) {
      throw DegenerateTaskError("circuit for task '" + tasks[j].name +
                                "' has zero faithfulness on its own task");
    }
    for (std::size_t i = 0; i < n; ++i) out[i][j] = i == j ? 1.0 : raw[i][j] / raw[j][j];
  }
  return out;
}

template <typename T>
std::vector<CurvePoint> faithfulness_curve(const Transformer<T>& model,
                                           const std::vector<SweepPoint>& points,
                                           const std::vector<TaskExample>& dataset,
                                           MetricSpec metric, std::size_t batch_size) {
  const auto bl = baselines(model, dataset, metric, batch_size);
  std::vector<CurvePoint> out;
  for (const auto& p : points) {
    out.push_back({p.n, p.circuit.size(),
                   faithfulness(model, p.circuit, dataset, metric, bl, batch_size).normalized});
  }
  return out;
}

#define EAPIG_INSTANTIATE(T)                                                                     \
  template double run_with_circuit(const Transformer<T>&, const Circuit&,                       \
                                   const std::vector<TaskExample>&, MetricSpec, std::size_t);   \
  template FaithfulnessReport faithfulness(const Transformer<T>&, const Circuit&,               \
                                           const std::vector<TaskExample>&, MetricSpec,         \
                                           std::size_t);                                        \
  template FaithfulnessReport faithfulness(const Transformer<T>&, const Circuit&,               \
                                           const std::vector<TaskExample>&, MetricSpec,         \
                                           const Baselines&, std::size_t);                      \
  template std::vector<std::vector<double>> cross_task_faithfulness(                            \
      const Transformer<T>&, const std::vector<Circuit>&, const std::vector<Task>&, std::size_t); \
  template std::vector<CurvePoint> faithfulness_curve(const Transformer<T>&,                    \
                                                      const std::vector<SweepPoint>&,           \
                                                      const std::vector<TaskExample>&,          \
                                                      MetricSpec, std::size_t);
EAPIG_INSTANTIATE(float)
EAPIG_INSTANTIATE(double)
#undef EAPIG_INSTANTIATE

}  // namespace eapig
