#include "eapig/scoring.hpp"

#include <cmath>

#include "eapig/error.hpp"
#include "eapig/numeric.hpp"

namespace eapig {

std::string to_string(Method m) {
  switch (m) {
    case Method::Patching: return "patching";
    case Method::Eap: return "eap";
    case Method::EapIg: return "eap-ig";
    case Method::EapIgActivations: return "eap-ig-act";
    case Method::EapIgPartial: return "eap-ig-partial";
    case Method::CleanCorrupted: return "clean-corrupted";
  }
  return {};
}

Method method_from_string(const std::string& s) {
  for (Method m : all_methods()) {
    if (to_string(m) == s) return m;
  }
  throw Error("unknown scoring method '" + s + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {Method::Patching,         Method::Eap,
                                              Method::EapIg,            Method::EapIgActivations,
                                              Method::EapIgPartial,     Method::CleanCorrupted};
  return methods;
}

std::vector<std::vector<NodeIndex>> parallel_groups(const ComputationalGraph& g) {
  std::vector<std::vector<NodeIndex>> groups = {{g.input_node()}};
  for (std::size_t l = 0; l < g.n_layers(); ++l) {
    std::vector<NodeIndex> heads;
    for (std::size_t h = 0; h < g.n_heads(); ++h) heads.push_back(g.head_node(l, h));
    groups.push_back(std::move(heads));
    groups.push_back({g.mlp_node(l)});
  }
  return groups;
}

namespace {

/// Running sum of slot gradients over several backward passes.
class GradientSum {
 public:
  explicit GradientSum(std::size_t n_slots) : sums_(n_slots) {}

  void add(const GradientCache<double>& g) { add_impl(g); }
  void add(const GradientCache<float>& g) { add_impl(g); }

  void scale(double f) {
    for (auto& s : sums_) {
      for (double& x : s) x *= f;
    }
  }
  const std::vector<double>& slot(SlotIndex s) const { return sums_[s]; }

 private:
  template <typename T>
  void add_impl(const GradientCache<T>& g) {
    for (std::size_t s = 0; s < sums_.size(); ++s) {
      const auto& t = g.at(s);
      if (sums_[s].empty()) sums_[s].assign(t.size(), 0.0);
      for (std::size_t i = 0; i < t.size(); ++i) sums_[s][i] += double(t[i]);
    }
  }

  std::vector<std::vector<double>> sums_;
};

template <typename T>
struct BatchState {
  const Batch* batch = nullptr;
  Tensor<T> emb_clean, emb_corrupt;
  ActivationCache<T> clean, corrupt;
  std::vector<std::vector<double>> diff;  // z'_u - z_u per source node
};

template <typename T>
BatchState<T> prepare(const Transformer<T>& model, const Batch& batch) {
  BatchState<T> st;
  st.batch = &batch;
  st.emb_clean = model.embed(batch.clean);
  st.emb_corrupt = model.embed(batch.corrupted);
  st.clean = model.forward(st.emb_clean);
  st.corrupt = model.forward(st.emb_corrupt);
  const auto& g = model.graph();
  st.diff.resize(g.num_nodes() - 1);
  for (NodeIndex u = 0; u + 1 < g.num_nodes(); ++u) {
    const auto& z = st.clean.output(u);
    const auto& zc = st.corrupt.output(u);
    auto& d = st.diff[u];
    d.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) d[i] = double(zc[i]) - double(z[i]);
  }
  return st;
}

// Fills out[e] for edges whose source is selected by `use_source`.
template <typename T, typename Pred>
void dot_scores(const ComputationalGraph& g, const BatchState<T>& st, const GradientSum& grads,
                Pred&& use_source, std::vector<double>& out) {
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    const auto& edge = g.edges()[e];
    if (!use_source(edge.src)) continue;
    out[e] = dot<double, double>(st.diff[edge.src], grads.slot(edge.slot));
  }
}

template <typename T>
std::vector<double> score_batch(const Transformer<T>& model, const BatchState<T>& st, Method method,
                                const ScoringConfig& cfg) {
  const auto& g = model.graph();
  const Batch& batch = *st.batch;
  const auto objective = make_objective<T>(cfg.loss, batch, &st.clean.logits);
  std::vector<double> scores(g.num_edges(), 0.0);
  const std::size_t m = cfg.ig_steps;
  auto all_sources = [](NodeIndex) { return true; };

  switch (method) {
    case Method::Patching: {
      const double base = objective(st.clean.logits, nullptr);
      parallel_for(
          g.num_edges(),
          [&](EdgeIndex e) {
            InterventionSet<T> iv;
            iv.patch(e, st.corrupt.shared_output(g.edges()[e].src));
            const auto patched = model.forward(st.emb_clean, iv);
            scores[e] = objective(patched.logits, nullptr) - base;
          },
          cfg.threads);
      return scores;
    }
    case Method::Eap: {
      GradientSum sum(g.num_slots());
      sum.add(model.node_input_gradients(st.emb_clean, objective).gradients);
      dot_scores(g, st, sum, all_sources, scores);
      return scores;
    }
    case Method::EapIg: {
      GradientSum sum(g.num_slots());
      for (std::size_t k = 1; k <= m; ++k) {
        const T alpha = T(k) / T(m);
        const auto emb = interpolate_embeddings(st.emb_clean, st.emb_corrupt, alpha);
        sum.add(model.node_input_gradients(emb, objective).gradients);
      }
      sum.scale(1.0 / double(m));
      dot_scores(g, st, sum, all_sources, scores);
      return scores;
    }
    case Method::CleanCorrupted: {
      GradientSum sum(g.num_slots());
      sum.add(model.node_input_gradients(st.emb_clean, objective).gradients);
      sum.add(model.node_input_gradients(st.emb_corrupt, objective).gradients);
      sum.scale(0.5);
      dot_scores(g, st, sum, all_sources, scores);
      return scores;
    }
    case Method::EapIgPartial: {
      GradientSum sum(g.num_slots());
      for (std::size_t k = 1; k <= m; ++k) {
        const T alpha = T(k) / T(m);
        InterventionSet<T> iv;
        for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
          iv.patch(e, st.corrupt.shared_output(g.edges()[e].src), alpha);
        }
        sum.add(model.node_input_gradients(st.emb_clean, objective, iv).gradients);
      }
      sum.scale(1.0 / double(m));
      dot_scores(g, st, sum, all_sources, scores);
      return scores;
    }
    case Method::EapIgActivations: {
      std::vector<bool> in_group(g.num_nodes());
      for (const auto& group : parallel_groups(g)) {
        std::fill(in_group.begin(), in_group.end(), false);
        for (NodeIndex u : group) in_group[u] = true;
        GradientSum sum(g.num_slots());
        for (std::size_t k = 1; k <= m; ++k) {
          const T alpha = T(k) / T(m);
          InterventionSet<T> iv;
          for (NodeIndex u : group) {
            auto mixed = std::make_shared<const Tensor<T>>(
                interpolate_embeddings(st.clean.output(u), st.corrupt.output(u), alpha));
            for (EdgeIndex e : g.out_edges(u)) iv.patch(e, mixed);
          }
          sum.add(model.node_input_gradients(st.emb_clean, objective, iv).gradients);
        }
        sum.scale(1.0 / double(m));
        dot_scores(g, st, sum, [&](NodeIndex u) { return bool(in_group[u]); }, scores);
      }
      return scores;
    }
  }
  return scores;
}

}  // namespace

template <typename T>
EdgeScores score_edges(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                       Method method, const ScoringConfig& cfg) {
  if (dataset.empty()) throw Error("scoring needs a nonempty dataset");
  if (cfg.ig_steps < 1) throw Error("ig_steps must be >= 1");
  if (cfg.loss.kind == LossKind::NegMetric && cfg.loss.metric == MetricKind::Kl) {
    throw Error("kl is a loss, not a task metric");
  }
  const auto& g = model.graph();
  const auto batches = make_batches(dataset, cfg.batch_size);
  const double n = double(dataset.size());

  // Per-batch contributions, weighted by batch share, combined pairwise per edge.
  std::vector<std::vector<double>> contrib(batches.size());
  auto run_batch = [&](std::size_t i) {
    const auto st = prepare(model, batches[i]);
    auto s = score_batch(model, st, method, cfg);
    const double w = double(batches[i].size()) / n;
    for (double& x : s) x *= w;
    contrib[i] = std::move(s);
  };
  if (method == Method::Patching) {
    for (std::size_t i = 0; i < batches.size(); ++i) run_batch(i);
  } else {
    parallel_for(batches.size(), run_batch, cfg.threads);
  }

  EdgeScores out;
  out.method = method;
  out.loss = cfg.loss;
  out.steps = (method == Method::EapIg || method == Method::EapIgActivations ||
               method == Method::EapIgPartial)
                  ? cfg.ig_steps
                  : 1;
  out.n_examples = dataset.size();
  out.values.resize(g.num_edges());
  std::vector<double> column(batches.size());
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    for (std::size_t i = 0; i < batches.size(); ++i) column[i] = contrib[i][e];
    out.values[e] = pairwise_sum(column);
    if (!std::isfinite(out.values[e])) {
      const auto id = g.edge_id(e);
      throw NumericError("non-finite score for edge " + id.src.name() + "->" + id.dst.name());
    }
  }
  return out;
}

template EdgeScores score_edges(const Transformer<float>&, const std::vector<TaskExample>&, Method,
                                const ScoringConfig&);
template EdgeScores score_edges(const Transformer<double>&, const std::vector<TaskExample>&, Method,
                                const ScoringConfig&);

}  // namespace eapig
