#include "eapig/task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "eapig/error.hpp"
#include "eapig/log.hpp"
#include "eapig/numeric.hpp"

namespace eapig {

using json = nlohmann::json;

void TaskExample::validate() const {
  if (clean.size() != corrupted.size()) {
    throw LoadError("clean and corrupted inputs have lengths " + std::to_string(clean.size()) +
                    " and " + std::to_string(corrupted.size()) +
                    "; integrated-gradients interpolation mixes them position by position, "
                    "so pairs must be token-length matched");
  }
  if (clean.empty()) throw LoadError("example has an empty token sequence");
  if (answers.empty()) throw LoadError("example has an empty answer set");
  const std::set<int> a(answers.begin(), answers.end());
  for (int w : wrongs) {
    if (a.count(w)) throw LoadError("token " + std::to_string(w) + " is both answer and wrong");
  }
  if (eval_position >= clean.size()) {
    throw LoadError("eval_position " + std::to_string(eval_position) + " outside sequence of length " +
                    std::to_string(clean.size()));
  }
}

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::LogitDiff: return "logit-diff";
    case MetricKind::ProbDiff: return "prob-diff";
    case MetricKind::Kl: return "kl";
  }
  return {};
}

MetricKind metric_from_string(const std::string& s) {
  if (s == "logit-diff") return MetricKind::LogitDiff;
  if (s == "prob-diff") return MetricKind::ProbDiff;
  if (s == "kl") return MetricKind::Kl;
  throw Error("unknown metric '" + s + "'");
}

std::string to_string(const LossSpec& l) {
  return l.kind == LossKind::Kl ? "kl" : "neg-" + to_string(l.metric);
}

LossSpec metric_to_loss(MetricSpec spec) {
  if (spec.kind == MetricKind::Kl) return {LossKind::Kl, MetricKind::Kl};
  return {LossKind::NegMetric, spec.kind};
}

TaskExample example_from_json(const json& j) {
  TaskExample ex;
  j.at("clean").get_to(ex.clean);
  j.at("corrupted").get_to(ex.corrupted);
  j.at("answers").get_to(ex.answers);
  if (j.contains("wrongs")) j.at("wrongs").get_to(ex.wrongs);
  if (j.contains("eval_position") && !j["eval_position"].is_null()) {
    ex.eval_position = j["eval_position"].get<std::size_t>();
  } else {
    ex.eval_position = ex.clean.empty() ? 0 : ex.clean.size() - 1;
  }
  ex.validate();
  return ex;
}

json example_to_json(const TaskExample& ex) {
  return json{{"clean", ex.clean},
              {"corrupted", ex.corrupted},
              {"answers", ex.answers},
              {"wrongs", ex.wrongs},
              {"eval_position", ex.eval_position}};
}

std::vector<TaskExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open dataset " + path.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    try {
      out.push_back(example_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty()) warn("dataset " + path.string() + " is empty");
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<TaskExample>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
  for (double& x : p) x /= sum;
  return p;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return s;
}

namespace {

void check_ids(const TaskExample& ex, std::size_t vocab) {
  for (const auto* set : {&ex.answers, &ex.wrongs}) {
    for (int id : *set) {
      if (id < 0 || std::size_t(id) >= vocab) {
        throw InputError("answer/wrong id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(vocab));
      }
    }
  }
}

template <typename T>
std::vector<double> row_at(const Tensor<T>& logits, std::size_t b, std::size_t pos) {
  const std::size_t S = logits.dim(1), V = logits.dim(2);
  const T* row = logits.data() + (b * S + pos) * V;
  return std::vector<double>(row, row + V);
}

}  // namespace

template <typename T>
double compute_metric(std::span<const T> vocab_logits, const TaskExample& ex, MetricKind kind) {
  check_ids(ex, vocab_logits.size());
  switch (kind) {
    case MetricKind::LogitDiff: {
      double a = 0.0, w = 0.0;
      for (int id : ex.answers) a += double(vocab_logits[id]);
      for (int id : ex.wrongs) w += double(vocab_logits[id]);
      a /= double(ex.answers.size());
      if (!ex.wrongs.empty()) w /= double(ex.wrongs.size());
      return a - w;
    }
    case MetricKind::ProbDiff: {
      std::vector<double> l(vocab_logits.begin(), vocab_logits.end());
      const auto p = softmax(l);
      double m = 0.0;
      for (int id : ex.answers) m += p[id];
      for (int id : ex.wrongs) m -= p[id];
      return m;
    }
    case MetricKind::Kl: break;
  }
  throw Error("kl is a loss, not a task metric");
}

std::vector<Batch> make_batches(const std::vector<TaskExample>& dataset, std::size_t batch_size) {
  if (batch_size == 0) batch_size = 1;
  // Group by length in order of first appearance, then chunk.
  std::vector<std::size_t> lengths;
  std::map<std::size_t, std::vector<const TaskExample*>> by_length;
  for (const auto& ex : dataset) {
    ex.validate();
    auto [it, inserted] = by_length.try_emplace(ex.clean.size());
    if (inserted) lengths.push_back(ex.clean.size());
    it->second.push_back(&ex);
  }
  std::vector<Batch> out;
  for (std::size_t len : lengths) {
    const auto& group = by_length[len];
    for (std::size_t start = 0; start < group.size(); start += batch_size) {
      Batch b;
      const std::size_t end = std::min(group.size(), start + batch_size);
      b.examples.assign(group.begin() + std::ptrdiff_t(start), group.begin() + std::ptrdiff_t(end));
      b.clean = {b.examples.size(), len, {}};
      b.corrupted = {b.examples.size(), len, {}};
      for (const auto* ex : b.examples) {
        b.clean.ids.insert(b.clean.ids.end(), ex->clean.begin(), ex->clean.end());
        b.corrupted.ids.insert(b.corrupted.ids.end(), ex->corrupted.begin(), ex->corrupted.end());
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

template <typename T>
std::vector<double> batch_metrics(const Tensor<T>& logits, const Batch& batch, MetricKind kind) {
  std::vector<double> out(batch.size());
  const std::size_t S = logits.dim(1), V = logits.dim(2);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto* ex = batch.examples[b];
    std::span<const T> row(logits.data() + (b * S + ex->eval_position) * V, V);
    out[b] = compute_metric(row, *ex, kind);
  }
  return out;
}

template <typename T>
LogitObjective<T> make_objective(const LossSpec& loss, const Batch& batch,
                                 const Tensor<T>* clean_logits) {
  if (loss.kind == LossKind::Kl) {
    if (!clean_logits) throw Error("kl loss needs the clean-run logits");
    std::vector<std::vector<double>> reference(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      reference[b] = softmax(row_at(*clean_logits, b, batch.examples[b]->eval_position));
    }
    return [reference = std::move(reference), &batch](const Tensor<T>& logits, Tensor<T>* grad) {
      const std::size_t S = logits.dim(1), V = logits.dim(2);
      const double inv_b = 1.0 / double(batch.size());
      double total = 0.0;
      if (grad) *grad = Tensor<T>(logits.shape());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t pos = batch.examples[b]->eval_position;
        const auto q = softmax(row_at(logits, b, pos));
        total += kl_divergence(reference[b], q);
        if (grad) {
          T* g = grad->data() + (b * S + pos) * V;
          for (std::size_t j = 0; j < V; ++j) g[j] = T((q[j] - reference[b][j]) * inv_b);
        }
      }
      return total * inv_b;
    };
  }

  const MetricKind kind = loss.metric;
  if (kind == MetricKind::Kl) throw Error("kl is a loss, not a task metric");
  return [kind, &batch](const Tensor<T>& logits, Tensor<T>* grad) {
    const std::size_t S = logits.dim(1), V = logits.dim(2);
    const double inv_b = 1.0 / double(batch.size());
    double total = 0.0;
    if (grad) *grad = Tensor<T>(logits.shape());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const TaskExample& ex = *batch.examples[b];
      const std::size_t pos = ex.eval_position;
      std::span<const T> row(logits.data() + (b * S + pos) * V, V);
      const double m = compute_metric(row, ex, kind);
      total -= m;
      if (!grad) continue;
      T* g = grad->data() + (b * S + pos) * V;
      if (kind == MetricKind::LogitDiff) {
        for (int id : ex.answers) g[id] -= T(inv_b / double(ex.answers.size()));
        for (int id : ex.wrongs) g[id] += T(inv_b / double(ex.wrongs.size()));
      } else {
        // dM/dl_j = p_j (c_j - M), c_j = +1 for answers, -1 for wrongs.
        const auto p = softmax(row_at(logits, b, pos));
        std::vector<double> c(V, 0.0);
        for (int id : ex.answers) c[id] = 1.0;
        for (int id : ex.wrongs) c[id] = -1.0;
        for (std::size_t j = 0; j < V; ++j) g[j] -= T(inv_b * p[j] * (c[j] - m));
      }
    }
    return total * inv_b;
  };
}

template <typename T>
std::vector<ExampleMetric> per_example_metrics(const Transformer<T>& model,
                                               const std::vector<TaskExample>& dataset,
                                               MetricSpec metric, std::size_t batch_size) {
  std::vector<ExampleMetric> out(dataset.size());
  for (const auto& batch : make_batches(dataset, batch_size)) {
    const auto clean = batch_metrics(model.forward(batch.clean).logits, batch, metric.kind);
    const auto corrupt = batch_metrics(model.forward(batch.corrupted).logits, batch, metric.kind);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto idx = std::size_t(batch.examples[b] - dataset.data());
      out[idx] = {clean[b], corrupt[b]};
    }
  }
  return out;
}

template <typename T>
Baselines baselines(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                    MetricSpec metric, std::size_t batch_size) {
  if (dataset.empty()) throw Error("baselines need a nonempty dataset");
  const auto rows = per_example_metrics(model, dataset, metric, batch_size);
  std::vector<double> clean, corrupt;
  for (const auto& r : rows) {
    clean.push_back(r.clean);
    corrupt.push_back(r.corrupted);
  }
  const double n = double(rows.size());
  return {pairwise_sum(clean) / n, pairwise_sum(corrupt) / n};
}

double normalize_faithfulness(double m, const Baselines& bl) {
  if (!std::isfinite(bl.b) || !std::isfinite(bl.b_prime)) {
    throw DegenerateTaskError("baselines are not finite");
  }
  if (bl.b == bl.b_prime) {
    throw DegenerateTaskError("clean and corrupted baselines are equal (" + std::to_string(bl.b) +
                              "); normalized faithfulness is undefined");
  }
  return (m - bl.b_prime) / (bl.b - bl.b_prime);
}

void write_metrics_csv(std::ostream& out, const std::vector<ExampleMetric>& rows) {
  out << "example,clean,corrupted\n";
  out.precision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i << ',' << rows[i].clean << ',' << rows[i].corrupted << '\n';
  }
}

#define EAPIG_INSTANTIATE(T)                                                                    \
  template double compute_metric(std::span<const T>, const TaskExample&, MetricKind);          \
  template std::vector<double> batch_metrics(const Tensor<T>&, const Batch&, MetricKind);      \
  template LogitObjective<T> make_objective(const LossSpec&, const Batch&, const Tensor<T>*);  \
  template Baselines baselines(const Transformer<T>&, const std::vector<TaskExample>&,         \
                               MetricSpec, std::size_t);                                       \
  template std::vector<ExampleMetric> per_example_metrics(                                     \
      const Transformer<T>&, const std::vector<TaskExample>&, MetricSpec, std::size_t);
EAPIG_INSTANTIATE(float)
EAPIG_INSTANTIATE(double)
#undef EAPIG_INSTANTIATE

}  // namespace eapig
