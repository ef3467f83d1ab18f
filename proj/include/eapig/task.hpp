#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "eapig/model.hpp"

namespace eapig {

/// A clean/corrupted minimal pair with the answers the clean input should
/// favor over the wrong ones at `eval_position`.
struct TaskExample {
  std::vector<int> clean;
  std::vector<int> corrupted;
  std::vector<int> answers;
  std::vector<int> wrongs;
  std::size_t eval_position = 0;

  /// Throws LoadError when lengths differ, answers are empty, answers and
  /// wrongs overlap, or eval_position is out of range.
  void validate() const;
};

enum class MetricKind { LogitDiff, ProbDiff, Kl };

/// The task metric. Kl is accepted here only so that it can be turned into
/// a loss; reporting it as a task metric is rejected.
struct MetricSpec {
  MetricKind kind = MetricKind::LogitDiff;
};

enum class LossKind { NegMetric, Kl };

struct LossSpec {
  LossKind kind = LossKind::NegMetric;
  MetricKind metric = MetricKind::LogitDiff;
};

std::string to_string(MetricKind m);
MetricKind metric_from_string(const std::string& s);
std::string to_string(const LossSpec& l);

/// L = -M for logit/prob diff; KL(clean-run distribution || current) for kl.
LossSpec metric_to_loss(MetricSpec spec);

TaskExample example_from_json(const nlohmann::json& j);
nlohmann::json example_to_json(const TaskExample& ex);

/// One JSON object per line; blank lines are skipped. Errors carry the line
/// number.
std::vector<TaskExample> load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const std::vector<TaskExample>& examples);

/// Metric from the vocabulary logits at one position. logit-diff is the
/// difference of means; prob-diff the difference of summed softmax mass.
template <typename T>
double compute_metric(std::span<const T> vocab_logits, const TaskExample& ex, MetricKind kind);

std::vector<double> softmax(std::span<const double> logits);
/// sum_i p_i log(p_i / q_i), with 0 log 0 = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Examples grouped into equal-length batches, in dataset order.
struct Batch {
  std::vector<const TaskExample*> examples;
  TokenBatch clean;
  TokenBatch corrupted;
  std::size_t size() const { return examples.size(); }
};

std::vector<Batch> make_batches(const std::vector<TaskExample>& dataset, std::size_t batch_size);

/// Per-example metric at each example's eval position.
template <typename T>
std::vector<double> batch_metrics(const Tensor<T>& logits, const Batch& batch, MetricKind kind);

/// Batch-mean loss on logits. For KL, `clean_logits` supplies the reference
/// distribution and must be the clean, unintervened run.
template <typename T>
LogitObjective<T> make_objective(const LossSpec& loss, const Batch& batch,
                                 const Tensor<T>* clean_logits = nullptr);

struct Baselines {
  double b = 0.0;        // clean-run metric mean
  double b_prime = 0.0;  // corrupted-run metric mean
};

template <typename T>
Baselines baselines(const Transformer<T>& model, const std::vector<TaskExample>& dataset,
                    MetricSpec metric, std::size_t batch_size = 32);

/// (m - b') / (b - b'); throws DegenerateTaskError when b == b'.
double normalize_faithfulness(double m, const Baselines& baselines);

struct ExampleMetric {
  double clean = 0.0;
  double corrupted = 0.0;
};

template <typename T>
std::vector<ExampleMetric> per_example_metrics(const Transformer<T>& model,
                                               const std::vector<TaskExample>& dataset,
                                               MetricSpec metric, std::size_t batch_size = 32);

void write_metrics_csv(std::ostream& out, const std::vector<ExampleMetric>& rows);

}  // namespace eapig
