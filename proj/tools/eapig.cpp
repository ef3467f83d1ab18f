// Command-line front end: score -> find -> eval -> compare, plus sweep and demo.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eapig/error.hpp"
#include "eapig/faithfulness.hpp"
#include "eapig/io.hpp"
#include "eapig/model.hpp"
#include "eapig/overlap.hpp"
#include "eapig/scoring.hpp"
#include "eapig/search.hpp"
#include "eapig/task.hpp"
#include "eapig/toy.hpp"
#include "eapig/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eapig;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Flag combinations CLI11 cannot express; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kMethods{"patching",   "eap",           "eap-ig",
                                        "eap-ig-act", "eap-ig-partial", "clean-corrupted"};

struct ModelOptions {
  std::string model;
  std::string precision = "f32";
  std::size_t batch_size = 16;
};

struct ScoreOptions {
  std::string dataset;
  std::string method;
  std::string loss = "metric";
  std::string metric = "logit-diff";
  std::size_t steps = 5;
  unsigned threads = 0;
  std::string task;
};

struct FindOptions {
  std::vector<std::size_t> n;
  std::string strategy = "greedy";
  std::optional<double> threshold;
  std::string direction = "logits";
  bool prune = true;
  bool dot = false;
  std::string out_dir;
};

void add_model_options(CLI::App* cmd, ModelOptions& o) {
  cmd->add_option("--model", o.model, "weights manifest (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--precision", o.precision, "arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  cmd->add_option("--batch-size", o.batch_size, "examples per forward pass")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

void add_score_options(CLI::App* cmd, ScoreOptions& o) {
  cmd->add_option("--dataset", o.dataset, "clean/corrupted pairs (JSONL)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--method", o.method, "scoring method")->required()->check(CLI::IsMember(kMethods));
  cmd->add_option("--loss", o.loss, "metric: L = -metric; kl: KL to the clean distribution")
      ->check(CLI::IsMember({"metric", "kl"}))
      ->capture_default_str();
  cmd->add_option("--metric", o.metric, "task metric")
      ->check(CLI::IsMember({"logit-diff", "prob-diff"}))
      ->capture_default_str();
  cmd->add_option("--steps", o.steps, "integration steps m")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--threads", o.threads, "worker threads (0: all cores)")->capture_default_str();
  cmd->add_option("--task", o.task, "task name recorded in outputs (default: dataset file stem)");
}

void add_find_options(CLI::App* cmd, FindOptions& o) {
  cmd->add_option("--n", o.n, "circuit sizes (default: 30,40,...,100,200,...,1000)")->delimiter(',');
  cmd->add_option("--strategy", o.strategy, "edge selection")
      ->check(CLI::IsMember({"greedy", "topn", "threshold"}))
      ->capture_default_str();
  cmd->add_option("--threshold", o.threshold, "|score| cutoff for --strategy threshold");
  cmd->add_option("--direction", o.direction, "greedy growth direction")
      ->check(CLI::IsMember({"logits", "input"}))
      ->capture_default_str();
  cmd->add_flag("--prune,!--no-prune", o.prune, "drop edges not connected to both input and logits")
      ->capture_default_str();
  cmd->add_flag("--dot", o.dot, "also write Graphviz files");
  cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
}

MetricSpec metric_spec(const std::string& name) { return MetricSpec{metric_from_string(name)}; }

LossSpec loss_spec(const ScoreOptions& o) {
  const MetricSpec metric = metric_spec(o.metric);
  if (o.loss == "kl") return LossSpec{LossKind::Kl, MetricKind::Kl};
  return metric_to_loss(metric);
}

std::string task_name(const ScoreOptions& o) {
  return o.task.empty() ? fs::path(o.dataset).stem().string() : o.task;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

// Runs `fn` with a Transformer of the requested precision.
template <typename Fn>
auto with_model(const ModelOptions& o, Fn&& fn) {
  const ModelBundle bundle = load_weights(o.model);
  if (o.precision == "f64") return fn(Transformer<double>(bundle));
  return fn(Transformer<float>(bundle));
}

ScoresDocument run_score(const ModelOptions& mo, const ScoreOptions& so) {
  const auto dataset = load_dataset(so.dataset);
  ScoringConfig cfg;
  cfg.loss = loss_spec(so);
  cfg.ig_steps = so.steps;
  cfg.batch_size = mo.batch_size;
  cfg.threads = so.threads;
  const Method method = method_from_string(so.method);
  ScoresDocument doc;
  doc.scores = with_model(mo, [&](const auto& model) {
    doc.n_layers = model.config().n_layers;
    doc.n_heads = model.config().n_heads;
    return score_edges(model, dataset, method, cfg);
  });
  doc.provenance = {task_name(so), file_hash(so.dataset), kToolVersion};
  return doc;
}

CircuitMeta circuit_meta(const ScoresDocument& doc, std::size_t n, const FindOptions& fo) {
  CircuitMeta meta;
  meta.method = to_string(doc.scores.method);
  meta.m = doc.scores.steps;
  meta.loss = to_string(doc.scores.loss);
  meta.n = n;
  meta.strategy = fo.strategy;
  meta.pruned = fo.prune;
  meta.task = doc.provenance.task;
  meta.dataset_hash = doc.provenance.dataset_hash;
  return meta;
}

struct FoundCircuit {
  std::size_t n = 0;
  std::size_t edges_before_prune = 0;
  std::size_t edges_after_prune = 0;
  Circuit circuit;
  fs::path path;
};

std::vector<FoundCircuit> run_find(const ScoresDocument& doc, const FindOptions& fo) {
  if (fo.strategy == "threshold" && !fo.threshold) {
    throw UsageError("--strategy threshold needs --threshold");
  }
  if (fo.strategy != "threshold" && fo.threshold) {
    throw UsageError("--threshold only applies to --strategy threshold");
  }
  const ComputationalGraph g(doc.n_layers, doc.n_heads);
  const auto& scores = doc.scores.values;
  const fs::path dir(fo.out_dir);
  fs::create_directories(dir);

  std::vector<FoundCircuit> found;
  auto emit = [&](std::size_t n, const Circuit& raw, const std::string& stem) {
    FoundCircuit f;
    f.n = n;
    f.edges_before_prune = raw.size();
    f.circuit = fo.prune ? prune(g, raw) : raw;
    f.edges_after_prune = f.circuit.size();
    f.path = dir / (stem + ".json");
    save_circuit(f.path, g, f.circuit, &scores, circuit_meta(doc, n, fo));
    if (fo.dot) write_file(dir / (stem + ".dot"), circuit_to_dot(g, f.circuit, &scores));
    found.push_back(std::move(f));
  };

  if (fo.strategy == "threshold") {
    const Circuit raw = select_by_threshold(g, scores, *fo.threshold);
    emit(raw.size(), raw, "circuit_threshold");
  } else {
    const auto sizes = fo.n.empty() ? default_sweep_sizes(g.num_edges()) : fo.n;
    const auto direction =
        fo.direction == "input" ? GreedyDirection::FromInput : GreedyDirection::FromLogits;
    for (std::size_t n : sizes) {
      const Circuit raw = fo.strategy == "greedy" ? greedy_search(g, scores, n, direction)
                                                  : top_n(g, scores, n);
      emit(n, raw, "circuit_n" + std::to_string(n));
    }
  }
  return found;
}

std::string provenance_columns(const ScoresDocument& doc) {
  return to_string(doc.scores.method) + "," + std::to_string(doc.scores.steps) + "," +
         to_string(doc.scores.loss) + "," + doc.provenance.dataset_hash + "," +
         doc.provenance.tool_version;
}

void write_sweep_csv(const fs::path& path, const ScoresDocument& doc,
                     const std::vector<FoundCircuit>& found,
                     const std::vector<double>* faithfulness = nullptr) {
  std::ostringstream out;
  out << "n,edges_before_prune,edges_after_prune";
  if (faithfulness) out << ",normalized_faithfulness";
  out << ",file,method,m,loss,dataset_hash,tool_version\n";
  for (std::size_t i = 0; i < found.size(); ++i) {
    const auto& f = found[i];
    out << f.n << ',' << f.edges_before_prune << ',' << f.edges_after_prune;
    if (faithfulness) out << ',' << format_double((*faithfulness)[i]);
    out << ',' << f.path.filename().string() << ',' << provenance_columns(doc) << '\n';
  }
  write_file(path, out.str());
}

void check_graph(const ModelConfig& config, const CircuitDocument& doc, const std::string& path) {
  if (config.n_layers != doc.n_layers || config.n_heads != doc.n_heads) {
    throw InputError("circuit " + path + " is for a " + std::to_string(doc.n_layers) + "x" +
                     std::to_string(doc.n_heads) + " graph but the model is " +
                     std::to_string(config.n_layers) + "x" + std::to_string(config.n_heads));
  }
}

json circuit_meta_json(const CircuitMeta& m) {
  return {{"method", m.method}, {"m", m.m},       {"loss", m.loss},
          {"n", m.n},           {"task", m.task}, {"dataset_hash", m.dataset_hash}};
}

// --- compare -------------------------------------------------------------

using Matrix = std::vector<std::vector<double>>;

std::string matrix_csv(const std::vector<std::string>& names, const Matrix& m) {
  std::ostringstream out;
  out << "circuit";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    out << names[i];
    for (double v : m[i]) out << ',' << (std::isnan(v) ? std::string("nan") : format_double(v));
    out << '\n';
  }
  return out.str();
}

// File stems, prefixed with the parent directory when stems repeat.
std::vector<std::string> display_names(const std::vector<std::string>& paths) {
  std::map<std::string, int> seen;
  for (const auto& p : paths) ++seen[fs::path(p).stem().string()];
  std::vector<std::string> out;
  for (const auto& p : paths) {
    const fs::path path(p);
    std::string name = path.stem().string();
    if (seen[name] > 1 && path.has_parent_path()) name = path.parent_path().filename().string() + "/" + name;
    out.push_back(name);
  }
  return out;
}

Matrix square(std::size_t k) { return Matrix(k, std::vector<double>(k, 0.0)); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge attribution circuit discovery on decoder-only transformers"};
  app.set_config("--config", "", "TOML-style settings file; command-line flags take precedence");
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  // score
  ModelOptions score_model;
  ScoreOptions score_opts;
  std::string score_out, score_csv;
  auto* score = app.add_subcommand("score", "score every edge of the model's graph");
  add_model_options(score, score_model);
  add_score_options(score, score_opts);
  score->add_option("--out", score_out, "scores file (JSON)")->required();
  score->add_option("--csv", score_csv, "also write scores as CSV");

  // find
  std::string find_scores;
  FindOptions find_opts;
  auto* find = app.add_subcommand("find", "select circuits from a scores file");
  find->add_option("--scores", find_scores, "scores file from `score`")->required()->check(CLI::ExistingFile);
  add_find_options(find, find_opts);

  // eval
  ModelOptions eval_model;
  std::string eval_circuit, eval_dataset, eval_metric = "logit-diff", eval_out, eval_per_example;
  auto* eval = app.add_subcommand("eval", "normalized faithfulness of a circuit");
  add_model_options(eval, eval_model);
  eval->add_option("--circuit", eval_circuit, "circuit file")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", eval_dataset, "clean/corrupted pairs (JSONL)")->required()->check(CLI::ExistingFile);
  eval->add_option("--metric", eval_metric, "task metric")
      ->check(CLI::IsMember({"logit-diff", "prob-diff"}))
      ->capture_default_str();
  eval->add_option("--out", eval_out, "report file (default: stdout)");
  eval->add_option("--per-example", eval_per_example, "CSV of clean/corrupted metric per example");

  // compare
  std::vector<std::string> cmp_circuits, cmp_tasks, cmp_modes{"iou", "recall"};
  std::string cmp_model, cmp_metric = "logit-diff", cmp_out_dir, cmp_precision = "f32";
  std::size_t cmp_batch = 16;
  auto* compare = app.add_subcommand("compare", "pairwise comparison matrices between circuits");
  compare->add_option("--circuits", cmp_circuits, "circuit files")->required()->check(CLI::ExistingFile);
  compare->add_option("--tasks", cmp_tasks, "datasets, one per circuit (faithfulness mode)")
      ->check(CLI::ExistingFile);
  compare->add_option("--modes", cmp_modes, "iou, recall, faithfulness, significance")
      ->delimiter(',')
      ->check(CLI::IsMember({"iou", "recall", "faithfulness", "significance"}))
      ->capture_default_str();
  compare->add_option("--model", cmp_model, "weights manifest (faithfulness mode)")->check(CLI::ExistingFile);
  compare->add_option("--metric", cmp_metric, "task metric")
      ->check(CLI::IsMember({"logit-diff", "prob-diff"}))
      ->capture_default_str();
  compare->add_option("--precision", cmp_precision, "arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  compare->add_option("--batch-size", cmp_batch, "examples per forward pass")->check(CLI::PositiveNumber);
  compare->add_option("--out-dir", cmp_out_dir, "output directory")->required();

  // sweep
  ModelOptions sweep_model;
  ScoreOptions sweep_opts;
  FindOptions sweep_find;
  auto* sweep_cmd = app.add_subcommand("sweep", "score, select circuits for each n, and evaluate them");
  add_model_options(sweep_cmd, sweep_model);
  add_score_options(sweep_cmd, sweep_opts);
  add_find_options(sweep_cmd, sweep_find);

  // demo
  std::string demo_dir;
  std::uint64_t demo_seed = 7;
  std::size_t demo_examples = 32;
  auto* demo = app.add_subcommand("demo", "write the planted toy model and its two task datasets");
  demo->add_option("--out-dir", demo_dir, "output directory")->required();
  demo->add_option("--seed", demo_seed, "noise seed")->capture_default_str();
  demo->add_option("--examples", demo_examples, "examples per task")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (score->parsed()) {
      const auto doc = run_score(score_model, score_opts);
      const ComputationalGraph g(doc.n_layers, doc.n_heads);
      save_scores(score_out, g, doc.scores, doc.provenance);
      if (!score_csv.empty()) {
        std::ostringstream csv;
        write_scores_csv(csv, g, doc.scores);
        write_file(score_csv, csv.str());
      }
    } else if (find->parsed()) {
      const auto doc = load_scores(find_scores);
      const auto found = run_find(doc, find_opts);
      write_sweep_csv(fs::path(find_opts.out_dir) / "sweep.csv", doc, found);
    } else if (eval->parsed()) {
      const auto circuit = load_circuit(eval_circuit);
      const auto dataset = load_dataset(eval_dataset);
      const MetricSpec metric = metric_spec(eval_metric);
      std::vector<ExampleMetric> rows;
      const auto report = with_model(eval_model, [&](const auto& model) {
        check_graph(model.config(), circuit, eval_circuit);
        if (!eval_per_example.empty()) {
          rows = per_example_metrics(model, dataset, metric, eval_model.batch_size);
        }
        return faithfulness(model, circuit.circuit, dataset, metric, eval_model.batch_size);
      });
      json out{{"raw", report.raw},
               {"b", report.b},
               {"b_prime", report.b_prime},
               {"normalized", report.normalized},
               {"meta",
                {{"circuit", circuit_meta_json(circuit.meta)},
                 {"circuit_edges", circuit.circuit.size()},
                 {"metric", eval_metric},
                 {"precision", eval_model.precision},
                 {"dataset_hash", file_hash(eval_dataset)},
                 {"tool_version", kToolVersion}}}};
      const std::string text = out.dump(1) + "\n";
      if (eval_out.empty()) {
        std::cout << text;
      } else {
        write_file(eval_out, text);
      }
      if (!eval_per_example.empty()) {
        std::ostringstream csv;
        write_metrics_csv(csv, rows);
        write_file(eval_per_example, csv.str());
      }
    } else if (compare->parsed()) {
      const bool want_faith =
          std::find(cmp_modes.begin(), cmp_modes.end(), "faithfulness") != cmp_modes.end();
      if (want_faith && cmp_tasks.empty()) throw UsageError("--modes faithfulness needs --tasks");
      if (want_faith && cmp_model.empty()) throw UsageError("--modes faithfulness needs --model");
      if (!cmp_tasks.empty() && cmp_tasks.size() != cmp_circuits.size()) {
        throw UsageError("--tasks needs one dataset per circuit (" + std::to_string(cmp_circuits.size()) +
                         " circuits, " + std::to_string(cmp_tasks.size()) + " tasks)");
      }

      std::vector<CircuitDocument> docs;
      const auto names = display_names(cmp_circuits);
      for (const auto& p : cmp_circuits) {
        docs.push_back(load_circuit(p));
        if (docs.back().n_layers != docs.front().n_layers || docs.back().n_heads != docs.front().n_heads) {
          throw InputError("circuit " + p + " has a different graph shape than " + cmp_circuits.front());
        }
      }
      const ComputationalGraph g(docs.front().n_layers, docs.front().n_heads);
      const std::size_t k = docs.size();
      const fs::path dir(cmp_out_dir);
      fs::create_directories(dir);
      json meta{{"circuits", json::array()},
                {"modes", cmp_modes},
                {"node_sets", "member-edge endpoints excluding input and logits"},
                {"tool_version", kToolVersion}};
      for (std::size_t i = 0; i < k; ++i) {
        json entry = circuit_meta_json(docs[i].meta);
        entry["file"] = names[i];
        entry["edges"] = docs[i].circuit.size();
        meta["circuits"].push_back(std::move(entry));
      }

      for (const auto& mode : cmp_modes) {
        if (mode == "iou") {
          Matrix nodes = square(k), edges = square(k);
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              nodes[i][j] = node_iou(g, docs[i].circuit, docs[j].circuit);
              edges[i][j] = edge_iou(docs[i].circuit, docs[j].circuit);
            }
          }
          write_file(dir / "iou_nodes.csv", matrix_csv(names, nodes));
          write_file(dir / "iou_edges.csv", matrix_csv(names, edges));
        } else if (mode == "recall") {
          // Row i, column j: recall of circuit i on circuit j.
          Matrix nodes = square(k), edges = square(k);
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              if (docs[j].circuit.size() == 0) {
                nodes[i][j] = edges[i][j] = std::nan("");
                continue;
              }
              const auto r = recall(g, docs[i].circuit, docs[j].circuit);
              nodes[i][j] = r.node;
              edges[i][j] = r.edge;
            }
          }
          write_file(dir / "recall_nodes.csv", matrix_csv(names, nodes));
          write_file(dir / "recall_edges.csv", matrix_csv(names, edges));
        } else if (mode == "significance") {
          Matrix p = square(k), overlap = square(k);
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const auto s = node_overlap_significance(g, docs[i].circuit, docs[j].circuit);
              p[i][j] = s.p_value;
              overlap[i][j] = double(s.overlap);
            }
          }
          write_file(dir / "significance_pvalue.csv", matrix_csv(names, p));
          write_file(dir / "significance_overlap.csv", matrix_csv(names, overlap));
        } else if (mode == "faithfulness") {
          std::vector<Task> tasks;
          std::vector<Circuit> circuits;
          json hashes = json::array();
          for (std::size_t i = 0; i < k; ++i) {
            tasks.push_back({names[i], load_dataset(cmp_tasks[i]), metric_spec(cmp_metric)});
            circuits.push_back(docs[i].circuit);
            hashes.push_back(file_hash(cmp_tasks[i]));
          }
          meta["task_dataset_hashes"] = std::move(hashes);
          meta["metric"] = cmp_metric;
          const ModelOptions mo{cmp_model, cmp_precision, cmp_batch};
          const Matrix m = with_model(mo, [&](const auto& model) {
            check_graph(model.config(), docs.front(), cmp_circuits.front());
            return cross_task_faithfulness(model, circuits, tasks, cmp_batch);
          });
          write_file(dir / "faithfulness.csv", matrix_csv(names, m));
        }
      }
      write_file(dir / "compare_meta.json", meta.dump(1) + "\n");
    } else if (sweep_cmd->parsed()) {
      const auto doc = run_score(sweep_model, sweep_opts);
      const fs::path dir(sweep_find.out_dir);
      const ComputationalGraph g(doc.n_layers, doc.n_heads);
      fs::create_directories(dir);
      save_scores(dir / "scores.json", g, doc.scores, doc.provenance);
      const auto found = run_find(doc, sweep_find);
      const auto dataset = load_dataset(sweep_opts.dataset);
      const MetricSpec metric = metric_spec(sweep_opts.metric);
      std::vector<double> faith;
      with_model(sweep_model, [&](const auto& model) {
        const auto base = baselines(model, dataset, metric, sweep_model.batch_size);
        for (const auto& f : found) {
          faith.push_back(
              faithfulness(model, f.circuit, dataset, metric, base, sweep_model.batch_size).normalized);
        }
        return 0;
      });
      write_sweep_csv(dir / "sweep.csv", doc, found, &faith);
    } else if (demo->parsed()) {
      const auto toy = planted_bundle(demo_seed, demo_examples);
      const fs::path dir(demo_dir);
      fs::create_directories(dir);
      save_weights(dir / "toy_model.json", toy.model.config, toy.model.weights);
      save_dataset(dir / ("task_" + toy.primary.name + ".jsonl"), toy.primary.dataset);
      save_dataset(dir / ("task_" + toy.secondary.name + ".jsonl"), toy.secondary.dataset);
      std::cout << "wrote " << (dir / "toy_model.json").string() << ", task_" << toy.primary.name
                << ".jsonl, task_" << toy.secondary.name << ".jsonl\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
