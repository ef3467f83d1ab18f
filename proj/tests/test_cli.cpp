#include <doctest.h>

#include <cstdlib>
#include <string>

#include <json.hpp>

#include "eapig/faithfulness.hpp"
#include "eapig/io.hpp"
#include "eapig/toy.hpp"
#include "eapig/weights.hpp"
#include "test_util.hpp"

#include <sys/wait.h>

using namespace eapig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Cli {
  testutil::TempDir dir;

  // Runs the binary inside the scratch directory; returns its exit code.
  int run(const std::string& args) const {
    const std::string cmd = "cd '" + dir.path().string() + "' && '" EAPIG_CLI_PATH "' " + args +
                            " >stdout.txt 2>stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string stdout_text() const { return testutil::read_file(dir / "stdout.txt"); }
  std::string stderr_text() const { return testutil::read_file(dir / "stderr.txt"); }
  json read_json(const std::string& name) const { return json::parse(testutil::read_file(dir / name)); }
  fs::path operator/(const std::string& name) const { return dir / name; }
};

constexpr const char* kModel = "--model d/toy_model.json";
constexpr const char* kData = "--dataset d/task_mlp0.jsonl";

void demo(const Cli& cli) { REQUIRE(cli.run("demo --out-dir d") == 0); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help and version exit cleanly") {
    Cli cli;
    CHECK(cli.run("--help") == 0);
    CHECK(cli.run("--version") == 0);
    CHECK(cli.stdout_text().find(kToolVersion) != std::string::npos);
    CHECK(cli.run("") == 2);
    CHECK(cli.run("frobnicate") == 2);
  }

  TEST_CASE("score writes every edge with provenance") {
    Cli cli;
    demo(cli);
    REQUIRE(cli.run(std::string("score ") + kModel + " " + kData + " --method eap --out s.json --csv s.csv") == 0);
    const auto doc = cli.read_json("s.json");
    CHECK(doc["edges"].size() == 46);
    CHECK(doc["meta"]["method"] == "eap");
    CHECK(doc["meta"]["m"] == 1);
    CHECK(doc["meta"]["loss"] == "neg-logit-diff");
    CHECK(doc["meta"]["dataset_hash"] == file_hash(cli / "d/task_mlp0.jsonl"));
    CHECK(doc["meta"]["tool_version"] == kToolVersion);
    const auto csv = testutil::read_file(cli / "s.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 47);
  }

  TEST_CASE("one-step eap-ig output equals eap output apart from metadata") {
    Cli cli;
    demo(cli);
    REQUIRE(cli.run(std::string("score ") + kModel + " " + kData + " --method eap --out a.json") == 0);
    REQUIRE(cli.run(std::string("score ") + kModel + " " + kData + " --method eap-ig --steps 1 --out b.json") == 0);
    auto a = cli.read_json("a.json"), b = cli.read_json("b.json");
    CHECK(b["meta"]["method"] == "eap-ig");
    a.erase("meta");
    b.erase("meta");
    CHECK(a == b);
  }

  TEST_CASE("outputs are byte-identical across runs") {
    Cli cli;
    demo(cli);
    for (const char* out : {"x.json", "y.json"}) {
      REQUIRE(cli.run(std::string("score ") + kModel + " " + kData + " --method eap-ig-act --steps 3 --out " + out) == 0);
    }
    CHECK(testutil::read_file(cli / "x.json") == testutil::read_file(cli / "y.json"));
  }

  TEST_CASE("usage errors exit with 2, runtime failures with 1") {
    Cli cli;
    demo(cli);
    CHECK(cli.run(std::string("score ") + kModel + " --dataset missing.jsonl --method eap --out s.json") == 2);
    CHECK(cli.run(std::string("score ") + kModel + " --method eap --out s.json") == 2);
    CHECK(cli.run(std::string("score ") + kModel + " " + kData + " --method magic --out s.json") == 2);
    CHECK(cli.run(std::string("score ") + kModel + " " + kData + " --method eap --loss mse --out s.json") == 2);
    CHECK(cli.run(std::string("score ") + kModel + " " + kData + " --method eap --steps 0 --out s.json") == 2);
    testutil::write_file(cli / "broken.jsonl", "{\"clean\": [1]}\n");
    CHECK(cli.run(std::string("score ") + kModel + " --dataset broken.jsonl --method eap --out s.json") == 1);
    CHECK(cli.stderr_text().find("broken.jsonl:1") != std::string::npos);
  }

  TEST_CASE("find: empty circuits, pruning and strategies") {
    Cli cli;
    const ComputationalGraph g(1, 1);
    EdgeScores s;
    s.method = Method::Eap;
    s.values.assign(g.num_edges(), 0.1);
    s.values[*g.find_edge({NodeId::input(), NodeId::head(0, 0), Slot::Q})] = 10.0;
    s.values[*g.find_edge({NodeId::mlp(0), NodeId::logits(), Slot::Single})] = 0.5;
    save_scores(cli / "s.json", g, s, {"t", "h", kToolVersion});

    REQUIRE(cli.run("find --scores s.json --n 0,1,3 --out-dir g") == 0);
    CHECK(load_circuit(cli / "g/circuit_n0.json").circuit.size() == 0);
    const auto greedy1 = load_circuit(cli / "g/circuit_n1.json");
    REQUIRE(cli.run("find --scores s.json --n 1 --strategy topn --no-prune --out-dir t") == 0);
    const auto top1 = load_circuit(cli / "t/circuit_n1.json");
    CHECK(top1.circuit.size() == 1);
    CHECK(top1.circuit != greedy1.circuit);
    CHECK_FALSE(top1.meta.pruned);

    REQUIRE(cli.run("find --scores s.json --n 1 --strategy topn --out-dir tp") == 0);
    CHECK(load_circuit(cli / "tp/circuit_n1.json").circuit.size() == 0);
    const auto sweep = testutil::read_file(cli / "tp/sweep.csv");
    CHECK(sweep.find("\n1,1,0,circuit_n1.json,eap,1,neg-logit-diff,h,") != std::string::npos);

    REQUIRE(cli.run("find --scores s.json --strategy threshold --threshold 0.2 --no-prune --dot --out-dir th") == 0);
    CHECK(load_circuit(cli / "th/circuit_threshold.json").circuit.size() == 2);
    CHECK(fs::exists(cli / "th/circuit_threshold.dot"));
    CHECK(cli.run("find --scores s.json --strategy threshold --out-dir x") == 2);
    CHECK(cli.run("find --scores s.json --strategy best --out-dir x") == 2);
  }

  TEST_CASE("eval anchors and library parity") {
    Cli cli;
    demo(cli);
    const auto bundle = load_weights(cli / "d/toy_model.json");
    const ComputationalGraph g(bundle.config);
    save_circuit(cli / "full.json", g, Circuit::full(g), nullptr, {});
    save_circuit(cli / "empty.json", g, Circuit::empty(g), nullptr, {});
    Circuit path = Circuit::empty(g);
    path.set(*g.find_edge({NodeId::input(), NodeId::mlp(0), Slot::Single}));
    path.set(*g.find_edge({NodeId::mlp(0), NodeId::logits(), Slot::Single}));
    save_circuit(cli / "path.json", g, path, nullptr, {});

    REQUIRE(cli.run(std::string("eval ") + kModel + " " + kData + " --circuit full.json --out f.json") == 0);
    CHECK(cli.read_json("f.json")["normalized"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));
    REQUIRE(cli.run(std::string("eval ") + kModel + " " + kData + " --circuit empty.json --out e.json") == 0);
    CHECK(cli.read_json("e.json")["normalized"].get<double>() == doctest::Approx(0.0).epsilon(1e-6));

    REQUIRE(cli.run(std::string("eval ") + kModel + " " + kData + " --circuit path.json --per-example pe.csv") == 0);
    const auto report = json::parse(cli.stdout_text());
    const Transformer<float> model(bundle);
    const auto lib = faithfulness(model, path, load_dataset(cli / "d/task_mlp0.jsonl"), MetricSpec{}, 16);
    CHECK(report["raw"].get<double>() == lib.raw);
    CHECK(report["b"].get<double>() == lib.b);
    CHECK(report["b_prime"].get<double>() == lib.b_prime);
    CHECK(report["normalized"].get<double>() == lib.normalized);
    CHECK(report["meta"]["tool_version"] == kToolVersion);
    CHECK(fs::exists(cli / "pe.csv"));

    ModelConfig other = bundle.config;
    other.n_layers = 1;
    const ComputationalGraph small(other);
    save_circuit(cli / "wrong.json", small, Circuit::full(small), nullptr, {});
    CHECK(cli.run(std::string("eval ") + kModel + " " + kData + " --circuit wrong.json") == 1);
  }

  TEST_CASE("compare matrices") {
    Cli cli;
    demo(cli);
    const ComputationalGraph g(2, 2);
    Circuit a = Circuit::empty(g), b = Circuit::empty(g);
    a.set(*g.find_edge({NodeId::input(), NodeId::mlp(0), Slot::Single}));
    a.set(*g.find_edge({NodeId::mlp(0), NodeId::logits(), Slot::Single}));
    b.set(*g.find_edge({NodeId::input(), NodeId::mlp(1), Slot::Single}));
    b.set(*g.find_edge({NodeId::mlp(1), NodeId::logits(), Slot::Single}));
    save_circuit(cli / "a.json", g, a, nullptr, {});
    save_circuit(cli / "b.json", g, b, nullptr, {});

    REQUIRE(cli.run("compare --circuits a.json --modes iou,recall --out-dir self") == 0);
    CHECK(testutil::read_file(cli / "self/iou_nodes.csv") == "circuit,a\na,1\n");
    CHECK(testutil::read_file(cli / "self/recall_edges.csv") == "circuit,a\na,1\n");

    REQUIRE(cli.run("compare --circuits a.json b.json --modes iou,significance --out-dir ab") == 0);
    CHECK(testutil::read_file(cli / "ab/iou_edges.csv") == "circuit,a,b\na,1,0\nb,0,1\n");
    const auto p = testutil::read_file(cli / "ab/significance_pvalue.csv");
    CHECK(p.find("\na,") != std::string::npos);
    CHECK(p.find(",1\nb,1,") != std::string::npos);
    CHECK(cli.read_json("ab/compare_meta.json")["tool_version"] == kToolVersion);

    CHECK(cli.run("compare --circuits a.json b.json --modes faithfulness --out-dir x") == 2);
    REQUIRE(cli.run(std::string("compare --circuits a.json b.json --modes faithfulness ") + kModel +
                    " --tasks d/task_mlp0.jsonl d/task_mlp1.jsonl --out-dir f") == 0);
    const auto f = testutil::read_file(cli / "f/faithfulness.csv");
    CHECK(f.rfind("circuit,a,b\na,1,", 0) == 0);
  }

  TEST_CASE("config file supplies flags and the command line wins") {
    Cli cli;
    demo(cli);
    testutil::write_file(cli / "run.toml", "[score]\nmethod = \"eap-ig\"\nsteps = 3\n");
    REQUIRE(cli.run(std::string("--config run.toml score ") + kModel + " " + kData + " --steps 4 --out s.json") == 0);
    const auto meta = cli.read_json("s.json")["meta"];
    CHECK(meta["method"] == "eap-ig");
    CHECK(meta["m"] == 4);
  }

  TEST_CASE("sweep runs the whole pipeline") {
    Cli cli;
    demo(cli);
    REQUIRE(cli.run(std::string("sweep ") + kModel + " " + kData + " --method eap-ig --n 3,46 --out-dir sw") == 0);
    const auto csv = testutil::read_file(cli / "sw/sweep.csv");
    CHECK(csv.rfind("n,edges_before_prune,edges_after_prune,normalized_faithfulness", 0) == 0);
    CHECK(fs::exists(cli / "sw/scores.json"));
    CHECK(fs::exists(cli / "sw/circuit_n46.json"));
  }
}
