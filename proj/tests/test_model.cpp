#include <doctest.h>

#include <cmath>
#include <limits>

#include "eapig/error.hpp"
#include "eapig/model.hpp"
#include "eapig/task.hpp"
#include "eapig/toy.hpp"
#include "eapig/weights.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace eapig;
using testutil::small_config;

namespace {

TokenBatch tokens_of(const std::vector<std::vector<int>>& rows) {
  TokenBatch t;
  t.batch = rows.size();
  t.seq = rows.front().size();
  for (const auto& r : rows) t.ids.insert(t.ids.end(), r.begin(), r.end());
  return t;
}

template <typename T>
double max_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config json round trip and validation") {
    ModelConfig c = small_config();
    c.activation = Activation::Relu;
    c.normalization = Normalization::None;
    const nlohmann::json j = c;
    CHECK(j.get<ModelConfig>() == c);
    nlohmann::json legacy = j;
    legacy.erase("activation");
    legacy.erase("normalization");
    const auto d = legacy.get<ModelConfig>();
    CHECK(d.activation == Activation::Gelu);
    CHECK(d.normalization == Normalization::LayerNorm);
    c.n_heads = 0;
    CHECK_THROWS_AS(c.validate(), LoadError);
  }

  TEST_CASE("forward matches an independent residual-stream implementation") {
    for (auto act : {Activation::Gelu, Activation::Relu, Activation::Identity}) {
      for (auto norm : {Normalization::LayerNorm, Normalization::None}) {
        ModelConfig c = small_config(2, 3);
        c.activation = act;
        c.normalization = norm;
        const auto w = random_weights(c, 5);
        const Transformer<double> model(c, w);
        const std::vector<int> seq{3, 1, 4, 1, 5};
        const auto out = model.forward(tokens_of({seq}));
        const auto ref = oracle::reference_logits(c, w, seq);
        double d = 0;
        for (std::size_t i = 0; i < ref.size(); ++i) d = std::max(d, std::abs(out.logits[i] - ref[i]));
        CHECK(d < 1e-10);

        const Transformer<float> single(c, w);
        const auto out32 = single.forward(tokens_of({seq}));
        double d32 = 0;
        for (std::size_t i = 0; i < ref.size(); ++i) d32 = std::max(d32, std::abs(double(out32.logits[i]) - ref[i]));
        CHECK(d32 < 1e-4);
      }
    }
  }

  TEST_CASE("batch rows are independent") {
    const ModelConfig c = small_config();
    const Transformer<double> model(c, random_weights(c, 9));
    const auto both = model.forward(tokens_of({{1, 2, 3}, {4, 5, 6}}));
    const auto second = model.forward(tokens_of({{4, 5, 6}}));
    const std::size_t row = 3 * c.vocab_size;
    for (std::size_t i = 0; i < row; ++i) CHECK(both.logits[row + i] == doctest::Approx(second.logits[i]).epsilon(1e-12));
  }

  TEST_CASE("causal masking: later tokens do not change earlier logits") {
    const ModelConfig c = small_config();
    const Transformer<double> model(c, random_weights(c, 10));
    const auto a = model.forward(tokens_of({{1, 2, 3, 4}}));
    const auto b = model.forward(tokens_of({{1, 2, 3, 9}}));
    for (std::size_t i = 0; i < 3 * c.vocab_size; ++i) CHECK(a.logits[i] == b.logits[i]);
  }

  TEST_CASE("patching every edge with corrupted outputs reproduces the corrupted run") {
    const ModelConfig c = small_config();
    const Transformer<float> model(c, random_weights(c, 11));
    const auto& g = model.graph();
    const auto clean = model.forward(tokens_of({{1, 2, 3}}));
    const auto corrupt = model.forward(tokens_of({{7, 2, 8}}));
    const auto all = corrupt_outside(g, Circuit::empty(g), corrupt);
    CHECK(all.num_patches() == g.num_edges());
    CHECK(model.forward(tokens_of({{1, 2, 3}}), all).logits == corrupt.logits);
    const auto none = corrupt_outside(g, Circuit::full(g), corrupt);
    CHECK(none.empty());
    CHECK(model.forward(tokens_of({{1, 2, 3}}), none).logits == clean.logits);
  }

  TEST_CASE("keep interpolates between patched and live contributions") {
    const ModelConfig c = small_config();
    const Transformer<double> model(c, random_weights(c, 12));
    const auto& g = model.graph();
    const auto clean = model.forward(tokens_of({{1, 2, 3}}));
    const auto corrupt = model.forward(tokens_of({{7, 2, 8}}));
    const EdgeIndex e = *g.find_edge({NodeId::input(), NodeId::mlp(1), Slot::Single});
    InterventionSet<double> live;
    live.patch(e, corrupt.shared_output(0), 1.0);
    CHECK(model.forward(tokens_of({{1, 2, 3}}), live).logits == clean.logits);

    // With only MLP-1's input edge touched the slot input moves linearly,
    // which an additive offset reproduces.
    InterventionSet<double> half;
    half.patch(e, corrupt.shared_output(0), 0.25);
    auto delta = std::make_shared<Tensor<double>>(clean.output(0).shape());
    for (std::size_t i = 0; i < delta->size(); ++i) {
      (*delta)[i] = 0.75 * (corrupt.output(0)[i] - clean.output(0)[i]);
    }
    InterventionSet<double> shifted;
    shifted.offset(g.slot_index(g.mlp_node(1), Slot::Single), delta);
    CHECK(max_diff(model.forward(tokens_of({{1, 2, 3}}), half).logits,
                   model.forward(tokens_of({{1, 2, 3}}), shifted).logits) < 1e-12);
  }

  TEST_CASE("q, k and v inputs of a head are patched separately") {
    const ModelConfig c = small_config(1, 1);
    const Transformer<double> model(c, random_weights(c, 13));
    const auto& g = model.graph();
    const auto clean = model.forward(tokens_of({{1, 2, 3}}));
    const auto corrupt = model.forward(tokens_of({{4, 5, 6}}));
    Tensor<double> last;
    for (Slot s : {Slot::Q, Slot::K, Slot::V}) {
      InterventionSet<double> iv;
      iv.patch(*g.find_edge({NodeId::input(), NodeId::head(0, 0), s}), corrupt.shared_output(0));
      const auto out = model.forward(tokens_of({{1, 2, 3}}), iv);
      CHECK(out.logits != clean.logits);
      CHECK(out.logits != last);
      last = out.logits;
    }
  }

  TEST_CASE("interventions are validated") {
    const ModelConfig c = small_config();
    const Transformer<float> model(c, random_weights(c, 14));
    const auto emb = model.embed(tokens_of({{1, 2, 3}}));
    InterventionSet<float> bad_edge;
    bad_edge.patch(model.graph().num_edges(), std::make_shared<Tensor<float>>(emb));
    CHECK_THROWS_AS(model.forward(emb, bad_edge), InputError);
    InterventionSet<float> bad_shape;
    bad_shape.patch(0, std::make_shared<Tensor<float>>(std::vector<std::size_t>{1, 2, c.d_model}));
    CHECK_THROWS_AS(model.forward(emb, bad_shape), InputError);
  }

  TEST_CASE("token input errors") {
    const ModelConfig c = small_config();
    const Transformer<float> model(c, random_weights(c, 15));
    CHECK_THROWS_AS(model.embed(tokens_of({{1, 2, 99}})), InputError);
    CHECK_THROWS_AS(model.embed(tokens_of({{1, 2, 3, 4, 5, 6, 7}})), InputError);
  }

  TEST_CASE("interpolation endpoints are exact") {
    Tensor<float> z({1, 2, 2}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.7f});
    Tensor<float> zp({1, 2, 2}, std::vector<float>{-1.3f, 2.9f, 0.0f, 1e-8f});
    CHECK(interpolate_embeddings(z, zp, 1.0f) == z);
    CHECK(interpolate_embeddings(z, zp, 0.0f) == zp);
    const auto mid = interpolate_embeddings(z, zp, 0.5f);
    CHECK(mid[0] == doctest::Approx(-0.6));
    CHECK_THROWS_AS(interpolate_embeddings(z, Tensor<float>({1, 3, 2}), 0.5f), ShapeError);
  }

  TEST_CASE("gradients match central differences") {
    ModelConfig c = small_config(2, 2);
    const Transformer<double> model(c, random_weights(c, 16));
    const auto data = random_dataset(c, 3, 4, 17);
    const auto batch = make_batches(data, 3).front();
    const auto emb = model.embed(batch.clean);
    const auto objective = make_objective<double>(LossSpec{}, batch, nullptr);
    const auto result = model.node_input_gradients(emb, objective);
    CHECK(result.loss == doctest::Approx(objective(model.forward(emb).logits, nullptr)));
    const auto& g = model.graph();
    const double h = 1e-5;
    double worst = 0;
    for (SlotIndex s = 0; s < g.num_slots(); s += 3) {
      const auto& grad = result.gradients.at(s);
      for (std::size_t i = 0; i < grad.size(); i += 5) {
        double f[2];
        for (int side = 0; side < 2; ++side) {
          auto delta = std::make_shared<Tensor<double>>(grad.shape());
          (*delta)[i] = side ? -h : h;
          InterventionSet<double> iv;
          iv.offset(s, delta);
          f[side] = objective(model.forward(emb, iv).logits, nullptr);
        }
        const double fd = (f[0] - f[1]) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
      }
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("gradients flow through patched edges scaled by keep") {
    ModelConfig c = small_config(1, 1);
    const Transformer<double> model(c, random_weights(c, 18));
    const auto data = random_dataset(c, 2, 4, 19);
    const auto batch = make_batches(data, 2).front();
    const auto emb = model.embed(batch.clean);
    const auto corrupt = model.forward(model.embed(batch.corrupted));
    const auto objective = make_objective<double>(LossSpec{}, batch, nullptr);
    const auto& g = model.graph();
    InterventionSet<double> all;
    for (EdgeIndex e = 0; e < g.num_edges(); ++e) all.patch(e, corrupt.shared_output(g.edges()[e].src));
    // Every edge fully patched: only the logits slot still reaches the loss.
    const auto r = model.node_input_gradients(emb, objective, all);
    for (SlotIndex s = 0; s < g.num_slots(); ++s) {
      double norm = 0;
      for (double v : r.gradients.at(s).values()) norm += std::abs(v);
      if (g.slots()[s].node == g.logits_node()) {
        CHECK(norm > 0);
      } else {
        CHECK(norm == 0);
      }
    }
    CHECK(r.loss == doctest::Approx(objective(corrupt.logits, nullptr)));
  }

  TEST_CASE("identity patches on every edge leave logits and gradients unchanged") {
    const ModelConfig c = small_config(2, 2);
    const Transformer<double> model(c, random_weights(c, 23));
    const auto data = random_dataset(c, 3, 5, 24);
    const auto batch = make_batches(data, 3).front();
    const auto emb = model.embed(batch.clean);
    const auto corrupt = model.forward(model.embed(batch.corrupted));
    const auto objective = make_objective<double>(LossSpec{}, batch, nullptr);
    const auto& g = model.graph();
    InterventionSet<double> keep_all;
    for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
      keep_all.patch(e, corrupt.shared_output(g.edges()[e].src), 1.0);
    }
    const auto plain = model.node_input_gradients(emb, objective);
    const auto patched = model.node_input_gradients(emb, objective, keep_all);
    CHECK(patched.activations.logits == plain.activations.logits);
    for (SlotIndex s = 0; s < g.num_slots(); ++s) {
      CAPTURE(s);
      CHECK(max_diff(patched.gradients.at(s), plain.gradients.at(s)) < 1e-12);
    }
  }

  TEST_CASE("gradients under partial patches match central differences") {
    ModelConfig c = small_config(1, 2);
    const Transformer<double> model(c, random_weights(c, 23));
    const auto data = random_dataset(c, 2, 4, 24);
    const auto batch = make_batches(data, 2).front();
    const auto emb = model.embed(batch.clean);
    const auto corrupt = model.forward(model.embed(batch.corrupted));
    const auto clean = model.forward(emb);
    const auto objective = make_objective<double>(LossSpec{LossKind::Kl, MetricKind::Kl}, batch, &clean.logits);
    const auto& g = model.graph();
    InterventionSet<double> iv;
    for (EdgeIndex e = 0; e < g.num_edges(); e += 2) iv.patch(e, corrupt.shared_output(g.edges()[e].src), 0.3);
    const auto r = model.node_input_gradients(emb, objective, iv);
    double worst = 0;
    for (SlotIndex s = 0; s < g.num_slots(); ++s) {
      const auto& grad = r.gradients.at(s);
      for (std::size_t i = 0; i < grad.size(); i += 7) {
        double f[2];
        for (int side = 0; side < 2; ++side) {
          auto delta = std::make_shared<Tensor<double>>(grad.shape());
          (*delta)[i] = side ? -1e-5 : 1e-5;
          InterventionSet<double> shifted = iv;
          shifted.offset(s, delta);
          f[side] = objective(model.forward(emb, shifted).logits, nullptr);
        }
        const double fd = (f[0] - f[1]) / 2e-5;
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
      }
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("non-finite gradients are reported with the node name") {
    ModelConfig c = small_config(1, 1);
    const Transformer<float> model(c, random_weights(c, 20));
    const auto emb = model.embed(tokens_of({{1, 2}}));
    const LogitObjective<float> nan_loss = [](const Tensor<float>& logits, Tensor<float>* grad) {
      if (grad) {
        *grad = Tensor<float>(logits.shape(), std::numeric_limits<float>::quiet_NaN());
      }
      return 0.0;
    };
    try {
      (void)model.node_input_gradients(emb, nan_loss);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("logits") != std::string::npos);
    }
  }

  TEST_CASE("weights round trip through manifest and blob") {
    testutil::TempDir dir;
    const ModelConfig c = small_config();
    const auto w = random_weights(c, 21);
    save_weights(dir / "m.json", c, w);
    CHECK(std::filesystem::exists(dir / "m.bin"));
    const auto back = load_weights(dir / "m.json");
    CHECK(back.config == c);
    CHECK(back.weights == w);
  }

  TEST_CASE("weight loading errors name the tensor") {
    testutil::TempDir dir;
    const ModelConfig c = small_config(1, 1);
    auto w = random_weights(c, 22);
    auto expect_error = [&](const WeightStore& store, const std::string& fragment) {
      try {
        store.validate(c);
        FAIL("expected LoadError");
      } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find(fragment) != std::string::npos);
      }
    };
    WeightStore missing;
    for (const auto& [name, t] : w.entries()) {
      if (name != "blocks.0.attn.W_K") missing.insert(name, t);
    }
    expect_error(missing, "blocks.0.attn.W_K");

    WeightStore misshapen = w;
    misshapen.at("unembed.b_U") = Tensor<float>({c.vocab_size + 1});
    expect_error(misshapen, "unembed.b_U");

    WeightStore nonfinite = w;
    nonfinite.at("blocks.0.mlp.W_in")[3] = std::numeric_limits<float>::infinity();
    expect_error(nonfinite, "blocks.0.mlp.W_in");
    CHECK_THROWS_AS(Transformer<float>(c, nonfinite), LoadError);

    // Truncated blob.
    save_weights(dir / "m.json", c, w);
    std::filesystem::resize_file(dir / "m.bin", 16);
    try {
      (void)load_weights(dir / "m.json");
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("outside the blob") != std::string::npos);
    }
    CHECK_THROWS_AS(load_weights(dir / "absent.json"), LoadError);
    testutil::write_file(dir / "bad.json", "{not json");
    CHECK_THROWS_AS(load_weights(dir / "bad.json"), LoadError);
  }

  TEST_CASE("expected tensor list covers every parameter") {
    const ModelConfig c = small_config(3, 2);
    const auto specs = expected_tensors(c);
    CHECK(specs.size() == 6 + 3 * 16);
    CHECK(random_weights(c, 1).entries().size() == specs.size());
  }
}
