#include "eapig/toy.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace eapig {

namespace {

Tensor<float> gaussian(std::vector<std::size_t> shape, double stddev, double mean,
                       std::mt19937_64& rng) {
  Tensor<float> t(std::move(shape));
  std::normal_distribution<double> dist(mean, stddev);
  for (float& v : t.values()) v = float(dist(rng));
  return t;
}

// Planted-model layout.
constexpr std::size_t kDim = 16;
constexpr std::size_t kVocab = 20;
constexpr std::size_t kFeatureA = 0;   // read by m0
constexpr std::size_t kFeatureB = 1;   // read by m1
constexpr std::size_t kChannelA = 14;  // written by m0
constexpr std::size_t kChannelB = 15;  // written by m1
constexpr std::size_t kNoiseBegin = 2, kNoiseEnd = 14;

constexpr int kCleanA[] = {1, 2}, kCorruptA[] = {3, 4};
constexpr int kCleanB[] = {12, 13}, kCorruptB[] = {14, 15};
constexpr int kAnswerA = 10, kWrongA = 11, kAnswerB = 16, kWrongB = 17;
constexpr int kFillerBegin = 5, kFillerEnd = 10;

// Keeps only the noise rows (input dims) of a [.., D, ..] slab.
void zero_outside_noise(float* slab, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (r >= kNoiseBegin && r < kNoiseEnd) continue;
    std::fill(slab + r * cols, slab + (r + 1) * cols, 0.0f);
  }
}

std::vector<TaskExample> planted_dataset(const int (&clean)[2], const int (&corrupt)[2], int answer,
                                         int wrong, std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> filler(kFillerBegin, kFillerEnd - 1);
  std::uniform_int_distribution<int> pick(0, 1);
  std::uniform_int_distribution<std::size_t> length(3, 5);
  std::vector<TaskExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TaskExample ex;
    const std::size_t len = length(rng);
    for (std::size_t s = 0; s + 1 < len; ++s) ex.clean.push_back(filler(rng));
    ex.corrupted = ex.clean;
    ex.clean.push_back(clean[pick(rng)]);
    ex.corrupted.push_back(corrupt[pick(rng)]);
    ex.answers = {answer};
    ex.wrongs = {wrong};
    ex.eval_position = len - 1;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

WeightStore random_weights(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t D = c.d_model, H = c.n_heads, Dh = c.d_head, M = c.d_mlp;
  const double in_d = 1.0 / std::sqrt(double(D));
  WeightStore w;
  w.insert("embed.W_E", gaussian({c.vocab_size, D}, 1.0, 0.0, rng));
  w.insert("embed.W_pos", gaussian({c.max_seq_len, D}, 0.3, 0.0, rng));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    w.insert(p + "ln1.w", gaussian({D}, 0.1, 1.0, rng));
    w.insert(p + "ln1.b", gaussian({D}, 0.1, 0.0, rng));
    w.insert(p + "attn.W_Q", gaussian({H, D, Dh}, in_d, 0.0, rng));
    w.insert(p + "attn.b_Q", gaussian({H, Dh}, 0.1, 0.0, rng));
    w.insert(p + "attn.W_K", gaussian({H, D, Dh}, in_d, 0.0, rng));
    w.insert(p + "attn.b_K", gaussian({H, Dh}, 0.1, 0.0, rng));
    w.insert(p + "attn.W_V", gaussian({H, D, Dh}, in_d, 0.0, rng));
    w.insert(p + "attn.b_V", gaussian({H, Dh}, 0.1, 0.0, rng));
    w.insert(p + "attn.W_O", gaussian({H, Dh, D}, 1.0 / std::sqrt(double(Dh * H)), 0.0, rng));
    w.insert(p + "attn.b_O", gaussian({H, D}, 0.05, 0.0, rng));
    w.insert(p + "ln2.w", gaussian({D}, 0.1, 1.0, rng));
    w.insert(p + "ln2.b", gaussian({D}, 0.1, 0.0, rng));
    w.insert(p + "mlp.W_in", gaussian({D, M}, in_d, 0.0, rng));
    w.insert(p + "mlp.b_in", gaussian({M}, 0.1, 0.0, rng));
    w.insert(p + "mlp.W_out", gaussian({M, D}, 1.0 / std::sqrt(double(M)), 0.0, rng));
    w.insert(p + "mlp.b_out", gaussian({D}, 0.05, 0.0, rng));
  }
  w.insert("ln_final.w", gaussian({D}, 0.1, 1.0, rng));
  w.insert("ln_final.b", gaussian({D}, 0.1, 0.0, rng));
  w.insert("unembed.W_U", gaussian({D, c.vocab_size}, in_d, 0.0, rng));
  w.insert("unembed.b_U", gaussian({c.vocab_size}, 0.1, 0.0, rng));
  return w;
}

std::vector<TaskExample> random_dataset(const ModelConfig& c, std::size_t n_examples,
                                        std::size_t seq_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> token(0, int(c.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> position(0, seq_len - 1);
  std::vector<TaskExample> out;
  for (std::size_t i = 0; i < n_examples; ++i) {
    TaskExample ex;
    for (std::size_t s = 0; s < seq_len; ++s) ex.clean.push_back(token(rng));
    ex.corrupted = ex.clean;
    const std::size_t flips = 1 + position(rng) % 2;
    for (std::size_t f = 0; f < flips; ++f) ex.corrupted[position(rng)] = token(rng);
    const int a = token(rng);
    int w = token(rng);
    while (w == a) w = token(rng);
    ex.answers = {a};
    ex.wrongs = {w};
    ex.eval_position = seq_len - 1;
    out.push_back(std::move(ex));
  }
  return out;
}

PlantedBundle planted_bundle(std::uint64_t seed, std::size_t n_examples) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = kDim;
  c.d_head = 4;
  c.d_mlp = 8;
  c.vocab_size = kVocab;
  c.max_seq_len = 8;
  c.activation = Activation::Gelu;
  c.normalization = Normalization::None;

  std::mt19937_64 rng(seed);
  WeightStore w = random_weights(c, seed);
  const std::size_t D = kDim, H = c.n_heads, Dh = c.d_head, M = c.d_mlp;

  // Embeddings: noise dims random, feature dims carry the planted signs.
  auto& W_E = w.at("embed.W_E");
  W_E = gaussian({kVocab, D}, 0.5, 0.0, rng);
  auto& W_pos = w.at("embed.W_pos");
  W_pos = gaussian({c.max_seq_len, D}, 0.2, 0.0, rng);
  for (Tensor<float>* t : {&W_E, &W_pos}) {
    for (std::size_t r = 0; r < t->dim(0); ++r) {
      for (std::size_t d : {kFeatureA, kFeatureB, kChannelA, kChannelB}) (*t)[r * D + d] = 0.0f;
    }
  }
  for (int t : kCleanA) W_E[std::size_t(t) * D + kFeatureA] = 1.0f;
  for (int t : kCorruptA) W_E[std::size_t(t) * D + kFeatureA] = -1.0f;
  for (int t : kCleanB) W_E[std::size_t(t) * D + kFeatureB] = 1.0f;
  for (int t : kCorruptB) W_E[std::size_t(t) * D + kFeatureB] = -1.0f;

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    // Heads read and write only noise dims, weakly.
    for (const char* name : {"attn.W_Q", "attn.W_K", "attn.W_V"}) {
      auto& t = w.at(p + name);
      t = gaussian({H, D, Dh}, 0.3, 0.0, rng);
      for (std::size_t h = 0; h < H; ++h) zero_outside_noise(t.data() + h * D * Dh, D, Dh);
    }
    auto& W_O = w.at(p + "attn.W_O");
    W_O = gaussian({H, Dh, D}, 0.1, 0.0, rng);
    for (std::size_t i = 0; i < H * Dh; ++i) {
      for (std::size_t d = 0; d < D; ++d) {
        if (d < kNoiseBegin || d >= kNoiseEnd) W_O[i * D + d] = 0.0f;
      }
    }
    w.at(p + "attn.b_O") = Tensor<float>({H, D});

    // MLP: unit 0 is the planted feature detector, the rest are noise.
    auto& W_in = w.at(p + "mlp.W_in");
    W_in = gaussian({D, M}, 0.2, 0.0, rng);
    zero_outside_noise(W_in.data(), D, M);
    for (std::size_t d = 0; d < D; ++d) W_in[d * M + 0] = 0.0f;
    const std::size_t feature = l == 0 ? kFeatureA : kFeatureB;
    const std::size_t channel = l == 0 ? kChannelA : kChannelB;
    W_in[feature * M + 0] = 2.0f;
    auto& b_in = w.at(p + "mlp.b_in");
    b_in = gaussian({M}, 0.1, 0.0, rng);
    b_in[0] = 1.0f;

    auto& W_out = w.at(p + "mlp.W_out");
    W_out = gaussian({M, D}, 0.1, 0.0, rng);
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t d = 0; d < D; ++d) {
        if (d < kNoiseBegin || d >= kNoiseEnd) W_out[m * D + d] = 0.0f;
      }
    }
    for (std::size_t d = 0; d < D; ++d) W_out[0 * D + d] = 0.0f;
    W_out[0 * D + channel] = 1.0f;
    w.at(p + "mlp.b_out") = Tensor<float>({D});
  }

  // Unembedding: answers read their channel, everything reads noise weakly.
  auto& W_U = w.at("unembed.W_U");
  W_U = gaussian({D, kVocab}, 0.05, 0.0, rng);
  for (std::size_t d = 0; d < D; ++d) {
    if (d >= kNoiseBegin && d < kNoiseEnd) continue;
    for (std::size_t v = 0; v < kVocab; ++v) W_U[d * kVocab + v] = 0.0f;
  }
  W_U[kChannelA * kVocab + kAnswerA] = 1.0f;
  W_U[kChannelA * kVocab + kWrongA] = -1.0f;
  W_U[kChannelB * kVocab + kAnswerB] = 1.0f;
  W_U[kChannelB * kVocab + kWrongB] = -1.0f;
  w.at("unembed.b_U") = Tensor<float>({kVocab});

  PlantedBundle out;
  out.model = {c, std::move(w)};
  out.primary = {"mlp0", planted_dataset(kCleanA, kCorruptA, kAnswerA, kWrongA, n_examples, rng),
                 {MetricKind::LogitDiff}};
  out.secondary = {"mlp1", planted_dataset(kCleanB, kCorruptB, kAnswerB, kWrongB, n_examples, rng),
                   {MetricKind::LogitDiff}};
  return out;
}

ModelBundle linearized(const ModelBundle& bundle) {
  ModelBundle out = bundle;
  out.config.activation = Activation::Identity;
  out.config.normalization = Normalization::None;
  for (std::size_t l = 0; l < out.config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (const char* name : {"attn.W_Q", "attn.b_Q", "attn.W_K", "attn.b_K"}) {
      auto& t = out.weights.at(p + name);
      t = Tensor<float>(t.shape());
    }
  }
  return out;
}

}  // namespace eapig
