#include "eapig/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "eapig/error.hpp"

namespace eapig {

namespace {

template <typename T>
std::vector<T> convert(const WeightStore& w, const std::string& name) {
  const auto& t = w.at(name);
  return std::vector<T>(t.values().begin(), t.values().end());
}

template <typename T>
struct NormTrace {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

// y = layernorm(x) * w + b over the last axis, or y = x when disabled.
template <typename T>
void norm_forward(const T* x, std::size_t rows, std::size_t D, const std::vector<T>& w,
                  const std::vector<T>& b, double eps, bool enabled, std::vector<T>& y,
                  NormTrace<T>* trace) {
  y.assign(x, x + rows * D);
  if (!enabled) return;
  std::vector<T> xhat(rows * D), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T mean = 0;
    for (std::size_t d = 0; d < D; ++d) mean += xr[d];
    mean /= T(D);
    T var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= T(D);
    const T is = T(1) / std::sqrt(var + T(eps));
    inv_std[r] = is;
    for (std::size_t d = 0; d < D; ++d) {
      const T h = (xr[d] - mean) * is;
      xhat[r * D + d] = h;
      y[r * D + d] = h * w[d] + b[d];
    }
  }
  if (trace) {
    trace->xhat = std::move(xhat);
    trace->inv_std = std::move(inv_std);
  }
}

template <typename T>
void norm_backward(const T* dy, std::size_t rows, std::size_t D, const std::vector<T>& w,
                   bool enabled, const NormTrace<T>& tr, T* dx) {
  if (!enabled) {
    std::copy(dy, dy + rows * D, dx);
    return;
  }
  std::vector<T> g(D);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* h = tr.xhat.data() + r * D;
    T mean_g = 0, mean_gh = 0;
    for (std::size_t d = 0; d < D; ++d) {
      g[d] = dy[r * D + d] * w[d];
      mean_g += g[d];
      mean_gh += g[d] * h[d];
    }
    mean_g /= T(D);
    mean_gh /= T(D);
    for (std::size_t d = 0; d < D; ++d) {
      dx[r * D + d] = tr.inv_std[r] * (g[d] - mean_g - h[d] * mean_gh);
    }
  }
}

// y[r, o] = bias[o] + sum_i x[r, i] W[i, o]
template <typename T>
void affine(const T* x, std::size_t rows, std::size_t in, const T* W, const T* bias,
            std::size_t out, T* y) {
  // Tiled over W so each block is reused by every row while cached; every
  // output still accumulates over i in ascending order.
  constexpr std::size_t kOut = 512, kIn = 64;
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = bias ? bias[o] : T(0);
  }
  for (std::size_t o0 = 0; o0 < out; o0 += kOut) {
    const std::size_t o1 = std::min(out, o0 + kOut);
    for (std::size_t i0 = 0; i0 < in; i0 += kIn) {
      const std::size_t i1 = std::min(in, i0 + kIn);
      for (std::size_t r = 0; r < rows; ++r) {
        T* yr = y + r * out;
        const T* xr = x + r * in;
        for (std::size_t i = i0; i < i1; ++i) {
          const T xi = xr[i];
          const T* Wi = W + i * out;
          for (std::size_t o = o0; o < o1; ++o) yr[o] += xi * Wi[o];
        }
      }
    }
  }
}

// dx[r, i] = sum_o dy[r, o] W[i, o]. dy is transposed so the inner loop runs
// over rows; each sum still accumulates over o in ascending order.
template <typename T>
void affine_backward(const T* dy, std::size_t rows, std::size_t out, const T* W, std::size_t in,
                     T* dx) {
  constexpr std::size_t kOut = 1024;
  std::vector<T> dyT(out * rows), acc(in * rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) dyT[o * rows + r] = dy[r * out + o];
  }
  for (std::size_t o0 = 0; o0 < out; o0 += kOut) {
    const std::size_t o1 = std::min(out, o0 + kOut);
    for (std::size_t i = 0; i < in; ++i) {
      const T* Wi = W + i * out;
      T* ai = acc.data() + i * rows;
      for (std::size_t o = o0; o < o1; ++o) {
        const T w = Wi[o];
        const T* d = dyT.data() + o * rows;
        for (std::size_t r = 0; r < rows; ++r) ai[r] += d[r] * w;
      }
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < in; ++i) dx[r * in + i] = acc[i * rows + r];
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::Gelu: {
      const T t = std::tanh(T(kGeluC) * (x + T(kGeluA) * x * x * x));
      return T(0.5) * x * (T(1) + t);
    }
    case Activation::Relu: return x > T(0) ? x : T(0);
    case Activation::Identity: return x;
  }
  return x;
}

template <typename T>
T activate_grad(Activation a, T x) {
  switch (a) {
    case Activation::Gelu: {
      const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
      const T t = std::tanh(u);
      const T du = T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
      return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
    }
    case Activation::Relu: return x > T(0) ? T(1) : T(0);
    case Activation::Identity: return T(1);
  }
  return T(1);
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace

template <typename T>
void InterventionSet<T>::validate(const ComputationalGraph& g,
                                  const std::vector<std::size_t>& shape) const {
  for (const auto& [e, p] : patches_) {
    if (e >= g.num_edges()) {
      throw InputError("intervention on edge " + std::to_string(e) + " outside graph with " +
                       std::to_string(g.num_edges()) + " edges");
    }
    if (!p.source || p.source->shape() != shape) {
      const auto id = g.edge_id(e);
      throw InputError("intervention on " + id.src.name() + "->" + id.dst.name() +
                       " has shape " +
                       (p.source ? Tensor<T>::shape_string(p.source->shape()) : "null") +
                       ", expected " + Tensor<T>::shape_string(shape));
    }
  }
  for (const auto& [s, d] : offsets_) {
    if (s >= g.num_slots() || !d || d->shape() != shape) {
      throw InputError("invalid offset on slot " + std::to_string(s));
    }
  }
}

template <typename T>
InterventionSet<T> corrupt_outside(const ComputationalGraph& g, const Circuit& circuit,
                                   const ActivationCache<T>& corrupted) {
  if (circuit.graph_edges() != g.num_edges()) {
    throw InputError("circuit has " + std::to_string(circuit.graph_edges()) +
                     " edges, model graph has " + std::to_string(g.num_edges()));
  }
  InterventionSet<T> iv;
  for (EdgeIndex e = 0; e < g.num_edges(); ++e) {
    if (!circuit.contains(e)) iv.patch(e, corrupted.shared_output(g.edges()[e].src));
  }
  return iv;
}

template <typename T>
Tensor<T> interpolate_embeddings(const Tensor<T>& z, const Tensor<T>& z_prime, T alpha) {
  if (!z.same_shape(z_prime)) {
    throw ShapeError("clean and corrupted inputs differ in shape (" +
                     Tensor<T>::shape_string(z.shape()) + " vs " +
                     Tensor<T>::shape_string(z_prime.shape()) +
                     "); interpolation needs token-length-matched pairs, so pad or "
                     "match the dataset");
  }
  if (alpha == T(1)) return z;
  if (alpha == T(0)) return z_prime;
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z_prime[i] + alpha * (z[i] - z_prime[i]);
  return out;
}

template <typename T>
struct Transformer<T>::Trace {
  struct Head {
    NormTrace<T> nq, nk, nv;
    std::vector<T> q, k, v, p;
  };
  struct Mlp {
    NormTrace<T> n;
    std::vector<T> pre;
  };
  std::size_t B = 0, S = 0;
  std::vector<Head> heads;
  std::vector<Mlp> mlps;
  NormTrace<T> final_norm;
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, const WeightStore& w)
    : config_(config), graph_(config) {
  config_.validate();
  w.validate(config_);
  W_E_ = convert<T>(w, "embed.W_E");
  W_pos_ = convert<T>(w, "embed.W_pos");
  lnf_w_ = convert<T>(w, "ln_final.w");
  lnf_b_ = convert<T>(w, "ln_final.b");
  W_U_ = convert<T>(w, "unembed.W_U");
  b_U_ = convert<T>(w, "unembed.b_U");
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Layer L;
    L.ln1_w = convert<T>(w, p + "ln1.w");
    L.ln1_b = convert<T>(w, p + "ln1.b");
    L.W_Q = convert<T>(w, p + "attn.W_Q");
    L.b_Q = convert<T>(w, p + "attn.b_Q");
    L.W_K = convert<T>(w, p + "attn.W_K");
    L.b_K = convert<T>(w, p + "attn.b_K");
    L.W_V = convert<T>(w, p + "attn.W_V");
    L.b_V = convert<T>(w, p + "attn.b_V");
    L.W_O = convert<T>(w, p + "attn.W_O");
    L.b_O = convert<T>(w, p + "attn.b_O");
    L.ln2_w = convert<T>(w, p + "ln2.w");
    L.ln2_b = convert<T>(w, p + "ln2.b");
    L.W_in = convert<T>(w, p + "mlp.W_in");
    L.b_in = convert<T>(w, p + "mlp.b_in");
    L.W_out = convert<T>(w, p + "mlp.W_out");
    L.b_out = convert<T>(w, p + "mlp.b_out");
    layers_.push_back(std::move(L));
  }
}

template <typename T>
Tensor<T> Transformer<T>::embed(const TokenBatch& tokens) const {
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw InputError("token batch holds " + std::to_string(tokens.ids.size()) + " ids, expected " +
                     std::to_string(tokens.batch * tokens.seq));
  }
  if (tokens.seq > config_.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  const std::size_t D = config_.d_model;
  Tensor<T> out({tokens.batch, tokens.seq, D});
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t s = 0; s < tokens.seq; ++s) {
      const int id = tokens.at(b, s);
      if (id < 0 || std::size_t(id) >= config_.vocab_size) {
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(config_.vocab_size));
      }
      for (std::size_t d = 0; d < D; ++d) {
        out.at(b, s, d) = W_E_[std::size_t(id) * D + d] + W_pos_[s * D + d];
      }
    }
  }
  return out;
}

template <typename T>
ActivationCache<T> Transformer<T>::run(const Tensor<T>& embeddings, const InterventionSet<T>& iv,
                                       Trace* trace) const {
  if (embeddings.rank() != 3 || embeddings.dim(2) != config_.d_model) {
    throw InputError("embeddings must be [batch, seq, " + std::to_string(config_.d_model) +
                     "], got " + Tensor<T>::shape_string(embeddings.shape()));
  }
  const std::size_t B = embeddings.dim(0), S = embeddings.dim(1), D = config_.d_model;
  if (S > config_.max_seq_len) {
    throw InputError("sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (!iv.empty()) iv.validate(graph_, embeddings.shape());

  const std::size_t R = B * S, H = config_.n_heads, Dh = config_.d_head, M = config_.d_mlp;
  const bool ln = config_.normalization == Normalization::LayerNorm;
  const T scale = T(1) / std::sqrt(T(Dh));
  const auto& slots = graph_.slots();

  if (trace) {
    trace->B = B;
    trace->S = S;
    trace->heads.assign(config_.n_layers * H, {});
    trace->mlps.assign(config_.n_layers, {});
  }

  ActivationCache<T> cache(graph_.num_nodes() - 1);
  cache.set_output(graph_.input_node(), embeddings);

  // Slots without patches read the running sum of node outputs, which adds the
  // sources in the same order as the explicit loop below.
  std::vector<char> patched(graph_.num_slots(), 0);
  iv.for_each_patch([&](EdgeIndex e, const EdgePatch<T>&) { patched[graph_.edges()[e].slot] = 1; });
  std::vector<T> prefix(R * D, T(0));
  NodeIndex prefix_len = 0;

  auto gather = [&](SlotIndex s) {
    const auto& info = slots[s];
    std::vector<T> in;
    if (!patched[s]) {
      while (prefix_len < info.n_sources) {
        const T* live = cache.output(prefix_len).data();
        for (std::size_t i = 0; i < prefix.size(); ++i) prefix[i] += live[i];
        ++prefix_len;
      }
      in = prefix;
    } else {
      in.assign(R * D, T(0));
      for (NodeIndex u = 0; u < info.n_sources; ++u) {
        const T* live = cache.output(u).data();
        const EdgePatch<T>* p = iv.find(info.first_edge + u);
        if (!p || p->keep == T(1)) {
          for (std::size_t i = 0; i < in.size(); ++i) in[i] += live[i];
        } else if (p->keep == T(0)) {
          const T* src = p->source->data();
          for (std::size_t i = 0; i < in.size(); ++i) in[i] += src[i];
        } else {
          const T* src = p->source->data();
          const T k = p->keep;
          for (std::size_t i = 0; i < in.size(); ++i) in[i] += src[i] + k * (live[i] - src[i]);
        }
      }
    }
    if (const Tensor<T>* off = iv.slot_offset(s)) {
      for (std::size_t i = 0; i < in.size(); ++i) in[i] += (*off)[i];
    }
    return in;
  };

  for (NodeIndex v = 1; v < graph_.num_nodes(); ++v) {
    const NodeId& id = graph_.nodes()[v];
    const auto node_slots = graph_.node_slots(v);

    if (id.kind == NodeKind::Head) {
      const Layer& L = layers_[id.layer];
      const std::size_t h = id.index;
      typename Trace::Head ht;
      std::vector<T> xq = gather(node_slots[0]), xk = gather(node_slots[1]),
                     xv = gather(node_slots[2]);
      std::vector<T> nq, nk, nv;
      norm_forward(xq.data(), R, D, L.ln1_w, L.ln1_b, config_.ln_eps, ln, nq, trace ? &ht.nq : nullptr);
      norm_forward(xk.data(), R, D, L.ln1_w, L.ln1_b, config_.ln_eps, ln, nk, trace ? &ht.nk : nullptr);
      norm_forward(xv.data(), R, D, L.ln1_w, L.ln1_b, config_.ln_eps, ln, nv, trace ? &ht.nv : nullptr);
      std::vector<T> q(R * Dh), k(R * Dh), vv(R * Dh);
      affine(nq.data(), R, D, L.W_Q.data() + h * D * Dh, L.b_Q.data() + h * Dh, Dh, q.data());
      affine(nk.data(), R, D, L.W_K.data() + h * D * Dh, L.b_K.data() + h * Dh, Dh, k.data());
      affine(nv.data(), R, D, L.W_V.data() + h * D * Dh, L.b_V.data() + h * Dh, Dh, vv.data());

      std::vector<T> p(B * S * S, T(0)), z(R * Dh, T(0));
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < S; ++i) {
          T* pi = p.data() + (b * S + i) * S;
          const T* qi = q.data() + (b * S + i) * Dh;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j <= i; ++j) {
            const T* kj = k.data() + (b * S + j) * Dh;
            T s = 0;
            for (std::size_t e = 0; e < Dh; ++e) s += qi[e] * kj[e];
            pi[j] = s * scale;
            mx = std::max(mx, pi[j]);
          }
          T sum = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            pi[j] = std::exp(pi[j] - mx);
            sum += pi[j];
          }
          T* zi = z.data() + (b * S + i) * Dh;
          for (std::size_t j = 0; j <= i; ++j) {
            pi[j] /= sum;
            const T* vj = vv.data() + (b * S + j) * Dh;
            for (std::size_t e = 0; e < Dh; ++e) zi[e] += pi[j] * vj[e];
          }
        }
      }
      Tensor<T> out({B, S, D});
      affine(z.data(), R, Dh, L.W_O.data() + h * Dh * D, L.b_O.data() + h * D, D, out.data());
      cache.set_output(v, std::move(out));
      if (trace) {
        ht.q = std::move(q);
        ht.k = std::move(k);
        ht.v = std::move(vv);
        ht.p = std::move(p);
        trace->heads[id.layer * H + h] = std::move(ht);
      }
    } else if (id.kind == NodeKind::Mlp) {
      const Layer& L = layers_[id.layer];
      typename Trace::Mlp mt;
      std::vector<T> x = gather(node_slots[0]);
      std::vector<T> n;
      norm_forward(x.data(), R, D, L.ln2_w, L.ln2_b, config_.ln_eps, ln, n, trace ? &mt.n : nullptr);
      std::vector<T> pre(R * M), act(R * M);
      affine(n.data(), R, D, L.W_in.data(), L.b_in.data(), M, pre.data());
      for (std::size_t i = 0; i < pre.size(); ++i) act[i] = activate(config_.activation, pre[i]);
      Tensor<T> out({B, S, D});
      affine(act.data(), R, M, L.W_out.data(), L.b_out.data(), D, out.data());
      cache.set_output(v, std::move(out));
      if (trace) {
        mt.pre = std::move(pre);
        trace->mlps[id.layer] = std::move(mt);
      }
    } else {
      std::vector<T> x = gather(node_slots[0]);
      std::vector<T> n;
      norm_forward(x.data(), R, D, lnf_w_, lnf_b_, config_.ln_eps, ln, n,
                   trace ? &trace->final_norm : nullptr);
      const std::size_t V = config_.vocab_size;
      cache.logits = Tensor<T>({B, S, V});
      affine(n.data(), R, D, W_U_.data(), b_U_.data(), V, cache.logits.data());
    }
  }
  return cache;
}

template <typename T>
ActivationCache<T> Transformer<T>::forward(const Tensor<T>& embeddings,
                                           const InterventionSet<T>& interventions) const {
  return run(embeddings, interventions, nullptr);
}

template <typename T>
BackwardResult<T> Transformer<T>::node_input_gradients(const Tensor<T>& embeddings,
                                                       const LogitObjective<T>& loss,
                                                       const InterventionSet<T>& iv) const {
  Trace tr;
  BackwardResult<T> result;
  result.activations = run(embeddings, iv, &tr);
  const auto& logits = result.activations.logits;

  Tensor<T> dlogits(logits.shape());
  result.loss = loss(logits, &dlogits);

  const std::size_t B = tr.B, S = tr.S, R = B * S, D = config_.d_model;
  const std::size_t H = config_.n_heads, Dh = config_.d_head, M = config_.d_mlp;
  const std::size_t V = config_.vocab_size;
  const bool ln = config_.normalization == Normalization::LayerNorm;
  const T scale = T(1) / std::sqrt(T(Dh));
  const auto& slots = graph_.slots();

  std::vector<std::vector<T>> dout(graph_.num_nodes() - 1, std::vector<T>(R * D, T(0)));
  auto& grads = result.gradients.slots;
  grads.assign(graph_.num_slots(), Tensor<T>());

  // Unpatched slot gradients flow to every source before the slot's node, so
  // they are kept as a suffix sum that each node adds when it is reached.
  // Patched slots scatter to their sources edge by edge.
  std::vector<char> patched(graph_.num_slots(), 0);
  iv.for_each_patch([&](EdgeIndex e, const EdgePatch<T>&) { patched[graph_.edges()[e].slot] = 1; });
  std::vector<T> suffix(R * D, T(0));
  std::vector<std::vector<SlotIndex>> pending(graph_.num_nodes());

  auto record = [&](SlotIndex s, std::vector<T> g) {
    if (!all_finite(g)) {
      throw NumericError("non-finite gradient at input of node " +
                         graph_.nodes()[slots[s].node].name() + " (slot " +
                         to_string(slots[s].slot) + ")");
    }
    const auto& info = slots[s];
    if (!patched[s]) {
      pending[info.n_sources].push_back(s);
    } else {
      for (NodeIndex u = 0; u < info.n_sources; ++u) {
        const EdgePatch<T>* p = iv.find(info.first_edge + u);
        const T keep = p ? p->keep : T(1);
        if (keep == T(0)) continue;
        T* du = dout[u].data();
        if (keep == T(1)) {
          for (std::size_t i = 0; i < g.size(); ++i) du[i] += g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) du[i] += keep * g[i];
        }
      }
    }
    grads[s] = Tensor<T>({B, S, D}, std::move(g));
  };

  // Folds the suffix sum into dout[u] once every slot fed by u is recorded.
  auto settle = [&](NodeIndex u) {
    for (SlotIndex s : pending[u + 1]) {
      const T* g = grads[s].data();
      for (std::size_t i = 0; i < suffix.size(); ++i) suffix[i] += g[i];
    }
    T* du = dout[u].data();
    for (std::size_t i = 0; i < suffix.size(); ++i) du[i] += suffix[i];
  };

  {
    std::vector<T> dn(R * D), dx(R * D);
    affine_backward(dlogits.data(), R, V, W_U_.data(), D, dn.data());
    norm_backward(dn.data(), R, D, lnf_w_, ln, tr.final_norm, dx.data());
    record(graph_.node_slots(graph_.logits_node())[0], std::move(dx));
  }

  for (NodeIndex v = graph_.logits_node(); v-- > 1;) {
    settle(v);
    const NodeId& id = graph_.nodes()[v];
    const auto node_slots = graph_.node_slots(v);
    const Layer& L = layers_[id.layer];
    const std::vector<T>& dy = dout[v];

    if (id.kind == NodeKind::Mlp) {
      const auto& mt = tr.mlps[id.layer];
      std::vector<T> dpre(R * M), dn(R * D), dx(R * D);
      affine_backward(dy.data(), R, D, L.W_out.data(), M, dpre.data());
      for (std::size_t i = 0; i < dpre.size(); ++i) {
        dpre[i] *= activate_grad(config_.activation, mt.pre[i]);
      }
      affine_backward(dpre.data(), R, M, L.W_in.data(), D, dn.data());
      norm_backward(dn.data(), R, D, L.ln2_w, ln, mt.n, dx.data());
      record(node_slots[0], std::move(dx));
      continue;
    }

    const std::size_t h = id.index;
    const auto& ht = tr.heads[id.layer * H + h];
    std::vector<T> dz(R * Dh);
    affine_backward(dy.data(), R, D, L.W_O.data() + h * Dh * D, Dh, dz.data());

    std::vector<T> dq(R * Dh, T(0)), dk(R * Dh, T(0)), dv(R * Dh, T(0));
    std::vector<T> dp(S);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < S; ++i) {
        const T* pi = ht.p.data() + (b * S + i) * S;
        const T* dzi = dz.data() + (b * S + i) * Dh;
        T weighted = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = ht.v.data() + (b * S + j) * Dh;
          T* dvj = dv.data() + (b * S + j) * Dh;
          T s = 0;
          for (std::size_t e = 0; e < Dh; ++e) {
            s += dzi[e] * vj[e];
            dvj[e] += pi[j] * dzi[e];
          }
          dp[j] = s;
          weighted += pi[j] * s;
        }
        const T* qi = ht.q.data() + (b * S + i) * Dh;
        T* dqi = dq.data() + (b * S + i) * Dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = pi[j] * (dp[j] - weighted) * scale;
          const T* kj = ht.k.data() + (b * S + j) * Dh;
          T* dkj = dk.data() + (b * S + j) * Dh;
          for (std::size_t e = 0; e < Dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }

    auto slot_grad = [&](const std::vector<T>& dproj, const std::vector<T>& W,
                         const NormTrace<T>& nt) {
      std::vector<T> dn(R * D), dx(R * D);
      affine_backward(dproj.data(), R, Dh, W.data() + h * D * Dh, D, dn.data());
      norm_backward(dn.data(), R, D, L.ln1_w, ln, nt, dx.data());
      return dx;
    };
    record(node_slots[0], slot_grad(dq, L.W_Q, ht.nq));
    record(node_slots[1], slot_grad(dk, L.W_K, ht.nk));
    record(node_slots[2], slot_grad(dv, L.W_V, ht.nv));
  }
  settle(graph_.input_node());
  return result;
}

template class Transformer<float>;
template class Transformer<double>;
template class InterventionSet<float>;
template class InterventionSet<double>;
template InterventionSet<float> corrupt_outside(const ComputationalGraph&, const Circuit&,
                                                const ActivationCache<float>&);
template InterventionSet<double> corrupt_outside(const ComputationalGraph&, const Circuit&,
                                                 const ActivationCache<double>&);
template Tensor<float> interpolate_embeddings(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> interpolate_embeddings(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace eapig
