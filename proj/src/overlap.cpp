#include "eapig/overlap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "eapig/error.hpp"
#include "eapig/search.hpp"

namespace eapig {

namespace {

void check_pair(const Circuit& a, const Circuit& b) {
  if (a.graph_edges() != b.graph_edges()) {
    throw ShapeError("circuits come from graphs with different edge counts");
  }
}

std::vector<bool> node_set(const ComputationalGraph& g, const Circuit& c) {
  auto mask = c.node_mask(g);
  mask[g.input_node()] = false;
  mask[g.logits_node()] = false;
  return mask;
}

struct Counts {
  std::size_t a = 0, b = 0, both = 0;
};

Counts count(const std::vector<bool>& a, const std::vector<bool>& b) {
  Counts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c.a += a[i];
    c.b += b[i];
    c.both += a[i] && b[i];
  }
  return c;
}

std::vector<bool> edge_set(const Circuit& c) {
  std::vector<bool> out(c.graph_edges());
  for (EdgeIndex e = 0; e < out.size(); ++e) out[e] = c.contains(e);
  return out;
}

double jaccard(const Counts& c) {
  const std::size_t uni = c.a + c.b - c.both;
  return uni == 0 ? 1.0 : double(c.both) / double(uni);
}

double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(double(n) + 1.0) - std::lgamma(double(k) + 1.0) -
         std::lgamma(double(n - k) + 1.0);
}

// Discordant-pair count of v by merge sort; v is sorted on return.
std::uint64_t count_inversions(std::vector<double>& v) {
  std::vector<double> buf(v.size());
  std::uint64_t swaps = 0;
  for (std::size_t width = 1; width < v.size(); width *= 2) {
    for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, v.size());
      const std::size_t hi = std::min(lo + 2 * width, v.size());
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          swaps += mid - i;
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    std::swap(v, buf);
  }
  return swaps;
}

// Sum of t(t-1)/2 over runs of equal values in a sorted range.
template <typename It, typename Eq>
std::uint64_t tied_pairs(It first, It last, Eq eq) {
  std::uint64_t total = 0;
  while (first != last) {
    It run = first;
    std::uint64_t t = 0;
    while (run != last && eq(*run, *first)) {
      ++run;
      ++t;
    }
    total += t * (t - 1) / 2;
    first = run;
  }
  return total;
}

}  // namespace

std::vector<NodeIndex> comparison_nodes(const ComputationalGraph& g, const Circuit& c) {
  const auto mask = node_set(g, c);
  std::vector<NodeIndex> out;
  for (NodeIndex v = 0; v < mask.size(); ++v) {
    if (mask[v]) out.push_back(v);
  }
  return out;
}

double node_iou(const ComputationalGraph& g, const Circuit& a, const Circuit& b) {
  check_pair(a, b);
  return jaccard(count(node_set(g, a), node_set(g, b)));
}

double edge_iou(const Circuit& a, const Circuit& b) {
  check_pair(a, b);
  return jaccard(count(edge_set(a), edge_set(b)));
}

Recall recall(const ComputationalGraph& g, const Circuit& a, const Circuit& b) {
  check_pair(a, b);
  const auto nodes = count(node_set(g, a), node_set(g, b));
  const auto edges = count(edge_set(a), edge_set(b));
  if (nodes.b == 0 || edges.b == 0) throw Error("recall is undefined for an empty reference circuit");
  return {double(nodes.both) / double(nodes.b), double(edges.both) / double(edges.b)};
}

std::vector<double> average_overlap(std::span<const EdgeIndex> rank_a,
                                    std::span<const EdgeIndex> rank_b,
                                    std::span<const std::size_t> depths) {
  const std::size_t len = std::min(rank_a.size(), rank_b.size());
  std::size_t universe = 0;
  for (auto r : {rank_a, rank_b}) {
    for (EdgeIndex e : r) universe = std::max(universe, e + 1);
  }
  std::vector<std::size_t> order(depths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return depths[x] < depths[y]; });

  std::vector<bool> seen_a(universe), seen_b(universe);
  std::vector<double> out(depths.size());
  std::size_t overlap = 0, filled = 0;
  for (std::size_t idx : order) {
    const std::size_t n = depths[idx];
    if (n == 0 || n > len) {
      throw Error("average overlap depth " + std::to_string(n) + " outside [1, " +
                  std::to_string(len) + "]");
    }
    for (; filled < n; ++filled) {
      const EdgeIndex x = rank_a[filled], y = rank_b[filled];
      seen_a[x] = true;
      if (seen_b[x]) ++overlap;
      seen_b[y] = true;
      if (seen_a[y]) ++overlap;
    }
    out[idx] = double(overlap) / double(n);
  }
  return out;
}

std::vector<PrecisionRecallPoint> precision_recall_curve(const ComputationalGraph& g,
                                                         std::span<const double> scores,
                                                         const Circuit& reference,
                                                         std::span<const std::size_t> n_range) {
  const auto ref_nodes = node_set(g, reference);
  const auto ref_edges = edge_set(reference);
  const auto ref_n = count(ref_nodes, ref_nodes).a;
  const auto ref_e = count(ref_edges, ref_edges).a;
  if (ref_n == 0 || ref_e == 0) throw Error("precision/recall needs a nonempty reference circuit");

  std::vector<PrecisionRecallPoint> out;
  for (std::size_t n : n_range) {
    const Circuit c = top_n(g, scores, n);
    const auto nodes = count(node_set(g, c), ref_nodes);
    const auto edges = count(edge_set(c), ref_edges);
    PrecisionRecallPoint p;
    p.n = n;
    p.node_precision = nodes.a == 0 ? 1.0 : double(nodes.both) / double(nodes.a);
    p.node_recall = double(nodes.both) / double(ref_n);
    p.edge_precision = edges.a == 0 ? 1.0 : double(edges.both) / double(edges.a);
    p.edge_recall = double(edges.both) / double(ref_e);
    out.push_back(p);
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw Error("pearson needs equal-length nonempty inputs");
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double kendall_tau_b(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("kendall needs equal-length inputs");
  const std::size_t n = a.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();

  std::vector<std::pair<double, double>> pts(n);
  for (std::size_t i = 0; i < n; ++i) pts[i] = {a[i], b[i]};
  std::sort(pts.begin(), pts.end());

  const std::uint64_t n0 = std::uint64_t(n) * (n - 1) / 2;
  const std::uint64_t ties_a =
      tied_pairs(pts.begin(), pts.end(), [](auto& x, auto& y) { return x.first == y.first; });
  const std::uint64_t ties_ab = tied_pairs(pts.begin(), pts.end(), [](auto& x, auto& y) { return x == y; });

  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = pts[i].second;
  const std::uint64_t discordant = count_inversions(ys);
  const std::uint64_t ties_b = tied_pairs(ys.begin(), ys.end(), std::equal_to<>());

  const double concordant_minus_discordant =
      double(n0) - double(ties_a) - double(ties_b) + double(ties_ab) - 2.0 * double(discordant);
  const double denom = std::sqrt(double(n0 - ties_a) * double(n0 - ties_b));
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(concordant_minus_discordant / denom, -1.0, 1.0);
}

double kendall_abs(std::span<const double> a, std::span<const double> b) {
  std::vector<double> x(a.size()), y(b.size());
  std::transform(a.begin(), a.end(), x.begin(), [](double v) { return std::abs(v); });
  std::transform(b.begin(), b.end(), y.begin(), [](double v) { return std::abs(v); });
  return kendall_tau_b(x, y);
}

ApproximationError approximation_error(std::span<const double> approx,
                                       std::span<const double> reference) {
  if (approx.size() != reference.size() || approx.empty()) {
    throw Error("approximation error needs equal-length nonempty score sets");
  }
  ApproximationError r;
  for (std::size_t i = 0; i < approx.size(); ++i) {
    const double d = approx[i] - reference[i];
    r.mean_absolute += std::abs(d);
    r.mean_signed += d;
  }
  r.mean_absolute /= double(approx.size());
  r.mean_signed /= double(approx.size());
  return r;
}

double hypergeom_overlap_pvalue(std::size_t N, std::size_t K, std::size_t n, std::size_t k) {
  if (K > N || n > N || k > std::min(n, K)) {
    throw Error("hypergeometric parameters need 0 <= k <= min(n, K) and n, K <= N (got N=" +
                std::to_string(N) + ", K=" + std::to_string(K) + ", n=" + std::to_string(n) +
                ", k=" + std::to_string(k) + ")");
  }
  // Support of X is [max(0, n + K - N), min(n, K)].
  const std::size_t lo = n + K > N ? n + K - N : 0;
  if (k <= lo) return 1.0;
  const std::size_t hi = std::min(n, K);
  const double log_total = log_choose(N, n);
  std::vector<double> terms;
  for (std::size_t i = k; i <= hi; ++i) {
    terms.push_back(log_choose(K, i) + log_choose(N - K, n - i) - log_total);
  }
  const double mx = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return std::clamp(std::exp(mx) * s, 0.0, 1.0);
}

OverlapSignificance node_overlap_significance(const ComputationalGraph& g, const Circuit& a,
                                              const Circuit& b) {
  check_pair(a, b);
  const auto c = count(node_set(g, a), node_set(g, b));
  OverlapSignificance r;
  r.population = g.num_nodes() - 2;
  r.set_a = c.a;
  r.set_b = c.b;
  r.overlap = c.both;
  r.p_value = hypergeom_overlap_pvalue(r.population, c.b, c.a, c.both);
  r.significant = r.p_value < 0.01;
  return r;
}

}  // namespace eapig
