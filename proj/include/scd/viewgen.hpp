#pragma once

// Sparse views of the student-exercise subgraph via degree-aware edge dropout,
// and the uniform-probability variant used as an ablation.
//
// Each directed edge is kept with a probability driven by the in-degree of
// its head (aggregating) node:
//   importance t = k / ln(d + theta)
//   retention  p = clamp(t, p_min, 1)
// so low-degree nodes keep their edges and hubs are thinned down to p_min.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "scd/relgraph.hpp"

namespace scd {

struct DropoutParams {
  double k = 1.0;
  double theta = 0.01;
  double p_min = 0.3;

  void validate() const {
    if (!(k > 0.0)) throw std::invalid_argument("DropoutParams: k must be > 0");
    if (!(theta > 0.0)) throw std::invalid_argument("DropoutParams: theta must be > 0");
    if (!(p_min > 0.0 && p_min <= 1.0)) throw std::invalid_argument("DropoutParams: p_min must lie in (0,1]");
  }
};

/// Retained-edge masks over the two student-exercise directions, parallel to
/// DirectedSplit::e2s.neighbors and DirectedSplit::s2e.neighbors.
struct View {
  std::vector<bool> kept_e2s;
  std::vector<bool> kept_s2e;
  std::uint64_t seed_tag = 0;

  std::size_t kept_count() const {
    std::size_t n = 0;
    for (bool b : kept_e2s) n += b;
    for (bool b : kept_s2e) n += b;
    return n;
  }
};

inline double edge_importance(std::size_t degree, const DropoutParams& p) {
  if (degree < 1) throw std::invalid_argument("edge_importance: degree must be >= 1");
  return p.k / std::log(static_cast<double>(degree) + p.theta);
}

inline double retention_prob(double t, double p_min) {
  if (t <= p_min) return p_min;
  if (t <= 1.0) return t;
  return 1.0;
}

inline double retention_for_degree(std::size_t degree, const DropoutParams& p) {
  return retention_prob(edge_importance(degree, p), p.p_min);
}

namespace detail {

template <class Rng, class ProbOf>
std::vector<bool> sample_mask(const Adjacency& a, Rng& rng, ProbOf prob_of_head) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<bool> mask(a.n_edges());
  for (std::size_t h = 0; h < a.n_heads(); ++h) {
    const std::size_t b = a.segments.offsets[h], e = a.segments.offsets[h + 1];
    if (b == e) continue;
    const double p = prob_of_head(h, e - b);
    for (std::size_t i = b; i < e; ++i) mask[i] = unit(rng) < p;
  }
  return mask;
}

}  // namespace detail

/// Degree-aware dropout view. RNG draws happen in e2s edge order, then s2e.
template <class Rng>
View generate_view(const DirectedSplit& split, const DropoutParams& p, Rng& rng) {
  p.validate();
  if (split.e2s.n_edges() == 0) throw std::invalid_argument("generate_view: no student-exercise edges");
  auto prob = [&p](std::size_t, std::size_t deg) { return retention_for_degree(deg, p); };
  View v;
  v.kept_e2s = detail::sample_mask(split.e2s, rng, prob);
  v.kept_s2e = detail::sample_mask(split.s2e, rng, prob);
  return v;
}

template <class Rng>
std::pair<View, View> generate_view_pair(const DirectedSplit& split, const DropoutParams& p, Rng& rng) {
  View a = generate_view(split, p, rng);
  View b = generate_view(split, p, rng);
  a.seed_tag = 0;
  b.seed_tag = 1;
  return {std::move(a), std::move(b)};
}

/// Every student-exercise directed edge kept i.i.d. with `p_uniform`.
template <class Rng>
View generate_random_view(const DirectedSplit& split, double p_uniform, Rng& rng) {
  if (!(p_uniform > 0.0 && p_uniform <= 1.0)) throw std::invalid_argument("generate_random_view: p must lie in (0,1]");
  auto prob = [p_uniform](std::size_t, std::size_t) { return p_uniform; };
  View v;
  v.kept_e2s = detail::sample_mask(split.e2s, rng, prob);
  v.kept_s2e = detail::sample_mask(split.s2e, rng, prob);
  return v;
}

template <class Rng>
std::pair<View, View> generate_random_view_pair(const DirectedSplit& split, double p_uniform, Rng& rng) {
  View a = generate_random_view(split, p_uniform, rng);
  View b = generate_random_view(split, p_uniform, rng);
  a.seed_tag = 0;
  b.seed_tag = 1;
  return {std::move(a), std::move(b)};
}

/// Mean degree-aware retention probability over all student-exercise
/// directed edges; a uniform view at this rate has the same expected size.
inline double matched_uniform_p(const DirectedSplit& split, const DropoutParams& p) {
  p.validate();
  double total = 0.0;
  std::size_t n = 0;
  for (const Adjacency* a : {&split.e2s, &split.s2e})
    for (std::size_t h = 0; h < a->n_heads(); ++h) {
      const std::size_t d = a->indegree(h);
      if (d == 0) continue;
      total += static_cast<double>(d) * retention_for_degree(d, p);
      n += d;
    }
  if (n == 0) throw std::invalid_argument("matched_uniform_p: no student-exercise edges");
  return total / static_cast<double>(n);
}

/// Expected number of kept directed edges under degree-aware dropout.
inline double expected_kept_edges(const DirectedSplit& split, const DropoutParams& p) {
  double total = 0.0;
  for (const Adjacency* a : {&split.e2s, &split.s2e})
    for (std::size_t h = 0; h < a->n_heads(); ++h)
      if (const std::size_t d = a->indegree(h); d > 0) total += static_cast<double>(d) * retention_for_degree(d, p);
  return total;
}

namespace detail {

inline Adjacency filter_adjacency(const Adjacency& a, const std::vector<bool>& keep) {
  if (keep.size() != a.n_edges()) throw std::invalid_argument("apply_view: mask length does not match edge count");
  Adjacency out;
  out.n_tail = a.n_tail;
  out.segments.offsets.assign(a.n_heads() + 1, 0);
  for (std::size_t h = 0; h < a.n_heads(); ++h) {
    for (std::size_t i = a.segments.offsets[h]; i < a.segments.offsets[h + 1]; ++i)
      if (keep[i]) out.neighbors.push_back(a.neighbors[i]);
    out.segments.offsets[h + 1] = out.neighbors.size();
  }
  return out;
}

}  // namespace detail

/// The split with dropped student-exercise edges removed. Concept edges are
/// carried over untouched.
inline DirectedSplit apply_view(const DirectedSplit& split, const View& v) {
  DirectedSplit out;
  out.e2s = detail::filter_adjacency(split.e2s, v.kept_e2s);
  out.s2e = detail::filter_adjacency(split.s2e, v.kept_s2e);
  out.c2e = split.c2e;
  out.e2c = split.e2c;
  return out;
}

/// Independent generator for (master seed, epoch, stream).
inline std::mt19937_64 derive_rng(std::uint64_t master_seed, std::uint64_t epoch, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace scd
