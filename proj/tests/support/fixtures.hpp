#pragma once

// Shared fixtures and independent oracles for the test suites. Nothing here
// calls into the implementation paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "scd/corpus.hpp"
#include "scd/diffcore.hpp"
#include "scd/relgraph.hpp"

namespace scd::testing {

inline ResponseSet make_responses(std::size_t M, std::size_t N, const std::vector<ResponseRecord>& recs) {
  ResponseSet rs;
  for (std::size_t s = 0; s < M; ++s) rs.student_keys.push_back("s" + std::to_string(s));
  for (std::size_t e = 0; e < N; ++e) rs.exercise_keys.push_back("e" + std::to_string(e));
  rs.records = recs;
  return rs;
}

inline QMatrix make_q(std::size_t N, std::size_t K, std::vector<std::pair<std::size_t, std::size_t>> entries) {
  QMatrix q;
  q.n_exercises = N;
  q.n_concepts = K;
  for (std::size_t c = 0; c < K; ++c) q.concept_keys.push_back("c" + std::to_string(c));
  std::sort(entries.begin(), entries.end());
  q.entries = std::move(entries);
  return q;
}

/// The 4-student / 5-exercise / 3-concept fixture used for gradient checks
/// and smoke training. Degrees are uneven so dropout acts differently per node.
struct SmallFixture {
  ResponseSet train;
  QMatrix q;
};

inline SmallFixture small_fixture() {
  SmallFixture f;
  f.train = make_responses(4, 5,
                           {{0, 0, 1}, {0, 1, 0}, {0, 2, 1}, {0, 3, 1}, {0, 4, 0},
                            {1, 0, 1}, {1, 2, 0}, {1, 4, 1},
                            {2, 1, 1}, {2, 3, 0},
                            {3, 2, 1}});
  f.q = make_q(5, 3, {{0, 0}, {1, 1}, {2, 0}, {2, 2}, {3, 1}, {4, 2}, {4, 0}});
  return f;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (double& v : m.data) v = u(rng);
  return m;
}

/// Random bipartite DirectedSplit with M students, N exercises, K concepts.
inline DirectedSplit random_split(std::size_t M, std::size_t N, std::size_t K, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution edge(density);
  std::uniform_int_distribution<std::size_t> pick_c(0, K - 1);
  RelationGraph g;
  g.n_students = M;
  g.n_exercises = N;
  g.n_concepts = K;
  for (std::size_t s = 0; s < M; ++s)
    for (std::size_t e = 0; e < N; ++e)
      if (edge(rng)) g.se_edges.emplace_back(s, e);
  for (std::size_t e = 0; e < N; ++e) {
    const std::size_t a = pick_c(rng), b = pick_c(rng);
    g.ec_edges.emplace_back(e, a);
    if (b != a) g.ec_edges.emplace_back(e, b);
  }
  std::sort(g.ec_edges.begin(), g.ec_edges.end());
  return directed_split(g);
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

inline double cosine_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<double> row_of(const Matrix& m, std::size_t r) {
  return std::vector<double>(m.row(r).begin(), m.row(r).end());
}

/// Double-loop InfoNCE with plain exp/log, no stabilisation.
inline double infonce_oracle(const Matrix& z1, const Matrix& z2, double tau, bool include_positive) {
  const std::size_t n = z1.rows;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = std::exp(cosine_oracle(row_of(z1, i), row_of(z2, i)) / tau);
    double den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i && !include_positive) continue;
      den += std::exp(cosine_oracle(row_of(z1, i), row_of(z2, j)) / tau);
    }
    total += -std::log(pos / den);
  }
  return total / static_cast<double>(n);
}

/// |observed - n p| <= 3 sqrt(n p (1-p)); degenerate p in {0,1} requires exactness.
inline bool within_three_sigma(double observed_count, double n, double p) {
  const double sd = std::sqrt(n * p * (1.0 - p));
  return std::abs(observed_count - n * p) <= 3.0 * sd + 1e-9;
}

}  // namespace scd::testing
