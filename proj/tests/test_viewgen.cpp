#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "scd/viewgen.hpp"
#include "support/fixtures.hpp"

using namespace scd;
using scd::testing::make_q;
using scd::testing::make_responses;
using scd::testing::within_three_sigma;

namespace {

const DropoutParams kDefaults{1.0, 0.01, 0.3};

/// Students with the given degrees, each answering a disjoint block of
/// exercises so every exercise has degree 1.
DirectedSplit degree_fixture(const std::vector<std::size_t>& degrees) {
  std::vector<ResponseRecord> recs;
  std::size_t next = 0;
  for (std::size_t s = 0; s < degrees.size(); ++s)
    for (std::size_t i = 0; i < degrees[s]; ++i) recs.push_back({s, next++, 1});
  std::vector<std::pair<std::size_t, std::size_t>> q;
  for (std::size_t e = 0; e < next; ++e) q.emplace_back(e, 0);
  return directed_split(build_relation_graph(make_responses(degrees.size(), next, recs), make_q(next, 1, q)));
}

}  // namespace

// Values frozen from hand evaluation of k / ln(d + theta).
TEST(EdgeImportance, HandValues) {
  EXPECT_NEAR(edge_importance(1, kDefaults), 100.49917080713044, 1e-9);
  EXPECT_NEAR(edge_importance(3, kDefaults), 0.9074903611134431, 1e-12);
  EXPECT_NEAR(edge_importance(100, kDefaults), 0.21714252599732833, 1e-12);
  EXPECT_THROW(edge_importance(0, kDefaults), std::invalid_argument);
}

TEST(RetentionProb, ClampBranches) {
  EXPECT_EQ(retention_prob(100.50, 0.3), 1.0);
  EXPECT_EQ(retention_prob(0.9075, 0.3), 0.9075);
  EXPECT_EQ(retention_prob(0.21715, 0.3), 0.3);
  EXPECT_EQ(retention_prob(0.3, 0.3), 0.3);
  EXPECT_EQ(retention_prob(1.0, 0.3), 1.0);
}

TEST(RetentionProb, MonotoneAndInRange) {
  double prev = 2.0;
  for (std::size_t d = 1; d <= 1000; ++d) {
    const double t = edge_importance(d, kDefaults);
    const double p = retention_prob(t, kDefaults.p_min);
    EXPECT_LE(p, prev) << "d=" << d;
    EXPECT_GE(p, kDefaults.p_min);
    EXPECT_LE(p, 1.0);
    if (d > 1 && p > kDefaults.p_min && prev < 1.0) EXPECT_LT(p, prev) << "strict in the interior, d=" << d;
    prev = p;
  }
}

TEST(RetentionProb, DegreeOneAlwaysKeptWheneverKExceedsLogOnePlusTheta) {
  for (double theta : {1e-4, 0.01, 0.5, 1.0})
    for (double k : {std::log(1.0 + theta), 0.5, 1.0, 3.0})
      if (k >= std::log(1.0 + theta)) EXPECT_EQ(retention_for_degree(1, {k, theta, 0.3}), 1.0) << "k=" << k << " theta=" << theta;
}

TEST(DropoutParams, Validation) {
  EXPECT_THROW((DropoutParams{0.0, 0.01, 0.3}).validate(), std::invalid_argument);
  EXPECT_THROW((DropoutParams{1.0, 0.0, 0.3}).validate(), std::invalid_argument);
  EXPECT_THROW((DropoutParams{1.0, 0.01, 0.0}).validate(), std::invalid_argument);
  EXPECT_THROW((DropoutParams{1.0, 0.01, 1.1}).validate(), std::invalid_argument);
  EXPECT_NO_THROW((DropoutParams{1.0, 0.01, 1.0}).validate());
}

TEST(GenerateView, FloorOfOneIsIdentity) {
  std::mt19937_64 rng(1);
  DirectedSplit d = degree_fixture({1, 3, 20, 100});
  View v = generate_view(d, {1.0, 0.01, 1.0}, rng);
  EXPECT_EQ(v.kept_count(), d.e2s.n_edges() + d.s2e.n_edges());
  EXPECT_EQ(apply_view(d, v), d);
}

TEST(GenerateView, DegreeOneStudentAlwaysKept) {
  DirectedSplit d = degree_fixture({1, 50});
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) EXPECT_TRUE(generate_view(d, kDefaults, rng).kept_e2s[0]);
}

TEST(GenerateView, EmpiricalKeepFrequencyOfDegreeThree) {
  DirectedSplit d = degree_fixture({3});
  std::mt19937_64 rng(3);
  const int draws = 10000;
  double kept = 0;
  for (int i = 0; i < draws; ++i) kept += generate_view(d, kDefaults, rng).kept_e2s[0];
  EXPECT_TRUE(within_three_sigma(kept, draws, 0.9074903611134431)) << kept;
}

TEST(GenerateView, UsesHeadDegreePerDirection) {
  // One student with 100 exercises: e2s edges use d=100 (p=0.3), the
  // reverse s2e edges use each exercise's degree 1 (p=1).
  DirectedSplit d = degree_fixture({100});
  std::mt19937_64 rng(4);
  View v = generate_view(d, kDefaults, rng);
  std::size_t kept_e2s = 0;
  for (bool b : v.kept_e2s) kept_e2s += b;
  for (bool b : v.kept_s2e) EXPECT_TRUE(b);
  EXPECT_TRUE(within_three_sigma(kept_e2s, 100, 0.3));
}

TEST(GenerateView, ConceptEdgesUntouched) {
  std::mt19937_64 rng(5);
  DirectedSplit d = scd::testing::random_split(20, 15, 4, 0.4, rng);
  View v = generate_view(d, {0.2, 0.01, 0.05}, rng);
  DirectedSplit s = apply_view(d, v);
  EXPECT_EQ(s.c2e, d.c2e);
  EXPECT_EQ(s.e2c, d.e2c);
  EXPECT_LT(s.e2s.n_edges(), d.e2s.n_edges());
}

TEST(GenerateView, MasksMatchEdgeCounts) {
  std::mt19937_64 rng(6);
  DirectedSplit d = scd::testing::random_split(10, 12, 3, 0.3, rng);
  View v = generate_view(d, kDefaults, rng);
  EXPECT_EQ(v.kept_e2s.size(), d.e2s.n_edges());
  EXPECT_EQ(v.kept_s2e.size(), d.s2e.n_edges());
  View bad = v;
  bad.kept_e2s.pop_back();
  EXPECT_THROW(apply_view(d, bad), std::invalid_argument);
}

TEST(GenerateViewPair, ReproducibleAndDistinct) {
  std::mt19937_64 g(7);
  DirectedSplit d = scd::testing::random_split(30, 30, 5, 0.5, g);
  std::mt19937_64 a(99), b(99);
  auto p1 = generate_view_pair(d, kDefaults, a);
  auto p2 = generate_view_pair(d, kDefaults, b);
  EXPECT_EQ(p1.first.kept_e2s, p2.first.kept_e2s);
  EXPECT_EQ(p1.second.kept_s2e, p2.second.kept_s2e);
  // ~450 edges per direction with p < 1: identical masks have negligible probability.
  EXPECT_NE(p1.first.kept_e2s, p1.second.kept_e2s);
}

TEST(GenerateViewPair, IdentityAtFloorOne) {
  std::mt19937_64 g(8);
  DirectedSplit d = scd::testing::random_split(8, 8, 2, 0.5, g);
  auto [v1, v2] = generate_view_pair(d, {1.0, 0.01, 1.0}, g);
  EXPECT_EQ(apply_view(d, v1), d);
  EXPECT_EQ(apply_view(d, v2), d);
}

TEST(RandomView, FullProbabilityIsIdentity) {
  std::mt19937_64 g(9);
  DirectedSplit d = scd::testing::random_split(8, 8, 2, 0.5, g);
  EXPECT_EQ(apply_view(d, generate_random_view(d, 1.0, g)), d);
  EXPECT_THROW(generate_random_view(d, 0.0, g), std::invalid_argument);
}

TEST(RandomView, KeptCountWithinThreeSigma) {
  std::mt19937_64 g(10);
  DirectedSplit d = scd::testing::random_split(25, 20, 3, 0.3, g);
  const double n = static_cast<double>(d.e2s.n_edges() + d.s2e.n_edges());
  const int reps = 200;
  double kept = 0;
  for (int i = 0; i < reps; ++i) kept += generate_random_view(d, 0.6, g).kept_count();
  EXPECT_TRUE(within_three_sigma(kept, n * reps, 0.6));
}

TEST(RandomView, FourEdgeMaskDistributionIsUniform) {
  // One student with four exercises; count the joint pattern of its e2s edges.
  DirectedSplit d = degree_fixture({4});
  std::mt19937_64 g(11);
  std::map<unsigned, int> freq;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    View v = generate_random_view(d, 0.5, g);
    unsigned code = 0;
    for (std::size_t j = 0; j < 4; ++j) code |= static_cast<unsigned>(v.kept_e2s[j]) << j;
    ++freq[code];
  }
  EXPECT_EQ(freq.size(), 16u);
  for (auto [code, count] : freq) EXPECT_TRUE(within_three_sigma(count, draws, 1.0 / 16.0)) << code << ": " << count;
}

TEST(MatchedUniformP, ConstantDegree) {
  DirectedSplit d = degree_fixture({3, 3, 3});
  // s2e heads all have degree 1, e2s heads degree 3.
  const double expected = (9 * retention_for_degree(3, kDefaults) + 9 * 1.0) / 18.0;
  EXPECT_DOUBLE_EQ(matched_uniform_p(d, kDefaults), expected);
}

TEST(MatchedUniformP, AllEqualDegreesGiveThatProbability) {
  // Complete bipartite 3x3: every head in both directions has degree 3.
  std::vector<ResponseRecord> recs;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t e = 0; e < 3; ++e) recs.push_back({s, e, 1});
  DirectedSplit d =
      directed_split(build_relation_graph(make_responses(3, 3, recs), make_q(3, 1, {{0, 0}, {1, 0}, {2, 0}})));
  EXPECT_DOUBLE_EQ(matched_uniform_p(d, kDefaults), retention_for_degree(3, kDefaults));
}

TEST(MatchedUniformP, HandMeanOfOneThreeHundred) {
  // One head of each degree {1, 3, 100} on a side, contributing one edge each.
  const double mean = (1.0 + 0.9074903611134431 + 0.3) / 3.0;
  EXPECT_NEAR(mean, 0.7358, 5e-5);
  double acc = 0;
  for (std::size_t deg : {1u, 3u, 100u}) acc += retention_for_degree(deg, kDefaults);
  EXPECT_NEAR(acc / 3.0, 0.7358301203711477, 1e-15);
}

TEST(MatchedUniformP, ExpectedCountsAgree) {
  std::mt19937_64 g(12);
  DirectedSplit d = degree_fixture({1, 2, 3, 5, 8, 13, 21, 40});
  const double p = matched_uniform_p(d, kDefaults);
  const double n = static_cast<double>(d.e2s.n_edges() + d.s2e.n_edges());
  EXPECT_NEAR(p * n, expected_kept_edges(d, kDefaults), 1e-9);
}

TEST(DeriveRng, StreamsDiffer) {
  auto a = derive_rng(1, 0, 1), b = derive_rng(1, 0, 2), c = derive_rng(1, 1, 1), a2 = derive_rng(1, 0, 1);
  const auto va = a();
  EXPECT_NE(va, b());
  EXPECT_NE(va, c());
  EXPECT_EQ(va, a2());
}
