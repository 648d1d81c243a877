#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "scd/diffcore.hpp"
#include "support/fixtures.hpp"

using namespace scd;
using scd::testing::random_matrix;

TEST(DiffCore, SigmoidAtZero) {
  Tape t;
  Var x = t.leaf(Matrix::scalar(0.0));
  Var y = sigmoid(x);
  t.backward(y);
  EXPECT_DOUBLE_EQ(y.item(), 0.5);
  EXPECT_DOUBLE_EQ(x.grad().data[0], 0.25);
}

TEST(DiffCore, SegmentSoftmaxOfEqualScoresIsUniform) {
  Tape t;
  Segments seg;
  seg.offsets = {0, 2};
  Var y = segment_softmax(t.leaf(Matrix::column({3.7, 3.7})), seg);
  EXPECT_DOUBLE_EQ(y.value().data[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value().data[1], 0.5);
}

TEST(DiffCore, SegmentSoftmaxSkipsEmptySegmentsAndSurvivesLargeLogits) {
  Tape t;
  Segments seg;
  seg.offsets = {0, 0, 3, 3, 4};
  Var y = segment_softmax(t.leaf(Matrix::column({1000.0, 1000.0, -1000.0, 5.0})), seg);
  const auto& v = y.value().data;
  EXPECT_NEAR(v[0] + v[1] + v[2], 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(v[0], 0.5);
  EXPECT_DOUBLE_EQ(v[3], 1.0);
}

TEST(DiffCore, CosineSimilarityBasics) {
  Tape t;
  Var a = t.constant(Matrix(2, 2, {1, 0, 3, 4}));
  Var b = t.constant(Matrix(2, 2, {0, 1, 3, 4}));
  Var c = cosine_similarity(a, b);
  EXPECT_DOUBLE_EQ(c.value().data[0], 0.0);
  EXPECT_NEAR(c.value().data[1], 1.0, 1e-15);
}

TEST(DiffCore, CosineOfZeroVectorIsFinite) {
  Tape t;
  Var a = t.leaf(Matrix(1, 2, {0, 0}));
  Var b = t.leaf(Matrix(1, 2, {1, 1}));
  Var c = sum(cosine_similarity(a, b));
  t.backward(c);
  EXPECT_EQ(c.item(), 0.0);
  for (double g : a.grad().data) EXPECT_TRUE(std::isfinite(g));
}

TEST(DiffCore, GradCheckOfSquare) {
  auto f = [](std::span<const double> x, std::span<double> g) {
    if (!g.empty()) g[0] = 2 * x[0];
    return x[0] * x[0];
  };
  auto r = grad_check(f, {3.0}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(DiffCore, SumOfSigmoidGradientAtZero) {
  Tape t;
  Var x = t.leaf(Matrix(1, 4, 0.0));
  t.backward(sum(sigmoid(x)));
  for (double g : x.grad().data) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(DiffCore, GradCheckRejectsBadEpsilon) {
  auto f = [](std::span<const double> x, std::span<double>) { return x[0]; };
  EXPECT_THROW(grad_check(f, {1.0}, 1e-2), std::invalid_argument);
  EXPECT_THROW(grad_check(f, {1.0}, 1e-9), std::invalid_argument);
}

TEST(DiffCore, GradCheckRejectsNonFinite) {
  auto f = [](std::span<const double> x, std::span<double>) { return std::log(x[0]); };
  EXPECT_THROW(grad_check(f, {-1.0}, 1e-5), std::domain_error);
}

TEST(DiffCore, ValueUsedTwiceAccumulatesBothPaths) {
  Tape t;
  Var x = t.leaf(Matrix::scalar(1.5));
  // f = x*x + 3x -> f' = 2x + 3
  Var f = add(hadamard(x, x), scale(x, 3.0));
  t.backward(f);
  EXPECT_DOUBLE_EQ(x.grad().data[0], 2 * 1.5 + 3);
}

TEST(DiffCore, ShapeMismatchThrows) {
  Tape t;
  Var a = t.leaf(Matrix(2, 3));
  Var b = t.leaf(Matrix(2, 2));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(cosine_similarity(a, b), ShapeError);
  EXPECT_THROW(t.backward(a), ShapeError);
}

TEST(DiffCore, LogClampsNonPositive) {
  Tape t;
  Var x = t.leaf(Matrix(1, 2, {0.0, -3.0}));
  Var y = log(x);
  EXPECT_DOUBLE_EQ(y.value().data[0], std::log(kLogEpsilon));
  EXPECT_DOUBLE_EQ(y.value().data[1], std::log(kLogEpsilon));
  t.backward(sum(y));
  EXPECT_EQ(x.grad().data[0], 0.0);
}

TEST(DiffCore, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Matrix::scalar(2.0));
  Var x = t.leaf(Matrix::scalar(4.0));
  t.backward(hadamard(c, x));
  EXPECT_TRUE(c.grad().data.empty());
  EXPECT_DOUBLE_EQ(x.grad().data[0], 2.0);
}

// Every operator's backward against central differences on random inputs.
struct OpCase {
  const char* name;
  std::size_t rows, cols;
  std::function<Var(Tape&, Var)> build;
};

class OperatorGradient : public ::testing::TestWithParam<int> {};

TEST_P(OperatorGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(1234 + GetParam());
  const Matrix other = random_matrix(3, 4, rng);
  const Matrix square = random_matrix(4, 2, rng);
  const Matrix col = random_matrix(3, 1, rng, 0.5, 2.0);
  const Matrix bias = random_matrix(1, 4, rng);
  Segments seg;
  seg.offsets = {0, 2, 2, 5, 6};
  const std::vector<std::size_t> nb = {0, 2, 1, 2, 0, 1};
  Matrix mask(3, 3, 1.0);
  mask(0, 0) = mask(1, 1) = mask(2, 2) = 0.0;

  const std::vector<OpCase> cases = {
      {"matmul_left", 3, 4, [&](Tape& t, Var x) { return sum(matmul(x, t.constant(square))); }},
      {"matmul_right", 4, 2, [&](Tape& t, Var x) { return l2_norm_sq(matmul(t.constant(other), x)); }},
      {"add_sub", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(sub(add(x, t.constant(other)), hadamard(x, x))); }},
      {"affine", 3, 4, [&](Tape&, Var x) { return l2_norm_sq(affine(x, -2.0, 0.5)); }},
      {"row_broadcast", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(add_row_broadcast(x, t.constant(bias))); }},
      {"row_broadcast_bias", 1, 4, [&](Tape& t, Var x) { return l2_norm_sq(add_row_broadcast(t.constant(other), x)); }},
      {"col_broadcast", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(mul_col_broadcast(x, t.constant(col))); }},
      {"col_broadcast_col", 3, 1, [&](Tape& t, Var x) { return l2_norm_sq(mul_col_broadcast(t.constant(other), x)); }},
      {"concat", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(concat(x, hadamard(x, t.constant(other)))); }},
      {"slice_rows", 3, 4, [&](Tape&, Var x) { return l2_norm_sq(slice_rows(x, 1, 3)); }},
      {"gather_rows", 3, 4, [&](Tape&, Var x) { return l2_norm_sq(gather_rows(x, {2, 0, 2, 1})); }},
      {"rowsum_mean", 3, 4, [&](Tape&, Var x) { return add(l2_norm_sq(rowsum(x)), mean(hadamard(x, x))); }},
      {"sigmoid", 3, 4, [&](Tape&, Var x) { return l2_norm_sq(sigmoid(x)); }},
      {"log", 3, 1, [&](Tape&, Var x) { return sum(log(x)); }},
      {"exp", 3, 4, [&](Tape&, Var x) { return sum(exp(x)); }},
      {"segment_softmax", 6, 1,
       [&](Tape& t, Var x) {
         return sum(hadamard(segment_softmax(x, seg), t.constant(Matrix::column({1, 2, 3, -1, 4, 2}))));
       }},
      {"segment_weighted_sum_w", 6, 1,
       [&](Tape& t, Var x) { return l2_norm_sq(segment_weighted_sum(x, t.constant(other), seg, nb)); }},
      {"segment_weighted_sum_x", 3, 4,
       [&](Tape& t, Var x) {
         return l2_norm_sq(segment_weighted_sum(t.constant(Matrix::column({.3, .7, .1, .2, .7, 1})), x, seg, nb));
       }},
      {"cosine", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(cosine_similarity(x, t.constant(other))); }},
      {"pairwise_cosine", 3, 4, [&](Tape& t, Var x) { return l2_norm_sq(pairwise_cosine(x, t.constant(other))); }},
      {"pairwise_cosine_self", 3, 4, [&](Tape&, Var x) { return l2_norm_sq(pairwise_cosine(x, x)); }},
      {"masked_lse", 3, 3, [&](Tape&, Var x) { return sum(masked_row_logsumexp(scale(x, 2.0), mask)); }},
  };
  for (const auto& c : cases) {
    Matrix point = random_matrix(c.rows, c.cols, rng);
    if (std::string(c.name) == "log") point = random_matrix(c.rows, c.cols, rng, 0.5, 2.0);
    auto r = grad_check_tape(c.build, point, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-6) << c.name << " worst coordinate " << r.worst_index;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, OperatorGradient, ::testing::Range(0, 5));

TEST(DiffCore, SegmentWeightedSumEmptySegmentGivesZeroRow) {
  Tape t;
  Segments seg;
  seg.offsets = {0, 0, 1};
  Var out = segment_weighted_sum(t.leaf(Matrix::column({2.0})), t.leaf(Matrix(1, 2, {1.0, -1.0})), seg, {0});
  EXPECT_EQ(out.value(), Matrix(2, 2, {0.0, 0.0, 2.0, -2.0}));
}
