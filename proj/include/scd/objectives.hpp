#pragma once

// Cross-entropy main loss, InfoNCE contrastive losses between two views, and
// the combined multi-task objective.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "scd/diffcore.hpp"
#include "scd/model.hpp"

namespace scd {

struct LossBreakdown {
  double main = 0.0;
  double ssl_student = 0.0;
  double ssl_exercise = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double tau = 0.0;

  double composed_total() const { return main + lambda1 * (ssl_student + ssl_exercise) + lambda2 * reg; }
};

struct ContrastiveOptions {
  double tau = 0.5;
  bool include_positive_in_denominator = false;
};

/// Summed binary cross entropy; predictions are clamped to [1e-12, 1 - 1e-12].
inline Var main_loss(Var y, const std::vector<int>& labels) {
  const Matrix& Y = y.value();
  if (Y.cols != 1 || Y.rows != labels.size()) throw ShapeError("main_loss: predictions must be B x 1 matching labels");
  Matrix r(labels.size(), 1), one_minus_r(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("main_loss: labels must be 0/1");
    r.data[i] = labels[i];
    one_minus_r.data[i] = 1 - labels[i];
  }
  Tape& t = *y.tape;
  Var yc = clamp(y, kLogEpsilon, 1.0 - kLogEpsilon);
  Var pos = hadamard(t.constant(std::move(r)), log(yc));
  Var neg = hadamard(t.constant(std::move(one_minus_r)), log(affine(yc, -1.0, 1.0)));
  return scale(sum(add(pos, neg)), -1.0);
}

/// Mean over rows i of
///   -log( exp(cos(z1_i, z2_i)/tau) / sum_{j != i} exp(cos(z1_i, z2_j)/tau) ).
/// The denominator holds only negatives unless the options say otherwise,
/// so the value can be negative.
inline Var infonce(Var z1, Var z2, const ContrastiveOptions& opt) {
  const Matrix& A = z1.value();
  const Matrix& B = z2.value();
  if (!A.same_shape(B)) throw ShapeError("infonce: views must have matching shapes");
  if (!(opt.tau > 0.0)) throw std::invalid_argument("infonce: tau must be > 0");
  const std::size_t n = A.rows;
  if (n < 2) throw std::invalid_argument("infonce: need at least two nodes for negatives");
  const double inv_tau = 1.0 / opt.tau;
  Var positive = scale(cosine_similarity(z1, z2), inv_tau);
  Matrix mask(n, n, 1.0);
  if (!opt.include_positive_in_denominator)
    for (std::size_t i = 0; i < n; ++i) mask(i, i) = 0.0;
  Var denom = masked_row_logsumexp(scale(pairwise_cosine(z1, z2), inv_tau), mask);
  return mean(sub(denom, positive));
}

/// infonce restricted to a subset of rows.
inline Var infonce(Var z1, Var z2, const std::vector<std::size_t>& subset, const ContrastiveOptions& opt) {
  if (subset.size() < 2) throw std::invalid_argument("infonce: node subset must contain at least two nodes");
  return infonce(gather_rows(z1, subset), gather_rows(z2, subset), opt);
}

struct SslVars {
  Var student;
  Var exercise;
};

inline SslVars ssl_loss(const NodeStates& view1, const NodeStates& view2, const ContrastiveOptions& opt,
                        const std::vector<std::size_t>& students, const std::vector<std::size_t>& exercises) {
  return {infonce(view1.final_students(), view2.final_students(), students, opt),
          infonce(view1.final_exercises(), view2.final_exercises(), exercises, opt)};
}

/// Sum of squares of every trainable tensor.
inline Var l2_regularizer(const ParamVars& p) {
  Var total{};
  bool first = true;
  visit_params(p, [&](const std::string&, const Var& v) {
    Var sq = l2_norm_sq(v);
    total = first ? sq : add(total, sq);
    first = false;
  });
  return total;
}

struct LossWeights {
  double lambda1 = 0.1;
  double lambda2 = 1e-4;
};

/// Folds the parts into a breakdown; total = main + lambda1 (ssl_s + ssl_e) + lambda2 reg.
inline LossBreakdown total_loss(double main, double ssl_student, double ssl_exercise, double reg, const LossWeights& w,
                                double tau) {
  for (double v : {main, ssl_student, ssl_exercise, reg, w.lambda1, w.lambda2})
    if (!std::isfinite(v)) throw std::domain_error("total_loss: non-finite component");
  LossBreakdown b{main, ssl_student, ssl_exercise, reg, 0.0, w.lambda1, w.lambda2, tau};
  b.total = b.composed_total();
  return b;
}

/// Differentiable counterpart of total_loss; `ssl` may be absent.
inline Var total_loss(Var main, const SslVars* ssl, Var reg, const LossWeights& w) {
  Var total = main;
  if (ssl != nullptr && w.lambda1 != 0.0) total = add(total, scale(add(ssl->student, ssl->exercise), w.lambda1));
  if (w.lambda2 != 0.0) total = add(total, scale(reg, w.lambda2));
  return total;
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"main", b.main}, {"ssl_student", b.ssl_student}, {"ssl_exercise", b.ssl_exercise}, {"reg", b.reg},
          {"total", b.total}, {"lambda1", b.lambda1}, {"lambda2", b.lambda2}, {"tau", b.tau}};
}

}  // namespace scd
