#pragma once

// Minimal reverse-mode differentiation over dense row-major double matrices.
//
// A Tape records every value produced during a forward computation. Nodes are
// appended in creation order, which is already a topological order, so the
// backward sweep walks the node list once from the end.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scd {

inline constexpr double kLogEpsilon = 1e-12;
inline constexpr double kNormEpsilon = 1e-12;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match shape");
  }

  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix column(std::vector<double> values) {
    const auto n = values.size();
    return Matrix(n, 1, std::move(values));
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix&) const = default;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

/// Compressed segment layout: segment i covers [offsets[i], offsets[i+1]).
/// Used for neighbor groups in attention softmax and aggregation.
struct Segments {
  std::vector<std::size_t> offsets{0};
  std::size_t count() const { return offsets.size() - 1; }
  std::size_t total() const { return offsets.back(); }
};

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  double item() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var leaf(Matrix value) { return push(std::move(value), true, {}); }

  /// Append an op result. The node tracks gradients iff any input does.
  Var op(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw std::logic_error("Tape: mixing variables from different tapes");
      needs = needs || nodes_[v.id].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Mutable gradient accumulator of an input; only valid for tracked nodes.
  Matrix& grad_mut(std::size_t id) { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var root) {
    const Matrix& rv = nodes_[root.id].value;
    if (rv.rows != 1 || rv.cols != 1) throw ShapeError("backward: root must be 1x1, got " + shape_string(rv));
    if (!nodes_[root.id].needs_grad) return;
    nodes_[root.id].grad.data[0] += 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, BackwardFn backward) {
    Node n;
    if (needs_grad) n.grad = Matrix(value.rows, value.cols, 0.0);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }
inline double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item: not a scalar (" + shape_string(v) + ")");
  return v.data[0];
}

namespace detail {

inline void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

// Accumulate `g` into input `v` if it is tracked.
template <class F>
inline void accumulate(Tape& t, Var v, F&& f) {
  if (t.needs_grad(v.id)) f(t.grad_mut(v.id));
}

template <class Fwd, class Deriv>
inline Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  Matrix out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = fwd(av.data[i]);
  return t.op(std::move(out), {a}, [a, deriv](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& x = tp.value(a.id);
    const Matrix& y = tp.value(self);
    Matrix& ga = tp.grad_mut(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * deriv(x.data[i], y.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operators
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.cols == B.rows, "matmul", A, B);
  Matrix out(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < B.cols; ++j) out(i, j) += aik * B(k, j);
    }
  return a.tape->op(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& A = t.value(a.id);
    const Matrix& B = t.value(b.id);
    detail::accumulate(t, a, [&](Matrix& gA) {
      for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < B.cols; ++j) s += G(i, j) * B(k, j);
          gA(i, k) += s;
        }
    });
    detail::accumulate(t, b, [&](Matrix& gB) {
      for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
          const double aik = A(i, k);
          for (std::size_t j = 0; j < B.cols; ++j) gB(k, j) += aik * G(i, j);
        }
    });
  });
}

inline Var add(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.same_shape(B), "add", A, B);
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  return a.tape->op(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    detail::accumulate(t, a, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i]; });
    detail::accumulate(t, b, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i]; });
  });
}

inline Var sub(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.same_shape(B), "sub", A, B);
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
  return a.tape->op(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    detail::accumulate(t, a, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i]; });
    detail::accumulate(t, b, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] -= G.data[i]; });
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

/// Elementwise product.
inline Var hadamard(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.same_shape(B), "hadamard", A, B);
  Matrix out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  return a.tape->op(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& A = t.value(a.id);
    const Matrix& B = t.value(b.id);
    detail::accumulate(t, a, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * B.data[i]; });
    detail::accumulate(t, b, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * A.data[i]; });
  });
}

/// a * x + b elementwise, with constant a and b.
inline Var affine(Var x, double a, double b = 0.0) {
  return detail::unary(x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

inline Var scale(Var x, double a) { return affine(x, a, 0.0); }

/// Adds a 1 x c row vector to every row of an n x c matrix.
inline Var add_row_broadcast(Var x, Var bias) {
  const Matrix& X = x.value();
  const Matrix& b = bias.value();
  detail::require(b.rows == 1 && b.cols == X.cols, "add_row_broadcast", X, b);
  Matrix out = X;
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.cols; ++j) out(i, j) += b(0, j);
  return x.tape->op(std::move(out), {x, bias}, [x, bias](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    detail::accumulate(t, x, [&](Matrix& g) { for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i]; });
    detail::accumulate(t, bias, [&](Matrix& g) {
      for (std::size_t i = 0; i < G.rows; ++i)
        for (std::size_t j = 0; j < G.cols; ++j) g(0, j) += G(i, j);
    });
  });
}

/// Multiplies row i of an n x c matrix by entry i of an n x 1 column.
inline Var mul_col_broadcast(Var x, Var col) {
  const Matrix& X = x.value();
  const Matrix& c = col.value();
  detail::require(c.cols == 1 && c.rows == X.rows, "mul_col_broadcast", X, c);
  Matrix out = X;
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.cols; ++j) out(i, j) *= c(i, 0);
  return x.tape->op(std::move(out), {x, col}, [x, col](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(x.id);
    const Matrix& c = t.value(col.id);
    detail::accumulate(t, x, [&](Matrix& g) {
      for (std::size_t i = 0; i < X.rows; ++i)
        for (std::size_t j = 0; j < X.cols; ++j) g(i, j) += G(i, j) * c(i, 0);
    });
    detail::accumulate(t, col, [&](Matrix& g) {
      for (std::size_t i = 0; i < X.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < X.cols; ++j) s += G(i, j) * X(i, j);
        g(i, 0) += s;
      }
    });
  });
}

/// Column-wise concatenation [a, b].
inline Var concat(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.rows == B.rows, "concat", A, B);
  Matrix out(A.rows, A.cols + B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    std::copy(A.row(i).begin(), A.row(i).end(), out.row(i).begin());
    std::copy(B.row(i).begin(), B.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(A.cols));
  }
  return a.tape->op(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const std::size_t ac = t.value(a.id).cols;
    detail::accumulate(t, a, [&](Matrix& g) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) g(i, j) += G(i, j);
    });
    detail::accumulate(t, b, [&](Matrix& g) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) g(i, j) += G(i, ac + j);
    });
  });
}

/// Rows [begin, end) of x.
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Matrix& X = x.value();
  if (begin > end || end > X.rows) throw ShapeError("slice_rows: range out of bounds for " + shape_string(X));
  Matrix out(end - begin, X.cols);
  std::copy(X.data.begin() + static_cast<std::ptrdiff_t>(begin * X.cols),
            X.data.begin() + static_cast<std::ptrdiff_t>(end * X.cols), out.data.begin());
  return x.tape->op(std::move(out), {x}, [x, begin](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& g = t.grad_mut(x.id);
    const std::size_t off = begin * g.cols;
    for (std::size_t i = 0; i < G.size(); ++i) g.data[off + i] += G.data[i];
  });
}

/// out[r] = x[index[r]]; repeated indices accumulate gradient.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Matrix& X = x.value();
  Matrix out(index.size(), X.cols);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= X.rows) throw ShapeError("gather_rows: index out of range for " + shape_string(X));
    std::copy(X.row(index[r]).begin(), X.row(index[r]).end(), out.row(r).begin());
  }
  return x.tape->op(std::move(out), {x}, [x, index = std::move(index)](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& g = t.grad_mut(x.id);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < G.cols; ++j) g(index[r], j) += G(r, j);
  });
}

/// n x c -> n x 1
inline Var rowsum(Var x) {
  const Matrix& X = x.value();
  Matrix out(X.rows, 1);
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t j = 0; j < X.cols; ++j) out(i, 0) += X(i, j);
  return x.tape->op(std::move(out), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& g = t.grad_mut(x.id);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) g(i, j) += G(i, 0);
  });
}

/// Sum of all entries, 1 x 1.
inline Var sum(Var x) {
  const Matrix& X = x.value();
  double s = 0.0;
  for (double v : X.data) s += v;
  return x.tape->op(Matrix::scalar(s), {x}, [x](Tape& t, std::size_t self) {
    const double g0 = t.grad(self).data[0];
    for (double& g : t.grad_mut(x.id).data) g += g0;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Natural log with the argument clamped from below at kLogEpsilon.
/// Below the clamp the gradient is zero.
inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(std::max(v, kLogEpsilon)); },
      [](double v, double) { return v > kLogEpsilon ? 1.0 / v : 0.0; });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var clamp(Var x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

/// Sum of squares of all entries, 1 x 1.
inline Var l2_norm_sq(Var x) {
  const Matrix& X = x.value();
  double s = 0.0;
  for (double v : X.data) s += v * v;
  return x.tape->op(Matrix::scalar(s), {x}, [x](Tape& t, std::size_t self) {
    const double g0 = t.grad(self).data[0];
    const Matrix& X = t.value(x.id);
    Matrix& g = t.grad_mut(x.id);
    for (std::size_t i = 0; i < X.size(); ++i) g.data[i] += 2.0 * g0 * X.data[i];
  });
}

// ---------------------------------------------------------------------------
// Segment operators (neighbor groups)
// ---------------------------------------------------------------------------

/// Softmax of an E x 1 column within each segment. Empty segments are skipped.
inline Var segment_softmax(Var logits, const Segments& seg) {
  const Matrix& L = logits.value();
  if (L.cols != 1 || L.rows != seg.total()) throw ShapeError("segment_softmax: logits must be E x 1 matching segments");
  Matrix out(L.rows, 1);
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const std::size_t b = seg.offsets[s], e = seg.offsets[s + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = b; i < e; ++i) mx = std::max(mx, L.data[i]);
    double z = 0.0;
    for (std::size_t i = b; i < e; ++i) z += (out.data[i] = std::exp(L.data[i] - mx));
    for (std::size_t i = b; i < e; ++i) out.data[i] /= z;
  }
  return logits.tape->op(std::move(out), {logits}, [logits, seg](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& Y = t.value(self);
    Matrix& g = t.grad_mut(logits.id);
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const std::size_t b = seg.offsets[s], e = seg.offsets[s + 1];
      double dot = 0.0;
      for (std::size_t i = b; i < e; ++i) dot += G.data[i] * Y.data[i];
      for (std::size_t i = b; i < e; ++i) g.data[i] += Y.data[i] * (G.data[i] - dot);
    }
  });
}

/// out[s] = sum over edges i in segment s of weight[i] * x[neighbor[i]].
/// Heads with an empty segment get a zero row.
inline Var segment_weighted_sum(Var weight, Var x, const Segments& seg, std::vector<std::size_t> neighbor) {
  const Matrix& W = weight.value();
  const Matrix& X = x.value();
  if (W.cols != 1 || W.rows != seg.total() || neighbor.size() != seg.total())
    throw ShapeError("segment_weighted_sum: weights/neighbors must match segment layout");
  Matrix out(seg.count(), X.cols);
  for (std::size_t s = 0; s < seg.count(); ++s)
    for (std::size_t i = seg.offsets[s]; i < seg.offsets[s + 1]; ++i) {
      if (neighbor[i] >= X.rows) throw ShapeError("segment_weighted_sum: neighbor index out of range");
      const double w = W.data[i];
      auto src = X.row(neighbor[i]);
      auto dst = out.row(s);
      for (std::size_t j = 0; j < X.cols; ++j) dst[j] += w * src[j];
    }
  return weight.tape->op(
      std::move(out), {weight, x}, [weight, x, seg, neighbor = std::move(neighbor)](Tape& t, std::size_t self) {
        const Matrix& G = t.grad(self);
        const Matrix& W = t.value(weight.id);
        const Matrix& X = t.value(x.id);
        const bool gw = t.needs_grad(weight.id), gx = t.needs_grad(x.id);
        for (std::size_t s = 0; s < seg.count(); ++s)
          for (std::size_t i = seg.offsets[s]; i < seg.offsets[s + 1]; ++i) {
            auto grow = G.row(s);
            if (gw) {
              double d = 0.0;
              auto xr = X.row(neighbor[i]);
              for (std::size_t j = 0; j < X.cols; ++j) d += grow[j] * xr[j];
              t.grad_mut(weight.id).data[i] += d;
            }
            if (gx) {
              auto gxr = t.grad_mut(x.id).row(neighbor[i]);
              for (std::size_t j = 0; j < X.cols; ++j) gxr[j] += W.data[i] * grow[j];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Similarity operators
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> row_norms(const Matrix& X) {
  std::vector<double> n(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i) {
    double s = 0.0;
    for (double v : X.row(i)) s += v * v;
    n[i] = std::sqrt(s);
  }
  return n;
}

inline double guarded(double norm) { return std::max(norm, kNormEpsilon); }

// d/dx of (x . y) / (max(|x|,eps) |y|') for fixed y, scaled by g, accumulated into gx.
inline void cosine_grad_one_side(std::span<const double> x, std::span<const double> y, double nx, double ny,
                                 double cos, double g, std::span<double> gx) {
  const double dx = guarded(nx), dy = guarded(ny);
  const double inv = 1.0 / (dx * dy);
  const bool norm_active = nx > kNormEpsilon;
  for (std::size_t j = 0; j < x.size(); ++j) {
    double d = y[j] * inv;
    if (norm_active) d -= cos * x[j] / (nx * nx);
    gx[j] += g * d;
  }
}

}  // namespace detail

/// Row-wise cosine similarity of two n x d matrices, n x 1.
/// Norms are floored at kNormEpsilon.
inline Var cosine_similarity(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.same_shape(B), "cosine_similarity", A, B);
  const auto na = detail::row_norms(A), nb = detail::row_norms(B);
  Matrix out(A.rows, 1);
  for (std::size_t i = 0; i < A.rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < A.cols; ++j) dot += A(i, j) * B(i, j);
    out(i, 0) = dot / (detail::guarded(na[i]) * detail::guarded(nb[i]));
  }
  return a.tape->op(std::move(out), {a, b}, [a, b, na, nb](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& A = t.value(a.id);
    const Matrix& B = t.value(b.id);
    const Matrix& C = t.value(self);
    for (std::size_t i = 0; i < A.rows; ++i) {
      if (t.needs_grad(a.id))
        detail::cosine_grad_one_side(A.row(i), B.row(i), na[i], nb[i], C(i, 0), G(i, 0), t.grad_mut(a.id).row(i));
      if (t.needs_grad(b.id))
        detail::cosine_grad_one_side(B.row(i), A.row(i), nb[i], na[i], C(i, 0), G(i, 0), t.grad_mut(b.id).row(i));
    }
  });
}

/// All-pairs cosine similarity: out(i, j) = cos(a_i, b_j), n x m.
inline Var pairwise_cosine(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  detail::require(A.cols == B.cols, "pairwise_cosine", A, B);
  const auto na = detail::row_norms(A), nb = detail::row_norms(B);
  Matrix out(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < B.rows; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < A.cols; ++j) dot += A(i, j) * B(k, j);
      out(i, k) = dot / (detail::guarded(na[i]) * detail::guarded(nb[k]));
    }
  return a.tape->op(std::move(out), {a, b}, [a, b, na, nb](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& A = t.value(a.id);
    const Matrix& B = t.value(b.id);
    const Matrix& C = t.value(self);
    for (std::size_t i = 0; i < A.rows; ++i)
      for (std::size_t k = 0; k < B.rows; ++k) {
        if (G(i, k) == 0.0) continue;
        if (t.needs_grad(a.id))
          detail::cosine_grad_one_side(A.row(i), B.row(k), na[i], nb[k], C(i, k), G(i, k), t.grad_mut(a.id).row(i));
        if (t.needs_grad(b.id))
          detail::cosine_grad_one_side(B.row(k), A.row(i), nb[k], na[i], C(i, k), G(i, k), t.grad_mut(b.id).row(k));
      }
  });
}

/// Row-wise log-sum-exp over entries where mask(i, j) != 0, n x 1.
/// Rows whose mask is empty are an error.
inline Var masked_row_logsumexp(Var x, const Matrix& mask) {
  const Matrix& X = x.value();
  detail::require(X.same_shape(mask), "masked_row_logsumexp", X, mask);
  Matrix out(X.rows, 1);
  for (std::size_t i = 0; i < X.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < X.cols; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, X(i, j));
    if (!std::isfinite(mx)) throw std::invalid_argument("masked_row_logsumexp: row with empty mask");
    double z = 0.0;
    for (std::size_t j = 0; j < X.cols; ++j)
      if (mask(i, j) != 0.0) z += std::exp(X(i, j) - mx);
    out(i, 0) = mx + std::log(z);
  }
  return x.tape->op(std::move(out), {x}, [x, mask](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(x.id);
    const Matrix& Y = t.value(self);
    Matrix& g = t.grad_mut(x.id);
    for (std::size_t i = 0; i < X.rows; ++i)
      for (std::size_t j = 0; j < X.cols; ++j)
        if (mask(i, j) != 0.0) g(i, j) += G(i, 0) * std::exp(X(i, j) - Y(i, 0));
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares an analytic gradient against central differences.
///
/// `f(x, grad)` returns the objective at x and, when `grad` is non-empty,
/// writes the analytic gradient into it. Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
template <class F>
GradCheckResult grad_check(F&& f, std::vector<double> x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<double> analytic(x.size(), 0.0);
  const double f0 = f(std::span<const double>(x), std::span<double>(analytic));
  if (!std::isfinite(f0)) throw std::domain_error("grad_check: non-finite objective");
  GradCheckResult res;
  std::span<double> none;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + eps;
    const double fp = f(std::span<const double>(x), none);
    x[i] = xi - eps;
    const double fm = f(std::span<const double>(x), none);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i]))
      throw std::domain_error("grad_check: non-finite value at coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  return res;
}

/// grad_check for a function expressed on a Tape: `build(tape, x_leaf)` must
/// return a 1 x 1 Var. The point is reshaped to `rows x cols`.
template <class Build>
GradCheckResult grad_check_tape(Build&& build, const Matrix& point, double eps) {
  auto f = [&](std::span<const double> x, std::span<double> grad) {
    Tape tape;
    Var leaf = tape.leaf(Matrix(point.rows, point.cols, std::vector<double>(x.begin(), x.end())));
    Var out = build(tape, leaf);
    if (!grad.empty()) {
      tape.backward(out);
      std::copy(leaf.grad().data.begin(), leaf.grad().data.end(), grad.begin());
    }
    return out.item();
  };
  return grad_check(f, point.data, eps);
}

}  // namespace scd
