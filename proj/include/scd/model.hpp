#pragma once

// The diagnosis network: embedding tables, an L-layer attention GCN with
// residual connections over the relation graph, the diagnosis layer producing
// mastery / difficulty vectors, and the concept-masked score predictor.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scd/corpus.hpp"
#include "scd/diffcore.hpp"
#include "scd/relgraph.hpp"

namespace scd {

struct ModelDims {
  std::size_t n_students = 0;
  std::size_t n_exercises = 0;
  std::size_t n_concepts = 0;
  std::size_t dim = 0;     // embedding width; 0 means "same as n_concepts"
  std::size_t layers = 2;

  std::size_t embed_dim() const { return dim == 0 ? n_concepts : dim; }
  bool operator==(const ModelDims&) const = default;
};

// Parameter layout, instantiated with Matrix for storage and Var for a tape
// binding so both can be walked by the same visitor.

/// Scalar attention logit from the concatenation [head, neighbor]: weight is 2d x 1.
template <class T>
struct AttentionT {
  T weight;
  T bias;
};

template <class T>
struct LayerT {
  AttentionT<T> student_from_exercise;
  AttentionT<T> exercise_from_student;
  AttentionT<T> exercise_from_concept;
  AttentionT<T> concept_from_exercise;
};

template <class T>
struct LinearT {
  T weight;  // in x out
  T bias;    // 1 x out
};

template <class T>
struct ParamsT {
  T students;   // M x d
  T exercises;  // N x d
  T concepts;   // K x d
  std::vector<LayerT<T>> layers;
  LinearT<T> mastery;     // d -> K
  LinearT<T> difficulty;  // d -> K
  LinearT<T> predictor;   // K -> K
};

/// Calls f(name, tensor) for every trainable tensor in a fixed order.
template <class P, class F>
void visit_params(P& p, F&& f) {
  f(std::string("students"), p.students);
  f(std::string("exercises"), p.exercises);
  f(std::string("concepts"), p.concepts);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto att = [&](const char* name, auto& a) {
      f(pre + name + ".weight", a.weight);
      f(pre + name + ".bias", a.bias);
    };
    att("student_from_exercise", p.layers[l].student_from_exercise);
    att("exercise_from_student", p.layers[l].exercise_from_student);
    att("exercise_from_concept", p.layers[l].exercise_from_concept);
    att("concept_from_exercise", p.layers[l].concept_from_exercise);
  }
  f(std::string("mastery.weight"), p.mastery.weight);
  f(std::string("mastery.bias"), p.mastery.bias);
  f(std::string("difficulty.weight"), p.difficulty.weight);
  f(std::string("difficulty.bias"), p.difficulty.bias);
  f(std::string("predictor.weight"), p.predictor.weight);
  f(std::string("predictor.bias"), p.predictor.bias);
}

struct ModelParams : ParamsT<Matrix> {
  ModelDims dims;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_params(*this, [&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    visit_params(*this, [&](const std::string&, const Matrix& m) { out.insert(out.end(), m.data.begin(), m.data.end()); });
    return out;
  }

  void unflatten(std::span<const double> values) {
    std::size_t off = 0;
    visit_params(*this, [&](const std::string&, Matrix& m) {
      if (off + m.size() > values.size()) throw std::invalid_argument("unflatten: too few values");
      std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
                values.begin() + static_cast<std::ptrdiff_t>(off + m.size()), m.data.begin());
      off += m.size();
    });
    if (off != values.size()) throw std::invalid_argument("unflatten: too many values");
  }

  bool operator==(const ModelParams& o) const { return dims == o.dims && flatten() == o.flatten(); }
};

using ParamVars = ParamsT<Var>;

/// Embeddings and linear weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)], with
/// fan_in = d for embedding tables; biases start at zero.
inline ModelParams init_params(const ModelDims& dims_in, std::uint64_t seed) {
  ModelDims dims = dims_in;
  if (dims.dim == 0) dims.dim = dims.n_concepts;
  if (dims.n_students == 0 || dims.n_exercises == 0 || dims.n_concepts == 0 || dims.dim == 0)
    throw std::invalid_argument("init_params: all counts must be >= 1");
  const std::size_t d = dims.dim, K = dims.n_concepts;
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t r, std::size_t c, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(r, c);
    for (double& v : m.data) v = u(rng);
    return m;
  };
  ModelParams p;
  p.dims = dims;
  p.students = uniform(dims.n_students, d, d);
  p.exercises = uniform(dims.n_exercises, d, d);
  p.concepts = uniform(K, d, d);
  auto attention = [&] { return AttentionT<Matrix>{uniform(2 * d, 1, 2 * d), Matrix(1, 1)}; };
  for (std::size_t l = 0; l < dims.layers; ++l)
    p.layers.push_back({attention(), attention(), attention(), attention()});
  p.mastery = {uniform(d, K, d), Matrix(1, K)};
  p.difficulty = {uniform(d, K, d), Matrix(1, K)};
  p.predictor = {uniform(K, K, K), Matrix(1, K)};
  return p;
}

/// Puts every tensor on the tape as a gradient-tracking leaf.
inline ParamVars bind_params(Tape& tape, const ModelParams& p) {
  ParamVars v;
  v.layers.resize(p.layers.size());
  const ParamsT<Matrix>& src = p;
  // Walk both layouts in lockstep by collecting the source tensors first.
  std::vector<const Matrix*> tensors;
  visit_params(src, [&](const std::string&, const Matrix& m) { tensors.push_back(&m); });
  std::size_t i = 0;
  visit_params(v, [&](const std::string&, Var& var) { var = tape.leaf(*tensors[i++]); });
  return v;
}

/// Reads back the gradients of a bound parameter set.
inline ModelParams collect_grads(const ParamVars& vars, const ModelParams& like) {
  ModelParams g = like;
  std::vector<const Var*> src;
  visit_params(vars, [&](const std::string&, const Var& v) { src.push_back(&v); });
  std::size_t i = 0;
  visit_params(g, [&](const std::string&, Matrix& m) { m = src[i++]->grad(); });
  return g;
}

struct LayerAttention {
  Var student_from_exercise;
  Var exercise_from_student;
  Var exercise_from_concept;
  Var concept_from_exercise;
};

/// Embeddings at every depth: index 0 is the embedding lookup, index L the
/// final GCN output. attention[l] holds the per-edge softmax weights of layer l.
struct NodeStates {
  std::vector<Var> students;
  std::vector<Var> exercises;
  std::vector<Var> concepts;
  std::vector<LayerAttention> attention;

  Var final_students() const { return students.back(); }
  Var final_exercises() const { return exercises.back(); }
};

struct Aggregation {
  Var messages;   // n_heads x d
  Var attention;  // n_edges x 1
};

/// Attention-weighted neighbor sum for one directed subgraph. The logit of
/// edge (h <- t) is w . [head_h, tail_t] + b, softmaxed within h's neighbors.
/// The concatenation is applied as two half products, which is the same map.
inline Aggregation attend(Var heads, Var tails, const Adjacency& adj, const AttentionT<Var>& att) {
  const std::size_t d = heads.value().cols;
  Var head_score = matmul(heads, slice_rows(att.weight, 0, d));
  Var tail_score = matmul(tails, slice_rows(att.weight, d, 2 * d));
  Var logits = add(gather_rows(head_score, adj.heads()), gather_rows(tail_score, adj.neighbors));
  logits = add_row_broadcast(logits, att.bias);
  Var alpha = segment_softmax(logits, adj.segments);
  return {segment_weighted_sum(alpha, tails, adj.segments, adj.neighbors), alpha};
}

inline NodeStates gcn_forward(const ParamVars& p, const DirectedSplit& graph) {
  const std::size_t M = p.students.value().rows, N = p.exercises.value().rows, K = p.concepts.value().rows;
  if (graph.e2s.n_heads() != M || graph.s2e.n_heads() != N || graph.c2e.n_heads() != N || graph.e2c.n_heads() != K)
    throw ShapeError("gcn_forward: graph node counts do not match parameter tables");
  NodeStates st;
  st.students.push_back(p.students);
  st.exercises.push_back(p.exercises);
  st.concepts.push_back(p.concepts);
  for (const auto& layer : p.layers) {
    Var s = st.students.back(), e = st.exercises.back(), c = st.concepts.back();
    Aggregation to_s = attend(s, e, graph.e2s, layer.student_from_exercise);
    Aggregation to_e_from_s = attend(e, s, graph.s2e, layer.exercise_from_student);
    Aggregation to_e_from_c = attend(e, c, graph.c2e, layer.exercise_from_concept);
    Aggregation to_c = attend(c, e, graph.e2c, layer.concept_from_exercise);
    st.students.push_back(add(to_s.messages, s));
    st.exercises.push_back(add(add(to_e_from_s.messages, to_e_from_c.messages), e));
    st.concepts.push_back(add(to_c.messages, c));
    st.attention.push_back({to_s.attention, to_e_from_s.attention, to_e_from_c.attention, to_c.attention});
  }
  return st;
}

inline Var linear(Var x, const LinearT<Var>& f) { return add_row_broadcast(matmul(x, f.weight), f.bias); }

struct DiagnosisVars {
  Var mastery;     // M x K, entries in (0,1)
  Var difficulty;  // N x K, entries in (0,1)
};

inline DiagnosisVars diagnose(const ParamVars& p, const NodeStates& st) {
  return {sigmoid(linear(st.final_students(), p.mastery)), sigmoid(linear(st.final_exercises(), p.difficulty))};
}

struct Pair {
  std::size_t student = 0;
  std::size_t exercise = 0;
};

/// Row i holds 1/|concepts(e_i)| on the concepts of exercise e_i.
inline Matrix concept_average_weights(const std::vector<std::vector<std::size_t>>& concepts_of,
                                      std::span<const Pair> pairs, std::size_t K) {
  Matrix w(pairs.size(), K);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& cs = concepts_of.at(pairs[i].exercise);
    if (cs.empty()) throw std::invalid_argument("predict: exercise " + std::to_string(pairs[i].exercise) + " has no concept");
    for (std::size_t c : cs) w(i, c) = 1.0 / static_cast<double>(cs.size());
  }
  return w;
}

/// y = mean over the exercise's concepts k of sigmoid(F_predict(h_s - h_e))_k, B x 1.
inline Var predict(const ParamVars& p, const DiagnosisVars& diag,
                   const std::vector<std::vector<std::size_t>>& concepts_of, std::span<const Pair> pairs) {
  std::vector<std::size_t> si(pairs.size()), ei(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    si[i] = pairs[i].student;
    ei[i] = pairs[i].exercise;
  }
  const std::size_t K = diag.mastery.value().cols;
  Var gap = sub(gather_rows(diag.mastery, std::move(si)), gather_rows(diag.difficulty, std::move(ei)));
  Var v = sigmoid(linear(gap, p.predictor));
  Var w = v.tape->constant(concept_average_weights(concepts_of, pairs, K));
  return rowsum(hadamard(v, w));
}

// ---------------------------------------------------------------------------
// Value-only conveniences for inference
// ---------------------------------------------------------------------------

struct Diagnosis {
  Matrix mastery;
  Matrix difficulty;
};

inline Diagnosis diagnose_values(const ModelParams& params, const DirectedSplit& graph) {
  Tape tape;
  ParamVars p = bind_params(tape, params);
  DiagnosisVars d = diagnose(p, gcn_forward(p, graph));
  return {d.mastery.value(), d.difficulty.value()};
}

inline std::vector<double> predict_values(const ModelParams& params, const DirectedSplit& graph, const QMatrix& q,
                                          std::span<const Pair> pairs) {
  Tape tape;
  ParamVars p = bind_params(tape, params);
  DiagnosisVars d = diagnose(p, gcn_forward(p, graph));
  return predict(p, d, q.concepts_by_exercise(), pairs).value().data;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelDims& d) {
  return {{"n_students", d.n_students}, {"n_exercises", d.n_exercises}, {"n_concepts", d.n_concepts},
          {"dim", d.dim}, {"layers", d.layers}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  d.n_students = j.at("n_students").get<std::size_t>();
  d.n_exercises = j.at("n_exercises").get<std::size_t>();
  d.n_concepts = j.at("n_concepts").get<std::size_t>();
  d.dim = j.at("dim").get<std::size_t>();
  d.layers = j.at("layers").get<std::size_t>();
  return d;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"shape", {m.rows, m.cols}}, {"data", m.data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw std::invalid_argument("matrix json: shape must have two entries");
  return Matrix(shape[0], shape[1], j.at("data").get<std::vector<double>>());
}

inline nlohmann::json to_json(const ModelParams& p) {
  nlohmann::json tensors = nlohmann::json::object();
  visit_params(p, [&](const std::string& name, const Matrix& m) { tensors[name] = matrix_to_json(m); });
  return {{"dims", to_json(p.dims)}, {"tensors", tensors}};
}

inline ModelParams params_from_json(const nlohmann::json& j) {
  ModelDims dims = dims_from_json(j.at("dims"));
  ModelParams p = init_params(dims, 0);
  const auto& tensors = j.at("tensors");
  visit_params(p, [&](const std::string& name, Matrix& m) {
    Matrix loaded = matrix_from_json(tensors.at(name));
    if (!loaded.same_shape(m)) throw std::invalid_argument("checkpoint tensor '" + name + "' has wrong shape");
    m = std::move(loaded);
  });
  return p;
}

}  // namespace scd
