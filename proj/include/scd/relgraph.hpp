#pragma once

// Student-exercise-concept relation graph and its directed bipartite split.

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scd/corpus.hpp"
#include "scd/diffcore.hpp"

namespace scd {

struct RelationGraph {
  std::vector<std::pair<std::size_t, std::size_t>> se_edges;  // (student, exercise), sorted
  std::vector<std::pair<std::size_t, std::size_t>> ec_edges;  // (exercise, concept), sorted
  std::size_t n_students = 0;
  std::size_t n_exercises = 0;
  std::size_t n_concepts = 0;
};

/// Directed adjacency in compressed form. Edges into head h are
/// neighbors[segments.offsets[h] .. segments.offsets[h+1]), sorted by id.
struct Adjacency {
  Segments segments;
  std::vector<std::size_t> neighbors;
  std::size_t n_tail = 0;

  std::size_t n_heads() const { return segments.count(); }
  std::size_t n_edges() const { return neighbors.size(); }
  std::size_t indegree(std::size_t head) const { return segments.offsets[head + 1] - segments.offsets[head]; }

  /// Head node of every edge, parallel to `neighbors`.
  std::vector<std::size_t> heads() const {
    std::vector<std::size_t> h(n_edges());
    for (std::size_t s = 0; s < n_heads(); ++s)
      for (std::size_t i = segments.offsets[s]; i < segments.offsets[s + 1]; ++i) h[i] = s;
    return h;
  }

  bool operator==(const Adjacency& o) const {
    return segments.offsets == o.segments.offsets && neighbors == o.neighbors && n_tail == o.n_tail;
  }
};

/// Builds an Adjacency from (head, tail) pairs.
inline Adjacency make_adjacency(std::size_t n_heads, std::size_t n_tail,
                                std::vector<std::pair<std::size_t, std::size_t>> head_tail) {
  std::sort(head_tail.begin(), head_tail.end());
  Adjacency a;
  a.n_tail = n_tail;
  a.segments.offsets.assign(n_heads + 1, 0);
  a.neighbors.reserve(head_tail.size());
  for (auto [h, t] : head_tail) {
    if (h >= n_heads || t >= n_tail) throw std::out_of_range("make_adjacency: node id out of range");
    ++a.segments.offsets[h + 1];
    a.neighbors.push_back(t);
  }
  for (std::size_t i = 0; i < n_heads; ++i) a.segments.offsets[i + 1] += a.segments.offsets[i];
  return a;
}

/// The four directed bipartite graphs the GCN aggregates over.
/// Naming is source2destination: e2s carries exercise messages into students.
struct DirectedSplit {
  Adjacency e2s;  // heads: students, tails: exercises
  Adjacency s2e;  // heads: exercises, tails: students
  Adjacency c2e;  // heads: exercises, tails: concepts
  Adjacency e2c;  // heads: concepts, tails: exercises

  bool operator==(const DirectedSplit&) const = default;
};

enum class Direction { e2s, s2e, c2e, e2c };

struct NodeRef {
  Direction direction;
  std::size_t node;  // head node id within that direction
};

inline RelationGraph build_relation_graph(const ResponseSet& train, const QMatrix& q) {
  if (train.records.empty()) throw std::invalid_argument("build_relation_graph: empty training set");
  RelationGraph g;
  g.n_students = train.n_students();
  g.n_exercises = train.n_exercises();
  g.n_concepts = q.n_concepts;
  if (q.n_exercises != g.n_exercises) throw std::invalid_argument("build_relation_graph: q-matrix exercise count mismatch");
  std::vector<bool> has_concept(g.n_exercises, false);
  for (auto [e, c] : q.entries) has_concept[e] = true;
  std::set<std::pair<std::size_t, std::size_t>> se;
  for (const auto& r : train.records) {
    if (!has_concept[r.exercise])
      throw std::invalid_argument("build_relation_graph: exercise " + std::to_string(r.exercise) + " absent from q-matrix");
    se.emplace(r.student, r.exercise);
  }
  g.se_edges.assign(se.begin(), se.end());
  g.ec_edges = q.entries;
  std::sort(g.ec_edges.begin(), g.ec_edges.end());
  return g;
}

inline DirectedSplit directed_split(const RelationGraph& g) {
  std::vector<std::pair<std::size_t, std::size_t>> into_student, into_exercise, c_into_exercise, into_concept;
  for (auto [s, e] : g.se_edges) {
    into_student.emplace_back(s, e);
    into_exercise.emplace_back(e, s);
  }
  for (auto [e, c] : g.ec_edges) {
    c_into_exercise.emplace_back(e, c);
    into_concept.emplace_back(c, e);
  }
  DirectedSplit d;
  d.e2s = make_adjacency(g.n_students, g.n_exercises, std::move(into_student));
  d.s2e = make_adjacency(g.n_exercises, g.n_students, std::move(into_exercise));
  d.c2e = make_adjacency(g.n_exercises, g.n_concepts, std::move(c_into_exercise));
  d.e2c = make_adjacency(g.n_concepts, g.n_exercises, std::move(into_concept));
  return d;
}

inline const Adjacency& adjacency(const DirectedSplit& split, Direction dir) {
  switch (dir) {
    case Direction::e2s: return split.e2s;
    case Direction::s2e: return split.s2e;
    case Direction::c2e: return split.c2e;
    case Direction::e2c: return split.e2c;
  }
  throw std::logic_error("unknown direction");
}

inline const char* direction_name(Direction dir) {
  switch (dir) {
    case Direction::e2s: return "e2s";
    case Direction::s2e: return "s2e";
    case Direction::c2e: return "c2e";
    case Direction::e2c: return "e2c";
  }
  return "?";
}

/// In-degree of a head node in the named directed subgraph.
inline std::size_t degree(const DirectedSplit& split, NodeRef ref) {
  const Adjacency& a = adjacency(split, ref.direction);
  if (ref.node >= a.n_heads()) throw std::out_of_range("degree: node out of range");
  return a.indegree(ref.node);
}

/// Debug dump, one `direction,src,dst` line per directed edge.
inline void dump_edges(std::ostream& out, const DirectedSplit& split) {
  for (Direction dir : {Direction::e2s, Direction::s2e, Direction::c2e, Direction::e2c}) {
    const Adjacency& a = adjacency(split, dir);
    for (std::size_t h = 0; h < a.n_heads(); ++h)
      for (std::size_t i = a.segments.offsets[h]; i < a.segments.offsets[h + 1]; ++i)
        out << direction_name(dir) << ',' << a.neighbors[i] << ',' << h << '\n';
  }
}

}  // namespace scd
