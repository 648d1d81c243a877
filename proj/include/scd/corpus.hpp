#pragma once

// Response records, Q-matrix ingestion, sparse-student filtering, per-student
// train/test split and dataset statistics.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace scd {

struct ResponseRecord {
  std::size_t student = 0;
  std::size_t exercise = 0;
  int score = 0;

  bool operator==(const ResponseRecord&) const = default;
  auto operator<=>(const ResponseRecord&) const = default;
};

/// Records with dense indices plus the raw keys they were mapped from.
/// student_keys[i] is the raw key of dense student i (same for exercises).
struct ResponseSet {
  std::vector<ResponseRecord> records;
  std::vector<std::string> student_keys;
  std::vector<std::string> exercise_keys;

  std::size_t n_students() const { return student_keys.size(); }
  std::size_t n_exercises() const { return exercise_keys.size(); }
};

struct QMatrix {
  std::vector<std::pair<std::size_t, std::size_t>> entries;  // (exercise, concept), sorted, unique
  std::size_t n_exercises = 0;
  std::size_t n_concepts = 0;
  std::vector<std::string> concept_keys;

  /// Concepts of each exercise, ascending.
  std::vector<std::vector<std::size_t>> concepts_by_exercise() const {
    std::vector<std::vector<std::size_t>> out(n_exercises);
    for (auto [e, c] : entries) out[e].push_back(c);
    return out;
  }
};

/// Q-matrix rows as read from disk, before exercise keys are aligned with a ResponseSet.
struct RawQMatrix {
  std::vector<std::pair<std::string, std::string>> entries;
};

struct DatasetStats {
  std::size_t n_students = 0;
  std::size_t n_exercises = 0;
  std::size_t n_concepts = 0;
  std::size_t n_interactions = 0;
  double interactions_per_student = 0.0;
  double density = 0.0;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

class KeyIndex {
 public:
  std::size_t intern(const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, keys_.size());
    if (inserted) keys_.push_back(key);
    return it->second;
  }
  std::vector<std::string> take_keys() { return std::move(keys_); }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> keys_;
};

}  // namespace detail

/// Parses `student,exercise,score` CSV text. A first line whose score column
/// is not numeric is treated as a header. Blank lines are skipped.
inline ResponseSet parse_responses(std::istream& in) {
  ResponseSet rs;
  detail::KeyIndex students, exercises;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const bool is_first = std::exchange(first, false);
    auto f = detail::split_csv_line(line);
    if (f.size() != 3 || f[0].empty() || f[1].empty())
      throw ParseError("malformed response line, expected student,exercise,score", line_no);
    int score = 0;
    if (f[2] == "0") {
      score = 0;
    } else if (f[2] == "1") {
      score = 1;
    } else {
      char* end = nullptr;
      const double v = std::strtod(f[2].c_str(), &end);
      const bool numeric = end != f[2].c_str() && *end == '\0';
      if (!numeric && is_first) continue;  // header
      if (!numeric) throw ParseError("non-numeric score '" + f[2] + "'", line_no);
      if (v == 0.0) {
        score = 0;
      } else if (v == 1.0) {
        score = 1;
      } else {
        throw ParseError("score outside {0,1}: '" + f[2] + "'", line_no);
      }
    }
    const std::size_t s = students.intern(f[0]);
    const std::size_t e = exercises.intern(f[1]);
    if (!seen.emplace(s, e).second) continue;
    rs.records.push_back({s, e, score});
  }
  rs.student_keys = students.take_keys();
  rs.exercise_keys = exercises.take_keys();
  return rs;
}

inline ResponseSet load_responses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open responses file: " + path);
  return parse_responses(in);
}

/// Parses `exercise,concept` CSV text; an optional header line is skipped if
/// it reads literally `exercise,concept`.
inline RawQMatrix parse_qmatrix(std::istream& in) {
  RawQMatrix q;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2 || f[0].empty() || f[1].empty())
      throw ParseError("malformed q-matrix line, expected exercise,concept", line_no);
    if (line_no == 1 && f[0] == "exercise" && f[1] == "concept") continue;
    q.entries.emplace_back(f[0], f[1]);
  }
  return q;
}

inline RawQMatrix load_qmatrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open q-matrix file: " + path);
  return parse_qmatrix(in);
}

/// Maps raw Q-matrix exercise keys onto the dense exercise ids of `rs`.
/// Rows for exercises absent from `rs` are dropped. Concept ids are assigned
/// over the whole file in order of first appearance so K is stable across
/// filtering. Fails if an exercise of `rs` has no concept.
inline QMatrix align_qmatrix(const RawQMatrix& raw, const ResponseSet& rs) {
  std::unordered_map<std::string, std::size_t> ex_index;
  for (std::size_t i = 0; i < rs.exercise_keys.size(); ++i) ex_index.emplace(rs.exercise_keys[i], i);
  detail::KeyIndex concepts;
  std::set<std::pair<std::size_t, std::size_t>> entries;
  for (const auto& [ek, ck] : raw.entries) {
    const std::size_t c = concepts.intern(ck);
    if (auto it = ex_index.find(ek); it != ex_index.end()) entries.emplace(it->second, c);
  }
  QMatrix q;
  q.entries.assign(entries.begin(), entries.end());
  q.n_exercises = rs.n_exercises();
  q.concept_keys = concepts.take_keys();
  q.n_concepts = q.concept_keys.size();
  std::vector<bool> covered(q.n_exercises, false);
  for (auto [e, c] : q.entries) covered[e] = true;
  for (std::size_t e = 0; e < q.n_exercises; ++e)
    if (!covered[e]) throw std::invalid_argument("exercise '" + rs.exercise_keys[e] + "' has no concept in the q-matrix");
  return q;
}

/// Drops records whose student or exercise is not flagged and re-densifies
/// both index spaces, preserving relative order.
inline ResponseSet compact(const ResponseSet& rs, const std::vector<bool>& keep_student,
                           const std::vector<bool>& keep_record) {
  ResponseSet out;
  std::vector<std::size_t> smap(rs.n_students(), SIZE_MAX), emap(rs.n_exercises(), SIZE_MAX);
  std::vector<bool> ex_used(rs.n_exercises(), false);
  for (std::size_t i = 0; i < rs.records.size(); ++i)
    if (keep_record[i] && keep_student[rs.records[i].student]) ex_used[rs.records[i].exercise] = true;
  for (std::size_t s = 0; s < rs.n_students(); ++s)
    if (keep_student[s]) {
      smap[s] = out.student_keys.size();
      out.student_keys.push_back(rs.student_keys[s]);
    }
  for (std::size_t e = 0; e < rs.n_exercises(); ++e)
    if (ex_used[e]) {
      emap[e] = out.exercise_keys.size();
      out.exercise_keys.push_back(rs.exercise_keys[e]);
    }
  for (std::size_t i = 0; i < rs.records.size(); ++i) {
    const auto& r = rs.records[i];
    if (keep_record[i] && keep_student[r.student]) out.records.push_back({smap[r.student], emap[r.exercise], r.score});
  }
  return out;
}

inline std::vector<std::size_t> count_per_student(const ResponseSet& rs) {
  std::vector<std::size_t> c(rs.n_students(), 0);
  for (const auto& r : rs.records) ++c[r.student];
  return c;
}

/// Keeps students with strictly more than `min_count` records.
inline ResponseSet filter_min_interactions(const ResponseSet& rs, std::size_t min_count) {
  const auto counts = count_per_student(rs);
  std::vector<bool> keep(rs.n_students());
  for (std::size_t s = 0; s < keep.size(); ++s) keep[s] = counts[s] > min_count;
  ResponseSet out = compact(rs, keep, std::vector<bool>(rs.records.size(), true));
  if (out.records.empty()) throw std::invalid_argument("filter_min_interactions: no records left");
  return out;
}

struct TrainTestSplit {
  ResponseSet train;
  ResponseSet test;
  std::size_t fallback_students = 0;  // students kept all-train despite a nonzero test share
};

/// Test records for a student with `count` records. The small slack keeps
/// products such as 5 * (1 - 0.8) from flooring to 0.
inline std::size_t test_share(std::size_t count, double train_ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(count) * (1.0 - train_ratio) + 1e-9));
}

/// Per-student split: floor(c * (1 - ratio)) records of each student go to
/// test, chosen uniformly without replacement. Both halves share the input's
/// index spaces and key tables so ids stay comparable.
inline TrainTestSplit split_train_test(const ResponseSet& rs, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw std::invalid_argument("split_train_test: ratio must lie in (0,1)");
  std::vector<std::vector<std::size_t>> by_student(rs.n_students());
  for (std::size_t i = 0; i < rs.records.size(); ++i) by_student[rs.records[i].student].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<bool> to_test(rs.records.size(), false);
  TrainTestSplit out;
  for (auto& idx : by_student) {
    std::size_t n_test = test_share(idx.size(), train_ratio);
    if (n_test == 0) continue;
    if (idx.size() < 2 || n_test >= idx.size()) {
      if (idx.size() < 2) {
        ++out.fallback_students;
        continue;
      }
      n_test = idx.size() - 1;
    }
    // Partial Fisher-Yates: the first n_test slots become the test sample.
    for (std::size_t k = 0; k < n_test; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
      std::swap(idx[k], idx[pick(rng)]);
      to_test[idx[k]] = true;
    }
  }
  for (std::size_t i = 0; i < rs.records.size(); ++i)
    (to_test[i] ? out.test : out.train).records.push_back(rs.records[i]);
  out.train.student_keys = out.test.student_keys = rs.student_keys;
  out.train.exercise_keys = out.test.exercise_keys = rs.exercise_keys;
  return out;
}

inline DatasetStats dataset_stats(const ResponseSet& rs, const QMatrix& q) {
  DatasetStats st;
  st.n_students = rs.n_students();
  st.n_exercises = rs.n_exercises();
  st.n_concepts = q.n_concepts;
  st.n_interactions = rs.records.size();
  if (st.n_students > 0) st.interactions_per_student = static_cast<double>(st.n_interactions) / st.n_students;
  if (st.n_students > 0 && st.n_exercises > 0)
    st.density = static_cast<double>(st.n_interactions) /
                 (static_cast<double>(st.n_students) * static_cast<double>(st.n_exercises));
  return st;
}

inline nlohmann::json to_json(const DatasetStats& s) {
  return {{"n_students", s.n_students},
          {"n_exercises", s.n_exercises},
          {"n_concepts", s.n_concepts},
          {"n_interactions", s.n_interactions},
          {"interactions_per_student", s.interactions_per_student},
          {"density", s.density}};
}

inline void write_responses_csv(std::ostream& out, const ResponseSet& rs) {
  out << "student,exercise,score\n";
  for (const auto& r : rs.records)
    out << rs.student_keys[r.student] << ',' << rs.exercise_keys[r.exercise] << ',' << r.score << '\n';
}

inline void write_qmatrix_csv(std::ostream& out, const ResponseSet& rs, const QMatrix& q) {
  out << "exercise,concept\n";
  for (auto [e, c] : q.entries) out << rs.exercise_keys.at(e) << ',' << q.concept_keys.at(c) << '\n';
}

/// Two-way id mapping written next to outputs: `kind,dense,raw`.
inline void write_id_map_csv(std::ostream& out, const ResponseSet& rs, const QMatrix& q) {
  out << "kind,dense,raw\n";
  for (std::size_t i = 0; i < rs.student_keys.size(); ++i) out << "student," << i << ',' << rs.student_keys[i] << '\n';
  for (std::size_t i = 0; i < rs.exercise_keys.size(); ++i) out << "exercise," << i << ',' << rs.exercise_keys[i] << '\n';
  for (std::size_t i = 0; i < q.concept_keys.size(); ++i) out << "concept," << i << ',' << q.concept_keys[i] << '\n';
}

/// Re-keys a ResponseSet read independently onto the index spaces of a
/// reference key table. Unknown keys are an error.
inline ResponseSet reindex(const ResponseSet& rs, const std::vector<std::string>& student_keys,
                           const std::vector<std::string>& exercise_keys) {
  std::unordered_map<std::string, std::size_t> si, ei;
  for (std::size_t i = 0; i < student_keys.size(); ++i) si.emplace(student_keys[i], i);
  for (std::size_t i = 0; i < exercise_keys.size(); ++i) ei.emplace(exercise_keys[i], i);
  ResponseSet out;
  out.student_keys = student_keys;
  out.exercise_keys = exercise_keys;
  for (const auto& r : rs.records) {
    auto s = si.find(rs.student_keys[r.student]);
    auto e = ei.find(rs.exercise_keys[r.exercise]);
    if (s == si.end()) throw std::invalid_argument("unknown student key '" + rs.student_keys[r.student] + "'");
    if (e == ei.end()) throw std::invalid_argument("unknown exercise key '" + rs.exercise_keys[r.exercise] + "'");
    out.records.push_back({s->second, e->second, r.score});
  }
  return out;
}

}  // namespace scd
