#pragma once

// Overall and long-tail metrics, interaction-count buckets, and per-student
// diagnostic case studies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "scd/corpus.hpp"
#include "scd/model.hpp"

namespace scd {

inline double accuracy(std::span<const double> preds, std::span<const int> labels, double threshold = 0.5) {
  if (preds.empty() || preds.size() != labels.size()) throw std::invalid_argument("accuracy: need equal, non-empty inputs");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += (preds[i] >= threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

inline double rmse(std::span<const double> preds, std::span<const int> labels) {
  if (preds.empty() || preds.size() != labels.size()) throw std::invalid_argument("rmse: need equal, non-empty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - labels[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(preds.size()));
}

struct StudentMetrics {
  std::size_t student = 0;
  std::size_t n_train = 0;  // training interactions
  std::size_t n_test = 0;
  double acc = 0.0;
  double rmse = 0.0;
};

struct GroupRow {
  std::string label;
  std::size_t n_students = 0;
  std::size_t n_interactions = 0;  // training interactions of the group's students
  double acc = 0.0;
  double rmse = 0.0;
};

struct EvalReport {
  double acc = 0.0;
  double rmse = 0.0;
  double acc50 = 0.0;
  double rmse50 = 0.0;
  std::vector<GroupRow> per_group;
  std::vector<StudentMetrics> per_student;
};

/// Per-student ACC/RMSE over each student's test records. Students without
/// test records are omitted.
inline std::vector<StudentMetrics> per_student_metrics(std::span<const ResponseRecord> test, std::span<const double> preds,
                                                       std::span<const std::size_t> train_counts) {
  if (test.size() != preds.size()) throw std::invalid_argument("per_student_metrics: prediction count mismatch");
  std::vector<std::vector<double>> p(train_counts.size());
  std::vector<std::vector<int>> y(train_counts.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].student >= train_counts.size()) throw std::out_of_range("per_student_metrics: student out of range");
    p[test[i].student].push_back(preds[i]);
    y[test[i].student].push_back(test[i].score);
  }
  std::vector<StudentMetrics> out;
  for (std::size_t s = 0; s < train_counts.size(); ++s) {
    if (p[s].empty()) continue;
    out.push_back({s, train_counts[s], p[s].size(), accuracy(p[s], y[s]), rmse(p[s], y[s])});
  }
  return out;
}

struct TailMetrics {
  double acc50 = 0.0;
  double rmse50 = 0.0;
  std::vector<std::size_t> tail_students;
};

/// Unweighted means of per-student ACC and RMSE over the floor(M'/2)
/// students with the fewest training interactions (ties by student id).
inline TailMetrics tail_metrics(std::vector<StudentMetrics> table) {
  if (table.size() < 2) throw std::invalid_argument("tail_metrics: need at least two students with test records");
  std::sort(table.begin(), table.end(), [](const StudentMetrics& a, const StudentMetrics& b) {
    return a.n_train != b.n_train ? a.n_train < b.n_train : a.student < b.student;
  });
  const std::size_t half = table.size() / 2;
  TailMetrics t;
  for (std::size_t i = 0; i < half; ++i) {
    t.acc50 += table[i].acc;
    t.rmse50 += table[i].rmse;
    t.tail_students.push_back(table[i].student);
  }
  t.acc50 /= static_cast<double>(half);
  t.rmse50 /= static_cast<double>(half);
  return t;
}

/// Buckets [0,w), [w,2w), ..., and a final open bucket [(n-1)w, inf).
inline std::vector<GroupRow> group_report(std::span<const StudentMetrics> table, std::size_t bucket_width = 5,
                                          std::size_t n_buckets = 9) {
  if (bucket_width == 0 || n_buckets == 0) throw std::invalid_argument("group_report: width and bucket count must be >= 1");
  std::vector<GroupRow> rows(n_buckets);
  for (std::size_t b = 0; b < n_buckets; ++b) {
    const std::size_t lo = b * bucket_width;
    rows[b].label = b + 1 == n_buckets ? std::to_string(lo) + "-" : std::to_string(lo) + "-" + std::to_string(lo + bucket_width);
  }
  for (const auto& s : table) {
    const std::size_t b = std::min(s.n_train / bucket_width, n_buckets - 1);
    rows[b].n_students += 1;
    rows[b].n_interactions += s.n_train;
    rows[b].acc += s.acc;
    rows[b].rmse += s.rmse;
  }
  for (auto& r : rows)
    if (r.n_students > 0) {
      r.acc /= static_cast<double>(r.n_students);
      r.rmse /= static_cast<double>(r.n_students);
    }
  return rows;
}

/// Full evaluation of `params` on `test` with the training graph.
inline EvalReport evaluate(const ModelParams& params, const DirectedSplit& graph, const QMatrix& q,
                           const ResponseSet& train, const ResponseSet& test, std::size_t bucket_width = 5,
                           std::size_t n_buckets = 9) {
  if (test.records.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<Pair> pairs;
  std::vector<int> labels;
  for (const auto& r : test.records) {
    pairs.push_back({r.student, r.exercise});
    labels.push_back(r.score);
  }
  const auto preds = predict_values(params, graph, q, pairs);
  const auto counts = count_per_student(train);
  EvalReport rep;
  rep.acc = accuracy(preds, labels);
  rep.rmse = rmse(preds, labels);
  rep.per_student = per_student_metrics(test.records, preds, counts);
  if (rep.per_student.size() >= 2) {
    const auto tail = tail_metrics(rep.per_student);
    rep.acc50 = tail.acc50;
    rep.rmse50 = tail.rmse50;
  } else {
    rep.acc50 = rep.rmse50 = std::numeric_limits<double>::quiet_NaN();
  }
  rep.per_group = group_report(rep.per_student, bucket_width, n_buckets);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r, const std::vector<std::string>* student_keys = nullptr) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : r.per_group)
    groups.push_back({{"bucket", g.label}, {"n_students", g.n_students}, {"n_interactions", g.n_interactions},
                      {"acc", g.acc}, {"rmse", g.rmse}});
  nlohmann::json students = nlohmann::json::array();
  for (const auto& s : r.per_student) {
    nlohmann::json row = {{"student", s.student}, {"n_train_interactions", s.n_train}, {"n_test", s.n_test},
                          {"acc", s.acc}, {"rmse", s.rmse}};
    if (student_keys != nullptr) row["student"] = (*student_keys)[s.student];
    students.push_back(row);
  }
  return {{"acc", r.acc}, {"rmse", r.rmse}, {"acc50", r.acc50}, {"rmse50", r.rmse50},
          {"per_group", groups}, {"per_student", students}};
}

inline void write_groups_csv(std::ostream& out, std::span<const GroupRow> rows) {
  out << "bucket,n_students,n_interactions,acc,rmse\n";
  for (const auto& g : rows) out << g.label << ',' << g.n_students << ',' << g.n_interactions << ',' << g.acc << ',' << g.rmse << '\n';
}

inline void write_students_csv(std::ostream& out, std::span<const StudentMetrics> rows,
                               const std::vector<std::string>& student_keys) {
  out << "student,n_train_interactions,n_test,acc,rmse\n";
  for (const auto& s : rows)
    out << student_keys.at(s.student) << ',' << s.n_train << ',' << s.n_test << ',' << s.acc << ',' << s.rmse << '\n';
}

// ---------------------------------------------------------------------------
// Case study
// ---------------------------------------------------------------------------

struct CaseStudyOutcome {
  std::size_t student = 0;
  std::size_t exercise = 0;
  std::optional<int> score;   // ground truth, when the pair was observed
  bool mastery_exceeds = false;  // mastery > difficulty on every concept of the exercise
  std::optional<bool> consistent;
};

struct CaseStudy {
  std::vector<std::size_t> students;
  std::vector<std::size_t> exercises;
  std::vector<std::size_t> concepts;  // union of the exercises' concepts, ascending
  Matrix mastery;     // students x concepts
  Matrix difficulty;  // exercises x concepts; NaN where the exercise lacks the concept
  std::vector<CaseStudyOutcome> outcomes;
};

/// Mastery and difficulty restricted to the concepts of the requested
/// exercises. An observed pair is consistent when "mastery above difficulty on
/// all of the exercise's concepts" agrees with answering correctly.
inline CaseStudy case_study(const Diagnosis& diag, const QMatrix& q, std::span<const std::size_t> students,
                            std::span<const std::size_t> exercises, std::span<const ResponseRecord> observed) {
  const auto concepts_of = q.concepts_by_exercise();
  for (std::size_t s : students)
    if (s >= diag.mastery.rows) throw std::out_of_range("case_study: unknown student id " + std::to_string(s));
  for (std::size_t e : exercises)
    if (e >= diag.difficulty.rows) throw std::out_of_range("case_study: unknown exercise id " + std::to_string(e));
  CaseStudy cs;
  cs.students.assign(students.begin(), students.end());
  cs.exercises.assign(exercises.begin(), exercises.end());
  std::vector<bool> used(q.n_concepts, false);
  for (std::size_t e : exercises)
    for (std::size_t c : concepts_of[e]) used[c] = true;
  for (std::size_t c = 0; c < used.size(); ++c)
    if (used[c]) cs.concepts.push_back(c);
  cs.mastery = Matrix(students.size(), cs.concepts.size());
  cs.difficulty = Matrix(exercises.size(), cs.concepts.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < students.size(); ++i)
    for (std::size_t k = 0; k < cs.concepts.size(); ++k) cs.mastery(i, k) = diag.mastery(students[i], cs.concepts[k]);
  for (std::size_t j = 0; j < exercises.size(); ++j)
    for (std::size_t k = 0; k < cs.concepts.size(); ++k)
      if (std::binary_search(concepts_of[exercises[j]].begin(), concepts_of[exercises[j]].end(), cs.concepts[k]))
        cs.difficulty(j, k) = diag.difficulty(exercises[j], cs.concepts[k]);

  std::unordered_map<std::size_t, int> score_of;  // key: student * N + exercise
  const std::size_t N = diag.difficulty.rows;
  for (const auto& r : observed) score_of[r.student * N + r.exercise] = r.score;
  for (std::size_t s : students)
    for (std::size_t e : exercises) {
      CaseStudyOutcome o{s, e, std::nullopt, true, std::nullopt};
      for (std::size_t c : concepts_of[e]) o.mastery_exceeds = o.mastery_exceeds && diag.mastery(s, c) > diag.difficulty(e, c);
      if (auto it = score_of.find(s * N + e); it != score_of.end()) {
        o.score = it->second;
        o.consistent = o.mastery_exceeds == (it->second == 1);
      }
      cs.outcomes.push_back(o);
    }
  return cs;
}

/// Wide table for plotting: one row per concept, one mastery column per
/// student and one difficulty column per exercise.
inline void write_case_study_csv(std::ostream& out, const CaseStudy& cs, const ResponseSet& keys, const QMatrix& q) {
  out << "concept";
  for (std::size_t s : cs.students) out << ",mastery:" << keys.student_keys.at(s);
  for (std::size_t e : cs.exercises) out << ",difficulty:" << keys.exercise_keys.at(e);
  out << '\n';
  for (std::size_t k = 0; k < cs.concepts.size(); ++k) {
    out << q.concept_keys.at(cs.concepts[k]);
    for (std::size_t i = 0; i < cs.students.size(); ++i) out << ',' << cs.mastery(i, k);
    for (std::size_t j = 0; j < cs.exercises.size(); ++j) {
      out << ',';
      if (!std::isnan(cs.difficulty(j, k))) out << cs.difficulty(j, k);
    }
    out << '\n';
  }
}

inline void write_case_outcomes_csv(std::ostream& out, const CaseStudy& cs, const ResponseSet& keys) {
  out << "student,exercise,score,mastery_exceeds_difficulty,consistent\n";
  for (const auto& o : cs.outcomes) {
    out << keys.student_keys.at(o.student) << ',' << keys.exercise_keys.at(o.exercise) << ',';
    if (o.score) out << *o.score;
    out << ',' << (o.mastery_exceeds ? 1 : 0) << ',';
    if (o.consistent) out << (*o.consistent ? "consistent" : "inconsistent");
    out << '\n';
  }
}

}  // namespace scd
