#pragma once

// Synthetic response data with planted mastery and difficulty, for smoke
// runs and long-tail experiments without a real dataset.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "scd/corpus.hpp"

namespace scd {

struct SyntheticSpec {
  std::size_t n_students = 200;
  std::size_t n_exercises = 50;
  std::size_t n_concepts = 10;
  std::size_t max_concepts_per_exercise = 2;
  // Interaction counts: min_count * U^(-1/tail_index), rounded and capped at
  // the exercise count. tail_index 0.685 puts about half the students at <= 5.
  std::size_t min_count = 2;
  double tail_index = 0.685;
  // Mastery: sigmoid(ability + spread * z), ability ~ N(0, ability_sd).
  double ability_sd = 1.5;
  double concept_spread = 0.5;
  double label_noise = 0.1;  // probability of flipping the planted outcome
  std::uint64_t seed = 0;
};

struct SyntheticData {
  ResponseSet responses;
  QMatrix q;
  Matrix mastery;     // students x concepts, planted
  Matrix difficulty;  // exercises x concepts, planted (0 where not related)
};

/// Outcome is 1 when mastery >= difficulty on every concept of the exercise,
/// flipped with probability label_noise.
inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto logistic = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };

  SyntheticData d;
  d.q.n_exercises = spec.n_exercises;
  d.q.n_concepts = spec.n_concepts;
  for (std::size_t c = 0; c < spec.n_concepts; ++c) d.q.concept_keys.push_back("c" + std::to_string(c));
  d.difficulty = Matrix(spec.n_exercises, spec.n_concepts);
  std::vector<std::size_t> concept_ids(spec.n_concepts);
  std::iota(concept_ids.begin(), concept_ids.end(), 0);
  for (std::size_t e = 0; e < spec.n_exercises; ++e) {
    std::uniform_int_distribution<std::size_t> how_many(1, std::min(spec.max_concepts_per_exercise, spec.n_concepts));
    const std::size_t n = how_many(rng);
    // Every concept is used at least once by cycling the first pick.
    std::vector<std::size_t> pool = concept_ids;
    std::shuffle(pool.begin(), pool.end(), rng);
    if (e < spec.n_concepts) std::swap(pool[0], *std::find(pool.begin(), pool.end(), e % spec.n_concepts));
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t c : chosen) {
      d.q.entries.emplace_back(e, c);
      d.difficulty(e, c) = logistic(1.2 * normal(rng));
    }
  }

  d.mastery = Matrix(spec.n_students, spec.n_concepts);
  for (std::size_t s = 0; s < spec.n_students; ++s) {
    const double ability = spec.ability_sd * normal(rng);
    for (std::size_t c = 0; c < spec.n_concepts; ++c) d.mastery(s, c) = logistic(ability + spec.concept_spread * normal(rng));
  }

  const auto concepts_of = d.q.concepts_by_exercise();
  std::vector<std::size_t> exercises(spec.n_exercises);
  std::iota(exercises.begin(), exercises.end(), 0);
  for (std::size_t s = 0; s < spec.n_students; ++s) d.responses.student_keys.push_back("s" + std::to_string(s));
  for (std::size_t e = 0; e < spec.n_exercises; ++e) d.responses.exercise_keys.push_back("e" + std::to_string(e));
  for (std::size_t s = 0; s < spec.n_students; ++s) {
    const double u = std::max(unit(rng), 1e-12);
    const double raw = static_cast<double>(spec.min_count) * std::pow(u, -1.0 / spec.tail_index);
    const std::size_t count = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(std::min(raw, 1e9))),
                                                      spec.min_count, spec.n_exercises);
    std::shuffle(exercises.begin(), exercises.end(), rng);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t e = exercises[i];
      bool ok = true;
      for (std::size_t c : concepts_of[e]) ok = ok && d.mastery(s, c) >= d.difficulty(e, c);
      if (unit(rng) < spec.label_noise) ok = !ok;
      d.responses.records.push_back({s, e, ok ? 1 : 0});
    }
  }
  return d;
}

}  // namespace scd
