#pragma once

// Multi-task training: Adam on main + lambda1 * ssl + lambda2 * reg, with a
// fresh pair of dropout views drawn at the start of every epoch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scd/corpus.hpp"
#include "scd/model.hpp"
#include "scd/objectives.hpp"
#include "scd/relgraph.hpp"
#include "scd/viewgen.hpp"

namespace scd {

enum class TrainMode { scd, scd_random, supervised_only };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::scd: return "scd";
    case TrainMode::scd_random: return "scd-random";
    case TrainMode::supervised_only: return "supervised-only";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "scd") return TrainMode::scd;
  if (s == "scd-random") return TrainMode::scd_random;
  if (s == "supervised-only") return TrainMode::supervised_only;
  throw std::invalid_argument("unknown mode '" + s + "' (expected scd, scd-random or supervised-only)");
}

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  // data
  std::string responses;
  std::string qmatrix;
  double train_ratio = 0.8;
  std::size_t min_interactions = 5;

  // optimisation
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  AdamOptions adam;

  // model
  std::size_t layers = 2;
  std::size_t dim = 0;  // 0: use the concept count

  // objective
  TrainMode mode = TrainMode::scd;
  DropoutParams dropout;
  double tau = 0.5;
  double lambda1 = 0.1;
  double lambda2 = 1e-4;
  bool include_positive_in_denominator = false;
  bool ssl_full_population = false;

  std::uint64_t master_seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw std::invalid_argument("train_ratio must lie in (0,1)");
    if (mode != TrainMode::supervised_only) dropout.validate();
    if (layers < 1) throw std::invalid_argument("layers must be >= 1");
  }

  LossWeights weights() const { return {mode == TrainMode::supervised_only ? 0.0 : lambda1, lambda2}; }
  ContrastiveOptions contrastive() const { return {tau, include_positive_in_denominator}; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"responses", c.responses},
          {"qmatrix", c.qmatrix},
          {"train_ratio", c.train_ratio},
          {"min_interactions", c.min_interactions},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"layers", c.layers},
          {"dim", c.dim},
          {"mode", mode_name(c.mode)},
          {"k", c.dropout.k},
          {"theta", c.dropout.theta},
          {"p_min", c.dropout.p_min},
          {"tau", c.tau},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"include_positive_in_denominator", c.include_positive_in_denominator},
          {"ssl_full_population", c.ssl_full_population},
          {"seed", c.master_seed},
          {"checkpoint_every", c.checkpoint_every}};
}

/// Applies the keys present in `j` on top of `base`. Unknown keys are an error.
inline TrainConfig apply_config(TrainConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "responses") c.responses = v.get<std::string>();
    else if (key == "qmatrix") c.qmatrix = v.get<std::string>();
    else if (key == "train_ratio") c.train_ratio = v.get<double>();
    else if (key == "min_interactions") c.min_interactions = v.get<std::size_t>();
    else if (key == "epochs") c.epochs = v.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (key == "learning_rate") c.adam.learning_rate = v.get<double>();
    else if (key == "beta1") c.adam.beta1 = v.get<double>();
    else if (key == "beta2") c.adam.beta2 = v.get<double>();
    else if (key == "adam_eps") c.adam.eps = v.get<double>();
    else if (key == "layers") c.layers = v.get<std::size_t>();
    else if (key == "dim") c.dim = v.get<std::size_t>();
    else if (key == "mode") c.mode = parse_mode(v.get<std::string>());
    else if (key == "k") c.dropout.k = v.get<double>();
    else if (key == "theta") c.dropout.theta = v.get<double>();
    else if (key == "p_min") c.dropout.p_min = v.get<double>();
    else if (key == "tau") c.tau = v.get<double>();
    else if (key == "lambda1") c.lambda1 = v.get<double>();
    else if (key == "lambda2") c.lambda2 = v.get<double>();
    else if (key == "include_positive_in_denominator") c.include_positive_in_denominator = v.get<bool>();
    else if (key == "ssl_full_population") c.ssl_full_population = v.get<bool>();
    else if (key == "seed") c.master_seed = v.get<std::uint64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  return c;
}

inline TrainConfig config_from_json(const nlohmann::json& j) { return apply_config(TrainConfig{}, j); }

/// Parses `key=value`; the value is read as JSON when it parses, else as a string.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key=value: '" + kv + "'");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
                      const AdamOptions& opt) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient size mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i])) throw std::domain_error("adam_step: non-finite gradient at index " + std::to_string(i));
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grads[i];
    state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

// ---------------------------------------------------------------------------
// Per-batch objective
// ---------------------------------------------------------------------------

struct LossSettings {
  LossWeights weights;
  ContrastiveOptions contrastive;
  bool full_population = false;
};

struct BatchResult {
  LossBreakdown loss;
  std::vector<double> grads;  // flattened in visit_params order
};

inline std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Loss and gradient for one mini-batch. The main term always runs on
/// `graph`; when both views are given, the contrastive term runs on them.
/// Contrastive subsets are the distinct students / exercises of the batch
/// (or everyone, with full_population); a subset with fewer than two nodes
/// contributes zero.
inline BatchResult batch_objective(const ModelParams& params, const DirectedSplit& graph, const DirectedSplit* view1,
                                   const DirectedSplit* view2, const std::vector<std::vector<std::size_t>>& concepts_of,
                                   std::span<const ResponseRecord> batch, const LossSettings& s) {
  Tape tape;
  ParamVars p = bind_params(tape, params);
  NodeStates states = gcn_forward(p, graph);
  DiagnosisVars diag = diagnose(p, states);
  std::vector<Pair> pairs;
  std::vector<int> labels;
  std::set<std::size_t> student_set, exercise_set;
  for (const auto& r : batch) {
    pairs.push_back({r.student, r.exercise});
    labels.push_back(r.score);
    student_set.insert(r.student);
    exercise_set.insert(r.exercise);
  }
  Var y = predict(p, diag, concepts_of, pairs);
  Var main = main_loss(y, labels);
  Var reg = l2_regularizer(p);

  std::optional<SslVars> ssl;
  double ssl_s = 0.0, ssl_e = 0.0;
  if (view1 != nullptr && view2 != nullptr && s.weights.lambda1 != 0.0) {
    NodeStates v1 = gcn_forward(p, *view1);
    NodeStates v2 = gcn_forward(p, *view2);
    std::vector<std::size_t> students(student_set.begin(), student_set.end());
    std::vector<std::size_t> exercises(exercise_set.begin(), exercise_set.end());
    if (s.full_population) {
      students = iota_ids(params.dims.n_students);
      exercises = iota_ids(params.dims.n_exercises);
    }
    Var zero = tape.constant(Matrix::scalar(0.0));
    SslVars parts{zero, zero};
    if (students.size() >= 2)
      parts.student = infonce(v1.final_students(), v2.final_students(), students, s.contrastive);
    if (exercises.size() >= 2)
      parts.exercise = infonce(v1.final_exercises(), v2.final_exercises(), exercises, s.contrastive);
    ssl = parts;
    ssl_s = parts.student.item();
    ssl_e = parts.exercise.item();
  }
  Var total = total_loss(main, ssl ? &*ssl : nullptr, reg, s.weights);
  tape.backward(total);

  BatchResult out;
  out.loss = total_loss(main.item(), ssl_s, ssl_e, reg.item(), s.weights, s.contrastive.tau);
  out.grads.reserve(params.parameter_count());
  visit_params(p, [&](const std::string&, const Var& v) {
    out.grads.insert(out.grads.end(), v.grad().data.begin(), v.grad().data.end());
  });
  return out;
}

// ---------------------------------------------------------------------------
// Epochs
// ---------------------------------------------------------------------------

struct TrainState {
  ModelParams params;
  AdamState adam;
  std::size_t epoch = 0;  // completed epochs
};

/// Everything training needs that does not change across epochs.
struct TrainingData {
  ResponseSet train;
  ResponseSet test;
  QMatrix q;
  DirectedSplit graph;
  std::vector<std::vector<std::size_t>> concepts_of;
};

inline TrainingData make_training_data(ResponseSet train, ResponseSet test, QMatrix q) {
  TrainingData d;
  d.graph = directed_split(build_relation_graph(train, q));
  d.concepts_of = q.concepts_by_exercise();
  d.train = std::move(train);
  d.test = std::move(test);
  d.q = std::move(q);
  return d;
}

inline ModelDims dims_for(const TrainingData& data, const TrainConfig& cfg) {
  return {data.train.n_students(), data.train.n_exercises(), data.q.n_concepts, cfg.dim, cfg.layers};
}

inline TrainState init_state(const TrainingData& data, const TrainConfig& cfg) {
  return {init_params(dims_for(data, cfg), cfg.master_seed), {}, 0};
}

namespace rng_stream {
inline constexpr std::uint64_t views = 1;
inline constexpr std::uint64_t shuffle = 2;
}  // namespace rng_stream

/// The two sparse graphs for an epoch, or nothing in supervised-only mode.
inline std::optional<std::pair<DirectedSplit, DirectedSplit>> epoch_views(const DirectedSplit& graph,
                                                                          const TrainConfig& cfg,
                                                                          std::size_t epoch_index) {
  if (cfg.mode == TrainMode::supervised_only) return std::nullopt;
  auto rng = derive_rng(cfg.master_seed, epoch_index, rng_stream::views);
  std::pair<View, View> views;
  if (cfg.mode == TrainMode::scd) {
    views = generate_view_pair(graph, cfg.dropout, rng);
  } else {
    views = generate_random_view_pair(graph, matched_uniform_p(graph, cfg.dropout), rng);
  }
  return std::make_pair(apply_view(graph, views.first), apply_view(graph, views.second));
}

/// One pass over the shuffled training records. Returns the mean of the
/// per-batch breakdowns.
inline LossBreakdown train_epoch(TrainState& state, const TrainingData& data, const TrainConfig& cfg) {
  const std::size_t epoch_index = state.epoch;
  auto views = epoch_views(data.graph, cfg, epoch_index);
  std::vector<ResponseRecord> order = data.train.records;
  auto shuffle_rng = derive_rng(cfg.master_seed, epoch_index, rng_stream::shuffle);
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const LossSettings settings{cfg.weights(), cfg.contrastive(), cfg.ssl_full_population};
  LossBreakdown acc;
  std::size_t n_batches = 0;
  std::vector<double> flat = state.params.flatten();
  for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
    const std::size_t e = std::min(order.size(), b + cfg.batch_size);
    std::span<const ResponseRecord> batch(order.data() + b, e - b);
    BatchResult r = batch_objective(state.params, data.graph, views ? &views->first : nullptr,
                                    views ? &views->second : nullptr, data.concepts_of, batch, settings);
    if (!std::isfinite(r.loss.total)) throw std::domain_error("training diverged: non-finite loss");
    adam_step(flat, r.grads, state.adam, cfg.adam);
    state.params.unflatten(flat);
    acc.main += r.loss.main;
    acc.ssl_student += r.loss.ssl_student;
    acc.ssl_exercise += r.loss.ssl_exercise;
    acc.reg += r.loss.reg;
    ++n_batches;
  }
  ++state.epoch;
  const double inv = n_batches == 0 ? 0.0 : 1.0 / static_cast<double>(n_batches);
  return total_loss(acc.main * inv, acc.ssl_student * inv, acc.ssl_exercise * inv, acc.reg * inv, settings.weights,
                    cfg.tau);
}

// ---------------------------------------------------------------------------
// Checkpoints and logs
// ---------------------------------------------------------------------------

inline void write_log_header(std::ostream& out) { out << "epoch,main,ssl_s,ssl_e,reg,total\n"; }

inline void write_log_row(std::ostream& out, std::size_t epoch, const LossBreakdown& b) {
  std::ostringstream row;
  row << std::setprecision(17) << epoch << ',' << b.main << ',' << b.ssl_student << ',' << b.ssl_exercise << ','
      << b.reg << ',' << b.total << '\n';
  out << row.str();
}

/// Self-contained checkpoint: config, parameters, optimizer state, and the
/// training graph inputs needed to run inference later.
inline nlohmann::json checkpoint_json(const TrainState& st, const TrainConfig& cfg, const TrainingData& data) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : data.train.records) records.push_back({r.student, r.exercise, r.score});
  nlohmann::json q = nlohmann::json::array();
  for (auto [e, c] : data.q.entries) q.push_back({e, c});
  return {{"format", "scd-checkpoint-v1"},
          {"config", to_json(cfg)},
          {"epoch", st.epoch},
          {"params", to_json(st.params)},
          {"adam", {{"m", st.adam.m}, {"v", st.adam.v}, {"step", st.adam.step}}},
          {"student_keys", data.train.student_keys},
          {"exercise_keys", data.train.exercise_keys},
          {"concept_keys", data.q.concept_keys},
          {"q_entries", q},
          {"train_records", records}};
}

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  TrainingData data;  // test set is empty
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "scd-checkpoint-v1") throw std::invalid_argument("not an scd checkpoint");
  Checkpoint ck;
  ck.config = config_from_json(j.at("config"));
  ck.state.epoch = j.at("epoch").get<std::size_t>();
  ck.state.params = params_from_json(j.at("params"));
  ck.state.adam.m = j.at("adam").at("m").get<std::vector<double>>();
  ck.state.adam.v = j.at("adam").at("v").get<std::vector<double>>();
  ck.state.adam.step = j.at("adam").at("step").get<std::uint64_t>();
  ResponseSet train;
  train.student_keys = j.at("student_keys").get<std::vector<std::string>>();
  train.exercise_keys = j.at("exercise_keys").get<std::vector<std::string>>();
  for (const auto& r : j.at("train_records"))
    train.records.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>(), r.at(2).get<int>()});
  QMatrix q;
  q.concept_keys = j.at("concept_keys").get<std::vector<std::string>>();
  q.n_concepts = q.concept_keys.size();
  q.n_exercises = train.n_exercises();
  for (const auto& e : j.at("q_entries")) q.entries.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
  ResponseSet test;
  test.student_keys = train.student_keys;
  test.exercise_keys = train.exercise_keys;
  ck.data = make_training_data(std::move(train), std::move(test), std::move(q));
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st, const TrainConfig& cfg,
                            const TrainingData& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << checkpoint_json(st, cfg, data).dump();
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(in));
}

struct FitResult {
  TrainState state;
  std::vector<LossBreakdown> history;
};

/// Runs epochs state.epoch .. cfg.epochs-1. Log rows go to `log` (if any),
/// checkpoints to `checkpoint_path` (if non-empty) every checkpoint_every
/// epochs and at the end. On divergence the last good state is saved before
/// the error propagates.
inline FitResult fit(TrainState state, const TrainingData& data, const TrainConfig& cfg, std::ostream* log,
                     const std::filesystem::path& checkpoint_path = {}) {
  cfg.validate();
  FitResult res;
  while (state.epoch < cfg.epochs) {
    TrainState last_good = state;
    LossBreakdown b;
    try {
      b = train_epoch(state, data, cfg);
      if (!std::isfinite(b.total)) throw std::domain_error("training diverged: non-finite epoch loss");
    } catch (const std::domain_error&) {
      if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, last_good, cfg, data);
      throw;
    }
    res.history.push_back(b);
    if (log != nullptr) write_log_row(*log, state.epoch, b);
    const bool periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
    if (!checkpoint_path.empty() && (periodic || state.epoch == cfg.epochs))
      save_checkpoint(checkpoint_path, state, cfg, data);
  }
  res.state = std::move(state);
  return res;
}

/// Loads, filters and splits the configured data files.
inline TrainingData prepare_data(const TrainConfig& cfg) {
  ResponseSet all = load_responses(cfg.responses);
  if (cfg.min_interactions > 0) all = filter_min_interactions(all, cfg.min_interactions);
  if (all.records.empty()) throw std::invalid_argument("no training records");
  QMatrix q = align_qmatrix(load_qmatrix(cfg.qmatrix), all);
  auto split = split_train_test(all, cfg.train_ratio, cfg.master_seed);
  if (split.train.records.empty()) throw std::invalid_argument("empty training set");
  return make_training_data(std::move(split.train), std::move(split.test), std::move(q));
}

}  // namespace scd
