// scd: command-line front end for training and inspecting the model.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scd/corpus.hpp"
#include "scd/evalkit.hpp"
#include "scd/synthetic.hpp"
#include "scd/trainkit.hpp"
#include "scd/viewgen.hpp"

namespace fs = std::filesystem;
using namespace scd;

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    j = nlohmann::json::parse(in);
  }
  TrainConfig cfg = config_from_json(j);
  nlohmann::json ov = nlohmann::json::object();
  for (const auto& kv : overrides) {
    auto [k, v] = parse_override(kv);
    ov[k] = v;
  }
  cfg = apply_config(cfg, ov);
  // Relative data paths resolve against the config file's directory.
  if (!path.empty()) {
    const fs::path base = fs::path(path).parent_path();
    for (std::string* f : {&cfg.responses, &cfg.qmatrix})
      if (!f->empty() && fs::path(*f).is_relative() && !fs::exists(*f) && fs::exists(base / *f)) *f = (base / *f).string();
  }
  return cfg;
}

std::size_t lookup(const std::vector<std::string>& keys, const std::string& k, const char* what) {
  for (std::size_t i = 0; i < keys.size(); ++i)
    if (keys[i] == k) return i;
  throw std::invalid_argument(std::string("unknown ") + what + " '" + k + "'");
}

int run_stats(const std::string& responses, const std::string& qmatrix, std::size_t min_interactions) {
  ResponseSet rs = load_responses(responses);
  if (min_interactions > 0) rs = filter_min_interactions(rs, min_interactions);
  QMatrix q = align_qmatrix(load_qmatrix(qmatrix), rs);
  std::cout << to_json(dataset_stats(rs, q)).dump(2) << '\n';
  return 0;
}

int run_train(const std::string& config, const std::vector<std::string>& overrides, const std::optional<std::uint64_t>& seed,
              const fs::path& out_dir) {
  TrainConfig cfg = load_config(config, overrides);
  if (seed) cfg.master_seed = *seed;
  cfg.validate();
  if (cfg.responses.empty() || cfg.qmatrix.empty()) throw std::invalid_argument("config needs responses and qmatrix paths");
  TrainingData data = prepare_data(cfg);
  fs::create_directories(out_dir);
  {
    auto f = open_out(out_dir / "train.csv");
    write_responses_csv(f, data.train);
    auto g = open_out(out_dir / "test.csv");
    write_responses_csv(g, data.test);
    auto h = open_out(out_dir / "id_map.csv");
    write_id_map_csv(h, data.train, data.q);
    auto c = open_out(out_dir / "config.json");
    c << to_json(cfg).dump(2) << '\n';
  }
  std::ofstream log = open_out(out_dir / "train_log.csv");
  write_log_header(log);
  FitResult res = fit(init_state(data, cfg), data, cfg, &log, out_dir / "checkpoint.json");
  const LossBreakdown& last = res.history.back();
  std::cerr << "trained " << res.state.epoch << " epochs (" << mode_name(cfg.mode) << "), final loss " << last.total
            << "; artifacts in " << out_dir.string() << '\n';
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& test_path, const std::optional<fs::path>& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  ResponseSet test = reindex(load_responses(test_path), ck.data.train.student_keys, ck.data.train.exercise_keys);
  EvalReport rep = evaluate(ck.state.params, ck.data.graph, ck.data.q, ck.data.train, test);
  std::cout << to_json(rep, &ck.data.train.student_keys).dump(2) << '\n';
  if (out_dir) {
    fs::create_directories(*out_dir);
    auto g = open_out(*out_dir / "eval_groups.csv");
    write_groups_csv(g, rep.per_group);
    auto s = open_out(*out_dir / "eval_students.csv");
    write_students_csv(s, rep.per_student, ck.data.train.student_keys);
  }
  return 0;
}

/// Per direction and head degree: importance, retention probability and the
/// observed keep frequency over `draws` sampled views of the training graph.
int run_viewgen_audit(const std::string& config, const std::vector<std::string>& overrides, std::size_t draws,
                      const std::optional<std::uint64_t>& seed) {
  TrainConfig cfg = load_config(config, overrides);
  if (seed) cfg.master_seed = *seed;
  cfg.dropout.validate();
  if (draws == 0) throw std::invalid_argument("--draws must be >= 1");
  TrainingData data = prepare_data(cfg);
  const DirectedSplit& g = data.graph;

  struct Cell {
    std::size_t edges = 0;
    std::size_t kept = 0;
  };
  std::map<std::size_t, Cell> e2s, s2e;
  const auto e2s_heads = g.e2s.heads(), s2e_heads = g.s2e.heads();
  auto rng = derive_rng(cfg.master_seed, 0, rng_stream::views);
  for (std::size_t i = 0; i < draws; ++i) {
    View v = generate_view(g, cfg.dropout, rng);
    for (std::size_t j = 0; j < v.kept_e2s.size(); ++j) {
      Cell& c = e2s[g.e2s.indegree(e2s_heads[j])];
      ++c.edges;
      c.kept += v.kept_e2s[j];
    }
    for (std::size_t j = 0; j < v.kept_s2e.size(); ++j) {
      Cell& c = s2e[g.s2e.indegree(s2e_heads[j])];
      ++c.edges;
      c.kept += v.kept_s2e[j];
    }
  }
  std::ostringstream out;
  out << std::setprecision(10);
  out << "direction,degree,edges_per_draw,t,p,empirical\n";
  for (auto [name, table] : {std::pair{"e2s", &e2s}, std::pair{"s2e", &s2e}})
    for (const auto& [deg, c] : *table)
      out << name << ',' << deg << ',' << c.edges / draws << ',' << edge_importance(deg, cfg.dropout) << ','
          << retention_for_degree(deg, cfg.dropout) << ',' << static_cast<double>(c.kept) / static_cast<double>(c.edges)
          << '\n';
  std::cout << out.str();
  return 0;
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

int run_diagnose(const std::string& checkpoint, const std::vector<std::string>& students_raw,
                 const std::vector<std::string>& exercises_raw, const std::string& test_path,
                 const std::optional<fs::path>& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const ResponseSet& keys = ck.data.train;
  std::vector<std::size_t> students, exercises;
  for (const auto& s : split_list(students_raw)) students.push_back(lookup(keys.student_keys, s, "student"));
  for (const auto& e : split_list(exercises_raw)) exercises.push_back(lookup(keys.exercise_keys, e, "exercise"));
  std::vector<ResponseRecord> observed = keys.records;
  if (!test_path.empty()) {
    ResponseSet test = reindex(load_responses(test_path), keys.student_keys, keys.exercise_keys);
    observed.insert(observed.end(), test.records.begin(), test.records.end());
  }
  Diagnosis diag = diagnose_values(ck.state.params, ck.data.graph);
  CaseStudy cs = case_study(diag, ck.data.q, students, exercises, observed);
  write_case_study_csv(std::cout, cs, keys, ck.data.q);
  if (out_dir) {
    fs::create_directories(*out_dir);
    auto f = open_out(*out_dir / "case_study.csv");
    write_case_study_csv(f, cs, keys, ck.data.q);
    auto g = open_out(*out_dir / "case_outcomes.csv");
    write_case_outcomes_csv(g, cs, keys);
  }
  return 0;
}

int run_synth(const SyntheticSpec& spec, const fs::path& out_dir) {
  SyntheticData d = make_synthetic(spec);
  fs::create_directories(out_dir);
  auto r = open_out(out_dir / "responses.csv");
  write_responses_csv(r, d.responses);
  auto q = open_out(out_dir / "qmatrix.csv");
  write_qmatrix_csv(q, d.responses, d.q);
  std::cerr << "wrote " << d.responses.records.size() << " responses for " << d.responses.n_students() << " students to "
            << out_dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised graph cognitive diagnosis"};
  app.require_subcommand(1);

  std::string responses, qmatrix, config, checkpoint, test_path;
  std::size_t min_interactions = 0, draws = 1000;
  std::vector<std::string> overrides, students, exercises;
  std::uint64_t seed_value = 0;
  std::string out_dir = ".";
  std::string eval_out, diag_out;

  auto* stats = app.add_subcommand("stats", "Dataset statistics as JSON");
  stats->add_option("--responses", responses, "Response CSV (student,exercise,score)")->required();
  stats->add_option("--qmatrix", qmatrix, "Q-matrix CSV (exercise,concept)")->required();
  stats->add_option("--min-interactions", min_interactions, "Drop students with this many records or fewer");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "JSON config file")->required();
  train->add_option("--override", overrides, "key=value, repeatable")->allow_extra_args(false);
  auto* train_seed = train->add_option("--seed", seed_value, "Master seed");
  train->add_option("--output-dir", out_dir, "Artifact directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test CSV");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required();
  eval->add_option("--test", test_path, "Test response CSV")->required();
  eval->add_option("--output-dir", eval_out, "Also write group and student CSVs here");

  auto* audit = app.add_subcommand("viewgen-audit", "Retention by degree, predicted and sampled");
  audit->add_option("--config", config, "JSON config file")->required();
  audit->add_option("--override", overrides, "key=value, repeatable")->allow_extra_args(false);
  audit->add_option("--draws", draws, "Number of sampled views");
  auto* audit_seed = audit->add_option("--seed", seed_value, "Master seed");

  auto* diagnose = app.add_subcommand("diagnose", "Mastery/difficulty case study as CSV");
  diagnose->add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required();
  diagnose->add_option("--students", students, "Student keys (comma separated or repeated)")->required();
  diagnose->add_option("--exercises", exercises, "Exercise keys (comma separated or repeated)")->required();
  diagnose->add_option("--test", test_path, "Extra observed responses, e.g. the test CSV");
  diagnose->add_option("--output-dir", diag_out, "Also write case_study.csv and case_outcomes.csv here");

  SyntheticSpec spec;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset with planted mastery");
  synth->add_option("--students", spec.n_students);
  synth->add_option("--exercises", spec.n_exercises);
  synth->add_option("--concepts", spec.n_concepts);
  synth->add_option("--noise", spec.label_noise);
  synth->add_option("--seed", spec.seed);
  synth->add_option("--output-dir", out_dir, "Directory for responses.csv and qmatrix.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*stats) return run_stats(responses, qmatrix, min_interactions);
    if (*train) return run_train(config, overrides, *train_seed ? std::optional(seed_value) : std::nullopt, out_dir);
    if (*eval) return run_eval(checkpoint, test_path, eval_out.empty() ? std::nullopt : std::optional<fs::path>(eval_out));
    if (*audit)
      return run_viewgen_audit(config, overrides, draws, *audit_seed ? std::optional(seed_value) : std::nullopt);
    if (*diagnose)
      return run_diagnose(checkpoint, students, exercises, test_path,
                          diag_out.empty() ? std::nullopt : std::optional<fs::path>(diag_out));
    if (*synth) return run_synth(spec, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
