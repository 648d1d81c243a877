#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "scd/trainkit.hpp"
#include "support/fixtures.hpp"

using namespace scd;

namespace {

TrainingData fixture_data() {
  auto f = scd::testing::small_fixture();
  ResponseSet test = f.train;
  test.records.clear();
  return make_training_data(f.train, test, f.q);
}

TrainConfig small_config(TrainMode mode = TrainMode::scd) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 3;
  c.batch_size = 4;
  c.master_seed = 11;
  return c;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> x = {0.5, -1.0};
  const std::vector<double> g = {0.0, 0.0};
  AdamState st;
  adam_step(x, g, st, {});
  EXPECT_EQ(x, (std::vector<double>{0.5, -1.0}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  std::vector<double> x = {0.0, 0.0, 0.0};
  const std::vector<double> g = {3.0, -0.01, 1e4};
  AdamState st;
  adam_step(x, g, st, {});
  EXPECT_NEAR(x[0], -1e-3, 1e-9);
  EXPECT_NEAR(x[1], 1e-3, 1e-8);
  EXPECT_NEAR(x[2], -1e-3, 1e-9);
}

TEST(Adam, RejectsNonFiniteGradient) {
  std::vector<double> x = {0.0};
  const std::vector<double> g = {NAN};
  AdamState st;
  EXPECT_THROW(adam_step(x, g, st, {}), std::domain_error);
}

TEST(Config, OverridesAndUnknownKeys) {
  TrainConfig c = apply_config({}, {{"tau", 0.2}, {"mode", "scd-random"}, {"p_min", 0.5}});
  EXPECT_EQ(c.tau, 0.2);
  EXPECT_EQ(c.mode, TrainMode::scd_random);
  EXPECT_EQ(c.dropout.p_min, 0.5);
  EXPECT_THROW(apply_config({}, {{"taau", 0.2}}), std::invalid_argument);
  EXPECT_THROW(apply_config({}, {{"mode", "both"}}), std::invalid_argument);

  auto [k, v] = parse_override("lambda1=0.3");
  EXPECT_EQ(k, "lambda1");
  EXPECT_EQ(v.get<double>(), 0.3);
  auto [k2, v2] = parse_override("mode=supervised-only");
  EXPECT_EQ(v2.get<std::string>(), "supervised-only");
  EXPECT_THROW(parse_override("novalue"), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c = small_config(TrainMode::scd_random);
  c.lambda2 = 3e-5;
  c.include_positive_in_denominator = true;
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.dropout.p_min = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(BatchObjective, SupervisedOnlyHasNoContrastiveTerm) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config(TrainMode::supervised_only);
  TrainState st = init_state(data, cfg);
  LossBreakdown b = train_epoch(st, data, cfg);
  EXPECT_EQ(b.ssl_student, 0.0);
  EXPECT_EQ(b.ssl_exercise, 0.0);
  EXPECT_EQ(b.lambda1, 0.0);
}

TEST(BatchObjective, TotalIsComposedFromParts) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config();
  TrainState st = init_state(data, cfg);
  auto views = epoch_views(data.graph, cfg, 0);
  ASSERT_TRUE(views.has_value());
  const LossSettings s{cfg.weights(), cfg.contrastive(), false};
  BatchResult r = batch_objective(st.params, data.graph, &views->first, &views->second, data.concepts_of,
                                  data.train.records, s);
  EXPECT_NE(r.loss.ssl_student, 0.0);
  EXPECT_NEAR(r.loss.total, r.loss.main + 0.1 * (r.loss.ssl_student + r.loss.ssl_exercise) + 1e-4 * r.loss.reg, 1e-12);
  EXPECT_EQ(r.grads.size(), st.params.parameter_count());
}

TEST(BatchObjective, SingleStudentBatchSkipsStudentTerm) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config();
  TrainState st = init_state(data, cfg);
  auto views = epoch_views(data.graph, cfg, 0);
  const std::vector<ResponseRecord> batch = {{0, 0, 1}, {0, 1, 0}};
  BatchResult r = batch_objective(st.params, data.graph, &views->first, &views->second, data.concepts_of, batch,
                                  {cfg.weights(), cfg.contrastive(), false});
  EXPECT_EQ(r.loss.ssl_student, 0.0);
  EXPECT_NE(r.loss.ssl_exercise, 0.0);
}

TEST(BatchObjective, GradientMatchesFiniteDifferences) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config();
  TrainState st = init_state(data, cfg);
  auto views = epoch_views(data.graph, cfg, 0);
  const LossSettings s{cfg.weights(), cfg.contrastive(), false};
  ModelParams work = st.params;
  auto f = [&](std::span<const double> x, std::span<double> grad) {
    work.unflatten(std::vector<double>(x.begin(), x.end()));
    BatchResult r = batch_objective(work, data.graph, &views->first, &views->second, data.concepts_of,
                                    data.train.records, s);
    if (!grad.empty()) std::copy(r.grads.begin(), r.grads.end(), grad.begin());
    return r.loss.total;
  };
  GradCheckResult res = grad_check(f, st.params.flatten(), 1e-5);
  EXPECT_LT(res.max_rel_error, 1e-4) << "worst index " << res.worst_index;
}

TEST(Training, SameSeedIsBitIdentical) {
  TrainingData data = fixture_data();
  for (TrainMode mode : {TrainMode::scd, TrainMode::scd_random, TrainMode::supervised_only}) {
    TrainConfig cfg = small_config(mode);
    std::ostringstream a, b;
    FitResult ra = fit(init_state(data, cfg), data, cfg, &a);
    FitResult rb = fit(init_state(data, cfg), data, cfg, &b);
    EXPECT_EQ(a.str(), b.str()) << mode_name(mode);
    EXPECT_EQ(ra.state.params, rb.state.params);
  }
}

TEST(Training, DifferentSeedsDiffer) {
  TrainingData data = fixture_data();
  TrainConfig c1 = small_config(), c2 = small_config();
  c2.master_seed = 12;
  EXPECT_NE(fit(init_state(data, c1), data, c1, nullptr).state.params.flatten(),
            fit(init_state(data, c2), data, c2, nullptr).state.params.flatten());
}

TEST(Training, LossDecreasesOnSmallFixture) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config();
  cfg.epochs = 50;
  cfg.adam.learning_rate = 1e-2;
  FitResult r = fit(init_state(data, cfg), data, cfg, nullptr);
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_LT(r.history.back().main, r.history.front().main);
}

TEST(Training, ResumeFromCheckpointContinuesBitwise) {
  TrainingData data = fixture_data();
  TrainConfig cfg = small_config();
  cfg.epochs = 6;
  std::ostringstream full_log;
  FitResult full = fit(init_state(data, cfg), data, cfg, &full_log);

  TrainConfig half = cfg;
  half.epochs = 3;
  const auto path = std::filesystem::temp_directory_path() / "scd_resume_test.json";
  std::ostringstream log;
  fit(init_state(data, half), data, half, &log, path);
  Checkpoint ck = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(ck.state.epoch, 3u);
  ck.config.epochs = 6;
  FitResult resumed = fit(ck.state, ck.data, ck.config, &log);
  EXPECT_EQ(log.str(), full_log.str());
  EXPECT_EQ(resumed.state.params, full.state.params);
}

TEST(Training, EmptyTrainSetIsAnError) {
  auto f = scd::testing::small_fixture();
  ResponseSet empty = f.train;
  empty.records.clear();
  EXPECT_THROW(make_training_data(empty, empty, f.q), std::invalid_argument);
}

TEST(Training, LogFormat) {
  std::ostringstream out;
  write_log_header(out);
  const LossBreakdown b = total_loss(0.5, 0.25, 0.125, 2.0, {0.1, 1e-4}, 0.5);
  write_log_row(out, 1, b);
  const std::string s = out.str();
  const std::string prefix = "epoch,main,ssl_s,ssl_e,reg,total\n1,0.5,0.25,0.125,2,";
  ASSERT_EQ(s.substr(0, prefix.size()), prefix);
  // 17 significant digits round-trip exactly.
  EXPECT_EQ(std::stod(s.substr(prefix.size())), b.total);
}
