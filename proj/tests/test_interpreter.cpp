#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "polco/interpreter.hpp"
#include "polco/rng.hpp"

namespace polco {
namespace {

TEST(Tokenize, NormalizesCaseNumbersAndClauses) {
  EXPECT_EQ(tokenize("Do not step on Lava more than five times."),
            (std::vector<std::string>{"do", "not", "step", "on", "lava", "more", "than", "5", "times"}));
  EXPECT_EQ(tokenize("After touching grass, water becomes unsafe."),
            (std::vector<std::string>{"after", "c:touching", "c:grass", "water", "becomes", "unsafe"}));
  EXPECT_EQ(tokenize("  "), std::vector<std::string>{});
}

TEST(TokenVocab, UnknownTokensMapToZeroAndRoundTrip) {
  const TokenVocab v = TokenVocab::build({"avoid lava", "avoid water"});
  EXPECT_EQ(v.lookup("dragon"), TokenVocab::kUnk);
  EXPECT_NE(v.lookup("lava"), TokenVocab::kUnk);
  EXPECT_EQ(TokenVocab::from_tokens(v.tokens()), v);
  EXPECT_THROW(TokenVocab::from_tokens({"lava"}), std::invalid_argument);
}

std::vector<ConstraintRecord> small_pool(bool heldout) { return fixtures::full_pool(heldout); }

InterpreterDataConfig small_maps() {
  const std::vector<EntityKind> cost{EntityKind::lava, EntityKind::water, EntityKind::grass};
  return {{GenConfig{5, cost, 1}, GenConfig{6, cost, 2}, GenConfig{7, cost, 3}}, 40};
}

TEST(CollectData, TrajectoryYieldsOneExamplePerStep) {
  const std::vector<ConstraintRecord> pool{{Budgetary{EntityKind::lava, 2}, render_template(Budgetary{EntityKind::lava, 2}, 0)}};
  const std::vector<EntityKind> cost{EntityKind::lava};
  const auto data = collect_interpreter_data({{GenConfig{5, cost, 1}}, 10}, pool, 1, 4);
  // A 10-step trajectory can end early only by collecting all three rewards.
  EXPECT_LE(data.examples.size(), 10u);
  EXPECT_GE(data.examples.size(), 3u);
  for (const auto& e : data.examples) EXPECT_DOUBLE_EQ(e.target_threshold, 2.0);
  for (std::size_t i = 0; i < data.examples.size(); ++i) EXPECT_EQ(data.examples[i].timestep, i);
}

TEST(CollectData, SequentialTargetsAreZeroBeforeTrigger) {
  const ConstraintSpec spec = Sequential{EntityKind::grass, EntityKind::water, 0};
  const auto data = collect_interpreter_data(small_maps(), {{spec, render_template(spec, 0)}}, 200, 9);
  std::size_t checked = 0;
  for (const auto& e : data.examples) {
    if (e.visited[static_cast<std::size_t>(cost_index(EntityKind::grass))]) continue;
    ++checked;
    for (auto v : e.target_mask) ASSERT_EQ(v, 0);
  }
  EXPECT_GT(checked, 100u);
}

TEST(CollectData, DatasetFileRoundTrip) {
  const auto data = collect_interpreter_data(small_maps(), small_pool(false), 20, 3);
  std::stringstream ss;
  write_interpreter_dataset(ss, data);
  const auto back = read_interpreter_dataset(ss);
  ASSERT_EQ(back.examples.size(), data.examples.size());
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto& a = data.examples[i];
    const auto& b = back.examples[i];
    EXPECT_EQ(a.map_seed, b.map_seed);
    EXPECT_EQ(a.timestep, b.timestep);
    EXPECT_EQ(a.obs, b.obs);
    EXPECT_EQ(a.visited, b.visited);
    EXPECT_EQ(a.target_mask, b.target_mask);
    EXPECT_EQ(a.target_threshold, b.target_threshold);
    EXPECT_EQ(back.spec_of(b), data.spec_of(a));
    EXPECT_EQ(back.text_of(b).surface, data.text_of(a).surface);
    EXPECT_EQ(back.text_of(b).template_id, data.text_of(a).template_id);
  }
}

TEST(Predict, ZeroWeightsGiveHalfAndZero) {
  const auto pool = small_pool(false);
  const auto p = InterpreterParams::zeros(TokenVocab::build({pool[0].text.surface}));
  const auto data = collect_interpreter_data(small_maps(), pool, 3, 1);
  for (const auto& e : data.examples) {
    for (double v : predict_mask(p, data.text_of(e), e.obs, e.visited)) ASSERT_EQ(v, 0.5);
  }
  EXPECT_EQ(predict_threshold(p, pool[0].text), 0.0);
}

using fixtures::fd_relative_error;

TEST(InterpreterGradients, MatchCentralDifferences) {
  const auto pool = small_pool(false);
  const auto data = collect_interpreter_data(small_maps(), pool, 40, 17);
  InterpreterParams p = InterpreterParams::random(vocab_for(data), 5);
  Rng rng(99);
  for (int point = 0; point < 50; ++point) {
    // fresh random parameters around the initializer so every head is exercised
    for (auto& v : p.mask.values()) v += 0.05 * rng.normal();
    for (auto& v : p.threshold.values()) v += 0.05 * rng.normal();
    const std::size_t ex = rng.below(data.examples.size());
    const std::span<const std::size_t> one(&ex, 1);

    ParamVector g1 = p.mask.zeros_like();
    mask_loss(p, data, one, &g1);
    EXPECT_LE(fd_relative_error(p.mask, g1.values(), [&] { return mask_loss(p, data, one, nullptr); }, rng, 60), 1e-4);

    ParamVector g2 = p.threshold.zeros_like();
    threshold_loss(p, data, one, &g2);
    EXPECT_LE(fd_relative_error(p.threshold, g2.values(), [&] { return threshold_loss(p, data, one, nullptr); }, rng, 60),
              1e-4);
  }
}

TEST(InterpreterLosses, NonNegativeAndZeroOnlyAtPerfectFit) {
  EXPECT_GT(bce_from_logit(0.0, 1.0), 0.0);
  EXPECT_NEAR(bce_from_logit(40.0, 1.0), 0.0, 1e-15);
  EXPECT_NEAR(bce_from_logit(-40.0, 0.0), 0.0, 1e-15);
  for (double l : {-3.0, -0.5, 0.0, 2.0})
    for (double y : {0.0, 1.0}) EXPECT_GT(bce_from_logit(l, y), 0.0);

  const auto data = collect_interpreter_data(small_maps(), small_pool(false), 5, 2);
  auto p = InterpreterParams::random(vocab_for(data), 1);
  std::vector<std::size_t> all(data.examples.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_GT(mask_loss(p, data, all, nullptr), 0.0);
  EXPECT_GE(threshold_loss(p, data, all, nullptr), 0.0);
}

TEST(TrainInterpreter, ConstantThresholdConverges) {
  const ConstraintSpec spec = Budgetary{EntityKind::lava, 3};
  std::vector<ConstraintRecord> pool;
  for (int id : TemplateBank::standard().ids(ConstraintVariant::budget, false))
    pool.push_back({spec, render_template(spec, id)});
  const auto data = collect_interpreter_data(small_maps(), pool, 100, 8);
  InterpreterHyper hyper;
  hyper.epochs = 30;
  hyper.lr = 1e-2;
  const auto trained = train_interpreter(data, hyper);
  for (const auto& r : pool) EXPECT_NEAR(predict_threshold(trained.params, r.text), 3.0, 0.01);
}

TEST(TrainInterpreter, AllZeroMasksDriveLossDown) {
  const ConstraintSpec spec = Sequential{EntityKind::grass, EntityKind::water, 0};
  InterpreterDataset data;
  data.constraints = {{spec, render_template(spec, 0)}};
  InterpreterExample e;
  e.obs.cells.fill(EntityKind::empty);
  for (int i = 0; i < 256; ++i) data.examples.push_back(e);
  InterpreterHyper hyper;
  hyper.epochs = 6;
  hyper.lr = 1e-2;
  const auto trained = train_interpreter(data, hyper);
  const auto& losses = trained.mask_loss_per_epoch;
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]);
  EXPECT_LT(losses.back(), 0.05);
}

TEST(TrainInterpreter, Deterministic) {
  const auto data = collect_interpreter_data(small_maps(), small_pool(false), 30, 4);
  InterpreterHyper hyper;
  hyper.epochs = 2;
  hyper.seed = 12;
  EXPECT_EQ(train_interpreter(data, hyper).params, train_interpreter(data, hyper).params);
  hyper.seed = 13;
  EXPECT_NE(train_interpreter(data, hyper).params.mask, train_interpreter(data, {}).params.mask);
}

TEST(TrainInterpreter, RejectsEmptyDataset) {
  EXPECT_THROW(train_interpreter(InterpreterDataset{}, {}), std::invalid_argument);
}

TEST(OracleInterpreter, PerfectOnCollectedData) {
  const auto data = collect_interpreter_data(small_maps(), small_pool(true), 100, 6);
  const auto q = evaluate_interpreter(OracleInterpreter{}, data);
  EXPECT_EQ(q.cell_accuracy, 1.0);
  EXPECT_EQ(q.threshold_mse, 0.0);
  EXPECT_EQ(oracle_interpreter(Budgetary{EntityKind::lava, 5})->threshold(), 5.0);
}

TEST(OracleInterpreter, SequentialMaskFlipsAfterTrigger) {
  Observation obs;
  obs.cells.fill(EntityKind::empty);
  obs.cells[window_index(1, 1)] = EntityKind::water;
  const auto h = oracle_interpreter(Sequential{EntityKind::grass, EntityKind::water, 0});
  VisitedIndicator none{};
  VisitedIndicator grass{};
  grass[static_cast<std::size_t>(cost_index(EntityKind::grass))] = 1;
  EXPECT_EQ(h->mask_probabilities(obs, none)[window_index(1, 1)], 0.0);
  EXPECT_EQ(h->mask_probabilities(obs, grass)[window_index(1, 1)], 1.0);
}

TEST(Checkpoint, InterpreterRoundTripIsExact) {
  const auto data = collect_interpreter_data(small_maps(), small_pool(false), 5, 2);
  const auto p = InterpreterParams::random(vocab_for(data), 77);
  const auto back = interpreter_from_checkpoint(Checkpoint::deserialize(to_checkpoint(p).serialize()));
  EXPECT_EQ(back, p);
  Checkpoint wrong = to_checkpoint(p);
  wrong.kind = "agent";
  EXPECT_THROW(interpreter_from_checkpoint(wrong), CheckpointError);
  EXPECT_THROW(Checkpoint::deserialize("polco-checkpoint 9\n"), CheckpointError);
  EXPECT_THROW(Checkpoint::deserialize("garbage"), CheckpointError);
}

// A short Stage-1 run on train templates, checked on held-out templates.
class TrainedInterpreter : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const std::vector<EntityKind> cost{EntityKind::lava, EntityKind::water, EntityKind::grass};
    const InterpreterDataConfig maps{{GenConfig{5, cost, 1}, GenConfig{6, cost, 2}, GenConfig{7, cost, 4}}, 60};
    const auto data = collect_interpreter_data(maps, small_pool(false), 3000, 21);
    params_ = new InterpreterParams(train_interpreter(data, InterpreterHyper{}).params);
  }
  static void TearDownTestSuite() { delete params_; }
  static InterpreterParams* params_;
};
InterpreterParams* TrainedInterpreter::params_ = nullptr;

TEST_F(TrainedInterpreter, LocatesSingleLavaCell) {
  Observation obs;
  obs.cells.fill(EntityKind::empty);
  obs.cells[window_index(2, 4)] = EntityKind::lava;
  const ConstraintSpec spec = Budgetary{EntityKind::lava, 5};
  for (int id : TemplateBank::standard().ids(ConstraintVariant::budget, true)) {
    const RealMask m = predict_mask(*params_, render_template(spec, id), obs, VisitedIndicator{});
    for (int c = 0; c < kWindowCells; ++c) {
      if (c == window_index(2, 4)) EXPECT_GT(m[static_cast<std::size_t>(c)], 0.9);
      else EXPECT_LT(m[static_cast<std::size_t>(c)], 0.1);
    }
  }
}

TEST_F(TrainedInterpreter, ThresholdsOnHeldOutText) {
  for (int id : TemplateBank::standard().ids(ConstraintVariant::budget, true))
    EXPECT_NEAR(predict_threshold(*params_, render_template(Budgetary{EntityKind::lava, 5}, id)), 5.0, 0.5);
  for (int id : TemplateBank::standard().ids(ConstraintVariant::relation, true))
    EXPECT_NEAR(predict_threshold(*params_, render_template(Relational{EntityKind::water, 2, 0}, id)), 0.0, 0.5);
}

TEST_F(TrainedInterpreter, SequentialPredictionDependsOnIndicator) {
  Observation obs;
  obs.cells.fill(EntityKind::empty);
  obs.cells[window_index(3, 4)] = EntityKind::water;
  const auto text = render_template(Sequential{EntityKind::grass, EntityKind::water, 0}, 0);
  VisitedIndicator grass{};
  grass[static_cast<std::size_t>(cost_index(EntityKind::grass))] = 1;
  const double before = predict_mask(*params_, text, obs, VisitedIndicator{})[window_index(3, 4)];
  const double after = predict_mask(*params_, text, obs, grass)[window_index(3, 4)];
  EXPECT_GT(after - before, 0.01);

  // On rollouts with held-out text, forbidden cells flip once the trigger is visited.
  std::vector<ConstraintRecord> seq;
  for (const auto& r : small_pool(true))
    if (std::holds_alternative<Sequential>(r.spec)) seq.push_back(r);
  const auto data = collect_interpreter_data(small_maps(), seq, 300, 31);
  double pre = 0.0, post = 0.0;
  int n_pre = 0, n_post = 0;
  for (const auto& e : data.examples) {
    const auto& q = std::get<Sequential>(data.spec_of(e));
    const bool fired = e.visited[static_cast<std::size_t>(cost_index(q.trigger))];
    const RealMask m = predict_mask(*params_, data.text_of(e), e.obs, e.visited);
    for (int c = 0; c < kWindowCells; ++c) {
      if (e.obs.cells[static_cast<std::size_t>(c)] != q.forbidden) continue;
      (fired ? post : pre) += m[static_cast<std::size_t>(c)];
      ++(fired ? n_post : n_pre);
    }
  }
  ASSERT_GT(n_pre, 0);
  ASSERT_GT(n_post, 0);
  EXPECT_LT(pre / n_pre, 0.5);
  EXPECT_GT(post / n_post, 0.5);
}

}  // namespace
}  // namespace polco
