#include <gtest/gtest.h>

#include "oracles.hpp"
#include "polco/rng.hpp"
#include "polco/safeopt.hpp"

namespace polco {
namespace {

using oracle::Mat;
using oracle::Vec;

LinearOperator dense(const Mat& A) {
  return [A](const Vector& v) -> Vector { return A * v; };
}

TEST(Gae, SingleStepIsReward) {
  for (double gamma : {0.0, 0.5, 0.99})
    for (double lambda : {0.0, 0.9, 1.0}) EXPECT_EQ(gae({1.0}, {0.0}, gamma, lambda)[0], 1.0);
}

TEST(Gae, LambdaOneZeroValuesIsDiscountedReturn) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> r(1 + rng.below(40));
    for (double& x : r) x = rng.normal();
    const double gamma = rng.uniform(0.5, 1.0);
    EXPECT_EQ(gae(r, std::vector<double>(r.size(), 0.0), gamma, 1.0), discounted_returns(r, gamma));
  }
}

TEST(Gae, MatchesDoubleSummation) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<double> r(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = rng.normal();
      v[i] = rng.normal();
    }
    const double gamma = rng.uniform(0.8, 1.0), lambda = rng.uniform(0.0, 1.0);
    const auto a = gae(r, v, gamma, lambda);
    const auto b = oracle::gae_double_sum(r, v, gamma, lambda);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
  EXPECT_THROW(gae({1.0, 2.0}, {0.0}, 0.9, 0.9), std::invalid_argument);
}

TEST(ConjugateGradient, Examples) {
  const Vec rhs = (Vec(3) << 1, -2, 3).finished();
  EXPECT_EQ(conjugate_gradient(dense(Mat::Identity(3, 3)), rhs, {1, 1e-12}), rhs);
  EXPECT_EQ(conjugate_gradient(dense(Mat::Identity(3, 3)), Vec::Zero(3)), Vec::Zero(3));
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Mat A = oracle::random_spd(8, rng);
    const Vec b = oracle::random_vec(8, rng);
    EXPECT_LE(oracle::max_abs_diff(conjugate_gradient(dense(A), b), A.ldlt().solve(b)), 1e-8);
  }
}

TEST(TrpoStep, Examples) {
  EXPECT_LE(oracle::max_abs_diff(trpo_step((Vec(2) << 1, 0).finished(), dense(Mat::Identity(2, 2)), 0.5),
                                 (Vec(2) << 1, 0).finished()),
            1e-15);
  EXPECT_EQ(trpo_step(Vec::Zero(4), dense(Mat::Identity(4, 4)), 0.1), Vec::Zero(4));
  EXPECT_THROW(trpo_step(Vec::Ones(2), dense(Mat::Identity(2, 2)), 0.0), std::invalid_argument);
  EXPECT_THROW(trpo_step(Vec::Ones(2), dense(-Mat::Identity(2, 2)), 0.1), OptimizationError);
}

TEST(TrpoStep, FillsTrustRegionAndMatchesWhitenedOracle) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const Mat F = oracle::random_spd(n, rng);
    const Vec g = oracle::random_vec(n, rng);
    const double delta = std::exp(rng.uniform(-8.0, 0.0));
    const Vec step = trpo_step(g, dense(F), delta);
    EXPECT_NEAR(0.5 * step.dot(F * step), delta, 1e-8 * std::max(1.0, delta));
    EXPECT_LE(oracle::max_abs_diff(step, oracle::trust_region(g, F, delta)), 1e-6);
  }
}

TEST(Project, Examples) {
  const Vec d = (Vec(2) << 1, 0).finished();
  const LinearizedConstraint c{(Vec(2) << 0, 1).finished(), 0.5};
  const Vec out = project(d, c, c.a);
  EXPECT_LE(oracle::max_abs_diff(out, (Vec(2) << 1, -0.5).finished()), 1e-15);
  EXPECT_LE(oracle::max_abs_diff(out, oracle::qp_halfspace(d, Mat::Identity(2, 2), c.a, c.b)), 1e-12);

  const LinearizedConstraint inactive{(Vec(2) << 0, 1).finished(), -1.0};
  EXPECT_EQ(project(d, inactive, inactive.a), d);

  const Mat F = 2.0 * Mat::Identity(2, 2);
  const Vec kl = project(d, c, ProjectionMetric::kl, dense(F), {});
  EXPECT_LE(oracle::max_abs_diff(kl, (Vec(2) << 1, -0.5).finished()), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(kl, oracle::qp_halfspace(d, F, c.a, c.b)), 1e-12);

  EXPECT_THROW(project(d, LinearizedConstraint{Vec::Zero(2), 1.0}, Vec::Zero(2)), InfeasibleProjection);
}

TEST(Project, KktOptimalityAndIdempotence) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const Mat F = oracle::random_spd(n, rng);
    const Vec d = oracle::random_vec(n, rng);
    const LinearizedConstraint c{oracle::random_vec(n, rng), rng.uniform(-1.0, 3.0)};
    for (auto metric : {ProjectionMetric::l2, ProjectionMetric::kl}) {
      const Mat L = metric == ProjectionMetric::kl ? F : Mat::Identity(n, n);
      const Vec out = project(d, c, metric, dense(F), {});
      if (c.a.dot(d) + c.b > 0.0) {
        EXPECT_NEAR(c.a.dot(out) + c.b, 0.0, 1e-8);
        const Vec moved = d - out;
        const Vec dir = L.ldlt().solve(c.a);
        const double cosine = moved.dot(dir) / (moved.norm() * dir.norm());
        EXPECT_NEAR(std::acos(std::min(1.0, cosine)), 0.0, 1e-6);
      } else {
        EXPECT_EQ(out, d);
      }
      const Vec linv_a = metric == ProjectionMetric::kl ? Vec(L.ldlt().solve(c.a)) : c.a;
      const Vec once = project(d, c, linv_a);
      EXPECT_LE(oracle::max_abs_diff(project(once, c, linv_a), once), 1e-12);
    }
  }
}

TEST(Project, MatchesConstrainedQpOracle) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const Mat F = oracle::random_spd(n, rng);
    const Vec g = oracle::random_vec(n, rng);
    const double delta = rng.uniform(0.01, 1.0);
    const LinearizedConstraint c{oracle::random_vec(n, rng), rng.uniform(-0.5, 2.0)};
    const Vec reward = trpo_step(g, dense(F), delta);
    const Vec reward_oracle = oracle::trust_region(g, F, delta);
    for (auto metric : {ProjectionMetric::l2, ProjectionMetric::kl}) {
      const Mat L = metric == ProjectionMetric::kl ? F : Mat::Identity(n, n);
      const Vec ours = project(reward, c, metric, dense(F), {});
      EXPECT_LE(oracle::max_abs_diff(ours, oracle::qp_halfspace(reward_oracle, L, c.a, c.b)), 1e-6);
    }
  }
}

TEST(SpaceStep, SequentialMatchesTwoStageQpOracle) {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const Mat F = oracle::random_spd(n, rng);
    const Vec reward = trpo_step(oracle::random_vec(n, rng), dense(F), 0.1);
    const LinearizedConstraint div{oracle::random_vec(n, rng), rng.uniform(-0.5, 1.0)};
    const LinearizedConstraint cost{oracle::random_vec(n, rng), rng.uniform(-0.5, 1.0)};
    const Vec la = F.ldlt().solve(div.a), lc = F.ldlt().solve(cost.a);
    const Vec seq = space_step(reward, div, la, cost, lc, SpaceOrdering::sequential);
    const Vec seq_oracle = oracle::qp_halfspace(oracle::qp_halfspace(reward, F, div.a, div.b), F, cost.a, cost.b);
    EXPECT_LE(oracle::max_abs_diff(seq, seq_oracle), 1e-6);

    const Vec comb = space_step(reward, div, la, cost, lc, SpaceOrdering::combined);
    const Vec comb_oracle = oracle::qp_halfspace(reward, F, div.a, div.b) +
                            oracle::qp_halfspace(reward, F, cost.a, cost.b) - reward;
    EXPECT_LE(oracle::max_abs_diff(comb, comb_oracle), 1e-6);
  }
}

TEST(SpaceStep, InactiveConstraintsLeaveRewardStep) {
  const Vec reward = (Vec(3) << 0.1, -0.2, 0.3).finished();
  const LinearizedConstraint off{Vec::Ones(3), -10.0};
  for (auto ord : {SpaceOrdering::combined, SpaceOrdering::sequential})
    EXPECT_EQ(space_step(reward, off, off.a, off, off.a, ord), reward);
}

TEST(UpdateHD, ExamplesAndMonotonicity) {
  EXPECT_EQ(update_h_D(2.0, 2.0, 3.0, true), 3.0);
  EXPECT_EQ(update_h_D(3.0, 2.0, 5.0, true), 15.0);
  EXPECT_EQ(update_h_D(9.0, 2.0, 5.0, false), 5.0);
  EXPECT_THROW(update_h_D(1.0, 0.0, 0.0, true), std::invalid_argument);
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const double h = rng.uniform(0.001, 10.0);
    EXPECT_GE(update_h_D(rng.uniform(0, 10), rng.uniform(0, 5), h, rng.below(2) == 1), h);
  }
}

TEST(RegressionMonitor, ComparesSmoothedWindows) {
  RegressionMonitor m(3);
  for (int i = 0; i < 5; ++i) EXPECT_FALSE(m.observe(1.0, 1.0));
  EXPECT_FALSE(m.observe(1.0, 1.0));
  EXPECT_TRUE(m.observe(1.0, 5.0));   // cost went up
  RegressionMonitor r(1);
  EXPECT_FALSE(r.observe(2.0, 0.0));
  EXPECT_TRUE(r.observe(1.0, 0.0));   // reward went down
  EXPECT_FALSE(r.observe(3.0, 0.0));
}

// ---------------------------------------------------------------------------
// Batch-level tests on a small softmax-linear policy.
// ---------------------------------------------------------------------------

constexpr int kDim = 6;

SparseFeatures random_features(Rng& rng) {
  SparseFeatures f;
  f.dim = kDim;
  for (int i = 0; i < kDim; ++i)
    if (rng.below(2) || i == kDim - 1) f.add(i, rng.normal());
  return f;
}

RolloutBatch random_batch(const SoftmaxPolicy& pi, const ParamVector& theta, Rng& rng, int episodes, double threshold,
                          bool zero_reward = false, bool zero_cost = false) {
  RolloutBatch b;
  for (int e = 0; e < episodes; ++e) {
    Trajectory t;
    t.threshold = threshold;
    const int len = 1 + static_cast<int>(rng.below(8));
    for (int s = 0; s < len; ++s) {
      RolloutStep st;
      st.features = random_features(rng);
      const auto p = pi.probabilities(theta, st.features);
      st.action = sample_action(p, rng.uniform());
      st.log_prob = std::log(p[st.action]);
      st.reward = zero_reward ? 0.0 : rng.normal();
      st.cost = zero_cost ? 0.0 : static_cast<double>(rng.below(2));
      t.steps.push_back(std::move(st));
      t.oracle.push(0.0);
    }
    b.trajectories.push_back(std::move(t));
  }
  return b;
}

struct Fixture {
  SoftmaxPolicy pi{PolicyArch{kDim, 3, 0}};
  ParamVector theta;
  LinearValue vr{kDim}, vc{kDim};
  TrustRegionConfig cfg;

  explicit Fixture(Rng& rng) : theta(pi.make_params()) {
    for (auto& v : theta.values()) v = 0.3 * rng.normal();
    cfg.kl_safeguard = false;
  }
};

TEST(Surrogate, ZeroAdvantagesGiveZeroGradients) {
  Rng rng(9);
  Fixture fx(rng);
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 10, 0.0, true, true);
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  const auto g = surrogate_grads(pb);
  EXPECT_EQ(g.g.squaredNorm(), 0.0);
  EXPECT_EQ(g.cost.a.squaredNorm(), 0.0);
}

TEST(Surrogate, SlackIsZeroAtTheBoundary) {
  Rng rng(10);
  Fixture fx(rng);
  RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 10, 0.0);
  for (auto& t : b.trajectories) t.threshold = t.total_cost();
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  EXPECT_NEAR(surrogate_grads(pb).cost.b, 0.0, 1e-15);
}

// One-step episodes from two equally likely states, V = 0, no normalization:
// E[g] = 1/2 sum_s sum_a pi(a|s) r(s,a) grad log pi(a|s).
TEST(Surrogate, BanditGradientMatchesClosedForm) {
  Rng rng(11);
  SoftmaxPolicy pi({2, 2, 0});
  ParamVector theta = pi.make_params();
  theta.values() << 0.3, -0.2, -0.1, 0.4;
  const double r[2][2] = {{1.0, 0.0}, {0.0, 2.0}};
  auto state = [](int s) {
    SparseFeatures f;
    f.dim = 2;
    f.add(s, 1.0);
    return f;
  };
  Vec expected = Vec::Zero(4);
  for (int s = 0; s < 2; ++s) {
    const auto p = pi.probabilities(theta, state(s));
    for (int a = 0; a < 2; ++a) expected += 0.5 * p[a] * r[s][a] * pi.log_prob_grad(theta, state(s), a);
  }
  const int n = 20000;
  RolloutBatch b;
  std::vector<Vec> samples;
  for (int i = 0; i < n; ++i) {
    Trajectory t;
    RolloutStep st;
    const int s = static_cast<int>(rng.below(2));
    st.features = state(s);
    st.action = sample_action(pi.probabilities(theta, st.features), rng.uniform());
    st.reward = r[s][st.action];
    samples.push_back(st.reward * pi.log_prob_grad(theta, st.features, st.action));
    t.steps.push_back(st);
    b.trajectories.push_back(std::move(t));
  }
  TrustRegionConfig cfg;
  cfg.normalize_reward_advantages = false;
  LinearValue v0(2);
  const auto pb = prepare_batch(pi, theta, b, v0, v0, cfg);
  const Vec g = surrogate_grads(pb).g;
  Vec var = Vec::Zero(4);
  for (const auto& x : samples) var += (x - expected).cwiseAbs2();
  const Vec se = (var / n).cwiseSqrt() / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < 4; ++i) EXPECT_LE(std::abs(g[i] - expected[i]), 3.0 * se[i] + 1e-12) << i;
}

TEST(Fisher, ZeroVectorAndUniformSingleSampleDense) {
  SoftmaxPolicy pi({kDim, 4, 0});
  const ParamVector theta = pi.make_params();
  Rng rng(12);
  RolloutBatch b;
  Trajectory t;
  RolloutStep st;
  st.features = random_features(rng);
  t.steps.push_back(st);
  b.trajectories.push_back(t);
  TrustRegionConfig cfg;
  LinearValue v0(kDim);
  const auto pb = prepare_batch(pi, theta, b, v0, v0, cfg);
  const auto F = fisher_operator(pb, 0.0);
  EXPECT_EQ(F(Vec::Zero(theta.size())), Vec::Zero(theta.size()));

  const Vec f = st.features.dense();
  const Vec p = Vec::Constant(4, 0.25);
  const Mat A = Mat(p.asDiagonal()) - p * p.transpose();
  Mat expected(4 * kDim, 4 * kDim);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) expected.block(i * kDim, j * kDim, kDim, kDim) = A(i, j) * f * f.transpose();
  Mat ours(4 * kDim, 4 * kDim);
  for (int j = 0; j < 4 * kDim; ++j) ours.col(j) = F(Vec::Unit(4 * kDim, j));
  EXPECT_LE((ours - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Fisher, SymmetricAndMatchesDenseJacobianForm) {
  Rng rng(13);
  SoftmaxPolicy pi({kDim, 3, 4});
  ParamVector theta = pi.make_params();
  for (auto& v : theta.values()) v = 0.4 * rng.normal();
  const RolloutBatch b = random_batch(pi, theta, rng, 6, 0.0);
  TrustRegionConfig cfg;
  LinearValue v0(kDim);
  const auto pb = prepare_batch(pi, theta, b, v0, v0, cfg);
  const auto F = fisher_operator(pb, 0.0);
  const auto n = theta.size();

  // Dense oracle: mean_i J_i^T (diag p - p p^T) J_i with J_i from finite differences of the logits.
  Mat dense_F = Mat::Zero(n, n);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    const auto& f = pb.steps[i]->features;
    Mat J(3, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      ParamVector up = theta, down = theta;
      up.values()[k] += 1e-6;
      down.values()[k] -= 1e-6;
      J.col(k) = (pi.forward(up, f).logits - pi.forward(down, f).logits) / 2e-6;
    }
    const Vec p = pb.forwards[i].probs;
    dense_F += J.transpose() * (Mat(p.asDiagonal()) - p * p.transpose()) * J;
  }
  dense_F /= static_cast<double>(pb.size());
  for (int t = 0; t < 10; ++t) {
    const Vec v = oracle::random_vec(static_cast<int>(n), rng), w = oracle::random_vec(static_cast<int>(n), rng);
    EXPECT_NEAR(v.dot(F(w)), w.dot(F(v)), 1e-10);
    EXPECT_LE(oracle::max_abs_diff(F(v), dense_F * v), 1e-6 * std::max(1.0, (dense_F * v).norm()));
  }
  EXPECT_EQ(mean_kl(pb, theta), 0.0);
}

TEST(Updates, RewardStepFillsTheQuadraticKlBudget) {
  Rng rng(14);
  Fixture fx(rng);
  for (int t = 0; t < 20; ++t) {
    const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 12, 1.0);
    const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
    const auto F = fisher_operator(pb, fx.cfg.damping);
    const Vec step = trpo_step(surrogate_grads(pb).g, F, fx.cfg.delta, detail::cg_of(fx.cfg));
    const double q = 0.5 * step.dot(F(step));
    EXPECT_GE(q, fx.cfg.delta * (1 - 1e-4));
    EXPECT_LE(q, fx.cfg.delta * (1 + 1e-4));
  }
}

TEST(Updates, InactiveCostConstraintReducesToTrpo) {
  Rng rng(15);
  Fixture fx(rng);
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 12, 1e6);
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  const auto t = trpo_update(pb, fx.cfg);
  const auto p = pcpo_update(pb, fx.cfg);
  EXPECT_EQ(t.theta, p.theta);
  EXPECT_FALSE(p.info.projection_active);
  // baseline equal to the current policy and a loose divergence budget
  const auto s = space_update(pb, fx.theta, 1e3, fx.cfg);
  EXPECT_EQ(s.theta, p.theta);
}

TEST(Updates, ZeroRewardGradientRestoresFeasibility) {
  Rng rng(16);
  Fixture fx(rng);
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 12, 0.0, true);
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  const auto grads = surrogate_grads(pb);
  ASSERT_EQ(grads.g.squaredNorm(), 0.0);
  ASSERT_GT(grads.cost.b, 0.0);
  const auto F = fisher_operator(pb, fx.cfg.damping);
  const Vec la = conjugate_gradient(F, grads.cost.a, detail::cg_of(fx.cfg));
  const Vec expected = -(grads.cost.b / grads.cost.a.dot(la)) * la;
  const auto out = pcpo_update(pb, fx.cfg);
  EXPECT_TRUE(out.info.projection_active);
  EXPECT_LE(oracle::max_abs_diff(out.theta.values() - fx.theta.values(), expected), 1e-12);
}

TEST(Updates, PenaltyZeroOrCostFreeBatchIsTrpo) {
  Rng rng(17);
  Fixture fx(rng);
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 12, 0.0);
  const auto plain = trpo_update(prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg), fx.cfg);
  const auto zero = trpo_update(prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg, 0.0), fx.cfg);
  EXPECT_EQ(plain.theta, zero.theta);
  const RolloutBatch free = random_batch(fx.pi, fx.theta, rng, 12, 0.0, false, true);
  EXPECT_EQ(trpo_update(prepare_batch(fx.pi, fx.theta, free, fx.vr, fx.vc, fx.cfg), fx.cfg).theta,
            trpo_update(prepare_batch(fx.pi, fx.theta, free, fx.vr, fx.vc, fx.cfg, 7.0), fx.cfg).theta);
}

TEST(Updates, KlSafeguardHalvesLargeSteps) {
  Rng rng(18);
  Fixture fx(rng);
  fx.cfg.kl_safeguard = true;
  fx.cfg.delta = 0.5;
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 12, 0.0);
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  const auto out = trpo_update(pb, fx.cfg);
  EXPECT_TRUE(out.info.kl <= 2 * fx.cfg.delta || out.info.halvings == fx.cfg.max_halvings);
}

TEST(Instrumentation, CountsOracleReadsOnlyInsideOptimizer) {
  instrumentation::reset();
  OracleCosts c;
  c.push(1.0);
  EXPECT_EQ(c.total(), 1.0);
  EXPECT_EQ(instrumentation::oracle_reads(), 0);
  {
    OptimizerScope scope;
    (void)c.read();
  }
  EXPECT_EQ(instrumentation::oracle_reads(), 1);
  instrumentation::reset();
  Rng rng(19);
  Fixture fx(rng);
  const RolloutBatch b = random_batch(fx.pi, fx.theta, rng, 8, 1.0);
  const auto pb = prepare_batch(fx.pi, fx.theta, b, fx.vr, fx.vc, fx.cfg);
  (void)pcpo_update(pb, fx.cfg);
  (void)space_update(pb, fx.theta, 0.01, fx.cfg);
  EXPECT_EQ(instrumentation::oracle_reads(), 0);
}

}  // namespace
}  // namespace polco
