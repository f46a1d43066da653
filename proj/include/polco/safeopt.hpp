#ifndef POLCO_SAFEOPT_HPP_
#define POLCO_SAFEOPT_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polco/param_vector.hpp"
#include "polco/policy.hpp"

namespace polco {

class OptimizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Oracle-cost instrumentation
// ---------------------------------------------------------------------------

namespace instrumentation {

inline thread_local int optimizer_depth = 0;
inline std::atomic<long> oracle_reads_in_optimizer{0};

inline long oracle_reads() { return oracle_reads_in_optimizer.load(); }
inline void reset() { oracle_reads_in_optimizer.store(0); }

}  // namespace instrumentation

/// Marks the dynamic extent of optimizer code. Oracle cost reads inside it are counted.
class OptimizerScope {
 public:
  OptimizerScope() { ++instrumentation::optimizer_depth; }
  ~OptimizerScope() { --instrumentation::optimizer_depth; }
  OptimizerScope(const OptimizerScope&) = delete;
  OptimizerScope& operator=(const OptimizerScope&) = delete;
};

/// Environment cost per step, kept apart from the cost the optimizer sees.
class OracleCosts {
 public:
  void push(double c) { values_.push_back(c); }

  const std::vector<double>& read() const {
    if (instrumentation::optimizer_depth > 0) ++instrumentation::oracle_reads_in_optimizer;
    return values_;
  }

  double total() const {
    const auto& v = read();
    return std::accumulate(v.begin(), v.end(), 0.0);
  }

 private:
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutStep {
  SparseFeatures features;
  int action = 0;
  double log_prob = 0.0;
  double reward = 0.0;
  double cost = 0.0;  // the cost signal the optimizer trains on
};

struct Trajectory {
  std::vector<RolloutStep> steps;
  double threshold = 0.0;  // h used in the cost slack for this episode
  OracleCosts oracle;
  bool success = false;

  double total_reward() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.reward;
    return s;
  }
  double total_cost() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.cost;
    return s;
  }
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;

  std::size_t steps() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class ProjectionMetric { kl, l2 };

/// How the three-step update combines its two projections.
enum class SpaceOrdering {
  combined,    // both corrections computed from the reward step, then summed
  sequential,  // cost projection applied to the output of the divergence projection
};

struct TrustRegionConfig {
  double delta = 1e-3;
  double gamma = 0.99;
  double gamma_cost = 1.0;
  double lambda_reward = 0.95;
  double lambda_cost = 0.9;
  int cg_iters = 20;
  double cg_tol = 1e-10;
  double damping = 1e-4;
  ProjectionMetric projection = ProjectionMetric::kl;
  bool kl_safeguard = true;
  int max_halvings = 12;
  bool normalize_reward_advantages = true;
  int value_iters = 50;
  double value_ridge = 1e-6;
  SpaceOrdering space_ordering = SpaceOrdering::combined;
};

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

/// GAE over one episode that terminates after its last step.
inline std::vector<double> gae(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                               double lambda) {
  if (rewards.size() != values.size()) throw std::invalid_argument("rewards/values length mismatch");
  std::vector<double> adv(rewards.size());
  double running = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    const double next_v = i + 1 < values.size() ? values[i + 1] : 0.0;
    const double td = rewards[i] + gamma * next_v - values[i];
    running = td + gamma * lambda * running;
    adv[i] = running;
  }
  return adv;
}

inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double running = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    running = rewards[i] + gamma * running;
    out[i] = running;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

using LinearOperator = std::function<Vector(const Vector&)>;

struct CgConfig {
  int iters = 20;
  double tol = 1e-10;
};

/// Conjugate gradient from x0 = 0; stops at ||r|| <= tol * ||rhs|| or the iteration cap.
inline Vector conjugate_gradient(const LinearOperator& apply_A, const Vector& rhs, CgConfig cfg = {}) {
  Vector x = Vector::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return x;
  Vector r = rhs;
  Vector p = r;
  double rr = r.squaredNorm();
  for (int it = 0; it < cfg.iters; ++it) {
    if (std::sqrt(rr) <= cfg.tol * rhs_norm) break;
    const Vector Ap = apply_A(p);
    const double pAp = p.dot(Ap);
    if (!std::isfinite(pAp) || pAp <= 0.0) {
      if (!std::isfinite(pAp)) throw OptimizationError("conjugate gradient: non-finite curvature");
      break;
    }
    const double alpha = rr / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  if (!x.allFinite()) throw OptimizationError("conjugate gradient: non-finite iterate");
  return x;
}

/// Reward step sqrt(2 delta / g^T F^-1 g) F^-1 g.
inline Vector trpo_step(const Vector& g, const LinearOperator& fisher, double delta, CgConfig cg = {}) {
  if (delta <= 0.0) throw std::invalid_argument("trust region radius must be positive");
  if (g.squaredNorm() == 0.0) return Vector::Zero(g.size());
  const Vector x = conjugate_gradient(fisher, g, cg);
  const double gx = g.dot(x);
  if (!(gx > 0.0)) {
    std::ostringstream msg;
    msg << "trust-region step: g^T F^-1 g = " << gx << " (|g| = " << g.norm() << ")";
    throw OptimizationError(msg.str());
  }
  return std::sqrt(2.0 * delta / gx) * x;
}

/// Half-space a^T d + b <= 0 in step coordinates.
struct LinearizedConstraint {
  Vector a;
  double b = 0.0;
};

class InfeasibleProjection : public OptimizationError {
 public:
  using OptimizationError::OptimizationError;
};

/// Projection of `delta` onto the half-space in the metric L, given L^-1 a.
inline Vector project(const Vector& delta, const LinearizedConstraint& c, const Vector& linv_a) {
  const double violation = c.a.dot(delta) + c.b;
  if (violation <= 0.0) return delta;
  const double curvature = c.a.dot(linv_a);
  if (!(curvature > 0.0)) throw InfeasibleProjection("projection: violated constraint with zero gradient");
  return delta - (violation / curvature) * linv_a;
}

inline Vector metric_inverse(const Vector& v, ProjectionMetric metric, const LinearOperator& fisher, CgConfig cg) {
  return metric == ProjectionMetric::l2 ? v : conjugate_gradient(fisher, v, cg);
}

inline Vector project(const Vector& delta, const LinearizedConstraint& c, ProjectionMetric metric,
                      const LinearOperator& fisher, CgConfig cg = {}) {
  if (c.a.dot(delta) + c.b <= 0.0) return delta;
  return project(delta, c, metric_inverse(c.a, metric, fisher, cg));
}

/// Three-step step: reward step, then the divergence and cost corrections.
inline Vector space_step(const Vector& reward_step, const LinearizedConstraint& divergence, const Vector& linv_a,
                         const LinearizedConstraint& cost, const Vector& linv_c, SpaceOrdering ordering) {
  if (ordering == SpaceOrdering::sequential) return project(project(reward_step, divergence, linv_a), cost, linv_c);
  const Vector after_div = project(reward_step, divergence, linv_a);
  const Vector after_cost = project(reward_step, cost, linv_c);
  return reward_step + (after_div - reward_step) + (after_cost - reward_step);
}

// ---------------------------------------------------------------------------
// Batch preparation: advantages, surrogate gradients, Fisher products
// ---------------------------------------------------------------------------

/// On-policy batch with forward passes, advantages and episode statistics.
struct PreparedBatch {
  const SoftmaxPolicy* policy = nullptr;
  const ParamVector* theta = nullptr;
  std::vector<const RolloutStep*> steps;
  std::vector<SoftmaxPolicy::Forward> forwards;
  std::vector<double> adv_reward;
  std::vector<double> adv_cost;
  std::vector<double> ret_reward;
  std::vector<double> ret_cost;
  double J_R = 0.0;
  double J_C = 0.0;
  double slack = 0.0;  // mean over episodes of (episode cost - threshold)
  std::size_t episodes = 0;

  std::size_t size() const { return steps.size(); }
};

/// `penalty` turns the reward stream into r - penalty * c.
inline PreparedBatch prepare_batch(const SoftmaxPolicy& policy, const ParamVector& theta, const RolloutBatch& batch,
                                   const LinearValue& value_reward, const LinearValue& value_cost,
                                   const TrustRegionConfig& cfg, double penalty = 0.0) {
  OptimizerScope scope;
  if (batch.trajectories.empty() || batch.steps() == 0) throw OptimizationError("empty rollout batch");
  PreparedBatch pb;
  pb.policy = &policy;
  pb.theta = &theta;
  pb.episodes = batch.trajectories.size();
  const std::size_t n = batch.steps();
  pb.steps.reserve(n);
  pb.forwards.reserve(n);
  pb.adv_reward.reserve(n);
  pb.adv_cost.reserve(n);
  pb.ret_reward.reserve(n);
  pb.ret_cost.reserve(n);

  for (const auto& traj : batch.trajectories) {
    std::vector<double> r, c, vr, vc;
    double ep_r = 0.0, ep_c = 0.0;
    for (const auto& st : traj.steps) {
      pb.steps.push_back(&st);
      pb.forwards.push_back(policy.forward(theta, st.features));
      r.push_back(st.reward - penalty * st.cost);
      c.push_back(st.cost);
      vr.push_back(value_reward(st.features));
      vc.push_back(value_cost(st.features));
      ep_r += st.reward;
      ep_c += st.cost;
    }
    const auto ar = gae(r, vr, cfg.gamma, cfg.lambda_reward);
    const auto ac = gae(c, vc, cfg.gamma_cost, cfg.lambda_cost);
    const auto rr = discounted_returns(r, cfg.gamma);
    const auto rc = discounted_returns(c, cfg.gamma_cost);
    pb.adv_reward.insert(pb.adv_reward.end(), ar.begin(), ar.end());
    pb.adv_cost.insert(pb.adv_cost.end(), ac.begin(), ac.end());
    pb.ret_reward.insert(pb.ret_reward.end(), rr.begin(), rr.end());
    pb.ret_cost.insert(pb.ret_cost.end(), rc.begin(), rc.end());
    pb.J_R += ep_r;
    pb.J_C += ep_c;
    pb.slack += ep_c - traj.threshold;
  }
  const double m = static_cast<double>(pb.episodes);
  pb.J_R /= m;
  pb.J_C /= m;
  pb.slack /= m;

  if (cfg.normalize_reward_advantages && n > 1) {
    const double mean = std::accumulate(pb.adv_reward.begin(), pb.adv_reward.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double a : pb.adv_reward) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (double& a : pb.adv_reward) a = (a - mean) / (sd + 1e-8);
  }
  return pb;
}

/// Refits both value baselines on the batch's empirical returns.
inline void fit_baselines(const PreparedBatch& pb, LinearValue& value_reward, LinearValue& value_cost,
                          const TrustRegionConfig& cfg) {
  std::vector<const SparseFeatures*> feats;
  feats.reserve(pb.size());
  for (const auto* st : pb.steps) feats.push_back(&st->features);
  fit_value(value_reward, feats, pb.ret_reward, cfg.value_iters, cfg.value_ridge);
  fit_value(value_cost, feats, pb.ret_cost, cfg.value_iters, cfg.value_ridge);
}

struct SurrogateGrads {
  Vector g;  // reward surrogate gradient, per-step average
  LinearizedConstraint cost;
};

/// g averages the reward score over steps; a is the gradient of expected
/// episode cost (score times cost advantage, summed per episode, averaged
/// over episodes); b is the mean episode slack.
inline SurrogateGrads surrogate_grads(const PreparedBatch& pb) {
  OptimizerScope scope;
  if (pb.size() == 0) throw OptimizationError("empty rollout batch");
  const auto& policy = *pb.policy;
  const auto& theta = *pb.theta;
  SurrogateGrads out;
  out.g = Vector::Zero(theta.size());
  out.cost.a = Vector::Zero(theta.size());
  const double inv_n = 1.0 / static_cast<double>(pb.size());
  const double inv_m = 1.0 / static_cast<double>(pb.episodes);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    ActionVector score = -pb.forwards[i].probs;
    score[pb.steps[i]->action] += 1.0;
    const double wr = pb.adv_reward[i] * inv_n;
    const double wc = pb.adv_cost[i] * inv_m;
    if (wr != 0.0) policy.logit_vjp(theta, pb.steps[i]->features, pb.forwards[i], score, wr, out.g);
    if (wc != 0.0) policy.logit_vjp(theta, pb.steps[i]->features, pb.forwards[i], score, wc, out.cost.a);
  }
  out.cost.b = pb.slack;
  return out;
}

/// v -> (F + damping I) v with F the per-step average Fisher of the batch.
inline LinearOperator fisher_operator(const PreparedBatch& pb, double damping) {
  return [&pb, damping](const Vector& v) {
    const auto& policy = *pb.policy;
    const auto& theta = *pb.theta;
    Vector out = damping * v;
    const double inv_n = 1.0 / static_cast<double>(pb.size());
    for (std::size_t i = 0; i < pb.size(); ++i) {
      const auto& fw = pb.forwards[i];
      const ActionVector jv = policy.logit_jvp(theta, pb.steps[i]->features, fw, v);
      const ActionVector u = fw.probs.cwiseProduct(jv) - fw.probs * fw.probs.dot(jv);
      policy.logit_vjp(theta, pb.steps[i]->features, fw, u, inv_n, out);
    }
    return out;
  };
}

/// Mean KL(pi_old || pi_new) over the batch states.
inline double mean_kl(const PreparedBatch& pb, const ParamVector& theta_new) {
  double kl = 0.0;
  for (std::size_t i = 0; i < pb.size(); ++i)
    kl += categorical_kl(pb.forwards[i].probs, pb.policy->probabilities(theta_new, pb.steps[i]->features));
  return kl / static_cast<double>(pb.size());
}

/// Linearization of KL(pi_theta || pi_B) - h_D around the batch policy.
inline LinearizedConstraint divergence_constraint(const PreparedBatch& pb, const ParamVector& theta_baseline,
                                                  double h_D) {
  const auto& policy = *pb.policy;
  LinearizedConstraint c;
  c.a = Vector::Zero(pb.theta->size());
  double kl_total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(pb.size());
  for (std::size_t i = 0; i < pb.size(); ++i) {
    const auto& p = pb.forwards[i].probs;
    const ActionVector q = policy.probabilities(theta_baseline, pb.steps[i]->features);
    const double kl = categorical_kl(p, q);
    kl_total += kl;
    ActionVector d(p.size());
    for (int k = 0; k < p.size(); ++k) d[k] = p[k] > 0.0 ? p[k] * (std::log(p[k]) - std::log(q[k]) - kl) : 0.0;
    policy.logit_vjp(*pb.theta, pb.steps[i]->features, pb.forwards[i], d, inv_n, c.a);
  }
  c.b = kl_total * inv_n - h_D;
  return c;
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

struct UpdateInfo {
  double J_R = 0.0;
  double J_C = 0.0;
  double slack = 0.0;
  double kl = 0.0;  // sampled KL between the old and new policy
  bool projection_active = false;
  bool recovery = false;
  int halvings = 0;
  double h_D = 0.0;
};

struct UpdateResult {
  ParamVector theta;
  UpdateInfo info;
};

namespace detail {

inline CgConfig cg_of(const TrustRegionConfig& cfg) { return {cfg.cg_iters, cfg.cg_tol}; }

inline UpdateResult apply_step(const PreparedBatch& pb, const Vector& step, const TrustRegionConfig& cfg,
                               UpdateInfo info) {
  UpdateResult out{*pb.theta, info};
  Vector s = step;
  out.theta.values() = pb.theta->values() + s;
  out.info.kl = mean_kl(pb, out.theta);
  if (cfg.kl_safeguard) {
    while (out.info.kl > 2.0 * cfg.delta && out.info.halvings < cfg.max_halvings) {
      s *= 0.5;
      ++out.info.halvings;
      out.theta.values() = pb.theta->values() + s;
      out.info.kl = mean_kl(pb, out.theta);
    }
  }
  if (!out.theta.all_finite()) throw OptimizationError("update produced non-finite parameters");
  return out;
}

inline UpdateInfo base_info(const PreparedBatch& pb) {
  UpdateInfo info;
  info.J_R = pb.J_R;
  info.J_C = pb.J_C;
  info.slack = pb.slack;
  return info;
}

}  // namespace detail

/// Plain TRPO on the (possibly penalized) reward stream.
inline UpdateResult trpo_update(const PreparedBatch& pb, const TrustRegionConfig& cfg) {
  OptimizerScope scope;
  const auto grads = surrogate_grads(pb);
  const auto F = fisher_operator(pb, cfg.damping);
  return detail::apply_step(pb, trpo_step(grads.g, F, cfg.delta, detail::cg_of(cfg)), cfg, detail::base_info(pb));
}

/// Reward step followed by projection onto the linearized cost constraint.
/// A violated constraint with no usable gradient falls back to a TRPO step on -a.
inline UpdateResult pcpo_update(const PreparedBatch& pb, const TrustRegionConfig& cfg) {
  OptimizerScope scope;
  const auto grads = surrogate_grads(pb);
  const auto F = fisher_operator(pb, cfg.damping);
  const auto cg = detail::cg_of(cfg);
  UpdateInfo info = detail::base_info(pb);
  const Vector reward = trpo_step(grads.g, F, cfg.delta, cg);
  Vector step = reward;
  if (grads.cost.a.dot(reward) + grads.cost.b > 0.0) {
    info.projection_active = true;
    try {
      step = project(reward, grads.cost, cfg.projection, F, cg);
    } catch (const InfeasibleProjection&) {
      info.recovery = true;
      step = trpo_step(-grads.cost.a, F, cfg.delta, cg);
    }
  }
  return detail::apply_step(pb, step, cfg, info);
}

/// Reward step plus projections onto the baseline-divergence and cost constraints.
inline UpdateResult space_update(const PreparedBatch& pb, const ParamVector& theta_baseline, double h_D,
                                 const TrustRegionConfig& cfg) {
  OptimizerScope scope;
  if (!(h_D > 0.0)) throw std::invalid_argument("h_D must be positive");
  const auto grads = surrogate_grads(pb);
  const auto F = fisher_operator(pb, cfg.damping);
  const auto cg = detail::cg_of(cfg);
  UpdateInfo info = detail::base_info(pb);
  info.h_D = h_D;
  const LinearizedConstraint div = divergence_constraint(pb, theta_baseline, h_D);
  const Vector reward = trpo_step(grads.g, F, cfg.delta, cg);
  const bool div_active = div.a.dot(reward) + div.b > 0.0;
  const bool cost_active = grads.cost.a.dot(reward) + grads.cost.b > 0.0;
  info.projection_active = div_active || cost_active;
  const Vector linv_a = div_active || cfg.space_ordering == SpaceOrdering::sequential
                            ? metric_inverse(div.a, cfg.projection, F, cg)
                            : Vector::Zero(reward.size());
  const Vector linv_c = metric_inverse(grads.cost.a, cfg.projection, F, cg);
  Vector step;
  try {
    step = space_step(reward, div, linv_a, grads.cost, linv_c, cfg.space_ordering);
  } catch (const InfeasibleProjection&) {
    info.recovery = true;
    step = trpo_step(-grads.cost.a, F, cfg.delta, cg);
  }
  return detail::apply_step(pb, step, cfg, info);
}

/// h_D grows by 10 (J_C - h_C)^2 after a regression.
inline double update_h_D(double J_C, double h_C, double h_D, bool regressed) {
  if (!(h_D > 0.0)) throw std::invalid_argument("h_D must be positive");
  if (!regressed) return h_D;
  const double gap = J_C - h_C;
  return 10.0 * gap * gap + h_D;
}

/// Regression test on window-3 smoothed J_C and J_R against the previous window.
class RegressionMonitor {
 public:
  explicit RegressionMonitor(std::size_t window = 3) : window_(window) {}

  /// Records an iterate and reports whether it regressed.
  bool observe(double J_R, double J_C) {
    history_.push_back({J_R, J_C});
    if (history_.size() > 2 * window_) history_.pop_front();
    if (history_.size() < 2 * window_) return false;
    double r_prev = 0, c_prev = 0, r_cur = 0, c_cur = 0;
    for (std::size_t i = 0; i < window_; ++i) {
      r_prev += history_[i].first;
      c_prev += history_[i].second;
      r_cur += history_[window_ + i].first;
      c_cur += history_[window_ + i].second;
    }
    return c_cur > c_prev || r_cur < r_prev;
  }

 private:
  std::size_t window_;
  std::deque<std::pair<double, double>> history_;
};

}  // namespace polco

#endif  // POLCO_SAFEOPT_HPP_
