#ifndef POLCO_POLICY_HPP_
#define POLCO_POLICY_HPP_

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "polco/constraint.hpp"
#include "polco/grid_env.hpp"
#include "polco/param_vector.hpp"
#include "polco/rng.hpp"
#include "polco/text.hpp"

namespace polco {

inline constexpr int kMaxActions = 8;
using ActionVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxActions, 1>;

/// Sparse real feature vector.
struct SparseFeatures {
  std::vector<std::pair<int, double>> entries;
  int dim = 0;

  void add(int index, double value) {
    if (value != 0.0) entries.emplace_back(index, value);
  }

  double dot(const Eigen::Ref<const Vector>& w) const {
    double s = 0.0;
    for (const auto& [i, v] : entries) s += w[i] * v;
    return s;
  }

  Vector dense() const {
    Vector out = Vector::Zero(dim);
    for (const auto& [i, v] : entries) out[i] += v;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Input encodings
// ---------------------------------------------------------------------------

inline constexpr int kThresholdLevels = kMaxThreshold + 1;

/// floor(h) clamped into [0, 5].
inline int threshold_level(double h_hat) {
  if (!std::isfinite(h_hat)) return 0;
  return std::clamp(static_cast<int>(std::floor(h_hat)), 0, kMaxThreshold);
}

/// What the constraint-conditioned policy sees at one step.
struct PolicyInput {
  Observation obs;
  BinaryMask mask{};
  RealMask budget{};
  int threshold_level = 0;
};

/// Channel switches used for ablations.
struct PolicyInputConfig {
  bool use_mask = true;
  bool use_budget = true;
  bool use_threshold = true;
  friend bool operator==(const PolicyInputConfig&, const PolicyInputConfig&) = default;
};

/// Layout: per-cell one-hot of the entity kind, the binarized mask, the
/// budget mask, a one-hot of the threshold level and a constant.
struct PolicyFeatureLayout {
  static constexpr int kObs = 0;
  static constexpr int kMask = kObs + kWindowCells * kNumEntityKinds;
  static constexpr int kBudget = kMask + kWindowCells;
  static constexpr int kThreshold = kBudget + kWindowCells;
  static constexpr int kBias = kThreshold + kThresholdLevels;
  static constexpr int kSize = kBias + 1;
};

inline void add_observation_features(const Observation& obs, SparseFeatures& f) {
  for (int c = 0; c < kWindowCells; ++c)
    f.add(c * kNumEntityKinds + static_cast<int>(obs.cells[static_cast<std::size_t>(c)]), 1.0);
}

inline SparseFeatures encode_policy_input(const PolicyInput& in, const PolicyInputConfig& cfg = {}) {
  using L = PolicyFeatureLayout;
  SparseFeatures f;
  f.dim = L::kSize;
  f.entries.reserve(kWindowCells + 16);
  add_observation_features(in.obs, f);
  if (cfg.use_mask)
    for (int c = 0; c < kWindowCells; ++c) f.add(L::kMask + c, in.mask[static_cast<std::size_t>(c)]);
  if (cfg.use_budget)
    for (int c = 0; c < kWindowCells; ++c) f.add(L::kBudget + c, in.budget[static_cast<std::size_t>(c)]);
  if (cfg.use_threshold) f.add(L::kThreshold + std::clamp(in.threshold_level, 0, kMaxThreshold), 1.0);
  f.add(L::kBias, 1.0);
  return f;
}

/// Observation plus a normalized bag of constraint tokens: the
/// constraint-fusion input, which carries no mask, budget or threshold.
class FusionEncoder {
 public:
  explicit FusionEncoder(TokenVocab vocab) : vocab_(std::move(vocab)) {}

  int dim() const { return kWindowCells * kNumEntityKinds + vocab_.size() + 1; }
  const TokenVocab& vocab() const { return vocab_; }

  /// Token bag for a text; reuse it across the steps of an episode.
  std::vector<std::pair<int, double>> text_bag(const std::string& text) const {
    std::vector<std::pair<int, double>> bag;
    const auto ids = vocab_.encode(text);
    if (ids.empty()) return bag;
    const double w = 1.0 / static_cast<double>(ids.size());
    for (int id : ids) {
      auto it = std::find_if(bag.begin(), bag.end(), [&](const auto& e) { return e.first == id; });
      if (it == bag.end()) bag.emplace_back(id, w);
      else it->second += w;
    }
    std::sort(bag.begin(), bag.end());
    return bag;
  }

  SparseFeatures encode(const Observation& obs, const std::vector<std::pair<int, double>>& bag) const {
    SparseFeatures f;
    f.dim = dim();
    f.entries.reserve(kWindowCells + bag.size() + 1);
    add_observation_features(obs, f);
    const int base = kWindowCells * kNumEntityKinds;
    for (const auto& [id, w] : bag) f.add(base + id, w);
    f.add(dim() - 1, 1.0);
    return f;
  }

 private:
  TokenVocab vocab_;
};

// ---------------------------------------------------------------------------
// Softmax policy
// ---------------------------------------------------------------------------

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PolicyArch {
  int input_dim = PolicyFeatureLayout::kSize;
  int n_actions = kNumActions;
  int hidden = 0;  // 0: linear logits; otherwise one tanh layer of this width
  friend bool operator==(const PolicyArch&, const PolicyArch&) = default;
};

inline ActionVector softmax(const ActionVector& logits) {
  ActionVector p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

/// Categorical policy over a sparse feature vector.
class SoftmaxPolicy {
 public:
  struct Forward {
    ActionVector logits;
    ActionVector probs;
    Vector hidden;  // empty for the linear architecture
  };

  explicit SoftmaxPolicy(PolicyArch arch) : arch_(arch) {
    if (arch.n_actions < 2 || arch.n_actions > kMaxActions) throw std::invalid_argument("bad action count");
  }

  const PolicyArch& arch() const { return arch_; }

  ParamVector make_params() const {
    ParamVector p;
    if (arch_.hidden == 0) {
      p.add_segment("policy.w", static_cast<Eigen::Index>(arch_.n_actions) * arch_.input_dim);
    } else {
      p.add_segment("policy.hidden_w", static_cast<Eigen::Index>(arch_.hidden) * arch_.input_dim);
      p.add_segment("policy.hidden_b", arch_.hidden);
      p.add_segment("policy.out_w", static_cast<Eigen::Index>(arch_.n_actions) * arch_.hidden);
      p.add_segment("policy.out_b", arch_.n_actions);
    }
    return p;
  }

  /// Random hidden layer; output weights stay zero so the initial policy is uniform.
  ParamVector init_params(std::uint64_t seed) const {
    ParamVector p = make_params();
    if (arch_.hidden > 0) {
      Rng rng(derive_seed(seed, label_hash("policy-init")));
      const double scale = 1.0 / std::sqrt(static_cast<double>(arch_.input_dim) / 8.0);
      for (auto& v : p.segment("policy.hidden_w")) v = scale * rng.normal();
    }
    return p;
  }

  Forward forward(const ParamVector& theta, const SparseFeatures& f) const {
    Forward out;
    out.logits.setZero(arch_.n_actions);
    if (arch_.hidden == 0) {
      const Vector& w = theta.values();
      const auto& seg = theta.segment_info("policy.w");
      for (int a = 0; a < arch_.n_actions; ++a) {
        const Eigen::Index row = seg.offset + static_cast<Eigen::Index>(a) * arch_.input_dim;
        double s = 0.0;
        for (const auto& [i, v] : f.entries) s += w[row + i] * v;
        out.logits[a] = s;
      }
    } else {
      out.hidden = hidden_pre(theta, f, theta.segment("policy.hidden_b")).array().tanh().matrix();
      out.logits = theta.matrix("policy.out_w", arch_.n_actions, arch_.hidden) * out.hidden +
                   theta.segment("policy.out_b");
    }
    if (!out.logits.allFinite()) throw PolicyError("non-finite policy logits");
    out.probs = softmax(out.logits);
    return out;
  }

  ActionVector probabilities(const ParamVector& theta, const SparseFeatures& f) const {
    return forward(theta, f).probs;
  }

  /// grad += weight * J^T dlogits, with J the Jacobian of the logits w.r.t. theta.
  void logit_vjp(const ParamVector& theta, const SparseFeatures& f, const Forward& fw, const ActionVector& dlogits,
                 double weight, Vector& grad) const {
    if (arch_.hidden == 0) {
      const auto& seg = theta.segment_info("policy.w");
      for (int a = 0; a < arch_.n_actions; ++a) {
        const double d = weight * dlogits[a];
        if (d == 0.0) continue;
        const Eigen::Index row = seg.offset + static_cast<Eigen::Index>(a) * arch_.input_dim;
        for (const auto& [i, v] : f.entries) grad[row + i] += d * v;
      }
      return;
    }
    const int H = arch_.hidden;
    const auto& ow = theta.segment_info("policy.out_w");
    const auto& ob = theta.segment_info("policy.out_b");
    const auto& hw = theta.segment_info("policy.hidden_w");
    const auto& hb = theta.segment_info("policy.hidden_b");
    const ActionVector dl = weight * dlogits;
    for (int a = 0; a < arch_.n_actions; ++a) {
      grad.segment(ow.offset + static_cast<Eigen::Index>(a) * H, H) += dl[a] * fw.hidden;
      grad[ob.offset + a] += dl[a];
    }
    const Vector dz = theta.matrix("policy.out_w", arch_.n_actions, H).transpose() * dl;
    const Vector dpre = dz.array() * (1.0 - fw.hidden.array().square());
    for (int h = 0; h < H; ++h) {
      if (dpre[h] == 0.0) continue;
      const Eigen::Index row = hw.offset + static_cast<Eigen::Index>(h) * arch_.input_dim;
      for (const auto& [i, v] : f.entries) grad[row + i] += dpre[h] * v;
    }
    grad.segment(hb.offset, H) += dpre;
  }

  /// J v: directional derivative of the logits along parameter direction v.
  ActionVector logit_jvp(const ParamVector& theta, const SparseFeatures& f, const Forward& fw, const Vector& v) const {
    ActionVector out;
    out.setZero(arch_.n_actions);
    if (arch_.hidden == 0) {
      const auto& seg = theta.segment_info("policy.w");
      for (int a = 0; a < arch_.n_actions; ++a) {
        const Eigen::Index row = seg.offset + static_cast<Eigen::Index>(a) * arch_.input_dim;
        double s = 0.0;
        for (const auto& [i, x] : f.entries) s += v[row + i] * x;
        out[a] = s;
      }
      return out;
    }
    const int H = arch_.hidden;
    const auto& hb = theta.segment_info("policy.hidden_b");
    const auto& ow = theta.segment_info("policy.out_w");
    const auto& ob = theta.segment_info("policy.out_b");
    Vector dpre = v.segment(hb.offset, H);
    const auto& hw = theta.segment_info("policy.hidden_w");
    for (int h = 0; h < H; ++h) {
      const Eigen::Index row = hw.offset + static_cast<Eigen::Index>(h) * arch_.input_dim;
      for (const auto& [i, x] : f.entries) dpre[h] += v[row + i] * x;
    }
    const Vector dz = dpre.array() * (1.0 - fw.hidden.array().square());
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> vw(
        v.data() + ow.offset, arch_.n_actions, H);
    out = vw * fw.hidden + theta.matrix("policy.out_w", arch_.n_actions, H) * dz + v.segment(ob.offset, arch_.n_actions);
    return out;
  }

  /// grad += weight * d log pi(action | f) / d theta.
  void add_log_prob_grad(const ParamVector& theta, const SparseFeatures& f, const Forward& fw, int action,
                         double weight, Vector& grad) const {
    ActionVector d = -fw.probs;
    d[action] += 1.0;
    logit_vjp(theta, f, fw, d, weight, grad);
  }

  Vector log_prob_grad(const ParamVector& theta, const SparseFeatures& f, int action) const {
    if (action < 0 || action >= arch_.n_actions) throw std::out_of_range("invalid action");
    Vector g = Vector::Zero(theta.size());
    add_log_prob_grad(theta, f, forward(theta, f), action, 1.0, g);
    return g;
  }

 private:
  Vector hidden_pre(const ParamVector& theta, const SparseFeatures& f, const Eigen::Ref<const Vector>& bias) const {
    Vector pre = bias;
    const auto& hw = theta.segment_info("policy.hidden_w");
    const Vector& w = theta.values();
    for (int h = 0; h < arch_.hidden; ++h) {
      const Eigen::Index row = hw.offset + static_cast<Eigen::Index>(h) * arch_.input_dim;
      for (const auto& [i, v] : f.entries) pre[h] += w[row + i] * v;
    }
    return pre;
  }

  PolicyArch arch_;
};

/// Inverse-CDF sampling with a uniform draw u in [0, 1).
inline int sample_action(const ActionVector& probs, double u) {
  double acc = 0.0;
  for (int a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return a;
  }
  return static_cast<int>(probs.size()) - 1;
}

inline double categorical_kl(const ActionVector& p, const ActionVector& q) {
  double kl = 0.0;
  for (int a = 0; a < p.size(); ++a)
    if (p[a] > 0.0) kl += p[a] * (std::log(p[a]) - std::log(q[a]));
  return kl;
}

// ---------------------------------------------------------------------------
// Linear value baselines
// ---------------------------------------------------------------------------

/// Scalar linear head over the same sparse features as the policy.
struct LinearValue {
  Vector weights;

  explicit LinearValue(int dim = 0) : weights(Vector::Zero(dim)) {}

  double operator()(const SparseFeatures& f) const { return f.dot(weights); }
};

/// Ridge least squares on (features, targets) by conjugate gradient on the
/// normal equations, warm-started from the current weights.
inline void fit_value(LinearValue& value, const std::vector<const SparseFeatures*>& features,
                      const std::vector<double>& targets, int iters = 50, double ridge = 1e-6) {
  if (features.size() != targets.size()) throw std::invalid_argument("feature/target count mismatch");
  if (features.empty()) return;
  const double inv_n = 1.0 / static_cast<double>(features.size());
  auto apply = [&](const Vector& w) {
    Vector out = ridge * w;
    for (const auto* f : features) {
      const double s = f->dot(w) * inv_n;
      for (const auto& [i, v] : f->entries) out[i] += s * v;
    }
    return out;
  };
  Vector rhs = Vector::Zero(value.weights.size());
  for (std::size_t k = 0; k < features.size(); ++k)
    for (const auto& [i, v] : features[k]->entries) rhs[i] += targets[k] * v * inv_n;

  Vector& x = value.weights;
  Vector r = rhs - apply(x);
  Vector p = r;
  double rr = r.squaredNorm();
  const double stop = 1e-24 * std::max(1.0, rhs.squaredNorm());
  for (int it = 0; it < iters && rr > stop; ++it) {
    const Vector Ap = apply(p);
    const double alpha = rr / p.dot(Ap);
    x += alpha * p;
    r -= alpha * Ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
}

}  // namespace polco

#endif  // POLCO_POLICY_HPP_
