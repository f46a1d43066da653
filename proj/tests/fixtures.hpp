// Random inputs and checkers shared by the unit tests and the acceptance run.
#ifndef POLCO_TESTS_FIXTURES_HPP_
#define POLCO_TESTS_FIXTURES_HPP_

#include <algorithm>
#include <vector>

#include "polco/constraint.hpp"
#include "polco/grid_env.hpp"
#include "polco/interpreter.hpp"
#include "polco/policy.hpp"
#include "polco/rng.hpp"

namespace fixtures {

using namespace polco;

inline const std::vector<EntityKind> kCost{EntityKind::lava, EntityKind::water, EntityKind::grass};

inline ConstraintSpec random_spec(Rng& rng, ConstraintVariant v) {
  const auto pick = [&] { return kCost[rng.below(3)]; };
  switch (v) {
    case ConstraintVariant::budget:
      return Budgetary{pick(), static_cast<int>(rng.below(6))};
    case ConstraintVariant::relation:
      return Relational{pick(), 1 + static_cast<int>(rng.below(3)), static_cast<int>(rng.below(6))};
    case ConstraintVariant::sequence: {
      const EntityKind t = pick();
      EntityKind f = pick();
      while (f == t) f = pick();
      return Sequential{t, f, static_cast<int>(rng.below(6))};
    }
  }
  return Budgetary{};
}

struct Rollout {
  GridMap map;
  std::vector<Action> actions;
  std::vector<int> costs;
};

/// Uniform random actions on a fresh map with one cell per cost kind.
inline Rollout random_rollout(std::uint64_t map_seed, Rng& rng, const ConstraintSpec& spec, int size, int max_steps) {
  Rollout out{generate_map(map_seed, {size, kCost, 1}), {}, {}};
  EpisodeState s = start_episode(out.map);
  const RewardTable table = RewardTable::train(max_steps);
  while (!s.done) {
    const Action a = static_cast<Action>(rng.below(4));
    const EpisodeState prev = s;
    advance(s, a, table);
    out.actions.push_back(a);
    out.costs.push_back(step_cost(prev, a, s, spec));
  }
  return out;
}

inline PolicyInput random_input(Rng& rng) {
  PolicyInput in;
  for (auto& c : in.obs.cells) c = static_cast<EntityKind>(rng.below(kNumEntityKinds));
  for (std::size_t i = 0; i < in.mask.size(); ++i) {
    in.mask[i] = static_cast<std::uint8_t>(rng.below(2));
    in.budget[i] = in.mask[i] ? rng.uniform(-5.0, 5.0) : 0.0;
  }
  in.threshold_level = static_cast<int>(rng.below(6));
  return in;
}

inline ParamVector random_theta(const SoftmaxPolicy& pi, Rng& rng, double scale) {
  ParamVector theta = pi.make_params();
  for (auto& v : theta.values()) v = scale * rng.normal();
  return theta;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over up to `coords`
/// coordinates where the analytic gradient is nonzero plus ten uniform ones,
/// with central differences of step 1e-5.
template <typename Loss>
double fd_relative_error(ParamVector& params, const Vector& analytic, Loss loss, Rng& rng, int coords) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < analytic.size(); ++i)
    if (analytic[i] != 0.0) idx.push_back(i);
  rng.shuffle(idx);
  if (static_cast<int>(idx.size()) > coords) idx.resize(static_cast<std::size_t>(coords));
  for (int k = 0; k < 10; ++k) idx.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(analytic.size()))));
  const double eps = 1e-5;
  Vector a(static_cast<Eigen::Index>(idx.size())), n(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    double& x = params.values()[idx[k]];
    const double x0 = x;
    x = x0 + eps;
    const double up = loss();
    x = x0 - eps;
    const double down = loss();
    x = x0;
    n[static_cast<Eigen::Index>(k)] = (up - down) / (2 * eps);
    a[static_cast<Eigen::Index>(k)] = analytic[idx[k]];
  }
  const double scale = std::max({a.norm(), n.norm(), 1e-12});
  return (a - n).norm() / scale;
}

/// Every cost entity with thresholds 0..5, distances 1..3 and ordered
/// trigger/forbidden pairs, rendered with the train or held-out templates.
inline std::vector<ConstraintRecord> full_pool(bool heldout) {
  const auto& bank = TemplateBank::standard();
  std::vector<ConstraintSpec> specs;
  for (EntityKind e : kCost) {
    for (int h = 0; h <= kMaxThreshold; ++h) specs.push_back(Budgetary{e, h});
    for (int d = 1; d <= 3; ++d) specs.push_back(Relational{e, d, 0});
    for (EntityKind f : kCost)
      if (f != e) specs.push_back(Sequential{e, f, 0});
  }
  std::vector<ConstraintRecord> pool;
  for (const auto& s : specs)
    for (int id : bank.ids(variant_of(s), heldout)) pool.push_back({s, render_template(s, id)});
  return pool;
}

}  // namespace fixtures

#endif  // POLCO_TESTS_FIXTURES_HPP_
