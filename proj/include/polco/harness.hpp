#ifndef POLCO_HARNESS_HPP_
#define POLCO_HARNESS_HPP_

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "polco/checkpoint.hpp"
#include "polco/constraint.hpp"
#include "polco/grid_env.hpp"
#include "polco/interpreter.hpp"
#include "polco/policy.hpp"
#include "polco/rng.hpp"
#include "polco/safeopt.hpp"

namespace polco {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Constraint pools and manifests
// ---------------------------------------------------------------------------

struct PoolConfig {
  bool budget = true;
  bool relation = true;
  bool sequence = true;
  std::vector<int> budget_thresholds{0, 1, 2, 3, 4, 5};
  std::vector<int> distances{1, 2, 3};
  std::vector<EntityKind> entities{kCostKinds.begin(), kCostKinds.end()};
};

inline std::vector<ConstraintSpec> build_specs(const PoolConfig& cfg) {
  std::vector<ConstraintSpec> out;
  if (cfg.budget)
    for (EntityKind e : cfg.entities)
      for (int h : cfg.budget_thresholds) out.push_back(Budgetary{e, h});
  if (cfg.relation)
    for (EntityKind e : cfg.entities)
      for (int d : cfg.distances) out.push_back(Relational{e, d, 0});
  if (cfg.sequence)
    for (EntityKind t : cfg.entities)
      for (EntityKind f : cfg.entities)
        if (t != f) out.push_back(Sequential{t, f, 0});
  for (const auto& s : out) validate(s);
  return out;
}

enum class Split { train, eval };

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "eval"; }

struct ManifestEntry {
  std::uint64_t map_seed = 0;
  ConstraintSpec spec;
  int template_id = 0;
  std::string text;
};

struct DatasetManifest {
  Split split = Split::train;
  std::vector<ManifestEntry> entries;

  RewardTable reward_table(int max_steps) const {
    return split == Split::train ? RewardTable::train(max_steps) : RewardTable::eval(max_steps);
  }
};

/// Draws one constraint and one template per map. Train entries use the
/// bank's train templates, eval entries its held-out templates; map seeds come
/// from separate streams and are checked for overlap.
inline std::pair<DatasetManifest, DatasetManifest> gen_dataset(std::uint64_t seed, int n_train_maps, int n_eval_maps,
                                                               const std::vector<ConstraintSpec>& pool,
                                                               const TemplateBank& bank = TemplateBank::standard()) {
  if (pool.empty()) throw HarnessError("constraint pool is empty");
  if (n_train_maps < 0 || n_eval_maps < 0) throw HarnessError("map counts must be non-negative");
  for (const auto& spec : pool) {
    const auto v = variant_of(spec);
    if (bank.ids(v, false).empty() || bank.ids(v, true).empty())
      throw HarnessError("template bank cannot split variant '" + std::string(variant_name(v)) + "'");
  }
  std::set<std::uint64_t> used;
  auto make = [&](Split split, int n) {
    DatasetManifest m;
    m.split = split;
    const std::uint64_t stream = derive_seed(seed, label_hash(split == Split::train ? "train-maps" : "eval-maps"));
    Rng rng(derive_seed(stream, 1));
    for (std::uint64_t i = 0; static_cast<int>(m.entries.size()) < n; ++i) {
      const std::uint64_t map_seed = derive_seed(stream, i + 2);
      if (!used.insert(map_seed).second) continue;
      const ConstraintSpec& spec = pool[rng.below(pool.size())];
      const auto ids = bank.ids(variant_of(spec), split == Split::eval);
      const int tid = ids[rng.below(ids.size())];
      m.entries.push_back({map_seed, spec, tid, render_template(spec, tid, bank).surface});
    }
    return m;
  };
  DatasetManifest train = make(Split::train, n_train_maps);
  DatasetManifest eval = make(Split::eval, n_eval_maps);
  return {std::move(train), std::move(eval)};
}

/// Entries whose constraint threshold equals h.
inline DatasetManifest filter_by_threshold(const DatasetManifest& m, int h) {
  DatasetManifest out;
  out.split = m.split;
  for (const auto& e : m.entries)
    if (threshold_of(e.spec) == h) out.entries.push_back(e);
  return out;
}

inline std::set<int> thresholds_in(const DatasetManifest& m) {
  std::set<int> out;
  for (const auto& e : m.entries) out.insert(threshold_of(e.spec));
  return out;
}

/// One record per line: split, map_seed, dsl, template_id, text (tab separated).
inline void write_manifest(std::ostream& out, const DatasetManifest& m) {
  for (const auto& e : m.entries) {
    out << "split=" << split_name(m.split) << "\tmap_seed=" << e.map_seed << "\tdsl=" << to_dsl(e.spec)
        << "\ttemplate_id=" << e.template_id << "\ttext=" << e.text << '\n';
  }
}

inline DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest m;
  bool have_split = false;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    std::map<std::string, std::string> fields;
    std::istringstream ls(line);
    for (std::string field; std::getline(ls, field, '\t');) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw HarnessError("manifest line " + std::to_string(line_no) + ": bad field");
      fields[field.substr(0, eq)] = field.substr(eq + 1);
    }
    for (const char* key : {"split", "map_seed", "dsl", "template_id", "text"})
      if (!fields.count(key))
        throw HarnessError("manifest line " + std::to_string(line_no) + ": missing '" + key + "'");
    const Split split = fields["split"] == "train" ? Split::train : Split::eval;
    if (fields["split"] != "train" && fields["split"] != "eval")
      throw HarnessError("manifest line " + std::to_string(line_no) + ": bad split");
    if (have_split && split != m.split) throw HarnessError("manifest mixes splits");
    m.split = split;
    have_split = true;
    ManifestEntry e;
    try {
      e.map_seed = std::stoull(fields["map_seed"]);
      e.spec = parse_constraint(fields["dsl"]);
      e.template_id = std::stoi(fields["template_id"]);
    } catch (const std::exception& ex) {
      throw HarnessError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
    e.text = fields["text"];
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw HarnessError("cannot write '" + path + "'");
  write_manifest(out, m);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("cannot open '" + path + "'");
  return read_manifest(in);
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

enum class AgentKind { polco, fusion };

/// A policy together with its encoder and value baselines.
struct Agent {
  AgentKind kind = AgentKind::polco;
  PolicyInputConfig inputs;
  SoftmaxPolicy policy{PolicyArch{}};
  ParamVector theta;
  LinearValue value_reward;
  LinearValue value_cost;
  std::optional<FusionEncoder> fusion;

  static Agent make_polco(PolicyInputConfig inputs, int hidden, std::uint64_t seed) {
    Agent a;
    a.kind = AgentKind::polco;
    a.inputs = inputs;
    a.policy = SoftmaxPolicy(PolicyArch{PolicyFeatureLayout::kSize, kNumActions, hidden});
    a.theta = a.policy.init_params(seed);
    a.value_reward = LinearValue(PolicyFeatureLayout::kSize);
    a.value_cost = LinearValue(PolicyFeatureLayout::kSize);
    return a;
  }

  static Agent make_fusion(TokenVocab vocab, int hidden, std::uint64_t seed) {
    Agent a;
    a.kind = AgentKind::fusion;
    a.fusion.emplace(std::move(vocab));
    const int dim = a.fusion->dim();
    a.policy = SoftmaxPolicy(PolicyArch{dim, kNumActions, hidden});
    a.theta = a.policy.init_params(seed);
    a.value_reward = LinearValue(dim);
    a.value_cost = LinearValue(dim);
    return a;
  }
};

inline Checkpoint to_checkpoint(const Agent& a) {
  Checkpoint c;
  c.kind = "agent";
  c.meta["agent"] = a.kind == AgentKind::polco ? "polco" : "fusion";
  c.meta["input_dim"] = std::to_string(a.policy.arch().input_dim);
  c.meta["n_actions"] = std::to_string(a.policy.arch().n_actions);
  c.meta["hidden"] = std::to_string(a.policy.arch().hidden);
  c.meta["use_mask"] = a.inputs.use_mask ? "1" : "0";
  c.meta["use_budget"] = a.inputs.use_budget ? "1" : "0";
  c.meta["use_threshold"] = a.inputs.use_threshold ? "1" : "0";
  if (a.fusion) c.vocab = a.fusion->vocab().tokens();
  for (const auto& s : a.theta.segments()) c.params.add_segment(s.name, s.length);
  c.params.add_segment("value_reward.w", a.value_reward.weights.size());
  c.params.add_segment("value_cost.w", a.value_cost.weights.size());
  c.params.values() << a.theta.values(), a.value_reward.weights, a.value_cost.weights;
  return c;
}

inline Agent agent_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "agent") throw CheckpointError("checkpoint kind is '" + c.kind + "', expected 'agent'");
  auto meta = [&](const std::string& k) {
    auto it = c.meta.find(k);
    if (it == c.meta.end()) throw CheckpointError("agent checkpoint lacks '" + k + "'");
    return it->second;
  };
  const int hidden = std::stoi(meta("hidden"));
  Agent a;
  if (meta("agent") == "fusion") {
    a = Agent::make_fusion(TokenVocab::from_tokens(c.vocab), hidden, 0);
  } else {
    a = Agent::make_polco({meta("use_mask") == "1", meta("use_budget") == "1", meta("use_threshold") == "1"}, hidden,
                          0);
  }
  if (a.policy.arch().input_dim != std::stoi(meta("input_dim")) ||
      a.policy.arch().n_actions != std::stoi(meta("n_actions")))
    throw CheckpointError("agent checkpoint shape mismatch");
  for (const auto& s : a.theta.segments()) a.theta.segment(s.name) = c.params.segment(s.name);
  a.value_reward.weights = c.params.segment("value_reward.w");
  a.value_cost.weights = c.params.segment("value_cost.w");
  return a;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// What the optimizer sees as the per-step cost.
enum class CostSource {
  interpreter,  // predicted mask at the destination cell
  oracle,       // environment cost function (baselines trained end to end)
  none,
};

struct EpisodeTask {
  std::uint64_t map_seed = 0;
  std::vector<ConstraintSpec> specs;
  std::vector<std::string> texts;
};

struct EpisodeRecord {
  std::uint64_t map_seed = 0;
  double reward = 0.0;
  double oracle_cost = 0.0;
  std::vector<double> oracle_cost_per_spec;
  double predicted_cost = 0.0;
  int min_threshold = 0;  // smallest true h_C over the episode's constraints
  bool success = false;
  int length = 0;
};

struct RolloutSettings {
  GenConfig gen;
  RewardTable table;
  CostSource cost_source = CostSource::interpreter;
};

inline bool episode_success(const EpisodeState& s, const RewardTable& table) {
  for (EntityKind k : kRewardKinds) {
    const bool wanted = table.reward_for(k) > 0.0;
    if (wanted == s.remaining_rewards.contains(k)) return false;
  }
  return true;
}

/// Runs one episode. A null agent samples uniform actions.
inline Trajectory run_episode(const Agent* agent, const Interpreter* interpreter, const EpisodeTask& task,
                              const RolloutSettings& settings, Rng& rng, EpisodeRecord& record) {
  if (task.specs.empty() || task.specs.size() != task.texts.size()) throw HarnessError("malformed episode task");
  const bool polco = agent && agent->kind == AgentKind::polco;
  if (polco && !interpreter) throw HarnessError("a constraint-conditioned agent needs an interpreter");
  if (settings.cost_source == CostSource::interpreter && !interpreter)
    throw HarnessError("interpreter costs requested without an interpreter");

  const std::size_t k = task.specs.size();
  std::vector<std::unique_ptr<InterpreterHandle>> handles;
  std::vector<double> h_hat(k, 0.0), cum_pred(k, 0.0);
  if (interpreter) {
    for (std::size_t i = 0; i < k; ++i) {
      handles.push_back(interpreter->bind(task.specs[i], {task.texts[i], std::nullopt}));
      h_hat[i] = handles[i]->threshold();
    }
  }
  std::vector<std::pair<int, double>> bag;
  if (agent && agent->kind == AgentKind::fusion) {
    std::string joined;
    for (const auto& t : task.texts) joined += t + " ";
    bag = agent->fusion->text_bag(joined);
  }

  Trajectory traj;
  record = EpisodeRecord{};
  record.map_seed = task.map_seed;
  record.oracle_cost_per_spec.assign(k, 0.0);
  record.min_threshold = kMaxThreshold;
  for (const auto& s : task.specs) record.min_threshold = std::min(record.min_threshold, threshold_of(s));
  traj.threshold = settings.cost_source == CostSource::interpreter
                       ? *std::min_element(h_hat.begin(), h_hat.end())
                       : static_cast<double>(record.min_threshold);

  EpisodeState state = start_episode(generate_map(task.map_seed, settings.gen));
  std::vector<BinaryMask> masks(k);
  while (!state.done) {
    const Observation obs = observe(state);
    const VisitedIndicator visited = visited_indicator(state.visited);
    for (std::size_t i = 0; i < handles.size(); ++i) masks[i] = binarize(handles[i]->mask_probabilities(obs, visited));

    RolloutStep st;
    int action = 0;
    if (agent) {
      if (polco) {
        PolicyInput in;
        in.obs = obs;
        in.mask = merge_masks(masks);
        for (std::size_t c = 0; c < kWindowCells; ++c) {
          std::optional<double> v;
          for (std::size_t i = 0; i < k; ++i)
            if (masks[i][c]) v = std::max(v.value_or(-1e300), cum_pred[i] - h_hat[i]);
          in.budget[c] = v.value_or(0.0);
        }
        in.threshold_level = threshold_level(*std::min_element(h_hat.begin(), h_hat.end()));
        st.features = encode_policy_input(in, agent->inputs);
      } else {
        st.features = agent->fusion->encode(obs, bag);
      }
      const auto fw = agent->policy.forward(agent->theta, st.features);
      action = sample_action(fw.probs, rng.uniform());
      st.log_prob = std::log(fw.probs[action]);
    } else {
      action = static_cast<int>(rng.below(kNumActions));
      st.log_prob = -std::log(static_cast<double>(kNumActions));
    }
    st.action = action;

    const Coord from = state.agent;
    const KindSet visited_before = state.visited;
    const StepOutcome out = advance(state, static_cast<Action>(action), settings.table);
    const auto dest = window_coord(from, state.agent);
    double predicted = 0.0, oracle = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!handles.empty() && dest) {
        const double p = masks[i][static_cast<std::size_t>(window_index(dest->first, dest->second))];
        cum_pred[i] += p;
        predicted += p;
      }
      const double o = step_cost(state.map, from, visited_before, state.agent, task.specs[i]);
      record.oracle_cost_per_spec[i] += o;
      oracle += o;
    }
    st.reward = out.reward;
    st.cost = settings.cost_source == CostSource::interpreter ? predicted
              : settings.cost_source == CostSource::oracle    ? oracle
                                                              : 0.0;
    record.reward += out.reward;
    record.predicted_cost += predicted;
    traj.oracle.push(oracle);
    traj.steps.push_back(std::move(st));
  }
  record.oracle_cost = traj.oracle.total();
  record.length = static_cast<int>(traj.steps.size());
  record.success = episode_success(state, settings.table);
  traj.success = record.success;
  return traj;
}

inline EpisodeTask task_of(const ManifestEntry& e) { return {e.map_seed, {e.spec}, {e.text}}; }

struct CollectedBatch {
  RolloutBatch batch;
  std::vector<EpisodeRecord> episodes;
};

/// Whole episodes on uniformly drawn manifest entries until `min_steps` is reached.
inline CollectedBatch collect_batch(const Agent* agent, const Interpreter* interpreter, const DatasetManifest& m,
                                    const RolloutSettings& settings, int min_steps, Rng& rng) {
  if (m.entries.empty()) throw HarnessError("manifest has no entries");
  CollectedBatch out;
  std::size_t steps = 0;
  while (steps < static_cast<std::size_t>(std::max(1, min_steps))) {
    const auto& e = m.entries[rng.below(m.entries.size())];
    EpisodeRecord rec;
    out.batch.trajectories.push_back(run_episode(agent, interpreter, task_of(e), settings, rng, rec));
    steps += out.batch.trajectories.back().steps.size();
    out.episodes.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::string algo;
  std::string split;
  int h_C = -1;  // -1: aggregate over thresholds
  std::uint64_t seed = 0;
  double J_R = 0.0;
  double J_C = 0.0;
  double delta_C = 0.0;
  double success_rate = 0.0;
  std::size_t episodes = 0;
};

inline MetricsReport compute_metrics(const std::vector<EpisodeRecord>& episodes, double h_C) {
  if (episodes.empty()) throw HarnessError("no episodes to summarize");
  MetricsReport r;
  for (const auto& e : episodes) {
    r.J_R += e.reward;
    r.J_C += e.oracle_cost;
    r.success_rate += e.success ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(episodes.size());
  r.J_R /= n;
  r.J_C /= n;
  r.success_rate /= n;
  r.delta_C = std::max(0.0, r.J_C - h_C);
  r.h_C = static_cast<int>(h_C);
  r.episodes = episodes.size();
  return r;
}

/// One row per threshold plus an aggregate row (h_C = -1) whose J_R, J_C
/// and success are episode means and whose Delta_C is the mean of the per-threshold rows.
inline std::vector<MetricsReport> metrics_by_threshold(const std::vector<EpisodeRecord>& episodes) {
  if (episodes.empty()) throw HarnessError("no episodes to summarize");
  std::map<int, std::vector<EpisodeRecord>> groups;
  for (const auto& e : episodes) groups[e.min_threshold].push_back(e);
  std::vector<MetricsReport> rows;
  MetricsReport all = compute_metrics(episodes, 0.0);
  all.h_C = -1;
  all.delta_C = 0.0;
  for (const auto& [h, eps] : groups) {
    rows.push_back(compute_metrics(eps, h));
    all.delta_C += rows.back().delta_C;
  }
  all.delta_C /= static_cast<double>(groups.size());
  rows.push_back(all);
  return rows;
}

inline std::string metrics_csv_header() { return "algo,split,h_C,seed,J_R,J_C,delta_C,success_rate,episodes"; }

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << r.algo << ',' << r.split << ',' << r.h_C << ',' << r.seed << ',' << r.J_R << ',' << r.J_C << ','
      << r.delta_C << ',' << r.success_rate << ',' << r.episodes;
  return out.str();
}

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsReport>& rows) {
  out << metrics_csv_header() << '\n';
  for (const auto& r : rows) out << metrics_csv_row(r) << '\n';
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"algo", r.algo},       {"split", r.split},     {"h_C", r.h_C},
          {"seed", r.seed},       {"J_R", r.J_R},         {"J_C", r.J_C},
          {"delta_C", r.delta_C}, {"success_rate", r.success_rate}, {"episodes", r.episodes}};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw HarnessError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Policy training
// ---------------------------------------------------------------------------

enum class Algorithm { pcpo, trpo, penalized_trpo, space };

inline std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::pcpo: return "pcpo";
    case Algorithm::trpo: return "trpo";
    case Algorithm::penalized_trpo: return "penalized_trpo";
    case Algorithm::space: return "space";
  }
  return "?";
}

inline Algorithm algorithm_from_name(std::string_view s) {
  for (Algorithm a : {Algorithm::pcpo, Algorithm::trpo, Algorithm::penalized_trpo, Algorithm::space})
    if (algorithm_name(a) == s) return a;
  throw HarnessError("unknown algorithm '" + std::string(s) + "'");
}

struct TrainConfig {
  Algorithm algo = Algorithm::pcpo;
  int updates = 300;
  int batch_steps = 2000;
  int max_steps = 60;
  GenConfig gen{7, {kCostKinds.begin(), kCostKinds.end()}, 4};
  TrustRegionConfig trust;
  double penalty_weight = 1.0;
  double h_D_init = 0.01;
  CostSource cost_source = CostSource::interpreter;
};

/// Machine-readable per-update record.
struct UpdateRecord {
  int iteration = 0;
  double J_R = 0.0;
  double J_C = 0.0;       // environment cost, reporting only
  double delta_C = 0.0;   // max(0, J_C - mean true threshold)
  double J_C_train = 0.0; // cost signal the optimizer used
  double kl = 0.0;
  bool projection_active = false;
  bool recovery = false;
  int halvings = 0;
  double h_D = 0.0;
  double wall_time = 0.0;
};

inline nlohmann::json to_json(const UpdateRecord& u) {
  return {{"iteration", u.iteration}, {"J_R", u.J_R},
          {"J_C", u.J_C},             {"delta_C", u.delta_C},
          {"J_C_train", u.J_C_train}, {"kl", u.kl},
          {"projection_active", u.projection_active}, {"recovery", u.recovery},
          {"halvings", u.halvings},   {"h_D", u.h_D},
          {"wall_time", u.wall_time}};
}

/// Optimizes the agent in place on episodes drawn from the manifest.
inline std::vector<UpdateRecord> train_policy(Agent& agent, const Interpreter* interpreter, const DatasetManifest& m,
                                              const TrainConfig& cfg, std::uint64_t seed,
                                              const ParamVector* theta_baseline = nullptr,
                                              const std::function<void(const UpdateRecord&)>& on_update = {}) {
  RolloutSettings settings{cfg.gen, m.reward_table(cfg.max_steps), cfg.cost_source};
  Rng rng(derive_seed(seed, label_hash("policy-rollouts")));
  std::vector<UpdateRecord> log;
  double h_D = cfg.h_D_init;
  RegressionMonitor monitor;
  const auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < cfg.updates; ++it) {
    const CollectedBatch data = collect_batch(&agent, interpreter, m, settings, cfg.batch_steps, rng);
    UpdateRecord rec;
    rec.iteration = it;
    double h_sum = 0.0;
    for (const auto& e : data.episodes) {
      rec.J_R += e.reward;
      rec.J_C += e.oracle_cost;
      h_sum += e.min_threshold;
    }
    const double n = static_cast<double>(data.episodes.size());
    rec.J_R /= n;
    rec.J_C /= n;
    rec.delta_C = std::max(0.0, rec.J_C - h_sum / n);

    UpdateResult res;
    {
      OptimizerScope scope;
      const double penalty = cfg.algo == Algorithm::penalized_trpo ? cfg.penalty_weight : 0.0;
      const PreparedBatch pb = prepare_batch(agent.policy, agent.theta, data.batch, agent.value_reward,
                                             agent.value_cost, cfg.trust, penalty);
      switch (cfg.algo) {
        case Algorithm::pcpo: res = pcpo_update(pb, cfg.trust); break;
        case Algorithm::trpo:
        case Algorithm::penalized_trpo: res = trpo_update(pb, cfg.trust); break;
        case Algorithm::space: {
          const ParamVector base = theta_baseline ? *theta_baseline : agent.policy.make_params();
          res = space_update(pb, base, h_D, cfg.trust);
          h_D = update_h_D(pb.J_C, pb.J_C - pb.slack, h_D, monitor.observe(pb.J_R, pb.J_C));
          break;
        }
      }
      fit_baselines(pb, agent.value_reward, agent.value_cost, cfg.trust);
      rec.J_C_train = pb.J_C;
    }
    agent.theta = std::move(res.theta);
    rec.kl = res.info.kl;
    rec.projection_active = res.info.projection_active;
    rec.recovery = res.info.recovery;
    rec.halvings = res.info.halvings;
    rec.h_D = res.info.h_D;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_update) on_update(rec);
    log.push_back(rec);
  }
  return log;
}

/// Stochastic evaluation on every manifest entry in turn, `episodes` in total.
inline std::vector<EpisodeRecord> evaluate_agent(const Agent* agent, const Interpreter* interpreter,
                                                 const DatasetManifest& m, const GenConfig& gen, int max_steps,
                                                 int episodes, std::uint64_t seed) {
  if (m.entries.empty()) throw HarnessError("manifest has no entries");
  RolloutSettings settings{gen, m.reward_table(max_steps), interpreter ? CostSource::interpreter : CostSource::none};
  Rng rng(derive_seed(seed, label_hash("evaluation")));
  std::vector<EpisodeRecord> out;
  out.reserve(static_cast<std::size_t>(episodes));
  for (int i = 0; i < episodes; ++i) {
    EpisodeRecord rec;
    run_episode(agent, interpreter, task_of(m.entries[static_cast<std::size_t>(i) % m.entries.size()]), settings, rng,
                rec);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Safety training and evaluation protocols
// ---------------------------------------------------------------------------

struct Stage1Config {
  int trajectories = 5000;
  int max_steps = 60;
  std::vector<GenConfig> maps{GenConfig{5, {kCostKinds.begin(), kCostKinds.end()}, 1},
                              GenConfig{6, {kCostKinds.begin(), kCostKinds.end()}, 2},
                              GenConfig{7, {kCostKinds.begin(), kCostKinds.end()}, 4}};
  InterpreterHyper hyper;
  bool per_class = false;
};

/// Every distinct constraint in the manifest rendered with every template of the split.
inline std::vector<ConstraintRecord> constraint_pool(const DatasetManifest& m,
                                                     const TemplateBank& bank = TemplateBank::standard()) {
  std::vector<ConstraintSpec> specs;
  for (const auto& e : m.entries)
    if (std::find(specs.begin(), specs.end(), e.spec) == specs.end()) specs.push_back(e.spec);
  std::vector<ConstraintRecord> out;
  for (const auto& s : specs)
    for (int id : bank.ids(variant_of(s), m.split == Split::eval)) out.push_back({s, render_template(s, id, bank)});
  return out;
}

struct Stage1Result {
  std::shared_ptr<const Interpreter> interpreter;
  std::optional<InterpreterParams> shared;
  std::array<std::optional<InterpreterParams>, 3> per_class;
  double mask_loss = 0.0;
  double threshold_loss = 0.0;
};

/// Random-policy data collection over the manifest's map seeds, then interpreter training.
inline Stage1Result train_stage1(const DatasetManifest& train, const Stage1Config& cfg, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  for (const auto& e : train.entries) seeds.push_back(e.map_seed);
  const InterpreterDataset data = collect_interpreter_data({cfg.maps, cfg.max_steps}, constraint_pool(train),
                                                           cfg.trajectories, derive_seed(seed, 1), seeds);
  InterpreterHyper hyper = cfg.hyper;
  hyper.seed = derive_seed(seed, 2);
  Stage1Result out;
  if (cfg.per_class) {
    out.per_class = train_interpreter_per_class(data, hyper);
    out.interpreter = std::make_shared<PerClassInterpreter>(out.per_class);
  } else {
    const TrainedInterpreter t = train_interpreter(data, hyper);
    out.shared = t.params;
    out.mask_loss = t.mask_loss;
    out.threshold_loss = t.threshold_loss;
    out.interpreter = std::make_shared<LearnedInterpreter>(t.params);
  }
  return out;
}

struct SafetyTrainingResult {
  Agent agent;
  std::vector<UpdateRecord> log;
};

/// Stage 2: constraint-conditioned policy trained with interpreter-predicted costs.
inline SafetyTrainingResult safety_training(const DatasetManifest& train, const Interpreter& interpreter,
                                            const TrainConfig& cfg, PolicyInputConfig inputs, int hidden,
                                            std::uint64_t seed,
                                            const std::function<void(const UpdateRecord&)>& on_update = {}) {
  SafetyTrainingResult out{Agent::make_polco(inputs, hidden, derive_seed(seed, label_hash("policy"))), {}};
  TrainConfig c = cfg;
  c.cost_source = CostSource::interpreter;
  out.log = train_policy(out.agent, &interpreter, train, c, seed, nullptr, on_update);
  return out;
}

struct TransferConfig {
  int fine_tune_updates = 50;
  int eval_episodes = 300;
  TrainConfig train;
};

/// Fine-tunes a copy of the agent on the eval reward table and reports
/// per-threshold metrics against the environment cost. A constraint-conditioned
/// agent fine-tunes with interpreter costs; a fusion agent with reward only.
inline std::vector<MetricsReport> eval_transfer(const Agent& trained, const Interpreter* interpreter,
                                                const DatasetManifest& eval, const TransferConfig& cfg,
                                                std::uint64_t seed, const std::string& algo_label,
                                                Agent* tuned_out = nullptr) {
  if (eval.split != Split::eval) throw HarnessError("transfer evaluation needs the eval manifest");
  Agent agent = trained;
  if (cfg.fine_tune_updates > 0) {
    TrainConfig c = cfg.train;
    c.updates = cfg.fine_tune_updates;
    if (agent.kind == AgentKind::polco) {
      c.cost_source = CostSource::interpreter;
    } else {
      c.cost_source = CostSource::none;
      c.algo = Algorithm::trpo;
    }
    train_policy(agent, agent.kind == AgentKind::polco ? interpreter : nullptr, eval, c,
                 derive_seed(seed, label_hash("fine-tune")));
  }
  const auto episodes = evaluate_agent(&agent, agent.kind == AgentKind::polco ? interpreter : nullptr, eval,
                                       cfg.train.gen, cfg.train.max_steps, cfg.eval_episodes, seed);
  auto rows = metrics_by_threshold(episodes);
  for (auto& r : rows) {
    r.algo = algo_label;
    r.split = "eval";
    r.seed = seed;
  }
  if (tuned_out) *tuned_out = std::move(agent);
  return rows;
}

struct MultiReport {
  MetricsReport aggregate;               // Delta_C against the smallest threshold
  std::vector<double> delta_C_per_spec;  // each spec against its own threshold
  std::vector<double> J_C_per_spec;
};

/// Several constraints at once through merged masks; no fine-tuning.
inline MultiReport eval_multi(const Agent* agent, const Interpreter* interpreter, const std::vector<ConstraintSpec>& specs,
                              const std::vector<std::string>& texts, const std::vector<std::uint64_t>& map_seeds,
                              const GenConfig& gen, const RewardTable& table, int n_episodes, std::uint64_t seed) {
  if (specs.size() < 2) throw HarnessError("multi-constraint evaluation needs at least two constraints");
  if (texts.size() != specs.size()) throw HarnessError("one text per constraint required");
  if (map_seeds.empty()) throw HarnessError("no maps for multi-constraint evaluation");
  RolloutSettings settings{gen, table, interpreter ? CostSource::interpreter : CostSource::none};
  Rng rng(derive_seed(seed, label_hash("multi")));
  std::vector<EpisodeRecord> episodes;
  for (int i = 0; i < n_episodes; ++i) {
    EpisodeRecord rec;
    run_episode(agent, interpreter, {map_seeds[static_cast<std::size_t>(i) % map_seeds.size()], specs, texts},
                settings, rng, rec);
    episodes.push_back(std::move(rec));
  }
  int h_min = kMaxThreshold;
  for (const auto& s : specs) h_min = std::min(h_min, threshold_of(s));
  MultiReport out;
  out.aggregate = compute_metrics(episodes, h_min);
  out.aggregate.seed = seed;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    double jc = 0.0;
    for (const auto& e : episodes) jc += e.oracle_cost_per_spec[k];
    jc /= static_cast<double>(episodes.size());
    out.J_C_per_spec.push_back(jc);
    out.delta_C_per_spec.push_back(std::max(0.0, jc - threshold_of(specs[k])));
  }
  return out;
}

enum class BaselineKind { random_walk, cf_trpo, cf_pcpo, penalized_trpo };

inline std::string_view baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::random_walk: return "random_walk";
    case BaselineKind::cf_trpo: return "cf_trpo";
    case BaselineKind::cf_pcpo: return "cf_pcpo";
    case BaselineKind::penalized_trpo: return "penalized_trpo";
  }
  return "?";
}

inline BaselineKind baseline_from_name(std::string_view s) {
  for (BaselineKind k :
       {BaselineKind::random_walk, BaselineKind::cf_trpo, BaselineKind::cf_pcpo, BaselineKind::penalized_trpo})
    if (baseline_name(k) == s) return k;
  throw HarnessError("unknown baseline '" + std::string(s) + "'");
}

/// Vocabulary over every template of the bank rendered for the manifest's constraints.
inline TokenVocab fusion_vocab(const DatasetManifest& train) {
  std::vector<std::string> texts;
  for (const auto& r : constraint_pool(train)) texts.push_back(r.text.surface);
  return TokenVocab::build(texts);
}

/// Trains a fusion agent end to end on the environment cost (none for cf_trpo).
inline SafetyTrainingResult train_baseline(BaselineKind kind, const DatasetManifest& train, const TrainConfig& cfg,
                                           int hidden, std::uint64_t seed) {
  if (kind == BaselineKind::random_walk) throw HarnessError("the random walk has nothing to train");
  SafetyTrainingResult out{Agent::make_fusion(fusion_vocab(train), hidden, derive_seed(seed, label_hash("policy"))),
                           {}};
  TrainConfig c = cfg;
  switch (kind) {
    case BaselineKind::cf_trpo:
      c.algo = Algorithm::trpo;
      c.cost_source = CostSource::none;
      break;
    case BaselineKind::cf_pcpo:
      c.algo = Algorithm::pcpo;
      c.cost_source = CostSource::oracle;
      break;
    case BaselineKind::penalized_trpo:
      c.algo = Algorithm::penalized_trpo;
      c.cost_source = CostSource::oracle;
      break;
    case BaselineKind::random_walk: break;
  }
  out.log = train_policy(out.agent, nullptr, train, c, seed);
  return out;
}

/// Baseline trained on the train split and evaluated with the transfer protocol.
inline std::vector<MetricsReport> run_baseline(BaselineKind kind, const DatasetManifest& train,
                                               const DatasetManifest& eval, const TransferConfig& cfg, int hidden,
                                               std::uint64_t seed) {
  const std::string label(baseline_name(kind));
  if (kind == BaselineKind::random_walk) {
    const auto episodes =
        evaluate_agent(nullptr, nullptr, eval, cfg.train.gen, cfg.train.max_steps, cfg.eval_episodes, seed);
    auto rows = metrics_by_threshold(episodes);
    for (auto& r : rows) {
      r.algo = label;
      r.split = "eval";
      r.seed = seed;
    }
    return rows;
  }
  const auto trained = train_baseline(kind, train, cfg.train, hidden, seed);
  return eval_transfer(trained.agent, nullptr, eval, cfg, seed, label);
}

// ---------------------------------------------------------------------------
// Seed-parallel execution
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `workers` threads; results keep index order.
template <typename Fn>
auto run_indexed(int n, int workers, Fn fn) -> std::vector<decltype(fn(0))> {
  std::vector<decltype(fn(0))> out(static_cast<std::size_t>(std::max(0, n)));
  if (n <= 0) return out;
  const int w = std::clamp(workers, 1, n);
  if (w == 1) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fn(i);
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  std::vector<std::thread> threads;
  for (int t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (int i = next++; i < n; i = next++) out[static_cast<std::size_t>(i)] = fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace polco

#endif  // POLCO_HARNESS_HPP_
