// Run configuration: flat `key = value` INI with one section per module.
#ifndef POLCO_CONFIG_HPP_
#define POLCO_CONFIG_HPP_

#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "polco/harness.hpp"

namespace polco {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<int> seeds{1, 2, 3, 4, 5};
  int workers = 1;
  std::string output_dir;

  int train_maps = 200;
  int eval_maps = 50;
  PoolConfig pool;
  std::string train_manifest;
  std::string eval_manifest;

  std::string interpreter_kind = "learned";
  std::string interpreter_checkpoint;
  Stage1Config stage1;

  int hidden = 0;
  PolicyInputConfig inputs;

  TrainConfig train{[] {
    TrainConfig t;
    t.gen = GenConfig{7, {kCostKinds.begin(), kCostKinds.end()}, 4};
    return t;
  }()};
  TransferConfig transfer;

  std::string multi_specs = "budget(entity=lava, max=2); budget(entity=water, max=4)";
  int multi_episodes = 300;

  BaselineKind baseline = BaselineKind::cf_pcpo;

  TransferConfig transfer_config() const {
    TransferConfig t = transfer;
    t.train = train;
    return t;
  }

  /// Effective output directory: explicit setting, then $POLCO_OUTPUT_ROOT, then ./polco_runs.
  std::string resolved_output_dir() const {
    if (!output_dir.empty()) return output_dir;
    if (const char* root = std::getenv("POLCO_OUTPUT_ROOT"); root && *root) return root;
    return "polco_runs";
  }
};

namespace detail {

template <typename T>
T lexical(const std::string& key, const std::string& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  } else {
    try {
      return boost::lexical_cast<T>(v);
    } catch (const boost::bad_lexical_cast&) {
      throw ConfigError(key + ": cannot parse '" + v + "'");
    }
  }
}

template <typename T>
std::string show(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  } else {
    return boost::lexical_cast<std::string>(v);
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, sep);)
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline std::vector<int> int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_list(s, ',')) out.push_back(lexical<int>(key, item));
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field scalar(std::string key, T& (*ref)(RunConfig&)) {
  return {key,
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = lexical<T>(key, v); },
          [ref](const RunConfig& c) { return show(ref(const_cast<RunConfig&>(c))); }};
}

template <typename E>
Field named(std::string key, E& (*ref)(RunConfig&), std::string_view (*name)(E), E (*parse)(std::string_view)) {
  return {key,
          [ref, parse, key](RunConfig& c, const std::string& v) {
            try {
              ref(c) = parse(v);
            } catch (const std::exception& e) {
              throw ConfigError(key + ": " + e.what());
            }
          },
          [ref, name](const RunConfig& c) { return std::string(name(ref(const_cast<RunConfig&>(c)))); }};
}

inline std::string_view metric_name(ProjectionMetric m) { return m == ProjectionMetric::kl ? "kl" : "l2"; }
inline ProjectionMetric metric_from_name(std::string_view s) {
  if (s == "kl") return ProjectionMetric::kl;
  if (s == "l2") return ProjectionMetric::l2;
  throw ConfigError("unknown projection metric '" + std::string(s) + "'");
}
inline std::string_view ordering_name(SpaceOrdering o) {
  return o == SpaceOrdering::combined ? "combined" : "sequential";
}
inline SpaceOrdering ordering_from_name(std::string_view s) {
  if (s == "combined") return SpaceOrdering::combined;
  if (s == "sequential") return SpaceOrdering::sequential;
  throw ConfigError("unknown ordering '" + std::string(s) + "'");
}

#define POLCO_REF(expr) +[](RunConfig& c) -> auto& { return c.expr; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        scalar<std::uint64_t>("run.seed", POLCO_REF(seed)),
        {"run.seeds", [](RunConfig& c, const std::string& v) { c.seeds = int_list("run.seeds", v); },
         [](const RunConfig& c) { return join_ints(c.seeds); }},
        scalar<int>("run.workers", POLCO_REF(workers)),
        scalar<std::string>("run.output_dir", POLCO_REF(output_dir)),

        scalar<int>("dataset.train_maps", POLCO_REF(train_maps)),
        scalar<int>("dataset.eval_maps", POLCO_REF(eval_maps)),
        scalar<bool>("dataset.budget", POLCO_REF(pool.budget)),
        scalar<bool>("dataset.relation", POLCO_REF(pool.relation)),
        scalar<bool>("dataset.sequence", POLCO_REF(pool.sequence)),
        {"dataset.thresholds",
         [](RunConfig& c, const std::string& v) { c.pool.budget_thresholds = int_list("dataset.thresholds", v); },
         [](const RunConfig& c) { return join_ints(c.pool.budget_thresholds); }},
        {"dataset.distances",
         [](RunConfig& c, const std::string& v) { c.pool.distances = int_list("dataset.distances", v); },
         [](const RunConfig& c) { return join_ints(c.pool.distances); }},
        scalar<std::string>("dataset.train_manifest", POLCO_REF(train_manifest)),
        scalar<std::string>("dataset.eval_manifest", POLCO_REF(eval_manifest)),

        scalar<int>("env.grid_size", POLCO_REF(train.gen.grid_size)),
        scalar<int>("env.cells_per_cost_kind", POLCO_REF(train.gen.cells_per_cost_kind)),
        scalar<int>("env.max_steps", POLCO_REF(train.max_steps)),

        scalar<std::string>("interpreter.kind", POLCO_REF(interpreter_kind)),
        scalar<std::string>("interpreter.checkpoint", POLCO_REF(interpreter_checkpoint)),
        scalar<int>("interpreter.trajectories", POLCO_REF(stage1.trajectories)),
        scalar<int>("interpreter.max_steps", POLCO_REF(stage1.max_steps)),
        scalar<bool>("interpreter.per_class", POLCO_REF(stage1.per_class)),
        scalar<double>("interpreter.lr", POLCO_REF(stage1.hyper.lr)),
        scalar<int>("interpreter.epochs", POLCO_REF(stage1.hyper.epochs)),
        scalar<int>("interpreter.batch_size", POLCO_REF(stage1.hyper.batch_size)),
        scalar<double>("interpreter.token_dropout", POLCO_REF(stage1.hyper.token_dropout)),
        scalar<int>("interpreter.embed_dim", POLCO_REF(stage1.hyper.features.embed_dim)),
        scalar<int>("interpreter.mask_hidden", POLCO_REF(stage1.hyper.features.mask_hidden)),
        scalar<int>("interpreter.threshold_hidden", POLCO_REF(stage1.hyper.features.threshold_hidden)),

        scalar<int>("policy.hidden", POLCO_REF(hidden)),
        scalar<bool>("policy.use_mask", POLCO_REF(inputs.use_mask)),
        scalar<bool>("policy.use_budget", POLCO_REF(inputs.use_budget)),
        scalar<bool>("policy.use_threshold", POLCO_REF(inputs.use_threshold)),

        named<Algorithm>("train.algo", POLCO_REF(train.algo), algorithm_name, algorithm_from_name),
        scalar<int>("train.updates", POLCO_REF(train.updates)),
        scalar<int>("train.batch_steps", POLCO_REF(train.batch_steps)),
        scalar<double>("train.penalty_weight", POLCO_REF(train.penalty_weight)),
        scalar<double>("train.h_D_init", POLCO_REF(train.h_D_init)),

        scalar<double>("trust.delta", POLCO_REF(train.trust.delta)),
        scalar<double>("trust.gamma", POLCO_REF(train.trust.gamma)),
        scalar<double>("trust.gamma_cost", POLCO_REF(train.trust.gamma_cost)),
        scalar<double>("trust.lambda_reward", POLCO_REF(train.trust.lambda_reward)),
        scalar<double>("trust.lambda_cost", POLCO_REF(train.trust.lambda_cost)),
        scalar<int>("trust.cg_iters", POLCO_REF(train.trust.cg_iters)),
        scalar<double>("trust.cg_tol", POLCO_REF(train.trust.cg_tol)),
        scalar<double>("trust.damping", POLCO_REF(train.trust.damping)),
        named<ProjectionMetric>("trust.projection", POLCO_REF(train.trust.projection), metric_name, metric_from_name),
        scalar<bool>("trust.kl_safeguard", POLCO_REF(train.trust.kl_safeguard)),
        scalar<int>("trust.max_halvings", POLCO_REF(train.trust.max_halvings)),
        scalar<bool>("trust.normalize_reward_advantages", POLCO_REF(train.trust.normalize_reward_advantages)),
        scalar<int>("trust.value_iters", POLCO_REF(train.trust.value_iters)),
        scalar<double>("trust.value_ridge", POLCO_REF(train.trust.value_ridge)),
        named<SpaceOrdering>("trust.space_ordering", POLCO_REF(train.trust.space_ordering), ordering_name,
                             ordering_from_name),

        scalar<int>("transfer.fine_tune_updates", POLCO_REF(transfer.fine_tune_updates)),
        scalar<int>("transfer.eval_episodes", POLCO_REF(transfer.eval_episodes)),

        scalar<std::string>("multi.specs", POLCO_REF(multi_specs)),
        scalar<int>("multi.episodes", POLCO_REF(multi_episodes)),

        named<BaselineKind>("baseline.kind", POLCO_REF(baseline), baseline_name, baseline_from_name),
    };
    return f;
  }();
  return table;
}

#undef POLCO_REF

}  // namespace detail

/// Sets one `section.key`; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.set(c, detail::trim(value));
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies a `section.key=value` override as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void load_config(RunConfig& c, std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' outside a section");
    for (const auto& [key, value] : body) set_config_value(c, section + "." + key, value.data());
  }
}

inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  load_config(c, in);
}

/// Every field in INI form; reading it back reproduces the configuration.
inline void write_config(std::ostream& out, const RunConfig& c) {
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << f.key.substr(dot + 1) << " = " << f.get(c) << '\n';
  }
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : detail::fields()) out.push_back(f.key);
  return out;
}

}  // namespace polco

#endif  // POLCO_CONFIG_HPP_
