#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "polco/config.hpp"
#include "polco/harness.hpp"

namespace fs = std::filesystem;
using namespace polco;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "INI config file")->check(CLI::ExistingFile);
  sub->add_option("-s,--set", c.overrides, "override, e.g. --set train.updates=10")->take_all();
  sub->add_option("-o,--out", c.out, "output directory (default $POLCO_OUTPUT_ROOT or ./polco_runs)");
  sub->add_option("--seed", c.seed, "global seed");
  sub->add_option("-j,--workers", c.workers, "threads for seed-parallel work");
}

/// Defaults, then the config file, then flags; the effective config is echoed
/// into the output directory.
RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags,
                  const std::string& command) {
  RunConfig cfg;
  if (!c.config_path.empty()) load_config_file(cfg, c.config_path);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) cfg.seed = *c.seed;
  if (c.workers) cfg.workers = *c.workers;
  for (const auto& [k, v] : flags) set_config_value(cfg, k, v);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  cfg.output_dir = cfg.resolved_output_dir();
  fs::create_directories(cfg.output_dir);
  std::ofstream echo(fs::path(cfg.output_dir) / (command + ".cfg"));
  write_config(echo, cfg);
  return cfg;
}

fs::path out_path(const RunConfig& cfg, const std::string& name) { return fs::path(cfg.output_dir) / name; }

std::string manifest_path(const RunConfig& cfg, Split s) {
  const std::string& set = s == Split::train ? cfg.train_manifest : cfg.eval_manifest;
  return set.empty() ? out_path(cfg, std::string(split_name(s)) + ".manifest").string() : set;
}

std::shared_ptr<const Interpreter> load_interpreter(const RunConfig& cfg) {
  if (cfg.interpreter_kind == "oracle") return std::make_shared<OracleInterpreter>();
  if (cfg.interpreter_kind != "learned") throw ConfigError("interpreter.kind must be 'learned' or 'oracle'");
  if (cfg.stage1.per_class) {
    std::array<std::optional<InterpreterParams>, 3> heads;
    for (int v = 0; v < 3; ++v) {
      const auto p = out_path(cfg, "interpreter_" + std::string(variant_name(static_cast<ConstraintVariant>(v))) + ".ckpt");
      if (fs::exists(p)) heads[static_cast<std::size_t>(v)] = interpreter_from_checkpoint(Checkpoint::load(p.string()));
    }
    return std::make_shared<PerClassInterpreter>(heads);
  }
  const std::string path =
      cfg.interpreter_checkpoint.empty() ? out_path(cfg, "interpreter.ckpt").string() : cfg.interpreter_checkpoint;
  return std::make_shared<LearnedInterpreter>(interpreter_from_checkpoint(Checkpoint::load(path)));
}

std::string agent_path(const RunConfig& cfg, int seed) {
  return out_path(cfg, "agent_seed" + std::to_string(seed) + ".ckpt").string();
}

/// Per-seed rows plus the across-seed medians.
nlohmann::json summarize(const std::vector<MetricsReport>& rows) {
  std::map<std::pair<std::string, int>, std::vector<const MetricsReport*>> groups;
  for (const auto& r : rows) groups[{r.algo, r.h_C}].push_back(&r);
  nlohmann::json out = {{"rows", nlohmann::json::array()}, {"median", nlohmann::json::array()}};
  for (const auto& r : rows) out["rows"].push_back(to_json(r));
  for (const auto& [key, g] : groups) {
    std::vector<double> jr, dc, sr;
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto* r : g) {
      jr.push_back(r->J_R);
      dc.push_back(r->delta_C);
      sr.push_back(r->success_rate);
      seeds.push_back(r->seed);
    }
    out["median"].push_back({{"algo", key.first},
                             {"h_C", key.second},
                             {"J_R", median(jr)},
                             {"delta_C", median(dc)},
                             {"success_rate", median(sr)},
                             {"seeds", seeds}});
  }
  return out;
}

void write_tables(const RunConfig& cfg, const std::string& stem, const std::vector<MetricsReport>& rows) {
  std::ofstream csv(out_path(cfg, stem + "_metrics.csv"));
  write_metrics_csv(csv, rows);
  std::ofstream json(out_path(cfg, stem + "_summary.json"));
  json << summarize(rows).dump(2) << '\n';
  std::cerr << "wrote " << out_path(cfg, stem + "_metrics.csv").string() << '\n';
}

template <typename T>
std::vector<T> flatten(std::vector<std::vector<T>> nested) {
  std::vector<T> out;
  for (auto& v : nested) out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return out;
}

// ---------------------------------------------------------------------------

void cmd_gen_dataset(const RunConfig& cfg) {
  const auto [train, eval] = gen_dataset(cfg.seed, cfg.train_maps, cfg.eval_maps, build_specs(cfg.pool));
  save_manifest(out_path(cfg, "train.manifest").string(), train);
  save_manifest(out_path(cfg, "eval.manifest").string(), eval);
  std::cerr << "wrote " << train.entries.size() << " train and " << eval.entries.size() << " eval entries to "
            << cfg.output_dir << '\n';
}

void cmd_train_interpreter(const RunConfig& cfg) {
  const auto train = load_manifest(manifest_path(cfg, Split::train));
  const Stage1Result res = train_stage1(train, cfg.stage1, cfg.seed);
  nlohmann::json log = {{"mask_loss", res.mask_loss}, {"threshold_loss", res.threshold_loss}};
  if (res.shared) {
    to_checkpoint(*res.shared).save(out_path(cfg, "interpreter.ckpt").string());
  } else {
    for (int v = 0; v < 3; ++v)
      if (const auto& head = res.per_class[static_cast<std::size_t>(v)])
        to_checkpoint(*head).save(
            out_path(cfg, "interpreter_" + std::string(variant_name(static_cast<ConstraintVariant>(v))) + ".ckpt")
                .string());
  }
  std::ofstream(out_path(cfg, "interpreter_log.json")) << log.dump(2) << '\n';
  std::cerr << "interpreter trained: mask loss " << res.mask_loss << ", threshold loss " << res.threshold_loss << '\n';
}

void cmd_train(const RunConfig& cfg) {
  const auto train = load_manifest(manifest_path(cfg, Split::train));
  const auto interpreter = load_interpreter(cfg);
  const int n = static_cast<int>(cfg.seeds.size());
  auto rows = run_indexed(n, cfg.workers, [&](int i) {
    const int seed = cfg.seeds[static_cast<std::size_t>(i)];
    std::ofstream log(out_path(cfg, "train_log_seed" + std::to_string(seed) + ".jsonl"));
    const auto res = safety_training(train, *interpreter, cfg.train, cfg.inputs, cfg.hidden, static_cast<std::uint64_t>(seed),
                                     [&](const UpdateRecord& u) { log << to_json(u).dump() << '\n'; });
    to_checkpoint(res.agent).save(agent_path(cfg, seed));
    auto r = metrics_by_threshold(evaluate_agent(&res.agent, interpreter.get(), train, cfg.train.gen,
                                                 cfg.train.max_steps, cfg.transfer.eval_episodes,
                                                 static_cast<std::uint64_t>(seed)));
    for (auto& m : r) {
      m.algo = std::string(algorithm_name(cfg.train.algo));
      m.split = "train";
      m.seed = static_cast<std::uint64_t>(seed);
    }
    return r;
  });
  write_tables(cfg, "train", flatten(std::move(rows)));
}

void cmd_eval_transfer(const RunConfig& cfg) {
  const auto eval = load_manifest(manifest_path(cfg, Split::eval));
  const auto interpreter = load_interpreter(cfg);
  const auto tc = cfg.transfer_config();
  auto rows = run_indexed(static_cast<int>(cfg.seeds.size()), cfg.workers, [&](int i) {
    const int seed = cfg.seeds[static_cast<std::size_t>(i)];
    const Agent agent = agent_from_checkpoint(Checkpoint::load(agent_path(cfg, seed)));
    return eval_transfer(agent, interpreter.get(), eval, tc, static_cast<std::uint64_t>(seed), "polco");
  });
  write_tables(cfg, "transfer", flatten(std::move(rows)));
}

void cmd_eval_multi(const RunConfig& cfg) {
  const auto eval = load_manifest(manifest_path(cfg, Split::eval));
  const auto interpreter = load_interpreter(cfg);
  std::vector<ConstraintSpec> specs;
  std::vector<std::string> texts;
  const auto& bank = TemplateBank::standard();
  for (const auto& dsl : detail::split_list(cfg.multi_specs, ';')) {
    specs.push_back(parse_constraint(dsl));
    texts.push_back(render_template(specs.back(), bank.ids(variant_of(specs.back()), true).front(), bank).surface);
  }
  std::vector<std::uint64_t> maps;
  for (const auto& e : eval.entries) maps.push_back(e.map_seed);
  auto reports = run_indexed(static_cast<int>(cfg.seeds.size()), cfg.workers, [&](int i) {
    const int seed = cfg.seeds[static_cast<std::size_t>(i)];
    const Agent agent = agent_from_checkpoint(Checkpoint::load(agent_path(cfg, seed)));
    return eval_multi(&agent, interpreter.get(), specs, texts, maps, cfg.train.gen,
                      eval.reward_table(cfg.train.max_steps), cfg.multi_episodes, static_cast<std::uint64_t>(seed));
  });
  std::vector<MetricsReport> rows;
  nlohmann::json per_spec = nlohmann::json::array();
  for (auto& r : reports) {
    r.aggregate.algo = "polco_multi";
    r.aggregate.split = "eval";
    rows.push_back(r.aggregate);
    per_spec.push_back({{"seed", r.aggregate.seed}, {"J_C", r.J_C_per_spec}, {"delta_C", r.delta_C_per_spec}});
  }
  write_tables(cfg, "multi", rows);
  std::ofstream(out_path(cfg, "multi_per_spec.json")) << per_spec.dump(2) << '\n';
}

void cmd_baseline(const RunConfig& cfg) {
  const auto train = load_manifest(manifest_path(cfg, Split::train));
  const auto eval = load_manifest(manifest_path(cfg, Split::eval));
  const auto tc = cfg.transfer_config();
  auto rows = run_indexed(static_cast<int>(cfg.seeds.size()), cfg.workers, [&](int i) {
    return run_baseline(cfg.baseline, train, eval, tc, cfg.hidden,
                        static_cast<std::uint64_t>(cfg.seeds[static_cast<std::size_t>(i)]));
  });
  write_tables(cfg, "baseline_" + std::string(baseline_name(cfg.baseline)), flatten(std::move(rows)));
}

/// Merges every *_metrics.csv under `in` into one table of across-seed medians.
void cmd_report(const std::string& in, const std::string& out) {
  struct Acc {
    std::vector<double> jr, jc, dc, sr;
  };
  std::map<std::tuple<std::string, std::string, int>, Acc> groups;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in))
    if (e.is_regular_file() && e.path().filename().string().ends_with("_metrics.csv")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no *_metrics.csv files under '" + in + "'");
  for (const auto& f : files) {
    std::ifstream csv(f);
    std::string line;
    std::getline(csv, line);
    if (line != metrics_csv_header()) throw std::runtime_error(f.string() + ": unexpected header");
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      const auto cells = detail::split_list(line, ',');
      if (cells.size() != 9) throw std::runtime_error(f.string() + ": malformed row '" + line + "'");
      auto& a = groups[{cells[0], cells[1], std::stoi(cells[2])}];
      a.jr.push_back(std::stod(cells[4]));
      a.jc.push_back(std::stod(cells[5]));
      a.dc.push_back(std::stod(cells[6]));
      a.sr.push_back(std::stod(cells[7]));
    }
  }
  if (auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream o(out);
  o.precision(10);
  o << "algo,split,h_C,n_seeds,J_R,J_C,delta_C,success_rate\n";
  for (const auto& [key, a] : groups)
    o << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << a.jr.size() << ','
      << median(a.jr) << ',' << median(a.jc) << ',' << median(a.dc) << ',' << median(a.sr) << '\n';
  std::cerr << "wrote " << groups.size() << " rows from " << files.size() << " tables to " << out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constraint-conditioned safe RL on a procedurally generated grid world"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<std::string, std::string>> flags;
  auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
                                          help + " (" + key + ")");
  };

  auto* gen = app.add_subcommand("gen-dataset", "write train and eval manifests");
  flag(gen, "--train-maps", "dataset.train_maps", "number of train maps");
  flag(gen, "--eval-maps", "dataset.eval_maps", "number of eval maps");

  auto* interp = app.add_subcommand("train-interpreter", "collect random-policy data and fit the interpreter");
  flag(interp, "--train", "dataset.train_manifest", "train manifest");
  flag(interp, "--trajectories", "interpreter.trajectories", "random-policy trajectories");

  auto* train = app.add_subcommand("train", "train one constraint-conditioned policy per seed");
  flag(train, "--train", "dataset.train_manifest", "train manifest");
  flag(train, "--algo", "train.algo", "pcpo, trpo, penalized_trpo or space");
  flag(train, "--updates", "train.updates", "policy updates");
  flag(train, "--interpreter", "interpreter.kind", "learned or oracle");

  auto* transfer = app.add_subcommand("eval-transfer", "fine-tune on the eval reward table and report metrics");
  flag(transfer, "--eval", "dataset.eval_manifest", "eval manifest");
  flag(transfer, "--fine-tune", "transfer.fine_tune_updates", "fine-tuning updates");
  flag(transfer, "--interpreter", "interpreter.kind", "learned or oracle");

  auto* multi = app.add_subcommand("eval-multi", "evaluate several constraints at once");
  flag(multi, "--eval", "dataset.eval_manifest", "eval manifest");
  flag(multi, "--specs", "multi.specs", "';'-separated constraint DSL");
  flag(multi, "--interpreter", "interpreter.kind", "learned or oracle");

  auto* baseline = app.add_subcommand("baseline", "train and evaluate a baseline");
  flag(baseline, "--kind", "baseline.kind", "random_walk, cf_trpo, cf_pcpo or penalized_trpo");

  for (auto* sub : {gen, interp, train, transfer, multi, baseline}) add_common(sub, common);

  auto* report = app.add_subcommand("report", "merge metric tables into per-algorithm medians");
  std::string report_in, report_out;
  report->add_option("--in", report_in, "directory searched for *_metrics.csv")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "merged CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      cmd_report(report_in, report_out);
      return 0;
    }
    CLI::App* sub = app.get_subcommands().front();
    const RunConfig cfg = resolve(common, flags, sub->get_name());
    if (sub == gen) cmd_gen_dataset(cfg);
    if (sub == interp) cmd_train_interpreter(cfg);
    if (sub == train) cmd_train(cfg);
    if (sub == transfer) cmd_eval_transfer(cfg);
    if (sub == multi) cmd_eval_multi(cfg);
    if (sub == baseline) cmd_baseline(cfg);
  } catch (const std::exception& e) {
    std::cerr << "polco: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
