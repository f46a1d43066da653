#ifndef POLCO_INTERPRETER_HPP_
#define POLCO_INTERPRETER_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polco/checkpoint.hpp"
#include "polco/constraint.hpp"
#include "polco/grid_env.hpp"
#include "polco/param_vector.hpp"
#include "polco/rng.hpp"
#include "polco/text.hpp"

namespace polco {

// ---------------------------------------------------------------------------
// Per-cell features
// ---------------------------------------------------------------------------

/// Distances 0..5 get their own bin; the last bin means ">= 6 or absent".
inline constexpr int kDistanceBins = 7;

/// Binary per-cell feature layout.
struct CellFeatureLayout {
  static constexpr int kKindOneHot = 0;                                // 8: entity kind of the cell
  static constexpr int kDistance = kKindOneHot + kNumEntityKinds;      // 3 x 7: distance bin to each cost kind
  static constexpr int kKindVisited = kDistance + 3 * kDistanceBins;   // 3 x 3: cell is cost kind k and j visited
  static constexpr int kVisited = kKindVisited + 9;                    // 3: visited indicator
  static constexpr int kConstant = kVisited + 3;                       // 1
  static constexpr int kSize = kConstant + 1;
  static constexpr int kMaxActive = 12;
};

struct CellFeatures {
  std::array<std::uint8_t, CellFeatureLayout::kMaxActive> index{};
  std::uint8_t count = 0;

  void push(int i) { index[count++] = static_cast<std::uint8_t>(i); }
};

using WindowFeatures = std::array<CellFeatures, kWindowCells>;

/// Manhattan distance from every window cell to the nearest cell of `kind`
/// inside the window (kWindow * 2 when there is none).
inline std::array<int, kWindowCells> window_distance(const Observation& obs, EntityKind kind) {
  std::array<int, kWindowCells> dist;
  dist.fill(2 * kWindow);
  for (int i = 0; i < kWindow; ++i)
    for (int j = 0; j < kWindow; ++j) {
      if (obs.at(i, j) != kind) continue;
      for (int p = 0; p < kWindow; ++p)
        for (int q = 0; q < kWindow; ++q) {
          auto& d = dist[static_cast<std::size_t>(window_index(p, q))];
          d = std::min(d, std::abs(p - i) + std::abs(q - j));
        }
    }
  return dist;
}

inline WindowFeatures window_features(const Observation& obs, const VisitedIndicator& visited) {
  using L = CellFeatureLayout;
  std::array<std::array<int, kWindowCells>, 3> dist;
  for (std::size_t k = 0; k < 3; ++k) dist[k] = window_distance(obs, kCostKinds[k]);
  WindowFeatures out;
  for (int c = 0; c < kWindowCells; ++c) {
    auto& f = out[static_cast<std::size_t>(c)];
    const EntityKind kind = obs.cells[static_cast<std::size_t>(c)];
    f.push(L::kKindOneHot + static_cast<int>(kind));
    for (int k = 0; k < 3; ++k) {
      const int d = std::min(dist[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)], kDistanceBins - 1);
      f.push(L::kDistance + k * kDistanceBins + d);
    }
    const int ck = cost_index(kind);
    for (int j = 0; j < 3; ++j) {
      if (!visited[static_cast<std::size_t>(j)]) continue;
      if (ck >= 0) f.push(L::kKindVisited + ck * 3 + j);
      f.push(L::kVisited + j);
    }
    f.push(L::kConstant);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct InterpreterFeatureConfig {
  int embed_dim = 16;
  int mask_hidden = 32;
  int threshold_hidden = 16;
  friend bool operator==(const InterpreterFeatureConfig&, const InterpreterFeatureConfig&) = default;
};

/// Mean-of-embeddings text encoder followed by one tanh layer, stored in
/// segments `<prefix>.embed`, `<prefix>.hidden_w`, `<prefix>.hidden_b`.
class TextEncoder {
 public:
  struct Encoding {
    std::vector<int> ids;  // known tokens only
    Vector mean;           // embed_dim
    Vector hidden;         // tanh output
  };

  TextEncoder(std::string prefix, int vocab, int embed, int hidden)
      : prefix_(std::move(prefix)), vocab_(vocab), embed_(embed), hidden_(hidden) {}

  void add_segments(ParamVector& p) const {
    p.add_segment(prefix_ + ".embed", static_cast<Eigen::Index>(vocab_) * embed_);
    p.add_segment(prefix_ + ".hidden_w", static_cast<Eigen::Index>(hidden_) * embed_);
    p.add_segment(prefix_ + ".hidden_b", hidden_);
  }

  void init_random(ParamVector& p, Rng& rng) const {
    for (auto& v : p.segment(prefix_ + ".embed")) v = rng.normal();
    const double scale = 1.0 / std::sqrt(static_cast<double>(embed_));
    for (auto& v : p.segment(prefix_ + ".hidden_w")) v = scale * rng.normal();
  }

  Encoding encode(const ParamVector& p, const std::vector<int>& token_ids) const {
    Encoding enc;
    for (int id : token_ids)
      if (id != TokenVocab::kUnk && id < vocab_) enc.ids.push_back(id);
    enc.mean = Vector::Zero(embed_);
    const auto embed = p.matrix(prefix_ + ".embed", vocab_, embed_);
    for (int id : enc.ids) enc.mean += embed.row(id).transpose();
    if (!enc.ids.empty()) enc.mean /= static_cast<double>(enc.ids.size());
    const auto w = p.matrix(prefix_ + ".hidden_w", hidden_, embed_);
    enc.hidden = (w * enc.mean + p.segment(prefix_ + ".hidden_b")).array().tanh().matrix();
    return enc;
  }

  /// Accumulates d(loss)/d(params) into `grad` (same layout as the params).
  void backward(const ParamVector& p, const Encoding& enc, const Vector& d_hidden, ParamVector& grad) const {
    const Vector d_pre = d_hidden.array() * (1.0 - enc.hidden.array().square());
    grad.matrix(prefix_ + ".hidden_w", hidden_, embed_) += d_pre * enc.mean.transpose();
    grad.segment(prefix_ + ".hidden_b") += d_pre;
    if (enc.ids.empty()) return;
    const Vector d_mean = p.matrix(prefix_ + ".hidden_w", hidden_, embed_).transpose() * d_pre;
    auto g_embed = grad.matrix(prefix_ + ".embed", vocab_, embed_);
    const double inv = 1.0 / static_cast<double>(enc.ids.size());
    for (int id : enc.ids) g_embed.row(id) += inv * d_mean.transpose();
  }

  int hidden() const { return hidden_; }

 private:
  std::string prefix_;
  int vocab_;
  int embed_;
  int hidden_;
};

/// Mask head parameters (Theta_1) and threshold head parameters (Theta_2),
/// trained independently.
struct InterpreterParams {
  TokenVocab vocab;
  InterpreterFeatureConfig config;
  ParamVector mask;
  ParamVector threshold;

  TextEncoder mask_encoder() const { return {"mask", vocab.size(), config.embed_dim, config.mask_hidden}; }
  TextEncoder threshold_encoder() const {
    return {"threshold", vocab.size(), config.embed_dim, config.threshold_hidden};
  }

  /// All-zero parameters for the given vocabulary.
  static InterpreterParams zeros(TokenVocab vocab, InterpreterFeatureConfig config = {}) {
    InterpreterParams p{std::move(vocab), config, {}, {}};
    p.mask_encoder().add_segments(p.mask);
    p.mask.add_segment("mask.bilinear", static_cast<Eigen::Index>(config.mask_hidden) * CellFeatureLayout::kSize);
    p.mask.add_segment("mask.cell", CellFeatureLayout::kSize);
    p.threshold_encoder().add_segments(p.threshold);
    p.threshold.add_segment("threshold.out_w", config.threshold_hidden);
    p.threshold.add_segment("threshold.out_b", 1);
    return p;
  }

  static InterpreterParams random(TokenVocab vocab, std::uint64_t seed, InterpreterFeatureConfig config = {}) {
    InterpreterParams p = zeros(std::move(vocab), config);
    Rng rng(derive_seed(seed, label_hash("interpreter-init")));
    p.mask_encoder().init_random(p.mask, rng);
    for (auto& v : p.mask.segment("mask.bilinear")) v = 0.1 * rng.normal();
    p.threshold_encoder().init_random(p.threshold, rng);
    for (auto& v : p.threshold.segment("threshold.out_w")) v = 0.1 * rng.normal();
    return p;
  }

  bool all_finite() const { return mask.all_finite() && threshold.all_finite(); }

  friend bool operator==(const InterpreterParams&, const InterpreterParams&) = default;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Per-cell weight vector for one constraint text: W^T t + u.
inline Vector mask_text_weights(const InterpreterParams& p, const TextEncoder::Encoding& enc) {
  const auto bilinear = p.mask.matrix("mask.bilinear", p.config.mask_hidden, CellFeatureLayout::kSize);
  return bilinear.transpose() * enc.hidden + p.mask.segment("mask.cell");
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline RealMask mask_probabilities_from_weights(const Vector& w, const WindowFeatures& features) {
  RealMask out;
  for (std::size_t c = 0; c < out.size(); ++c) {
    double logit = 0.0;
    for (int k = 0; k < features[c].count; ++k) logit += w[features[c].index[static_cast<std::size_t>(k)]];
    out[c] = sigmoid(logit);
  }
  return out;
}

inline RealMask predict_mask(const InterpreterParams& p, const ConstraintText& text, const Observation& obs,
                             const VisitedIndicator& visited) {
  const auto enc = p.mask_encoder().encode(p.mask, p.vocab.encode(text.surface));
  return mask_probabilities_from_weights(mask_text_weights(p, enc), window_features(obs, visited));
}

inline double threshold_from_encoding(const InterpreterParams& p, const TextEncoder::Encoding& enc) {
  return p.threshold.segment("threshold.out_w").dot(enc.hidden) + p.threshold.segment("threshold.out_b")[0];
}

inline double predict_threshold(const InterpreterParams& p, const ConstraintText& text) {
  return threshold_from_encoding(p, p.threshold_encoder().encode(p.threshold, p.vocab.encode(text.surface)));
}

inline BinaryMask binarize(const RealMask& probabilities, double cut = 0.5) {
  BinaryMask m{};
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = probabilities[i] >= cut ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Interpreter handles
// ---------------------------------------------------------------------------

/// An interpreter bound to one constraint.
class InterpreterHandle {
 public:
  virtual ~InterpreterHandle() = default;
  virtual RealMask mask_probabilities(const Observation& obs, const VisitedIndicator& visited) const = 0;
  virtual double threshold() const = 0;
};

class Interpreter {
 public:
  virtual ~Interpreter() = default;
  virtual std::unique_ptr<InterpreterHandle> bind(const ConstraintSpec& spec, const ConstraintText& text) const = 0;
};

class LearnedHandle final : public InterpreterHandle {
 public:
  LearnedHandle(const InterpreterParams& p, const ConstraintText& text) {
    const auto ids = p.vocab.encode(text.surface);
    weights_ = mask_text_weights(p, p.mask_encoder().encode(p.mask, ids));
    threshold_ = threshold_from_encoding(p, p.threshold_encoder().encode(p.threshold, ids));
  }

  RealMask mask_probabilities(const Observation& obs, const VisitedIndicator& visited) const override {
    return mask_probabilities_from_weights(weights_, window_features(obs, visited));
  }
  double threshold() const override { return threshold_; }

 private:
  Vector weights_;
  double threshold_ = 0.0;
};

/// Reads only the constraint text; the ConstraintSpec passed to bind() is ignored.
class LearnedInterpreter final : public Interpreter {
 public:
  explicit LearnedInterpreter(InterpreterParams params) : params_(std::move(params)) {}

  std::unique_ptr<InterpreterHandle> bind(const ConstraintSpec&, const ConstraintText& text) const override {
    return std::make_unique<LearnedHandle>(params_, text);
  }

  const InterpreterParams& params() const { return params_; }

 private:
  InterpreterParams params_;
};

/// Uses one set of parameters per constraint variant, routed by the ConstraintSpec variant.
class PerClassInterpreter final : public Interpreter {
 public:
  explicit PerClassInterpreter(std::array<std::optional<InterpreterParams>, 3> heads) : heads_(std::move(heads)) {}

  std::unique_ptr<InterpreterHandle> bind(const ConstraintSpec& spec, const ConstraintText& text) const override {
    const auto& head = heads_[spec.index()];
    if (!head) throw std::invalid_argument("no interpreter trained for variant " + std::string(variant_name(variant_of(spec))));
    return std::make_unique<LearnedHandle>(*head, text);
  }

 private:
  std::array<std::optional<InterpreterParams>, 3> heads_;
};

inline KindSet kinds_from_indicator(const VisitedIndicator& v) {
  KindSet s;
  for (std::size_t i = 0; i < 3; ++i)
    if (v[i]) s.insert(kCostKinds[i]);
  return s;
}

/// Returns the true mask and threshold for a spec.
class OracleHandle final : public InterpreterHandle {
 public:
  explicit OracleHandle(ConstraintSpec spec) : spec_(spec) {}

  RealMask mask_probabilities(const Observation& obs, const VisitedIndicator& visited) const override {
    const BinaryMask m = ground_truth_mask(obs, spec_, kinds_from_indicator(visited));
    RealMask out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i];
    return out;
  }
  double threshold() const override { return threshold_of(spec_); }

 private:
  ConstraintSpec spec_;
};

class OracleInterpreter final : public Interpreter {
 public:
  std::unique_ptr<InterpreterHandle> bind(const ConstraintSpec& spec, const ConstraintText&) const override {
    return std::make_unique<OracleHandle>(spec);
  }
};

inline std::unique_ptr<InterpreterHandle> oracle_interpreter(const ConstraintSpec& spec) {
  return std::make_unique<OracleHandle>(spec);
}

// ---------------------------------------------------------------------------
// Stage-1 data
// ---------------------------------------------------------------------------

/// A constraint paired with one of its surface forms.
struct ConstraintRecord {
  ConstraintSpec spec;
  ConstraintText text;
};

struct InterpreterExample {
  std::uint32_t constraint = 0;  // index into InterpreterDataset::constraints
  std::uint64_t map_seed = 0;
  std::uint32_t timestep = 0;
  Observation obs;
  VisitedIndicator visited{};
  BinaryMask target_mask{};
  double target_threshold = 0.0;
};

struct InterpreterDataset {
  std::vector<ConstraintRecord> constraints;
  std::vector<InterpreterExample> examples;

  const ConstraintText& text_of(const InterpreterExample& e) const { return constraints[e.constraint].text; }
  const ConstraintSpec& spec_of(const InterpreterExample& e) const { return constraints[e.constraint].spec; }
};

struct InterpreterDataConfig {
  std::vector<GenConfig> maps{GenConfig{}};  // one is drawn uniformly per trajectory
  int max_steps = 200;
};

/// Uniform-random exploration; one example per visited timestep.
inline InterpreterDataset collect_interpreter_data(const InterpreterDataConfig& cfg,
                                                   const std::vector<ConstraintRecord>& pool, int n_trajectories,
                                                   std::uint64_t seed,
                                                   const std::vector<std::uint64_t>& map_seeds = {}) {
  if (n_trajectories < 1) throw std::invalid_argument("n_trajectories must be at least 1");
  if (pool.empty()) throw std::invalid_argument("constraint pool is empty");
  if (cfg.maps.empty()) throw std::invalid_argument("no map configurations");
  InterpreterDataset data;
  data.constraints = pool;
  Rng rng(derive_seed(seed, label_hash("stage1")));
  const RewardTable table = RewardTable::train(cfg.max_steps);
  for (int n = 0; n < n_trajectories; ++n) {
    const GenConfig& gen = cfg.maps[rng.below(cfg.maps.size())];
    const std::uint64_t map_seed = map_seeds.empty() ? derive_seed(seed, static_cast<std::uint64_t>(n))
                                                     : map_seeds[rng.below(map_seeds.size())];
    const auto ci = static_cast<std::uint32_t>(rng.below(pool.size()));
    const ConstraintSpec& spec = pool[ci].spec;
    const double h = threshold_of(spec);
    EpisodeState state = start_episode(generate_map(map_seed, gen));
    while (!state.done) {
      InterpreterExample ex;
      ex.constraint = ci;
      ex.map_seed = map_seed;
      ex.timestep = static_cast<std::uint32_t>(state.step_count);
      ex.obs = observe(state);
      ex.visited = visited_indicator(state.visited);
      ex.target_mask = ground_truth_mask(ex.obs, spec, state.visited);
      ex.target_threshold = h;
      data.examples.push_back(ex);
      advance(state, static_cast<Action>(rng.below(kNumActions)), table);
    }
  }
  return data;
}

/// Tab-separated record per example:
/// seed, dsl, template, t, obs, visited, mask, h, text.
inline void write_interpreter_dataset(std::ostream& out, const InterpreterDataset& data) {
  for (const auto& e : data.examples) {
    const auto& rec = data.constraints[e.constraint];
    std::string visited, mask;
    for (auto v : e.visited) visited.push_back(v ? '1' : '0');
    for (auto v : e.target_mask) mask.push_back(v ? '1' : '0');
    std::ostringstream h;
    h << std::hexfloat << e.target_threshold;
    out << "seed=" << e.map_seed << "\tdsl=" << to_dsl(rec.spec) << "\ttemplate="
        << (rec.text.template_id ? std::to_string(*rec.text.template_id) : "-") << "\tt=" << e.timestep
        << "\tobs=" << serialize_observation(e.obs) << "\tvisited=" << visited << "\tmask=" << mask
        << "\th=" << h.str() << "\ttext=" << rec.text.surface << '\n';
  }
}

inline InterpreterDataset read_interpreter_dataset(std::istream& in) {
  InterpreterDataset data;
  std::map<std::string, std::uint32_t> index;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::map<std::string, std::string> f;
    std::istringstream fields(line);
    for (std::string kv; std::getline(fields, kv, '\t');) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("malformed dataset field '" + kv + "'");
      f[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    for (const char* k : {"seed", "dsl", "template", "t", "obs", "visited", "mask", "h", "text"})
      if (!f.count(k)) throw std::invalid_argument(std::string("dataset record missing '") + k + "'");
    const std::string key = f["dsl"] + '\t' + f["template"] + '\t' + f["text"];
    auto [it, inserted] = index.try_emplace(key, static_cast<std::uint32_t>(data.constraints.size()));
    if (inserted) {
      ConstraintText text{f["text"], std::nullopt};
      if (f["template"] != "-") text.template_id = std::stoi(f["template"]);
      data.constraints.push_back({parse_constraint(f["dsl"]), text});
    }
    InterpreterExample e;
    e.constraint = it->second;
    e.map_seed = std::stoull(f["seed"]);
    e.timestep = static_cast<std::uint32_t>(std::stoul(f["t"]));
    e.obs = parse_observation(f["obs"]);
    if (f["visited"].size() != 3 || f["mask"].size() != kWindowCells) throw std::invalid_argument("bad mask fields");
    for (std::size_t i = 0; i < 3; ++i) e.visited[i] = f["visited"][i] == '1';
    for (std::size_t i = 0; i < kWindowCells; ++i) e.target_mask[i] = f["mask"][i] == '1';
    e.target_threshold = std::strtod(f["h"].c_str(), nullptr);
    data.examples.push_back(e);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Losses and gradients
// ---------------------------------------------------------------------------

/// Mean per-cell binary cross-entropy of one example, from logits.
inline double bce_from_logit(double logit, double y) {
  // softplus(logit) - y * logit, computed stably
  const double softplus = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return softplus - y * logit;
}

/// Mean mask loss over `examples`; adds its gradient w.r.t. Theta_1 into `grad` when non-null.
inline double mask_loss(const InterpreterParams& p, const InterpreterDataset& data,
                        std::span<const std::size_t> examples, ParamVector* grad,
                        const std::vector<std::vector<int>>* token_ids = nullptr) {
  if (examples.empty()) return 0.0;
  const TextEncoder encoder = p.mask_encoder();
  const int hidden = p.config.mask_hidden;
  const auto bilinear = p.mask.matrix("mask.bilinear", hidden, CellFeatureLayout::kSize);
  const double scale = 1.0 / static_cast<double>(examples.size());
  double total = 0.0;
  for (std::size_t idx : examples) {
    const auto& ex = data.examples[idx];
    const auto enc = encoder.encode(p.mask, token_ids ? (*token_ids)[ex.constraint]
                                                      : p.vocab.encode(data.text_of(ex).surface));
    const Vector w = mask_text_weights(p, enc);
    const auto features = window_features(ex.obs, ex.visited);
    Vector dw = Vector::Zero(CellFeatureLayout::kSize);
    double loss = 0.0;
    for (std::size_t c = 0; c < kWindowCells; ++c) {
      double logit = 0.0;
      for (int k = 0; k < features[c].count; ++k) logit += w[features[c].index[static_cast<std::size_t>(k)]];
      const double y = ex.target_mask[c];
      loss += bce_from_logit(logit, y);
      const double d = (sigmoid(logit) - y) / kWindowCells;
      for (int k = 0; k < features[c].count; ++k) dw[features[c].index[static_cast<std::size_t>(k)]] += d;
    }
    total += loss / kWindowCells;
    if (grad) {
      dw *= scale;
      grad->matrix("mask.bilinear", hidden, CellFeatureLayout::kSize) += enc.hidden * dw.transpose();
      grad->segment("mask.cell") += dw;
      encoder.backward(p.mask, enc, bilinear * dw, *grad);
    }
  }
  return total * scale;
}

/// Mean squared threshold error; adds its gradient w.r.t. Theta_2 into `grad` when non-null.
inline double threshold_loss(const InterpreterParams& p, const InterpreterDataset& data,
                             std::span<const std::size_t> examples, ParamVector* grad,
                             const std::vector<std::vector<int>>* token_ids = nullptr) {
  if (examples.empty()) return 0.0;
  const TextEncoder encoder = p.threshold_encoder();
  const double scale = 1.0 / static_cast<double>(examples.size());
  double total = 0.0;
  for (std::size_t idx : examples) {
    const auto& ex = data.examples[idx];
    const auto enc = encoder.encode(p.threshold, token_ids ? (*token_ids)[ex.constraint]
                                                           : p.vocab.encode(data.text_of(ex).surface));
    const double err = threshold_from_encoding(p, enc) - ex.target_threshold;
    total += err * err;
    if (grad) {
      const double d = 2.0 * err * scale;
      grad->segment("threshold.out_w") += d * enc.hidden;
      grad->segment("threshold.out_b")[0] += d;
      encoder.backward(p.threshold, enc, d * p.threshold.segment("threshold.out_w"), *grad);
    }
  }
  return total * scale;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam over a flat parameter vector.
class Adam {
 public:
  explicit Adam(Eigen::Index n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

  void step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  int t_ = 0;
};

struct InterpreterHyper {
  double lr = 1e-3;
  int epochs = 4;
  int batch_size = 64;
  double token_dropout = 0.2;  // per-minibatch probability of dropping each token
  std::uint64_t seed = 0;
  InterpreterFeatureConfig features;
};

struct TrainedInterpreter {
  InterpreterParams params;
  double mask_loss = 0.0;       // mean over the last epoch's minibatches
  double threshold_loss = 0.0;  // mean over the last epoch's minibatches
  std::vector<double> mask_loss_per_epoch;
  std::vector<double> threshold_loss_per_epoch;
};

inline TokenVocab vocab_for(const InterpreterDataset& data) {
  std::vector<std::string> texts;
  for (const auto& c : data.constraints) texts.push_back(c.text.surface);
  return TokenVocab::build(texts);
}

/// Minimizes mean per-cell BCE (Theta_1) and threshold MSE (Theta_2) with Adam.
inline TrainedInterpreter train_interpreter(const InterpreterDataset& data, const InterpreterHyper& hyper,
                                            std::optional<TokenVocab> vocab = std::nullopt) {
  if (data.examples.empty()) throw std::invalid_argument("interpreter dataset is empty");
  TrainedInterpreter out{InterpreterParams::random(vocab ? *vocab : vocab_for(data), hyper.seed, hyper.features),
                         0.0, 0.0, {}, {}};
  auto& p = out.params;
  std::vector<std::vector<int>> token_ids;
  for (const auto& c : data.constraints) token_ids.push_back(p.vocab.encode(c.text.surface));
  std::vector<std::vector<int>> dropped(token_ids.size());
  Adam mask_opt(p.mask.size(), hyper.lr);
  Adam threshold_opt(p.threshold.size(), hyper.lr);
  Rng rng(derive_seed(hyper.seed, label_hash("interpreter-shuffle")));
  std::vector<std::size_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(std::max(1, hyper.batch_size));
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double mask_sum = 0.0, threshold_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
      const auto* ids = &token_ids;
      if (hyper.token_dropout > 0.0) {
        for (std::size_t c = 0; c < token_ids.size(); ++c) {
          dropped[c].clear();
          for (int id : token_ids[c])
            if (rng.uniform() >= hyper.token_dropout) dropped[c].push_back(id);
          if (dropped[c].empty() && !token_ids[c].empty())
            dropped[c].push_back(token_ids[c][rng.below(token_ids[c].size())]);
        }
        ids = &dropped;
      }
      ParamVector g1 = p.mask.zeros_like();
      ParamVector g2 = p.threshold.zeros_like();
      const double l1 = mask_loss(p, data, idx, &g1, ids);
      const double l2 = threshold_loss(p, data, idx, &g2, ids);
      if (!std::isfinite(l1) || !std::isfinite(l2) || !g1.all_finite() || !g2.all_finite()) {
        std::ostringstream msg;
        msg << "non-finite interpreter loss at epoch " << epoch << ", batch " << batches << ": mask=" << l1
            << " threshold=" << l2;
        throw TrainingError(msg.str());
      }
      mask_opt.step(p.mask.values(), g1.values());
      threshold_opt.step(p.threshold.values(), g2.values());
      mask_sum += l1;
      threshold_sum += l2;
      ++batches;
    }
    out.mask_loss_per_epoch.push_back(mask_sum / static_cast<double>(batches));
    out.threshold_loss_per_epoch.push_back(threshold_sum / static_cast<double>(batches));
  }
  if (!out.mask_loss_per_epoch.empty()) {
    out.mask_loss = out.mask_loss_per_epoch.back();
    out.threshold_loss = out.threshold_loss_per_epoch.back();
  }
  return out;
}

/// One interpreter per constraint variant, each trained only on that variant's examples.
inline std::array<std::optional<InterpreterParams>, 3> train_interpreter_per_class(const InterpreterDataset& data,
                                                                                   const InterpreterHyper& hyper) {
  std::array<std::optional<InterpreterParams>, 3> heads;
  for (std::size_t v = 0; v < 3; ++v) {
    InterpreterDataset subset;
    subset.constraints = data.constraints;
    for (const auto& e : data.examples)
      if (data.spec_of(e).index() == v) subset.examples.push_back(e);
    if (subset.examples.empty()) continue;
    heads[v] = train_interpreter(subset, hyper).params;
  }
  return heads;
}

struct InterpreterQuality {
  double cell_accuracy = 0.0;
  double threshold_mse = 0.0;
  double mask_loss = 0.0;
  std::size_t examples = 0;
};

inline InterpreterQuality evaluate_interpreter(const Interpreter& interpreter, const InterpreterDataset& data) {
  InterpreterQuality q;
  std::vector<std::unique_ptr<InterpreterHandle>> handles;
  for (const auto& c : data.constraints) handles.push_back(interpreter.bind(c.spec, c.text));
  std::size_t correct = 0;
  for (const auto& e : data.examples) {
    const auto& h = *handles[e.constraint];
    const RealMask prob = h.mask_probabilities(e.obs, e.visited);
    for (std::size_t c = 0; c < kWindowCells; ++c) {
      if ((prob[c] >= 0.5 ? 1 : 0) == e.target_mask[c]) ++correct;
      const double pc = std::clamp(prob[c], 1e-12, 1.0 - 1e-12);
      q.mask_loss -= e.target_mask[c] ? std::log(pc) : std::log(1.0 - pc);
    }
    const double err = h.threshold() - e.target_threshold;
    q.threshold_mse += err * err;
  }
  q.examples = data.examples.size();
  if (q.examples > 0) {
    const double n = static_cast<double>(q.examples);
    q.cell_accuracy = static_cast<double>(correct) / (n * kWindowCells);
    q.threshold_mse /= n;
    q.mask_loss /= n * kWindowCells;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline Checkpoint to_checkpoint(const InterpreterParams& p) {
  Checkpoint c;
  c.kind = "interpreter";
  c.meta["embed_dim"] = std::to_string(p.config.embed_dim);
  c.meta["mask_hidden"] = std::to_string(p.config.mask_hidden);
  c.meta["threshold_hidden"] = std::to_string(p.config.threshold_hidden);
  c.meta["mask_params"] = std::to_string(p.mask.size());
  c.vocab = p.vocab.tokens();
  // Theta_1 and Theta_2 share one segment table; "mask_params" marks the split.
  for (const auto& s : p.mask.segments()) c.params.add_segment(s.name, s.length);
  for (const auto& s : p.threshold.segments()) c.params.add_segment(s.name, s.length);
  c.params.values() << p.mask.values(), p.threshold.values();
  return c;
}

inline InterpreterParams interpreter_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "interpreter") throw CheckpointError("checkpoint kind is '" + c.kind + "', expected 'interpreter'");
  InterpreterFeatureConfig cfg;
  try {
    cfg.embed_dim = std::stoi(c.meta.at("embed_dim"));
    cfg.mask_hidden = std::stoi(c.meta.at("mask_hidden"));
    cfg.threshold_hidden = std::stoi(c.meta.at("threshold_hidden"));
  } catch (const std::exception&) {
    throw CheckpointError("interpreter checkpoint is missing feature config");
  }
  InterpreterParams p = InterpreterParams::zeros(TokenVocab::from_tokens(c.vocab), cfg);
  if (p.mask.size() + p.threshold.size() != c.params.size()) throw CheckpointError("interpreter shape mismatch");
  for (const auto& s : p.mask.segments()) p.mask.segment(s.name) = c.params.segment(s.name);
  for (const auto& s : p.threshold.segments()) p.threshold.segment(s.name) = c.params.segment(s.name);
  return p;
}

}  // namespace polco

#endif  // POLCO_INTERPRETER_HPP_
