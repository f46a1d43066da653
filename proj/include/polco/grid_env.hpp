#ifndef POLCO_GRID_ENV_HPP_
#define POLCO_GRID_ENV_HPP_

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "polco/rng.hpp"

namespace polco {

enum class EntityKind : std::uint8_t { empty, wall, ball, box, key, lava, water, grass };

inline constexpr int kNumEntityKinds = 8;
inline constexpr std::array<EntityKind, 3> kRewardKinds{EntityKind::ball, EntityKind::box,
                                                        EntityKind::key};
inline constexpr std::array<EntityKind, 3> kCostKinds{EntityKind::lava, EntityKind::water,
                                                      EntityKind::grass};

constexpr bool is_reward_entity(EntityKind k) {
  return k == EntityKind::ball || k == EntityKind::box || k == EntityKind::key;
}

constexpr bool is_cost_entity(EntityKind k) {
  return k == EntityKind::lava || k == EntityKind::water || k == EntityKind::grass;
}

/// Position of a cost kind inside kCostKinds, or -1.
constexpr int cost_index(EntityKind k) {
  switch (k) {
    case EntityKind::lava: return 0;
    case EntityKind::water: return 1;
    case EntityKind::grass: return 2;
    default: return -1;
  }
}

/// Position of a reward kind inside kRewardKinds, or -1.
constexpr int reward_index(EntityKind k) {
  switch (k) {
    case EntityKind::ball: return 0;
    case EntityKind::box: return 1;
    case EntityKind::key: return 2;
    default: return -1;
  }
}

inline constexpr std::array<std::string_view, kNumEntityKinds> kEntityNames{
    "empty", "wall", "ball", "box", "key", "lava", "water", "grass"};
inline constexpr std::array<char, kNumEntityKinds> kEntityChars{'.', 'W', 'B', 'X',
                                                                'K', 'L', '~', 'G'};

constexpr std::string_view entity_name(EntityKind k) {
  return kEntityNames[static_cast<std::size_t>(k)];
}

inline std::optional<EntityKind> entity_from_name(std::string_view name) {
  for (int i = 0; i < kNumEntityKinds; ++i) {
    if (kEntityNames[i] == name) return static_cast<EntityKind>(i);
  }
  return std::nullopt;
}

constexpr char entity_char(EntityKind k) { return kEntityChars[static_cast<std::size_t>(k)]; }

inline std::optional<EntityKind> entity_from_char(char c) {
  for (int i = 0; i < kNumEntityKinds; ++i) {
    if (kEntityChars[i] == c) return static_cast<EntityKind>(i);
  }
  return std::nullopt;
}

/// Small set of entity kinds, one bit per kind.
class KindSet {
 public:
  constexpr KindSet() = default;

  constexpr bool contains(EntityKind k) const { return (bits_ >> static_cast<int>(k)) & 1U; }
  constexpr void insert(EntityKind k) { bits_ |= static_cast<std::uint8_t>(1U << static_cast<int>(k)); }
  constexpr void erase(EntityKind k) { bits_ &= static_cast<std::uint8_t>(~(1U << static_cast<int>(k))); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool subset_of(KindSet other) const { return (bits_ & ~other.bits_) == 0; }

  friend constexpr bool operator==(KindSet, KindSet) = default;

 private:
  std::uint8_t bits_ = 0;
};

/// Binary indicator over kCostKinds (lava, water, grass).
using VisitedIndicator = std::array<std::uint8_t, 3>;

inline VisitedIndicator visited_indicator(KindSet visited) {
  VisitedIndicator v{};
  for (std::size_t i = 0; i < kCostKinds.size(); ++i) v[i] = visited.contains(kCostKinds[i]) ? 1 : 0;
  return v;
}

struct Coord {
  int row = 0;
  int col = 0;
  friend constexpr auto operator<=>(const Coord&, const Coord&) = default;
};

constexpr int manhattan(Coord a, Coord b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col); }

enum class Action : std::uint8_t { up, down, left, right };
inline constexpr int kNumActions = 4;

constexpr Coord action_delta(Action a) {
  switch (a) {
    case Action::up: return {-1, 0};
    case Action::down: return {1, 0};
    case Action::left: return {0, -1};
    case Action::right: return {0, 1};
  }
  return {0, 0};
}

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EpisodeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Square world; the outermost ring is always wall.
class GridMap {
 public:
  GridMap() = default;
  GridMap(int size, std::uint64_t seed)
      : size_(size), seed_(seed), cells_(static_cast<std::size_t>(size * size), EntityKind::empty) {
    for (int i = 0; i < size; ++i) {
      set({0, i}, EntityKind::wall);
      set({size - 1, i}, EntityKind::wall);
      set({i, 0}, EntityKind::wall);
      set({i, size - 1}, EntityKind::wall);
    }
  }

  int size() const { return size_; }
  std::uint64_t seed() const { return seed_; }
  Coord agent_start() const { return agent_start_; }
  void set_agent_start(Coord c) { agent_start_ = c; }

  bool in_bounds(Coord c) const { return c.row >= 0 && c.col >= 0 && c.row < size_ && c.col < size_; }
  bool interior(Coord c) const { return c.row > 0 && c.col > 0 && c.row < size_ - 1 && c.col < size_ - 1; }

  EntityKind at(Coord c) const { return cells_[index(c)]; }
  void set(Coord c, EntityKind k) { cells_[index(c)] = k; }

  /// Cells holding `kind`, in row-major order.
  std::vector<Coord> cells_of(EntityKind kind) const {
    std::vector<Coord> out;
    for (int r = 0; r < size_; ++r)
      for (int c = 0; c < size_; ++c)
        if (at({r, c}) == kind) out.push_back({r, c});
    return out;
  }

  friend bool operator==(const GridMap&, const GridMap&) = default;

 private:
  std::size_t index(Coord c) const { return static_cast<std::size_t>(c.row * size_ + c.col); }

  int size_ = 0;
  std::uint64_t seed_ = 0;
  Coord agent_start_{};
  std::vector<EntityKind> cells_;
};

struct GenConfig {
  int grid_size = 13;
  std::vector<EntityKind> cost_kinds{EntityKind::lava, EntityKind::water, EntityKind::grass};
  int cells_per_cost_kind = 6;
};

/// Places one of each reward entity, `cells_per_cost_kind` cells of each
/// requested cost kind and the agent start on distinct interior cells.
inline GridMap generate_map(std::uint64_t seed, const GenConfig& cfg) {
  if (cfg.grid_size < 5) throw PlacementError("grid_size must be at least 5");
  if (cfg.cells_per_cost_kind < 0) throw PlacementError("cells_per_cost_kind must be non-negative");
  for (EntityKind k : cfg.cost_kinds) {
    if (!is_cost_entity(k)) throw PlacementError("not a cost entity: " + std::string(entity_name(k)));
  }
  std::vector<EntityKind> kinds = cfg.cost_kinds;
  std::sort(kinds.begin(), kinds.end());
  if (std::adjacent_find(kinds.begin(), kinds.end()) != kinds.end()) {
    throw PlacementError("duplicate cost kind in gen config");
  }

  const int inner = cfg.grid_size - 2;
  const std::size_t capacity = static_cast<std::size_t>(inner * inner);
  const std::size_t needed =
      kRewardKinds.size() + kinds.size() * static_cast<std::size_t>(cfg.cells_per_cost_kind) + 1;
  if (needed > capacity) {
    throw PlacementError("placement infeasible: " + std::to_string(needed) + " cells needed, " +
                         std::to_string(capacity) + " interior cells available");
  }

  GridMap map(cfg.grid_size, seed);
  std::vector<Coord> free;
  free.reserve(capacity);
  for (int r = 1; r <= inner; ++r)
    for (int c = 1; c <= inner; ++c) free.push_back({r, c});

  Rng rng(derive_seed(seed, label_hash("map")));
  rng.shuffle(free);
  std::size_t next = 0;
  for (EntityKind k : kRewardKinds) map.set(free[next++], k);
  for (EntityKind k : cfg.cost_kinds)
    for (int i = 0; i < cfg.cells_per_cost_kind; ++i) map.set(free[next++], k);
  map.set_agent_start(free[next]);
  return map;
}

/// One row per line; `A` marks the agent start, which is an empty cell.
inline std::string serialize_map(const GridMap& map) {
  std::string out;
  out.reserve(static_cast<std::size_t>(map.size() * (map.size() + 1)));
  for (int r = 0; r < map.size(); ++r) {
    for (int c = 0; c < map.size(); ++c) {
      const Coord p{r, c};
      out.push_back(p == map.agent_start() ? 'A' : entity_char(map.at(p)));
    }
    out.push_back('\n');
  }
  return out;
}

inline GridMap parse_map(std::string_view text, std::uint64_t seed = 0) {
  std::vector<std::string> rows;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  const int n = static_cast<int>(rows.size());
  if (n < 3) throw std::invalid_argument("map text has fewer than 3 rows");
  GridMap map(n, seed);
  bool have_agent = false;
  for (int r = 0; r < n; ++r) {
    if (static_cast<int>(rows[r].size()) != n) {
      throw std::invalid_argument("map row " + std::to_string(r) + " is not " + std::to_string(n) +
                                  " characters wide");
    }
    for (int c = 0; c < n; ++c) {
      const char ch = rows[r][c];
      if (ch == 'A') {
        if (have_agent) throw std::invalid_argument("map has more than one agent start");
        have_agent = true;
        map.set_agent_start({r, c});
        map.set({r, c}, EntityKind::empty);
        continue;
      }
      const auto kind = entity_from_char(ch);
      if (!kind) throw std::invalid_argument(std::string("unknown map character '") + ch + "'");
      map.set({r, c}, *kind);
    }
  }
  if (!have_agent) throw std::invalid_argument("map has no agent start");
  return map;
}

struct RewardTable {
  std::array<double, 3> values{1.0, 2.0, 3.0};  // ball, box, key
  int max_steps = 200;
  double step_penalty = 0.0;

  static RewardTable train(int max_steps = 200) { return {{1.0, 2.0, 3.0}, max_steps, 0.0}; }
  static RewardTable eval(int max_steps = 200) { return {{1.0, 2.0, -3.0}, max_steps, 0.0}; }

  double reward_for(EntityKind k) const {
    const int i = reward_index(k);
    return i < 0 ? 0.0 : values[static_cast<std::size_t>(i)];
  }
};

struct EpisodeState {
  GridMap map;
  Coord agent{};
  int step_count = 0;
  KindSet visited;
  double cumulative_cost = 0.0;
  KindSet remaining_rewards;
  bool done = false;
};

inline EpisodeState start_episode(GridMap map) {
  EpisodeState s;
  s.agent = map.agent_start();
  for (EntityKind k : kRewardKinds) {
    if (!map.cells_of(k).empty()) s.remaining_rewards.insert(k);
  }
  s.map = std::move(map);
  s.done = s.remaining_rewards.empty();
  return s;
}

struct StepEvents {
  EntityKind entered = EntityKind::empty;  // kind of the cell occupied after the move
  std::optional<EntityKind> collected;
  bool moved = false;
  bool done = false;
};

struct StepOutcome {
  double reward = 0.0;
  StepEvents events;
};

/// In-place transition. Walls block movement; reward entities are consumed on entry.
inline StepOutcome advance(EpisodeState& s, Action action, const RewardTable& rewards) {
  if (s.done) throw EpisodeError("step called on a finished episode");
  StepOutcome out;
  const Coord d = action_delta(action);
  const Coord target{s.agent.row + d.row, s.agent.col + d.col};
  const EntityKind target_kind = s.map.in_bounds(target) ? s.map.at(target) : EntityKind::wall;
  out.reward = -rewards.step_penalty;
  if (target_kind != EntityKind::wall) {
    s.agent = target;
    out.events.moved = true;
    s.visited.insert(target_kind);
    if (is_reward_entity(target_kind)) {
      out.reward += rewards.reward_for(target_kind);
      out.events.collected = target_kind;
      s.remaining_rewards.erase(target_kind);
      s.map.set(target, EntityKind::empty);
    }
  }
  out.events.entered = out.events.moved ? target_kind : s.map.at(s.agent);
  ++s.step_count;
  s.done = s.remaining_rewards.empty() || s.step_count >= rewards.max_steps;
  out.events.done = s.done;
  return out;
}

struct StepResult {
  EpisodeState state;
  double reward = 0.0;
  StepEvents events;
};

inline StepResult step(const EpisodeState& state, Action action, const RewardTable& rewards) {
  StepResult r{state, 0.0, {}};
  const StepOutcome o = advance(r.state, action, rewards);
  r.reward = o.reward;
  r.events = o.events;
  return r;
}

inline constexpr int kWindow = 7;
inline constexpr int kWindowHalf = kWindow / 2;
inline constexpr int kWindowCells = kWindow * kWindow;

constexpr int window_index(int i, int j) { return i * kWindow + j; }

/// Egocentric crop centered on the agent; cells off the map read as wall.
struct Observation {
  std::array<EntityKind, kWindowCells> cells{};

  EntityKind at(int i, int j) const { return cells[static_cast<std::size_t>(window_index(i, j))]; }
  friend bool operator==(const Observation&, const Observation&) = default;
};

/// Window coordinate of a map cell relative to `center`, if it lies inside the crop.
inline std::optional<std::pair<int, int>> window_coord(Coord center, Coord cell) {
  const int i = cell.row - center.row + kWindowHalf;
  const int j = cell.col - center.col + kWindowHalf;
  if (i < 0 || j < 0 || i >= kWindow || j >= kWindow) return std::nullopt;
  return std::pair{i, j};
}

inline Observation observe_at(const GridMap& map, Coord center) {
  Observation obs;
  for (int i = 0; i < kWindow; ++i) {
    for (int j = 0; j < kWindow; ++j) {
      const Coord p{center.row + i - kWindowHalf, center.col + j - kWindowHalf};
      obs.cells[static_cast<std::size_t>(window_index(i, j))] =
          map.in_bounds(p) ? map.at(p) : EntityKind::wall;
    }
  }
  return obs;
}

inline Observation observe(const EpisodeState& s) { return observe_at(s.map, s.agent); }

inline std::string serialize_observation(const Observation& obs) {
  std::string out(kWindowCells, '.');
  for (int i = 0; i < kWindowCells; ++i) out[static_cast<std::size_t>(i)] = entity_char(obs.cells[static_cast<std::size_t>(i)]);
  return out;
}

inline Observation parse_observation(std::string_view text) {
  if (text.size() != kWindowCells) throw std::invalid_argument("observation must have 49 cells");
  Observation obs;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto k = entity_from_char(text[i]);
    if (!k) throw std::invalid_argument(std::string("unknown observation character '") + text[i] + "'");
    obs.cells[i] = *k;
  }
  return obs;
}

}  // namespace polco

#endif  // POLCO_GRID_ENV_HPP_
