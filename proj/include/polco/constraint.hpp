#ifndef POLCO_CONSTRAINT_HPP_
#define POLCO_CONSTRAINT_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "polco/grid_env.hpp"

namespace polco {

inline constexpr int kMaxThreshold = 5;

/// Limits how many times cells of `entity` may be entered.
struct Budgetary {
  EntityKind entity = EntityKind::lava;
  int h = 0;
  friend bool operator==(const Budgetary&, const Budgetary&) = default;
};

/// Penalizes every step spent within `distance` (Manhattan) of `entity`.
struct Relational {
  EntityKind entity = EntityKind::lava;
  int distance = 1;
  int h = 0;
  friend bool operator==(const Relational&, const Relational&) = default;
};

/// `forbidden` becomes unsafe once `trigger` has been entered.
struct Sequential {
  EntityKind trigger = EntityKind::grass;
  EntityKind forbidden = EntityKind::water;
  int h = 0;
  friend bool operator==(const Sequential&, const Sequential&) = default;
};

using ConstraintSpec = std::variant<Budgetary, Relational, Sequential>;

enum class ConstraintVariant { budget = 0, relation = 1, sequence = 2 };
inline constexpr std::array<std::string_view, 3> kVariantNames{"budget", "relation", "sequence"};

inline ConstraintVariant variant_of(const ConstraintSpec& spec) {
  return static_cast<ConstraintVariant>(spec.index());
}

inline std::string_view variant_name(ConstraintVariant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

inline int threshold_of(const ConstraintSpec& spec) {
  return std::visit([](const auto& c) { return c.h; }, spec);
}

class ConstraintError : public std::runtime_error {
 public:
  enum class Kind { syntax, semantic };

  ConstraintError(Kind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

/// Throws ConstraintError(semantic) when a ConstraintSpec breaks a type invariant.
inline void validate(const ConstraintSpec& spec, std::size_t offset = 0) {
  auto fail = [&](const std::string& msg) { throw ConstraintError(ConstraintError::Kind::semantic, offset, msg); };
  auto check_entity = [&](EntityKind k) {
    if (!is_cost_entity(k)) fail("'" + std::string(entity_name(k)) + "' is not a cost entity");
  };
  auto check_h = [&](int h) {
    if (h < 0 || h > kMaxThreshold) fail("threshold " + std::to_string(h) + " outside [0,5]");
  };
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Budgetary>) {
          check_entity(c.entity);
        } else if constexpr (std::is_same_v<T, Relational>) {
          check_entity(c.entity);
          if (c.distance < 1) fail("distance must be at least 1");
        } else {
          check_entity(c.trigger);
          check_entity(c.forbidden);
          if (c.trigger == c.forbidden) fail("trigger and forbidden must differ");
        }
        check_h(c.h);
      },
      spec);
}

namespace detail {

class DslParser {
 public:
  explicit DslParser(std::string_view text) : text_(text) {}

  ConstraintSpec parse() {
    const auto [head, head_at] = identifier();
    expect('(');
    ConstraintSpec spec;
    if (head == "budget") {
      Budgetary b;
      b.entity = keyed_entity("entity");
      expect(',');
      b.h = keyed_int("max");
      spec = b;
    } else if (head == "relation") {
      Relational r;
      r.entity = keyed_entity("entity");
      expect(',');
      r.distance = keyed_int("distance");
      if (accept(',')) r.h = keyed_int("max");
      spec = r;
    } else if (head == "sequence") {
      Sequential s;
      s.trigger = keyed_entity("trigger");
      expect(',');
      s.forbidden = keyed_entity("forbidden");
      if (accept(',')) s.h = keyed_int("max");
      spec = s;
    } else {
      syntax(head_at, "expected 'budget', 'relation' or 'sequence'");
    }
    expect(')');
    skip_ws();
    if (pos_ != text_.size()) syntax(pos_, "trailing input");
    validate(spec, semantic_at_);
    return spec;
  }

 private:
  [[noreturn]] void syntax(std::size_t at, const std::string& msg) {
    throw ConstraintError(ConstraintError::Kind::syntax, at, msg);
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) syntax(pos_, std::string("expected '") + c + "'");
  }

  std::pair<std::string, std::size_t> identifier() {
    skip_ws();
    const std::size_t start = pos_;
    std::string out;
    while (pos_ < text_.size() && (std::isalpha(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text_[pos_]))));
      ++pos_;
    }
    if (out.empty()) syntax(start, "expected identifier");
    return {out, start};
  }

  void key(std::string_view expected) {
    const auto [name, at] = identifier();
    if (name != expected) syntax(at, "expected '" + std::string(expected) + "'");
    expect('=');
  }

  EntityKind keyed_entity(std::string_view k) {
    key(k);
    const auto [name, at] = identifier();
    const auto kind = entity_from_name(name);
    if (!kind || !is_cost_entity(*kind)) {
      throw ConstraintError(ConstraintError::Kind::semantic, at, "unknown cost entity '" + name + "'");
    }
    if (semantic_at_ == 0) semantic_at_ = at;
    return *kind;
  }

  int keyed_int(std::string_view k) {
    key(k);
    skip_ws();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      value = value * 10 + (text_[pos_] - '0');
      if (value > std::numeric_limits<int>::max()) syntax(start, "integer too large");
      ++pos_;
    }
    if (pos_ == start) syntax(start, "expected integer");
    return static_cast<int>(value);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t semantic_at_ = 0;
};

}  // namespace detail

/// Parses the constraint DSL, e.g. `budget(entity=lava, max=5)`.
inline ConstraintSpec parse_constraint(std::string_view dsl) { return detail::DslParser(dsl).parse(); }

/// Canonical DSL form; optional `max` arguments are printed only when non-zero.
inline std::string to_dsl(const ConstraintSpec& spec) {
  return std::visit(
      [](const auto& c) -> std::string {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Budgetary>) {
          return "budget(entity=" + std::string(entity_name(c.entity)) + ", max=" + std::to_string(c.h) + ")";
        } else if constexpr (std::is_same_v<T, Relational>) {
          std::string s = "relation(entity=" + std::string(entity_name(c.entity)) +
                          ", distance=" + std::to_string(c.distance);
          if (c.h != 0) s += ", max=" + std::to_string(c.h);
          return s + ")";
        } else {
          std::string s = "sequence(trigger=" + std::string(entity_name(c.trigger)) +
                          ", forbidden=" + std::string(entity_name(c.forbidden));
          if (c.h != 0) s += ", max=" + std::to_string(c.h);
          return s + ")";
        }
      },
      spec);
}

/// Constraint text; template_id is empty for hand-written text.
struct ConstraintText {
  std::string surface;
  std::optional<int> template_id;
};

inline constexpr std::string_view kDefaultTemplateBank = R"(# Constraint templates, one per line.
# Slots: {entity} {n} {n_word} {trigger} {forbidden}
# Lines after "%% heldout" inside a section are reserved for evaluation.
[budget]
Do not step on {entity} more than {n} times.
You may walk on {entity}, but only up to {n} times.
Touching {entity} is allowed at most {n_word} times.
Never enter {entity} more than {n_word} times.
The {entity} can be crossed no more than {n} times.
Limit your visits to {entity} to {n} or fewer.
Stepping onto {entity} more than {n} times is not allowed.
You have a budget of {n_word} steps on {entity}.
Only {n} visits to {entity} are permitted.
%% heldout
Walk over {entity} at most {n} times.
Do not touch {entity} more than {n_word} times.
The maximum number of times you may step on {entity} is {n}.
[relation]
Keep {n} squares away from {entity}.
Never come within {n} steps of {entity}.
Maintain a distance of {n_word} cells from any {entity}.
Stay at least {n} steps away from {entity}.
Do not get closer than {n} cells to {entity}.
The {entity} is dangerous, stay {n} squares away.
Keep your distance from {entity}, at least {n_word} steps.
Avoid the area within {n} steps of {entity}.
You must remain {n} or more steps from {entity}.
%% heldout
Always stay {n} steps away from the {entity}.
Do not walk within {n_word} squares of {entity}.
Keep at least {n} cells between you and {entity}.
[sequence]
Do not walk on {forbidden} after walking on {trigger}.
After touching {trigger}, {forbidden} becomes unsafe.
Once you step on {trigger}, avoid {forbidden}.
The {forbidden} is forbidden once {trigger} has been touched.
If you have visited {trigger}, stay off {forbidden}.
When you cross {trigger}, you can no longer touch {forbidden}.
After {trigger} is visited, {forbidden} is off limits.
Never touch {forbidden} after you have touched {trigger}.
The {forbidden} must be avoided once you walk on {trigger}.
%% heldout
After you step on {trigger}, do not touch {forbidden}.
Once {trigger} is touched, {forbidden} is unsafe.
Avoid {forbidden} if you have stepped on {trigger}.
)";

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// English templates per constraint variant, split into train and held-out ids.
class TemplateBank {
 public:
  static TemplateBank parse(std::string_view text) {
    TemplateBank bank;
    int section = -1;
    std::istringstream in{std::string(text)};
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      if (line.front() == '[') {
        const auto close = line.find(']');
        const std::string name = line.substr(1, close == std::string::npos ? std::string::npos : close - 1);
        section = -1;
        for (std::size_t v = 0; v < kVariantNames.size(); ++v)
          if (kVariantNames[v] == name) section = static_cast<int>(v);
        if (section < 0) throw TemplateError("unknown template section '" + name + "'");
        continue;
      }
      if (section < 0) throw TemplateError("template outside a section at line " + std::to_string(line_no));
      auto& s = bank.sections_[static_cast<std::size_t>(section)];
      if (line.rfind("%% heldout", 0) == 0) {
        if (s.first_heldout) throw TemplateError("duplicate heldout marker");
        s.first_heldout = static_cast<int>(s.lines.size());
        continue;
      }
      s.lines.push_back(line);
    }
    return bank;
  }

  static TemplateBank load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TemplateError("cannot open template bank '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  static const TemplateBank& standard() {
    static const TemplateBank bank = parse(kDefaultTemplateBank);
    return bank;
  }

  int size(ConstraintVariant v) const { return static_cast<int>(section(v).lines.size()); }

  bool is_heldout(ConstraintVariant v, int id) const {
    const auto& s = section(v);
    return s.first_heldout && id >= *s.first_heldout;
  }

  std::vector<int> ids(ConstraintVariant v, bool heldout) const {
    std::vector<int> out;
    for (int i = 0; i < size(v); ++i)
      if (is_heldout(v, i) == heldout) out.push_back(i);
    return out;
  }

  const std::string& line(ConstraintVariant v, int id) const {
    const auto& s = section(v);
    if (id < 0 || id >= static_cast<int>(s.lines.size())) {
      throw TemplateError("unknown template id " + std::to_string(id) + " for " + std::string(variant_name(v)));
    }
    return s.lines[static_cast<std::size_t>(id)];
  }

 private:
  struct Section {
    std::vector<std::string> lines;
    std::optional<int> first_heldout;
  };

  const Section& section(ConstraintVariant v) const { return sections_[static_cast<std::size_t>(v)]; }

  std::array<Section, 3> sections_;
};

inline std::string number_word(int n) {
  static constexpr std::array<std::string_view, 11> words{"zero", "one", "two",   "three", "four", "five",
                                                          "six",  "seven", "eight", "nine",  "ten"};
  return n >= 0 && n < static_cast<int>(words.size()) ? std::string(words[static_cast<std::size_t>(n)])
                                                      : std::to_string(n);
}

namespace detail {

inline void replace_all(std::string& s, std::string_view slot, const std::string& value) {
  for (std::size_t at = s.find(slot); at != std::string::npos; at = s.find(slot, at + value.size())) {
    s.replace(at, slot.size(), value);
  }
}

}  // namespace detail

inline ConstraintText render_template(const ConstraintSpec& spec, int template_id,
                                      const TemplateBank& bank = TemplateBank::standard()) {
  std::string text = bank.line(variant_of(spec), template_id);
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Sequential>) {
          detail::replace_all(text, "{trigger}", std::string(entity_name(c.trigger)));
          detail::replace_all(text, "{forbidden}", std::string(entity_name(c.forbidden)));
        } else {
          const int n = [&] {
            if constexpr (std::is_same_v<T, Relational>) return c.distance;
            else return c.h;
          }();
          detail::replace_all(text, "{entity}", std::string(entity_name(c.entity)));
          detail::replace_all(text, "{n}", std::to_string(n));
          detail::replace_all(text, "{n_word}", number_word(n));
        }
      },
      spec);
  if (!text.empty()) text.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(text.front())));
  return {text, template_id};
}

// ---------------------------------------------------------------------------
// Cost semantics
// ---------------------------------------------------------------------------

/// Smallest Manhattan distance from `from` to a cell of `kind`, or INT_MAX.
inline int nearest_distance(const GridMap& map, Coord from, EntityKind kind) {
  int best = std::numeric_limits<int>::max();
  for (int r = 0; r < map.size(); ++r)
    for (int c = 0; c < map.size(); ++c)
      if (map.at({r, c}) == kind) best = std::min(best, manhattan(from, {r, c}));
  return best;
}

/// Cost of moving from `from` to `to` (equal when blocked by a wall).
/// `visited_before` is the visit history prior to this move.
inline int step_cost(const GridMap& map, Coord from, KindSet visited_before, Coord to,
                     const ConstraintSpec& spec) {
  const bool moved = from != to;
  return std::visit(
      [&](const auto& c) -> int {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Budgetary>) {
          return moved && map.at(to) == c.entity ? 1 : 0;
        } else if constexpr (std::is_same_v<T, Relational>) {
          return nearest_distance(map, to, c.entity) <= c.distance ? 1 : 0;
        } else {
          return moved && map.at(to) == c.forbidden && visited_before.contains(c.trigger) ? 1 : 0;
        }
      },
      spec);
}

inline int step_cost(const EpisodeState& prev, Action /*action*/, const EpisodeState& next,
                     const ConstraintSpec& spec) {
  return step_cost(next.map, prev.agent, prev.visited, next.agent, spec);
}

struct CostTrace {
  std::vector<int> costs;
  int total = 0;

  void push(int c) {
    costs.push_back(c);
    total += c;
  }
};

using BinaryMask = std::array<std::uint8_t, kWindowCells>;
using RealMask = std::array<double, kWindowCells>;

/// Ground-truth constraint mask over an observation window.
inline BinaryMask ground_truth_mask(const Observation& obs, const ConstraintSpec& spec, KindSet visited) {
  BinaryMask m{};
  auto mark_kind = [&](EntityKind kind) {
    for (int i = 0; i < kWindowCells; ++i)
      if (obs.cells[static_cast<std::size_t>(i)] == kind) m[static_cast<std::size_t>(i)] = 1;
  };
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Budgetary>) {
          mark_kind(c.entity);
        } else if constexpr (std::is_same_v<T, Relational>) {
          for (int i = 0; i < kWindow; ++i) {
            for (int j = 0; j < kWindow; ++j) {
              if (obs.at(i, j) != c.entity) continue;
              for (int p = 0; p < kWindow; ++p)
                for (int q = 0; q < kWindow; ++q)
                  if (std::abs(p - i) + std::abs(q - j) <= c.distance) m[static_cast<std::size_t>(window_index(p, q))] = 1;
            }
          }
        } else {
          if (visited.contains(c.trigger)) mark_kind(c.forbidden);
        }
      },
      spec);
  return m;
}

/// Signed budget mask: cumulative_cost - h_C on masked cells, zero elsewhere.
inline RealMask budget_mask(const BinaryMask& mask, double cumulative_cost, double h_C) {
  if (cumulative_cost < 0.0) throw std::invalid_argument("cumulative cost must be non-negative");
  RealMask out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? cumulative_cost - h_C : 0.0;
  return out;
}

/// Union of masks (elementwise sum clamped to [0,1]).
inline BinaryMask merge_masks(std::span<const BinaryMask> masks) {
  if (masks.empty()) throw std::invalid_argument("merge_masks needs at least one mask");
  BinaryMask out{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    int sum = 0;
    for (const auto& m : masks) sum += m[i];
    out[i] = static_cast<std::uint8_t>(std::clamp(sum, 0, 1));
  }
  return out;
}

}  // namespace polco

#endif  // POLCO_CONSTRAINT_HPP_
