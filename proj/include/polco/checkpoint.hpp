#ifndef POLCO_CHECKPOINT_HPP_
#define POLCO_CHECKPOINT_HPP_

#include <fstream>
#include <ios>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polco/param_vector.hpp"

namespace polco {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Versioned text container: metadata, an optional vocabulary, a segment
/// table and hex-float values (so save/load round-trips bit-exactly).
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string kind;
  std::map<std::string, std::string> meta;
  std::vector<std::string> vocab;
  ParamVector params;

  std::string serialize() const {
    std::ostringstream out;
    out << "polco-checkpoint " << kVersion << '\n' << "kind " << kind << '\n';
    for (const auto& [k, v] : meta) out << "meta " << k << ' ' << v << '\n';
    out << "vocab " << vocab.size() << '\n';
    for (const auto& t : vocab) out << t << '\n';
    out << "segments " << params.segments().size() << '\n';
    for (const auto& s : params.segments()) out << s.name << ' ' << s.offset << ' ' << s.length << '\n';
    out << "values " << params.size() << '\n' << std::hexfloat;
    for (Eigen::Index i = 0; i < params.size(); ++i) out << params.values()[i] << '\n';
    out << "end\n";
    return out.str();
  }

  static Checkpoint deserialize(const std::string& text) {
    std::istringstream in(text);
    auto fail = [](const std::string& msg) -> void { throw CheckpointError("bad checkpoint: " + msg); };
    std::string word;
    int version = 0;
    if (!(in >> word >> version) || word != "polco-checkpoint") fail("missing header");
    if (version != kVersion) fail("unsupported version " + std::to_string(version));
    Checkpoint c;
    if (!(in >> word >> c.kind) || word != "kind") fail("missing kind");
    std::size_t n = 0;
    while (in >> word && word == "meta") {
      std::string k, v;
      in >> k;
      std::getline(in >> std::ws, v);
      c.meta[k] = v;
    }
    if (word != "vocab" || !(in >> n)) fail("missing vocab");
    c.vocab.resize(n);
    for (auto& t : c.vocab)
      if (!(in >> t)) fail("truncated vocab");
    if (!(in >> word >> n) || word != "segments") fail("missing segment table");
    for (std::size_t i = 0; i < n; ++i) {
      std::string name;
      Eigen::Index offset = 0, length = 0;
      if (!(in >> name >> offset >> length)) fail("truncated segment table");
      if (offset != c.params.size()) fail("non-contiguous segment '" + name + "'");
      c.params.add_segment(name, length);
    }
    if (!(in >> word >> n) || word != "values") fail("missing values");
    if (static_cast<Eigen::Index>(n) != c.params.size()) fail("value count does not match segments");
    for (Eigen::Index i = 0; i < c.params.size(); ++i) {
      std::string tok;
      if (!(in >> tok)) fail("truncated values");
      c.params.values()[i] = std::strtod(tok.c_str(), nullptr);
    }
    if (!(in >> word) || word != "end") fail("missing end marker");
    return c;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw CheckpointError("cannot write '" + path + "'");
    out << serialize();
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
  }
};

}  // namespace polco

#endif  // POLCO_CHECKPOINT_HPP_
