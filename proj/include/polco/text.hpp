#ifndef POLCO_TEXT_HPP_
#define POLCO_TEXT_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace polco {

/// Lowercases, splits on whitespace and punctuation, maps number words
/// zero..five to digits, and tags every token of a conditional clause
/// ("after ...", "once ...", "if ...") with a `c:` prefix up to the next
/// punctuation mark. The tag carries word order for sequential constraints
/// into an otherwise order-free bag of tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  static constexpr std::array<std::string_view, 6> kNumberWords{"zero", "one", "two", "three", "four", "five"};
  static constexpr std::array<std::string_view, 6> kClauseMarkers{"after", "once", "if", "when", "whenever", "since"};

  std::vector<std::string> out;
  bool in_clause = false;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    for (std::size_t i = 0; i < kNumberWords.size(); ++i)
      if (word == kNumberWords[i]) word = std::to_string(i);
    const bool marker = std::find(kClauseMarkers.begin(), kClauseMarkers.end(), word) != kClauseMarkers.end();
    out.push_back(in_clause && !marker ? "c:" + word : word);
    if (marker) in_clause = true;
    word.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
      if (!std::isspace(u)) in_clause = false;
    }
  }
  flush();
  return out;
}

/// Token -> dense index. Index 0 is reserved for unknown tokens.
class TokenVocab {
 public:
  static constexpr int kUnk = 0;
  static constexpr std::string_view kUnkToken = "<unk>";

  TokenVocab() { tokens_.emplace_back(kUnkToken); }

  static TokenVocab build(const std::vector<std::string>& texts) {
    std::vector<std::string> all;
    for (const auto& t : texts) {
      auto toks = tokenize(t);
      all.insert(all.end(), toks.begin(), toks.end());
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    TokenVocab v;
    for (auto& t : all) v.add(t);
    return v;
  }

  static TokenVocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.empty() || tokens.front() != kUnkToken) throw std::invalid_argument("vocab must start with <unk>");
    TokenVocab v;
    for (std::size_t i = 1; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  int add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  int lookup(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(lookup(t));
    return ids;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const TokenVocab& a, const TokenVocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

}  // namespace polco

#endif  // POLCO_TEXT_HPP_
