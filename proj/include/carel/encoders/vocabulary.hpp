#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace carel::enc {

// Dense token <-> id bijection. <pad> is always 0 and <mask> always 1; the
// remaining ids follow the order of the word list given at construction.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kMask = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kMaskToken = "<mask>";

  Vocabulary();  // specials plus every word the level templates emit
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  std::size_t id(std::string_view token) const;  // VocabularyError if unknown
  const std::string& token(std::size_t id) const;

  std::vector<std::size_t> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const;

  // Newline-separated ordered token list, the on-disk form.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

}  // namespace carel::enc
