#include "carel/encoders/vocabulary.hpp"

#include "carel/errors.hpp"
#include "carel/gridworld/levels.hpp"

namespace carel::enc {

Vocabulary::Vocabulary() : Vocabulary(grid::mission_words()) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = {std::string(kPadToken), std::string(kMaskToken)};
  for (const auto& w : words) {
    if (w == kPadToken || w == kMaskToken) continue;
    tokens_.push_back(w);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], i).second) throw VocabularyError("duplicate token '" + tokens_[i] + "'");
  }
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw VocabularyError("unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " out of range (vocabulary size " +
                          std::to_string(tokens_.size()) + ")");
  }
  return tokens_[id];
}

std::vector<std::size_t> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<std::size_t> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(token(i));
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    words.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (words.size() < 2 || words[0] != kPadToken || words[1] != kMaskToken) {
    throw VersionError("serialized vocabulary does not start with <pad>, <mask>");
  }
  return Vocabulary(std::vector<std::string>(words.begin() + 2, words.end()));
}

}  // namespace carel::enc
