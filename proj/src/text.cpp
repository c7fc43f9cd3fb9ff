#include "mammovl/text.hpp"

#include "mammovl/errors.hpp"

#include <algorithm>
#include <cctype>
#include <map>

namespace mammovl {

std::size_t TokenSequence::valid_length() const {
  return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
}

void validate_tokens(const TokenSequence& tokens, int vocab_size) {
  if (tokens.ids.empty()) throw ContractError("token sequence is empty");
  if (tokens.ids.size() != tokens.attention_mask.size()) {
    throw ContractError("token ids and attention mask differ in length");
  }
  if (tokens.ids[0] != Vocabulary::kCls || tokens.attention_mask[0] != 1) {
    throw ContractError("position 0 must be an attended CLS token");
  }
  bool in_padding = false;
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const int id = tokens.ids[i];
    if (id < 0 || id >= vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " at position " + std::to_string(i) +
                            " is outside the vocabulary of size " + std::to_string(vocab_size));
    }
    const auto m = tokens.attention_mask[i];
    if (m > 1) throw ContractError("attention mask must be binary");
    if (m == 0) in_padding = true;
    if (in_padding && m == 1) throw ContractError("padding must occupy the tail of the sequence");
  }
}

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
  tokens_ = {"[PAD]", "[CLS]", "[MASK]", "[UNK]"};
  for (auto& w : words) {
    if (index_.count(w) || std::find(tokens_.begin(), tokens_.end(), w) != tokens_.end()) continue;
    tokens_.push_back(w);
    index_.emplace(w, static_cast<int>(tokens_.size()) - 1);
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_words) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : tokenize_words(t)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (sorted.size() > max_words) sorted.resize(max_words);
  std::vector<std::string> words;
  words.reserve(sorted.size());
  for (auto& [w, _] : sorted) words.push_back(w);
  return Vocabulary(std::move(words));
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

TokenSequence Vocabulary::encode(std::string_view text, int max_length) const {
  if (max_length < 1) throw ContractError("max_length must be at least 1");
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(max_length), kPad);
  seq.attention_mask.assign(static_cast<std::size_t>(max_length), 0);
  seq.ids[0] = kCls;
  seq.attention_mask[0] = 1;
  std::size_t pos = 1;
  for (const auto& w : tokenize_words(text)) {
    if (pos >= seq.ids.size()) break;
    seq.ids[pos] = id(w);
    seq.attention_mask[pos] = 1;
    ++pos;
  }
  return seq;
}

std::string Vocabulary::decode(const TokenSequence& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    if (!tokens.attention_mask[i] || tokens.ids[i] == kCls) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(tokens.ids[i]);
  }
  return out;
}

}  // namespace mammovl
