#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mammovl {

/// Token ids plus attention mask. Position 0 holds CLS; padding sits at the
/// tail and carries mask 0.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t valid_length() const;
  bool operator==(const TokenSequence&) const = default;
};

/// Checks the TokenSequence invariants against a vocabulary size; throws
/// VocabularyError for out-of-range ids and ContractError otherwise.
void validate_tokens(const TokenSequence& tokens, int vocab_size);

/// Word-level vocabulary for the desk-scale text encoder.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> words);

  /// Most frequent words first, ties broken lexicographically.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_words = 30000);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  int id(std::string_view word) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  static bool is_special(int id) { return id == kPad || id == kCls || id == kMask; }

  /// CLS + words, truncated and padded to max_length.
  TokenSequence encode(std::string_view text, int max_length) const;
  std::string decode(const TokenSequence& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize_words(std::string_view text);

}  // namespace mammovl
