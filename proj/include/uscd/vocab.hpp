#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace uscd {

using TokenId = std::int32_t;

/// Ordered token list; the line index of a token is its id.
///
/// Tokenization is word level: text is split on ASCII whitespace and each
/// piece is looked up verbatim. Pieces that are not in the vocabulary map to
/// `<unk>` when the vocabulary has one, otherwise they are a TokenizeError.
class Vocab {
 public:
  /// Recognizes `<eos>`, `<pad>` and `<unk>` by name unless ids are given.
  explicit Vocab(std::vector<std::string> tokens,
                 std::optional<TokenId> eos_id = std::nullopt,
                 std::optional<TokenId> pad_id = std::nullopt);

  /// One token per line; trailing '\r' is dropped. Blank lines are an error.
  static Vocab load(const std::string& path);
  static Vocab parse(std::string_view text);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> find(std::string_view piece) const;

  std::optional<TokenId> eos_id() const { return eos_id_; }
  std::optional<TokenId> pad_id() const { return pad_id_; }
  std::optional<TokenId> unk_id() const { return unk_id_; }

  std::vector<TokenId> tokenize(std::string_view text) const;

  /// Joins pieces with single spaces; eos and pad are skipped.
  std::string detokenize(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::optional<TokenId> eos_id_;
  std::optional<TokenId> pad_id_;
  std::optional<TokenId> unk_id_;
};

}  // namespace uscd
