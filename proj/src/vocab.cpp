#include "uscd/vocab.hpp"

#include <fstream>
#include <sstream>

#include "uscd/error.hpp"

namespace uscd {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::optional<TokenId> validated(std::optional<TokenId> id, std::size_t n, const char* name) {
  if (id && (*id < 0 || static_cast<std::size_t>(*id) >= n)) {
    throw InvalidVocab(std::string(name) + " out of range: " + std::to_string(*id));
  }
  return id;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> tokens, std::optional<TokenId> eos_id,
             std::optional<TokenId> pad_id)
    : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2) {
    throw InvalidVocab("vocabulary needs at least 2 tokens, got " +
                       std::to_string(tokens_.size()));
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw InvalidVocab("empty token at id " + std::to_string(i));
    }
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw InvalidVocab("duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
    }
  }
  eos_id_ = validated(eos_id ? eos_id : find("<eos>"), tokens_.size(), "eos_id");
  pad_id_ = validated(pad_id ? pad_id : find("<pad>"), tokens_.size(), "pad_id");
  unk_id_ = find("<unk>");
}

Vocab Vocab::parse(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      throw InvalidVocab("blank line in vocabulary at token id " + std::to_string(tokens.size()));
    }
    tokens.emplace_back(line);
    pos = end + 1;
  }
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open vocabulary file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw OutOfRange("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && is_space(text[pos])) ++pos;
    if (pos == text.size()) break;
    std::size_t end = pos;
    while (end < text.size() && !is_space(text[end])) ++end;
    std::string_view piece = text.substr(pos, end - pos);
    if (auto id = find(piece)) {
      ids.push_back(*id);
    } else if (unk_id_) {
      ids.push_back(*unk_id_);
    } else {
      throw TokenizeError("piece '" + std::string(piece) + "' at byte " + std::to_string(pos) +
                          " is not in the vocabulary and there is no <unk> token");
    }
    pos = end;
  }
  return ids;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == eos_id_ || id == pad_id_) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

}  // namespace uscd
