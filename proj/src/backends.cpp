#include "uscd/backends.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "uscd/error.hpp"

namespace uscd {

using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<double> logits_from(const json& node, const Vocab& vocab, const std::string& where) {
  std::vector<double> out;
  if (node.contains("logits")) {
    out = node.at("logits").get<std::vector<double>>();
  } else if (node.contains("probs")) {
    for (double p : node.at("probs").get<std::vector<double>>()) {
      if (!(p > 0.0)) throw ConfigError(where + ": probs must be strictly positive");
      out.push_back(std::log(p));
    }
  } else {
    throw ConfigError(where + ": expected \"logits\" or \"probs\"");
  }
  if (out.size() != vocab.size()) {
    throw ConfigError(where + ": expected " + std::to_string(vocab.size()) + " values, got " +
                      std::to_string(out.size()));
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw ConfigError(where + ": logits must be finite");
  }
  return out;
}

TokenId token_ref(const json& node, const Vocab& vocab, const std::string& where) {
  if (node.is_number_integer()) {
    auto id = node.get<TokenId>();
    vocab.token(id);
    return id;
  }
  if (node.is_string()) {
    if (auto id = vocab.find(node.get<std::string>())) return *id;
    throw ConfigError(where + ": unknown token '" + node.get<std::string>() + "'");
  }
  throw ConfigError(where + ": suffix entries must be token strings or ids");
}

}  // namespace

ScriptedModel::ScriptedModel(std::shared_ptr<const Vocab> vocab, std::vector<Rule> rules,
                             std::vector<double> default_logits)
    : vocab_(std::move(vocab)), rules_(std::move(rules)), default_logits_(std::move(default_logits)) {
  auto check = [&](const std::vector<double>& logits, const std::string& where) {
    if (logits.size() != vocab_->size()) {
      throw ConfigError(where + ": logits length " + std::to_string(logits.size()) +
                        " does not match vocabulary size " + std::to_string(vocab_->size()));
    }
    for (double v : logits) {
      if (!std::isfinite(v)) throw ConfigError(where + ": logits must be finite");
    }
  };
  check(default_logits_, "default");
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    check(rules_[i].logits, "rule " + std::to_string(i));
    for (TokenId id : rules_[i].suffix) vocab_->token(id);
  }
}

ScriptedModel ScriptedModel::parse(std::string_view json_text, std::shared_ptr<const Vocab> vocab) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scripted model is not valid JSON: ") + e.what());
  }
  try {
    std::vector<double> fallback =
        doc.contains("default") ? logits_from(doc.at("default"), *vocab, "default")
                                : std::vector<double>(vocab->size(), 0.0);
    std::vector<Rule> rules;
    if (doc.contains("rules")) {
      const json& arr = doc.at("rules");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        std::string where = "rule " + std::to_string(i);
        Rule rule;
        for (const json& t : arr[i].at("suffix")) rule.suffix.push_back(token_ref(t, *vocab, where));
        rule.logits = logits_from(arr[i], *vocab, where);
        rules.push_back(std::move(rule));
      }
    }
    return ScriptedModel(std::move(vocab), std::move(rules), std::move(fallback));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scripted model: ") + e.what());
  }
}

ScriptedModel ScriptedModel::load(const std::string& path, std::shared_ptr<const Vocab> vocab) {
  return parse(read_file(path), std::move(vocab));
}

std::vector<double> ScriptedModel::score(std::span<const TokenId> context) {
  for (const Rule& rule : rules_) {
    if (rule.suffix.size() > context.size()) continue;
    if (std::equal(rule.suffix.rbegin(), rule.suffix.rend(), context.rbegin())) {
      return rule.logits;
    }
  }
  return default_logits_;
}

NGramModel::NGramModel(std::shared_ptr<const Vocab> vocab, int order, double k)
    : vocab_(std::move(vocab)), order_(order), k_(k) {}

NGramModel NGramModel::train(std::shared_ptr<const Vocab> vocab,
                             const std::vector<std::vector<TokenId>>& corpus, int order,
                             double k) {
  if (order < 1) throw ConfigError("n-gram order must be >= 1");
  if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("add-k constant must be > 0");
  NGramModel model(vocab, order, k);
  std::size_t events = 0;
  for (const auto& raw : corpus) {
    if (raw.empty()) continue;
    std::vector<TokenId> seq = raw;
    if (vocab->eos_id()) seq.push_back(*vocab->eos_id());
    for (std::size_t j = 0; j < seq.size(); ++j) {
      vocab->token(seq[j]);
      std::size_t longest = std::min<std::size_t>(static_cast<std::size_t>(order - 1), j);
      for (std::size_t len = 0; len <= longest; ++len) {
        std::vector<TokenId> history(seq.begin() + static_cast<std::ptrdiff_t>(j - len),
                                     seq.begin() + static_cast<std::ptrdiff_t>(j));
        HistoryCounts& counts = model.table_[std::move(history)];
        counts.total += 1.0;
        counts.next[seq[j]] += 1.0;
      }
      ++events;
    }
  }
  if (events == 0) throw EmptyCorpus("n-gram corpus contains no tokens");
  return model;
}

NGramModel NGramModel::train_file(std::shared_ptr<const Vocab> vocab, const std::string& path,
                                  int order, double k) {
  std::istringstream lines(read_file(path));
  std::vector<std::vector<TokenId>> corpus;
  std::string line;
  while (std::getline(lines, line)) {
    auto ids = vocab->tokenize(line);
    if (!ids.empty()) corpus.push_back(std::move(ids));
  }
  return train(std::move(vocab), corpus, order, k);
}

std::vector<double> NGramModel::conditional(std::span<const TokenId> context) const {
  const double n = static_cast<double>(vocab_->size());
  std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(order_ - 1), context.size());
  std::vector<TokenId> history(context.end() - static_cast<std::ptrdiff_t>(len), context.end());

  std::vector<double> probs(vocab_->size(), k_ / (k_ * n));
  auto it = table_.find(history);
  if (it == table_.end()) return probs;
  const double denom = it->second.total + k_ * n;
  std::fill(probs.begin(), probs.end(), k_ / denom);
  for (const auto& [token, count] : it->second.next) {
    probs[static_cast<std::size_t>(token)] = (count + k_) / denom;
  }
  return probs;
}

std::vector<double> NGramModel::score(std::span<const TokenId> context) {
  std::vector<double> logits = conditional(context);
  for (double& v : logits) v = std::log(v);
  return logits;
}

}  // namespace uscd
