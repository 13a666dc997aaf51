#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uscd/vocab.hpp"

namespace uscd {

/// A deterministic mapping from a token context to full-vocabulary logits.
///
/// Shareable backends are immutable and may be scored from many threads at
/// once. Others must be cloned per worker.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::vector<double> score(std::span<const TokenId> context) = 0;
  virtual bool shareable() const = 0;

  /// Independent instance for another worker. Shareable backends may
  /// return nullptr, meaning "use this one".
  virtual std::unique_ptr<Backend> clone() const = 0;
};

/// Table of (context suffix -> logits) rules; the first rule whose pattern
/// is a suffix of the context wins, otherwise the default logits apply.
class ScriptedModel : public Backend {
 public:
  struct Rule {
    std::vector<TokenId> suffix;
    std::vector<double> logits;
  };

  ScriptedModel(std::shared_ptr<const Vocab> vocab, std::vector<Rule> rules,
                std::vector<double> default_logits);

  /// JSON rule file. Suffix entries may be token strings or ids; each rule
  /// gives either "logits" or strictly positive "probs" (stored as logs).
  ///
  ///   {"default": {"logits": [...]},
  ///    "rules": [{"suffix": ["for"], "probs": [...]}, ...]}
  static ScriptedModel load(const std::string& path, std::shared_ptr<const Vocab> vocab);
  static ScriptedModel parse(std::string_view json_text, std::shared_ptr<const Vocab> vocab);

  const Vocab& vocab() const override { return *vocab_; }
  std::vector<double> score(std::span<const TokenId> context) override;
  bool shareable() const override { return true; }
  std::unique_ptr<Backend> clone() const override { return nullptr; }

  const std::vector<Rule>& rules() const { return rules_; }

 private:
  std::shared_ptr<const Vocab> vocab_;
  std::vector<Rule> rules_;
  std::vector<double> default_logits_;
};

/// Add-k smoothed n-gram model:
/// P(y | h) = (count(h y) + k) / (count(h) + k n), with h the last
/// min(order - 1, |context|) tokens. A history never seen in training has
/// count zero and therefore yields the uniform distribution.
class NGramModel : public Backend {
 public:
  /// Each sequence is terminated with eos before counting when the
  /// vocabulary has one. Throws EmptyCorpus when there is nothing to count.
  static NGramModel train(std::shared_ptr<const Vocab> vocab,
                          const std::vector<std::vector<TokenId>>& corpus, int order, double k);

  /// Corpus file: UTF-8, one whitespace-tokenized sequence per line.
  static NGramModel train_file(std::shared_ptr<const Vocab> vocab, const std::string& path,
                               int order, double k);

  const Vocab& vocab() const override { return *vocab_; }
  std::vector<double> score(std::span<const TokenId> context) override;
  bool shareable() const override { return true; }
  std::unique_ptr<Backend> clone() const override { return nullptr; }

  /// Conditional probability of each token; the logits are their logs.
  std::vector<double> conditional(std::span<const TokenId> context) const;

  int order() const { return order_; }
  double smoothing() const { return k_; }

 private:
  NGramModel(std::shared_ptr<const Vocab> vocab, int order, double k);

  struct HistoryCounts {
    double total = 0.0;
    std::map<TokenId, double> next;
  };

  std::shared_ptr<const Vocab> vocab_;
  int order_;
  double k_;
  std::map<std::vector<TokenId>, HistoryCounts> table_;
};

}  // namespace uscd
