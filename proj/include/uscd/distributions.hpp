#pragma once

#include <span>
#include <vector>

#include "uscd/vocab.hpp"

namespace uscd {

/// Floor applied inside logs and divisions. Exclusion (-inf) in a
/// ScoreVector is the only place a true zero reaches a log.
inline constexpr double kProbFloor = 1e-12;

/// Tolerance on the total mass of a TokenDistribution.
inline constexpr double kMassTolerance = 1e-9;

/// A probability vector over a vocabulary at one decode step.
///
/// Distributions are identified with their vocabulary by length: two
/// distributions are comparable iff they have the same size.
class TokenDistribution {
 public:
  /// Validates non-negativity, finiteness and total mass.
  explicit TokenDistribution(std::vector<double> probs);

  /// Divides by the total mass first. Used when loading quantized traces.
  static TokenDistribution renormalized(std::vector<double> weights);

  static TokenDistribution uniform(std::size_t n);
  static TokenDistribution one_hot(std::size_t n, TokenId hot);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }

  /// Highest-probability token, lowest id on ties.
  TokenId argmax() const;

  bool operator==(const TokenDistribution&) const = default;

 private:
  std::vector<double> probs_;
};

/// Log-domain scores; -inf marks an excluded token.
class ScoreVector {
 public:
  /// Requires at least one finite entry and no +inf / NaN.
  explicit ScoreVector(std::vector<double> scores);

  std::size_t size() const { return scores_.size(); }
  double operator[](std::size_t i) const { return scores_[i]; }
  std::span<const double> scores() const { return scores_; }

  /// Highest finite score, lowest id on ties.
  TokenId argmax() const;

  bool operator==(const ScoreVector&) const = default;

 private:
  std::vector<double> scores_;
};

/// Max-shifted softmax. Throws InvalidLogits on NaN or infinities.
TokenDistribution normalize(std::span<const double> logits);

/// Population standard deviation of the full probability vector.
double std_dev(const TokenDistribution& dist);

/// Shannon entropy in bits, with 0 log 0 = 0.
double entropy(const TokenDistribution& dist);

/// Q3 - Q1 of the sorted probabilities, linear-interpolation quantiles.
double interquartile_range(const TokenDistribution& dist);

/// Jensen-Shannon divergence in bits; lies in [0, 1].
double js_divergence(const TokenDistribution& p, const TokenDistribution& q);

/// softmax(scores / t); -inf entries get exactly zero mass.
TokenDistribution apply_temperature(const ScoreVector& scores, double t);

/// Nucleus filter: keeps the smallest descending-probability prefix (ties
/// by ascending id) whose mass reaches p, then renormalizes.
TokenDistribution top_p_filter(const TokenDistribution& dist, double p);

/// Elementwise log with the probability floor.
std::vector<double> floored_log(const TokenDistribution& dist);

}  // namespace uscd
