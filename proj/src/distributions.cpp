#include "uscd/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "uscd/error.hpp"

namespace uscd {

namespace {

// Neumaier-compensated sum; the distributions here reach 32k entries and the
// mass check is tight.
double compensated_sum(std::span<const double> xs) {
  double sum = 0.0;
  double carry = 0.0;
  for (double x : xs) {
    double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      carry += (sum - t) + x;
    } else {
      carry += (x - t) + sum;
    }
    sum = t;
  }
  return sum + carry;
}

void require_same_size(const TokenDistribution& p, const TokenDistribution& q) {
  if (p.size() != q.size()) {
    throw VocabMismatch("distribution sizes differ: " + std::to_string(p.size()) + " vs " +
                        std::to_string(q.size()));
  }
}

double kl_to_midpoint_bits(const TokenDistribution& p, const TokenDistribution& q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    double mid = 0.5 * (p[i] + q[i]);
    total += p[i] * std::log2(p[i] / mid);
  }
  return total;
}

// Linear-interpolation ("type 7") quantile of sorted values.
double quantile_sorted(const std::vector<double>& sorted, double prob) {
  double h = static_cast<double>(sorted.size() - 1) * prob;
  auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

TokenDistribution::TokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw InvalidDistribution("empty distribution");
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!std::isfinite(probs_[i]) || probs_[i] < 0.0) {
      throw InvalidDistribution("entry " + std::to_string(i) + " is not a probability: " +
                                std::to_string(probs_[i]));
    }
  }
  double mass = compensated_sum(probs_);
  if (std::abs(mass - 1.0) > kMassTolerance) {
    throw InvalidDistribution("probabilities sum to " + std::to_string(mass));
  }
}

TokenDistribution TokenDistribution::renormalized(std::vector<double> weights) {
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw InvalidDistribution("negative or non-finite weight");
  }
  double mass = compensated_sum(weights);
  if (!(mass > 0.0)) throw InvalidDistribution("weights have no mass");
  for (double& w : weights) w /= mass;
  return TokenDistribution(std::move(weights));
}

TokenDistribution TokenDistribution::uniform(std::size_t n) {
  return TokenDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

TokenDistribution TokenDistribution::one_hot(std::size_t n, TokenId hot) {
  if (hot < 0 || static_cast<std::size_t>(hot) >= n) {
    throw OutOfRange("one-hot index " + std::to_string(hot) + " outside size " + std::to_string(n));
  }
  std::vector<double> probs(n, 0.0);
  probs[static_cast<std::size_t>(hot)] = 1.0;
  return TokenDistribution(std::move(probs));
}

TokenId TokenDistribution::argmax() const {
  // max_element returns the first maximum, i.e. the lowest id.
  return static_cast<TokenId>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

ScoreVector::ScoreVector(std::vector<double> scores) : scores_(std::move(scores)) {
  bool any_finite = false;
  for (std::size_t i = 0; i < scores_.size(); ++i) {
    double s = scores_[i];
    if (std::isnan(s) || s == std::numeric_limits<double>::infinity()) {
      throw InvalidLogits("score " + std::to_string(i) + " is NaN or +inf");
    }
    any_finite = any_finite || std::isfinite(s);
  }
  if (!any_finite) throw InvalidLogits("score vector has no finite entry");
}

TokenId ScoreVector::argmax() const {
  return static_cast<TokenId>(std::max_element(scores_.begin(), scores_.end()) - scores_.begin());
}

TokenDistribution normalize(std::span<const double> logits) {
  if (logits.empty()) throw InvalidLogits("empty logits");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw InvalidLogits("logit " + std::to_string(i) + " is not finite");
    }
  }
  double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = std::exp(logits[i] - peak);
  double mass = compensated_sum(probs);
  for (double& p : probs) p /= mass;
  return TokenDistribution(std::move(probs));
}

double std_dev(const TokenDistribution& dist) {
  const double n = static_cast<double>(dist.size());
  const double mean = 1.0 / n;
  // sigma = sqrt(n * S) / n with S the sum of squared deviations, taken
  // around the rounded mean (exactly zero for uniform input) and corrected
  // by n * (rounded - true mean)^2. Long double keeps a one-hot input at
  // exactly n - 1 before the final rounding.
  long double sum_sq = 0.0L;
  long double carry = 0.0L;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    long double d = static_cast<long double>(dist[i]) - mean;
    long double term = d * d;
    long double next = sum_sq + term;
    carry += std::abs(sum_sq) >= term ? (sum_sq - next) + term : (term - next) + sum_sq;
    sum_sq = next;
  }
  sum_sq += carry;
  const long double shift = static_cast<long double>(mean) - 1.0L / n;
  const long double scaled = std::max(0.0L, (sum_sq - n * shift * shift) * n);
  return std::sqrt(static_cast<double>(scaled)) / n;
}

double entropy(const TokenDistribution& dist) {
  std::vector<double> terms;
  terms.reserve(dist.size());
  for (double p : dist.probs()) {
    if (p > 0.0) terms.push_back(-p * std::log2(p));
  }
  return std::max(0.0, compensated_sum(terms));
}

double interquartile_range(const TokenDistribution& dist) {
  std::vector<double> sorted(dist.probs().begin(), dist.probs().end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
}

double js_divergence(const TokenDistribution& p, const TokenDistribution& q) {
  require_same_size(p, q);
  double js = 0.5 * (kl_to_midpoint_bits(p, q) + kl_to_midpoint_bits(q, p));
  return std::clamp(js, 0.0, 1.0);
}

TokenDistribution apply_temperature(const ScoreVector& scores, double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw InvalidTemperature("temperature must be positive and finite, got " + std::to_string(t));
  }
  double peak = scores[static_cast<std::size_t>(scores.argmax())];
  std::vector<double> probs(scores.size(), 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isfinite(scores[i])) probs[i] = std::exp((scores[i] - peak) / t);
  }
  double mass = compensated_sum(probs);
  for (double& p : probs) p /= mass;
  return TokenDistribution(std::move(probs));
}

TokenDistribution top_p_filter(const TokenDistribution& dist, double p) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw InvalidTopP("top-p must lie in (0, 1], got " + std::to_string(p));
  }
  if (p == 1.0) return dist;

  std::vector<std::size_t> order;
  order.reserve(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0.0) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dist[a] != dist[b] ? dist[a] > dist[b] : a < b;
  });

  std::vector<double> kept(dist.size(), 0.0);
  double cumulative = 0.0;
  for (std::size_t idx : order) {
    kept[idx] = dist[idx];
    cumulative += dist[idx];
    if (cumulative >= p) break;
  }
  double mass = compensated_sum(kept);
  for (double& x : kept) x /= mass;
  return TokenDistribution(std::move(kept));
}

std::vector<double> floored_log(const TokenDistribution& dist) {
  std::vector<double> out(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) out[i] = std::log(std::max(dist[i], kProbFloor));
  return out;
}

}  // namespace uscd
