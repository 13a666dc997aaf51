#include "uscd/uscd_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "uscd/error.hpp"

namespace uscd {

std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::kStdDev:
      return "stddev";
    case Estimator::kEntropy:
      return "entropy";
    case Estimator::kQuartiles:
      return "quartiles";
  }
  return "stddev";
}

Estimator parse_estimator(std::string_view name) {
  if (name == "stddev") return Estimator::kStdDev;
  if (name == "entropy") return Estimator::kEntropy;
  if (name == "quartiles") return Estimator::kQuartiles;
  throw ConfigError("unknown estimator '" + std::string(name) +
                    "' (expected stddev, entropy or quartiles)");
}

void DecodeConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (!(rho >= 0.0) || !std::isfinite(rho)) fail("rho must be >= 0");
  if (!(theta >= 0.0) || !std::isfinite(theta)) fail("theta must be >= 0");
  if (!(eta >= 0.0 && eta <= 1.0)) fail("eta must lie in [0, 1]");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    fail("temperature must be >= 0 (0 selects greedy decoding)");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) fail("top_p must lie in (0, 1]");
  if (max_new_tokens <= 0) fail("max_new_tokens must be positive");
  for (const auto& s : stop_sequences) {
    if (s.empty()) fail("stop sequences must be non-empty");
  }
}

double gauge(const TokenDistribution& dist, Estimator estimator) {
  switch (estimator) {
    case Estimator::kStdDev:
      return std_dev(dist);
    case Estimator::kEntropy:
      return entropy(dist);
    case Estimator::kQuartiles:
      return interquartile_range(dist);
  }
  return std_dev(dist);
}

namespace {

bool needs_repair(double value, const DecodeConfig& cfg) {
  if (cfg.always_apply_cd) return true;
  if (cfg.estimator == Estimator::kEntropy) return !(value < cfg.theta);
  return !(value > cfg.theta);
}

}  // namespace

bool prejudge(const TokenDistribution& std_dist, const DecodeConfig& cfg) {
  if (cfg.always_apply_cd) return true;
  return needs_repair(gauge(std_dist, cfg.estimator), cfg);
}

std::vector<TokenId> plausibility_filter(const TokenDistribution& std_dist, double eta) {
  const double cutoff = eta * (1.0 / static_cast<double>(std_dist.size()));
  std::vector<TokenId> kept;
  for (std::size_t i = 0; i < std_dist.size(); ++i) {
    if (std_dist[i] >= cutoff) kept.push_back(static_cast<TokenId>(i));
  }
  return kept;
}

StepVerdict fuse_step(const TokenDistribution& std_dist, const TokenDistribution& lame_dist,
                      const DecodeConfig& cfg) {
  if (std_dist.size() != lame_dist.size()) {
    throw VocabMismatch("standard and lame distributions differ in size: " +
                        std::to_string(std_dist.size()) + " vs " +
                        std::to_string(lame_dist.size()));
  }
  const double value = gauge(std_dist, cfg.estimator);
  const bool repaired = needs_repair(value, cfg);
  std::vector<TokenId> v_thresh = plausibility_filter(std_dist, cfg.eta);

  std::vector<double> scores = floored_log(std_dist);
  if (repaired) {
    std::vector<double> contrast(scores.size(), -std::numeric_limits<double>::infinity());
    for (TokenId y : v_thresh) {
      auto i = static_cast<std::size_t>(y);
      contrast[i] = scores[i] - cfg.rho * std::log(std::max(lame_dist[i], kProbFloor));
    }
    scores = std::move(contrast);
  }
  return StepVerdict{value, repaired, std::move(v_thresh), ScoreVector(std::move(scores))};
}

double max_std_dev(std::size_t n) {
  const double nd = static_cast<double>(n);
  return std::sqrt(nd - 1.0) / nd;
}

}  // namespace uscd
