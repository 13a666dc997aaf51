#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "uscd/distributions.hpp"

namespace uscd {

/// Statistic used to decide whether a step's distribution is noisy.
enum class Estimator { kStdDev, kEntropy, kQuartiles };

std::string_view to_string(Estimator e);
Estimator parse_estimator(std::string_view name);

/// Knobs for one decoding run.
///
/// `temperature == 0` selects greedy decoding (argmax, lowest id on ties).
struct DecodeConfig {
  double rho = 0.3;
  double theta = 0.5e-2;
  double eta = 0.1;
  Estimator estimator = Estimator::kStdDev;
  // Repair every step regardless of the gauge (reproduces the theta = 0
  // rho sweep where the contrast visibly matters).
  bool always_apply_cd = false;
  double temperature = 0.8;
  double top_p = 0.95;
  std::uint64_t seed = 0;
  int max_new_tokens = 128;
  std::vector<std::string> stop_sequences;

  bool greedy() const { return temperature == 0.0; }

  /// Throws ConfigError naming the first out-of-range field.
  void validate() const;

  bool operator==(const DecodeConfig&) const = default;
};

/// Outcome of one fused decode step.
struct StepVerdict {
  double gauge_value = 0.0;
  bool repaired = false;
  std::vector<TokenId> v_thresh;  // ascending ids, never empty
  ScoreVector fused;

  bool operator==(const StepVerdict&) const = default;
};

/// Value of the configured uncertainty statistic for `dist`.
double gauge(const TokenDistribution& dist, Estimator estimator);

/// True when the step should be repaired with the lame distribution.
///
/// Standard deviation and IQR measure peakedness, so a value at or below
/// theta means "uncertain". Entropy measures flatness and is compared the
/// other way round: entropy below theta means "confident".
bool prejudge(const TokenDistribution& std_dist, const DecodeConfig& cfg);

/// Tokens whose probability is at least eta times the mean probability 1/n.
std::vector<TokenId> plausibility_filter(const TokenDistribution& std_dist, double eta);

/// Selective contrastive score for one step.
///
/// Repaired steps score log p_std(y) - rho * log p_lame(y) on the plausible
/// set and -inf elsewhere. Other steps score log p_std(y) everywhere.
StepVerdict fuse_step(const TokenDistribution& std_dist, const TokenDistribution& lame_dist,
                      const DecodeConfig& cfg);

/// Largest standard deviation any distribution over n tokens can have.
double max_std_dev(std::size_t n);

}  // namespace uscd
