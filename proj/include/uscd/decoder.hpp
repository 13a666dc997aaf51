#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "uscd/backends.hpp"
#include "uscd/uscd_core.hpp"

namespace uscd {

/// Standard prompt and its lame counterpart, already tokenized.
struct PromptPair {
  std::vector<TokenId> standard;
  std::vector<TokenId> lame;
};

enum class FinishReason { kEos, kMaxTokens, kStopSequence, kError };
std::string_view to_string(FinishReason r);

enum class TraceLevel { kOff, kVerdicts, kFull };
TraceLevel parse_trace_level(std::string_view name);
std::string_view to_string(TraceLevel level);

/// Everything observed at one decode step.
struct StepTrace {
  std::size_t step = 0;
  std::optional<TokenDistribution> std_dist;
  std::optional<TokenDistribution> lame_dist;  // absent for single-context decoding
  std::optional<StepVerdict> verdict;
  TokenId token = -1;
  // What the token was drawn from: top-p(softmax(fused / t)), or the
  // one-hot argmax in greedy mode.
  std::optional<TokenDistribution> sampled_from;
};

struct GenerationRecord {
  std::string task_id;
  std::size_t sample_index = 0;
  DecodeConfig config;
  std::vector<TokenId> generated;
  std::string completion;
  FinishReason finish = FinishReason::kMaxTokens;
  std::size_t repaired_steps = 0;
  std::vector<StepTrace> trace;  // empty unless tracing is on
  std::string error;             // set when finish == kError
};

/// Deterministic categorical sampler. Draws use the top 53 bits of a
/// mt19937_64 word, so results do not depend on the standard library.
class TokenSampler {
 public:
  explicit TokenSampler(std::uint64_t seed) : engine_(seed) {}

  /// Inverse-CDF draw; never returns a zero-probability token.
  TokenId draw(const TokenDistribution& dist);

 private:
  std::mt19937_64 engine_;
};

/// Turns one step's fused scores into the distribution the next token is
/// drawn from: fuse, then temperature, then top-p (greedy: one-hot argmax).
TokenDistribution sampling_distribution(const ScoreVector& fused, const DecodeConfig& cfg);

struct GenerateOptions {
  std::string task_id;
  TraceLevel trace = TraceLevel::kOff;
};

/// Dual-context decoding: both contexts advance in lockstep with the same
/// sampled tokens; each step is fused with `fuse_step`.
/// Backend failures surface as BackendError with the partial trace lost
/// unless `partial` is provided.
GenerationRecord generate(const PromptPair& pair, Backend& backend, const DecodeConfig& cfg,
                          const GenerateOptions& opts = {},
                          GenerationRecord* partial = nullptr);

/// Single-context decoding scoring log p_std only.
GenerationRecord generate_baseline(const std::vector<TokenId>& prompt, Backend& backend,
                                   const DecodeConfig& cfg, const GenerateOptions& opts = {},
                                   GenerationRecord* partial = nullptr);

enum class DecodeMode { kStandard, kUscd };
std::string_view to_string(DecodeMode mode);
DecodeMode parse_mode(std::string_view name);

/// n records with seeds seed+0 .. seed+n-1. A sample whose generation
/// throws is returned with finish == kError and the message recorded.
std::vector<GenerationRecord> sample_n(const PromptPair& pair, Backend& backend,
                                       const DecodeConfig& cfg, std::size_t n, DecodeMode mode,
                                       const GenerateOptions& opts = {});

}  // namespace uscd
