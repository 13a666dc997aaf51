#include "uscd/decoder.hpp"

#include <algorithm>

#include "uscd/error.hpp"

namespace uscd {

namespace {

constexpr std::size_t kStopLookback = 32;

bool hit_stop_sequence(const std::string& text, const std::vector<std::string>& stops) {
  for (const std::string& stop : stops) {
    std::size_t window = std::min(text.size(), kStopLookback + stop.size());
    if (text.find(stop, text.size() - window) != std::string::npos) return true;
  }
  return false;
}

TokenDistribution scored(Backend& backend, const std::vector<TokenId>& context) {
  std::vector<double> logits = backend.score(context);
  if (logits.size() != backend.vocab().size()) {
    throw BackendError("backend returned " + std::to_string(logits.size()) +
                       " logits for a vocabulary of " + std::to_string(backend.vocab().size()));
  }
  return normalize(logits);
}

void check_prompt(const std::vector<TokenId>& prompt, const Vocab& vocab, const char* which) {
  for (TokenId id : prompt) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw TokenizeError(std::string(which) + " prompt holds token id " + std::to_string(id) +
                          " outside the vocabulary");
    }
  }
}

// Shared loop. `lame` is null for single-context decoding.
GenerationRecord run(const std::vector<TokenId>& standard, const std::vector<TokenId>* lame,
                     Backend& backend, const DecodeConfig& cfg, const GenerateOptions& opts,
                     GenerationRecord* partial) {
  cfg.validate();
  const Vocab& vocab = backend.vocab();
  check_prompt(standard, vocab, "standard");
  if (lame) check_prompt(*lame, vocab, "lame");

  GenerationRecord record;
  record.task_id = opts.task_id;
  record.config = cfg;

  std::vector<TokenId> std_context = standard;
  std::vector<TokenId> lame_context = lame ? *lame : std::vector<TokenId>{};
  TokenSampler sampler(cfg.seed);

  try {
    for (std::size_t step = 0; step < static_cast<std::size_t>(cfg.max_new_tokens); ++step) {
      TokenDistribution std_dist = scored(backend, std_context);
      std::optional<TokenDistribution> lame_dist;
      std::optional<StepVerdict> verdict;
      ScoreVector fused(floored_log(std_dist));
      if (lame) {
        lame_dist = scored(backend, lame_context);
        verdict = fuse_step(std_dist, *lame_dist, cfg);
        fused = verdict->fused;
        if (verdict->repaired) ++record.repaired_steps;
      }

      TokenDistribution from = sampling_distribution(fused, cfg);
      TokenId token = cfg.greedy() ? from.argmax() : sampler.draw(from);

      std_context.push_back(token);
      if (lame) lame_context.push_back(token);
      record.generated.push_back(token);

      if (opts.trace != TraceLevel::kOff) {
        StepTrace t;
        t.step = step;
        t.token = token;
        t.verdict = verdict;
        if (opts.trace == TraceLevel::kFull) {
          t.std_dist = std::move(std_dist);
          t.lame_dist = std::move(lame_dist);
          t.sampled_from = std::move(from);
        }
        record.trace.push_back(std::move(t));
      }

      if (vocab.eos_id() && token == *vocab.eos_id()) {
        record.finish = FinishReason::kEos;
        break;
      }
      if (!cfg.stop_sequences.empty() &&
          hit_stop_sequence(vocab.detokenize(record.generated), cfg.stop_sequences)) {
        record.finish = FinishReason::kStopSequence;
        break;
      }
    }
  } catch (const Error& e) {
    if (partial) {
      record.completion = vocab.detokenize(record.generated);
      record.finish = FinishReason::kError;
      record.error = e.what();
      *partial = std::move(record);
    }
    throw;
  }

  record.completion = vocab.detokenize(record.generated);
  return record;
}

}  // namespace

std::string_view to_string(FinishReason r) {
  switch (r) {
    case FinishReason::kEos:
      return "eos";
    case FinishReason::kMaxTokens:
      return "max_tokens";
    case FinishReason::kStopSequence:
      return "stop_sequence";
    case FinishReason::kError:
      return "error";
  }
  return "error";
}

TraceLevel parse_trace_level(std::string_view name) {
  if (name == "off") return TraceLevel::kOff;
  if (name == "verdicts") return TraceLevel::kVerdicts;
  if (name == "full") return TraceLevel::kFull;
  throw ConfigError("unknown trace level '" + std::string(name) + "' (off, verdicts, full)");
}

std::string_view to_string(TraceLevel level) {
  switch (level) {
    case TraceLevel::kOff:
      return "off";
    case TraceLevel::kVerdicts:
      return "verdicts";
    case TraceLevel::kFull:
      return "full";
  }
  return "off";
}

std::string_view to_string(DecodeMode mode) {
  return mode == DecodeMode::kStandard ? "standard" : "uscd";
}

DecodeMode parse_mode(std::string_view name) {
  if (name == "standard") return DecodeMode::kStandard;
  if (name == "uscd") return DecodeMode::kUscd;
  throw ConfigError("unknown mode '" + std::string(name) + "' (standard, uscd)");
}

TokenId TokenSampler::draw(const TokenDistribution& dist) {
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  double cumulative = 0.0;
  TokenId last_positive = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last_positive = static_cast<TokenId>(i);
    cumulative += dist[i];
    if (u < cumulative) return last_positive;
  }
  // Rounding left u above the accumulated mass.
  return last_positive;
}

TokenDistribution sampling_distribution(const ScoreVector& fused, const DecodeConfig& cfg) {
  if (cfg.greedy()) return TokenDistribution::one_hot(fused.size(), fused.argmax());
  return top_p_filter(apply_temperature(fused, cfg.temperature), cfg.top_p);
}

GenerationRecord generate(const PromptPair& pair, Backend& backend, const DecodeConfig& cfg,
                          const GenerateOptions& opts, GenerationRecord* partial) {
  return run(pair.standard, &pair.lame, backend, cfg, opts, partial);
}

GenerationRecord generate_baseline(const std::vector<TokenId>& prompt, Backend& backend,
                                   const DecodeConfig& cfg, const GenerateOptions& opts,
                                   GenerationRecord* partial) {
  return run(prompt, nullptr, backend, cfg, opts, partial);
}

std::vector<GenerationRecord> sample_n(const PromptPair& pair, Backend& backend,
                                       const DecodeConfig& cfg, std::size_t n, DecodeMode mode,
                                       const GenerateOptions& opts) {
  if (n == 0) throw ConfigError("sample count must be >= 1");
  cfg.validate();
  std::vector<GenerationRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    DecodeConfig sample_cfg = cfg;
    sample_cfg.seed = cfg.seed + i;
    GenerationRecord partial;
    try {
      out.push_back(mode == DecodeMode::kUscd
                        ? generate(pair, backend, sample_cfg, opts, &partial)
                        : generate_baseline(pair.standard, backend, sample_cfg, opts, &partial));
    } catch (const Error& e) {
      if (partial.finish != FinishReason::kError) {
        partial = GenerationRecord{};
        partial.task_id = opts.task_id;
        partial.config = sample_cfg;
        partial.finish = FinishReason::kError;
        partial.error = e.what();
      }
      out.push_back(std::move(partial));
    }
    out.back().sample_index = i;
  }
  return out;
}

}  // namespace uscd
