#include "uscd/trace_io.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "uscd/error.hpp"

namespace uscd {

using nlohmann::json;

namespace {

json probs_json(const TokenDistribution& d, bool as_float32) {
  json arr = json::array();
  for (double p : d.probs()) {
    if (as_float32) {
      arr.push_back(static_cast<float>(p));
    } else {
      arr.push_back(p);
    }
  }
  return arr;
}

TokenDistribution probs_from(const json& arr) {
  auto values = arr.get<std::vector<double>>();
  try {
    return TokenDistribution(values);
  } catch (const InvalidDistribution&) {
    return TokenDistribution::renormalized(std::move(values));
  }
}

}  // namespace

json step_trace_to_json(const StepTrace& t, bool as_float32) {
  json j;
  j["step"] = t.step;
  j["token"] = t.token;
  if (t.verdict) {
    j["gauge"] = t.verdict->gauge_value;
    j["repaired"] = t.verdict->repaired;
    j["v_thresh"] = t.verdict->v_thresh;
    json fused = json::array();
    for (double s : t.verdict->fused.scores()) {
      fused.push_back(std::isfinite(s) ? json(s) : json(nullptr));
    }
    j["fused"] = std::move(fused);
  }
  if (t.std_dist) j["std_dist"] = probs_json(*t.std_dist, as_float32);
  if (t.lame_dist) j["lame_dist"] = probs_json(*t.lame_dist, as_float32);
  if (t.sampled_from) j["sampled_from"] = probs_json(*t.sampled_from, as_float32);
  return j;
}

StepTrace step_trace_from_json(const json& j) {
  try {
    StepTrace t;
    t.step = j.at("step").get<std::size_t>();
    t.token = j.at("token").get<TokenId>();
    if (j.contains("fused")) {
      std::vector<double> fused;
      for (const json& s : j.at("fused")) {
        fused.push_back(s.is_null() ? -std::numeric_limits<double>::infinity() : s.get<double>());
      }
      t.verdict = StepVerdict{j.at("gauge").get<double>(), j.at("repaired").get<bool>(),
                              j.at("v_thresh").get<std::vector<TokenId>>(),
                              ScoreVector(std::move(fused))};
    }
    if (j.contains("std_dist")) t.std_dist = probs_from(j.at("std_dist"));
    if (j.contains("lame_dist")) t.lame_dist = probs_from(j.at("lame_dist"));
    if (j.contains("sampled_from")) t.sampled_from = probs_from(j.at("sampled_from"));
    return t;
  } catch (const json::exception& e) {
    throw TraceIncomplete(std::string("malformed trace line: ") + e.what());
  }
}

void write_trace_jsonl(std::ostream& out, const std::vector<GenerationRecord>& records,
                       bool as_float32) {
  for (const GenerationRecord& r : records) {
    for (const StepTrace& t : r.trace) {
      json j = step_trace_to_json(t, as_float32);
      j["task_id"] = r.task_id;
      j["sample"] = r.sample_index;
      out << j.dump() << '\n';
    }
  }
}

std::vector<TaggedTrace> read_trace_jsonl(std::istream& in) {
  std::vector<TaggedTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw TraceIncomplete("trace line " + std::to_string(lineno) + " is not JSON: " + e.what());
    }
    std::string task = j.value("task_id", std::string());
    std::size_t sample = j.value("sample", std::size_t{0});
    if (out.empty() || out.back().task_id != task || out.back().sample_index != sample) {
      out.push_back({task, sample, {}});
    }
    out.back().steps.push_back(step_trace_from_json(j));
  }
  return out;
}

json config_to_json(const DecodeConfig& cfg) {
  return {{"rho", cfg.rho},
          {"theta", cfg.theta},
          {"eta", cfg.eta},
          {"estimator", std::string(to_string(cfg.estimator))},
          {"always_apply_cd", cfg.always_apply_cd},
          {"temperature", cfg.temperature},
          {"top_p", cfg.top_p},
          {"seed", cfg.seed},
          {"max_new_tokens", cfg.max_new_tokens},
          {"stop_sequences", cfg.stop_sequences}};
}

DecodeConfig config_from_json(const json& j, DecodeConfig cfg) {
  try {
    if (j.contains("rho")) cfg.rho = j.at("rho").get<double>();
    if (j.contains("theta")) cfg.theta = j.at("theta").get<double>();
    if (j.contains("eta")) cfg.eta = j.at("eta").get<double>();
    if (j.contains("estimator")) cfg.estimator = parse_estimator(j.at("estimator").get<std::string>());
    if (j.contains("always_apply_cd")) cfg.always_apply_cd = j.at("always_apply_cd").get<bool>();
    if (j.contains("temperature")) cfg.temperature = j.at("temperature").get<double>();
    if (j.contains("top_p")) cfg.top_p = j.at("top_p").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("max_new_tokens")) cfg.max_new_tokens = j.at("max_new_tokens").get<int>();
    if (j.contains("stop_sequences")) {
      cfg.stop_sequences = j.at("stop_sequences").get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid decode config: ") + e.what());
  }
  return cfg;
}

}  // namespace uscd
