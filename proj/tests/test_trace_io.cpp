#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "test_support.hpp"
#include "uscd/error.hpp"
#include "uscd/trace_io.hpp"

using namespace uscd;
using nlohmann::json;

namespace {

std::vector<GenerationRecord> traced_records(TraceLevel level) {
  std::vector<std::string> tokens{"<eos>"};
  for (int i = 1; i < 12; ++i) tokens.push_back("t" + std::to_string(i));
  auto vocab = std::make_shared<const Vocab>(tokens);
  std::mt19937_64 rng(31);
  std::vector<ScriptedModel::Rule> rules;
  for (TokenId last = 0; last < 12; ++last) rules.push_back({{last}, testing::random_logits(rng, 12)});
  ScriptedModel model(vocab, rules, testing::random_logits(rng, 12));
  DecodeConfig cfg;
  cfg.theta = 0.2;
  cfg.seed = 4;
  cfg.max_new_tokens = 20;
  return sample_n({{1, 2}, {2}}, model, cfg, 3, DecodeMode::kUscd, {"task/a", level});
}

}  // namespace

TEST_CASE("full traces round-trip exactly") {
  auto records = traced_records(TraceLevel::kFull);
  std::stringstream buf;
  write_trace_jsonl(buf, records);
  auto back = read_trace_jsonl(buf);
  REQUIRE(back.size() == records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    CHECK(back[r].task_id == "task/a");
    CHECK(back[r].sample_index == r);
    REQUIRE(back[r].steps.size() == records[r].trace.size());
    for (std::size_t s = 0; s < back[r].steps.size(); ++s) {
      const StepTrace& a = records[r].trace[s];
      const StepTrace& b = back[r].steps[s];
      CHECK(a.step == b.step);
      CHECK(a.token == b.token);
      CHECK(a.verdict == b.verdict);
      CHECK(a.std_dist == b.std_dist);
      CHECK(a.lame_dist == b.lame_dist);
      CHECK(a.sampled_from == b.sampled_from);
    }
  }
}

TEST_CASE("-inf scores are written as null") {
  StepTrace t;
  t.step = 2;
  t.token = 1;
  t.verdict = StepVerdict{0.01, true, {1}, ScoreVector({-std::numeric_limits<double>::infinity(), -0.5})};
  json j = step_trace_to_json(t);
  CHECK(j["fused"][0].is_null());
  CHECK(j["fused"][1] == -0.5);
  CHECK_FALSE(j.contains("std_dist"));
  CHECK(step_trace_from_json(j).verdict == t.verdict);
}

TEST_CASE("float32 traces are renormalized on read") {
  StepTrace t;
  t.std_dist = TokenDistribution({0.1, 0.2, 0.3, 0.4});
  json j = step_trace_to_json(t, true);
  CHECK(j["std_dist"][0].get<double>() == static_cast<double>(0.1f));
  StepTrace back = step_trace_from_json(j);
  REQUIRE(back.std_dist);
  double total = 0.0;
  for (double p : back.std_dist->probs()) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((*back.std_dist)[3] == doctest::Approx(0.4).epsilon(1e-6));
}

TEST_CASE("verdict-only traces carry no distributions") {
  auto records = traced_records(TraceLevel::kVerdicts);
  REQUIRE_FALSE(records[0].trace.empty());
  std::stringstream buf;
  write_trace_jsonl(buf, records);
  auto back = read_trace_jsonl(buf);
  CHECK_FALSE(back[0].steps[0].std_dist);
  CHECK(back[0].steps[0].verdict);
}

TEST_CASE("malformed trace lines") {
  std::istringstream not_json("{\"step\": 0, \"token\": 1}\n{oops\n");
  CHECK_THROWS_AS(read_trace_jsonl(not_json), TraceIncomplete);
  CHECK_THROWS_AS(step_trace_from_json(json{{"step", 0}}), TraceIncomplete);
  CHECK_THROWS_AS(step_trace_from_json(json{{"step", 0}, {"token", 1}, {"fused", {0.0}}}),
                  TraceIncomplete);
}

TEST_CASE("decode config json") {
  DecodeConfig cfg;
  cfg.rho = 0.7;
  cfg.estimator = Estimator::kQuartiles;
  cfg.always_apply_cd = true;
  cfg.seed = 1234567890123ULL;
  cfg.stop_sequences = {"\n\n", "def "};
  CHECK(config_from_json(config_to_json(cfg)) == cfg);

  DecodeConfig partial = config_from_json(json{{"theta", 0.25}});
  CHECK(partial.theta == 0.25);
  CHECK(partial.rho == DecodeConfig{}.rho);

  CHECK_THROWS_AS(config_from_json(json{{"rho", "high"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"estimator", "variance"}}), ConfigError);
}
