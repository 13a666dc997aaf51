#include <doctest.h>

#include <random>

#include "test_support.hpp"
#include "uscd/decoder.hpp"
#include "uscd/error.hpp"
#include "uscd/eval.hpp"

using namespace uscd;

namespace {

std::shared_ptr<const Vocab> golden_vocab() {
  return std::make_shared<const Vocab>(Vocab::load(testing::data_path("golden/vocab.txt")));
}

PromptPair golden_pair(const Vocab& vocab) {
  auto tasks = load_tasks(testing::data_path("golden/tasks.jsonl"));
  return prepare_prompts(tasks.at(0), vocab);
}

DecodeConfig greedy_config() {
  DecodeConfig cfg;
  cfg.temperature = 0.0;
  cfg.theta = 0.08;
  cfg.rho = 0.3;
  cfg.max_new_tokens = 10;
  return cfg;
}

std::shared_ptr<const Vocab> small_vocab(std::size_t n) {
  std::vector<std::string> tokens{"<eos>"};
  for (std::size_t i = 1; i < n; ++i) tokens.push_back("w" + std::to_string(i));
  return std::make_shared<const Vocab>(tokens);
}

// Random rules keyed on the last token, with an occasional eos-heavy row so
// that generations end at varied lengths.
ScriptedModel random_model(std::mt19937_64& rng, std::shared_ptr<const Vocab> vocab) {
  const std::size_t n = vocab->size();
  std::vector<ScriptedModel::Rule> rules;
  for (std::size_t last = 0; last < n; ++last) {
    auto logits = testing::random_logits(rng, n);
    if (rng() % 4 == 0) logits[0] += 3.0;
    rules.push_back({{static_cast<TokenId>(last)}, logits});
  }
  return ScriptedModel(vocab, rules, testing::random_logits(rng, n));
}

// Same rules for the standard path, but any context that starts with the
// lame marker gets a flat distribution.
class FlatLame : public Backend {
 public:
  FlatLame(Backend& inner, TokenId marker) : inner_(inner), marker_(marker) {}
  const Vocab& vocab() const override { return inner_.vocab(); }
  std::vector<double> score(std::span<const TokenId> ctx) override {
    if (!ctx.empty() && ctx.front() == marker_) return std::vector<double>(vocab().size(), 0.0);
    return inner_.score(ctx);
  }
  bool shareable() const override { return false; }
  std::unique_ptr<Backend> clone() const override { return nullptr; }

 private:
  Backend& inner_;
  TokenId marker_;
};

// Fails on the third scoring call.
class Flaky : public Backend {
 public:
  explicit Flaky(Backend& inner) : inner_(inner) {}
  const Vocab& vocab() const override { return inner_.vocab(); }
  std::vector<double> score(std::span<const TokenId> ctx) override {
    if (++calls_ == 3) throw BackendError("injected failure");
    return inner_.score(ctx);
  }
  bool shareable() const override { return false; }
  std::unique_ptr<Backend> clone() const override { return nullptr; }

 private:
  Backend& inner_;
  int calls_ = 0;
};

}  // namespace

TEST_CASE("golden scenario flips For to for") {
  auto vocab = golden_vocab();
  ScriptedModel model = ScriptedModel::load(testing::data_path("golden/scripted.json"), vocab);
  PromptPair pair = golden_pair(*vocab);
  REQUIRE(pair.standard != pair.lame);

  DecodeConfig cfg = greedy_config();
  GenerationRecord base = generate_baseline(pair.standard, model, cfg);
  GenerationRecord fused = generate(pair, model, cfg, {"golden", TraceLevel::kFull});
  CHECK(base.completion == "For x in xs :");
  CHECK(fused.completion == "for x in xs :");
  CHECK(base.finish == FinishReason::kEos);
  CHECK(fused.finish == FinishReason::kEos);
  CHECK(fused.repaired_steps == 1);
  REQUIRE(fused.trace.size() == fused.generated.size());
  CHECK(fused.trace[0].verdict->repaired);
  CHECK(fused.trace[0].verdict->gauge_value <= 0.08);
  CHECK(fused.trace[0].token == *vocab->find("for"));
  CHECK(fused.trace[0].sampled_from == TokenDistribution::one_hot(vocab->size(), *vocab->find("for")));
}

TEST_CASE("greedy reductions to the baseline") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    auto vocab = small_vocab(4 + rng() % 12);
    ScriptedModel model = random_model(rng, vocab);
    PromptPair pair;
    pair.standard = {1, 2, 3};
    pair.lame = {3};
    DecodeConfig cfg;
    cfg.temperature = 0.0;
    cfg.max_new_tokens = 12;
    cfg.theta = 0.5;
    auto base = generate_baseline(pair.standard, model, cfg);

    SUBCASE("no contrast weight") {
      DecodeConfig c = cfg;
      c.rho = 0.0;
      c.always_apply_cd = true;
      CHECK(generate(pair, model, c).generated == base.generated);
    }
    SUBCASE("zero threshold") {
      DecodeConfig c = cfg;
      c.theta = 0.0;
      auto rec = generate(pair, model, c);
      CHECK(rec.generated == base.generated);
      CHECK(rec.repaired_steps == 0);
    }
    SUBCASE("flat lame distribution") {
      FlatLame flat(model, 3);
      DecodeConfig c = cfg;
      c.always_apply_cd = true;
      CHECK(generate(pair, flat, c).generated == base.generated);
    }
  }
}

TEST_CASE("one-hot chain is forced") {
  auto vocab = small_vocab(6);
  auto hot = [](TokenId id) {
    std::vector<double> v(6, -50.0);
    v[static_cast<std::size_t>(id)] = 0.0;
    return v;
  };
  ScriptedModel chain(vocab,
                      {{{1}, hot(2)}, {{2}, hot(3)}, {{3}, hot(4)}, {{4}, hot(5)}, {{5}, hot(0)}},
                      hot(1));
  DecodeConfig cfg = greedy_config();
  cfg.theta = 0.01;
  auto rec = generate({{}, {}}, chain, cfg);
  CHECK(rec.generated == std::vector<TokenId>{1, 2, 3, 4, 5, 0});
  CHECK(rec.repaired_steps == 0);
  CHECK(rec.completion == "w1 w2 w3 w4 w5");
  CHECK(generate_baseline({}, chain, cfg).generated == rec.generated);

  SUBCASE("sampling from a one-hot chain gives the same string") {
    DecodeConfig s = cfg;
    s.temperature = 0.8;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      s.seed = seed;
      CHECK(generate({{}, {}}, chain, s).generated == rec.generated);
    }
  }
}

TEST_CASE("both contexts advance in lockstep") {
  auto vocab = small_vocab(9);
  std::mt19937_64 rng(5);
  ScriptedModel model = random_model(rng, vocab);

  class Recorder : public Backend {
   public:
    explicit Recorder(Backend& inner) : inner_(inner) {}
    const Vocab& vocab() const override { return inner_.vocab(); }
    std::vector<double> score(std::span<const TokenId> ctx) override {
      seen.emplace_back(ctx.begin(), ctx.end());
      return inner_.score(ctx);
    }
    bool shareable() const override { return false; }
    std::unique_ptr<Backend> clone() const override { return nullptr; }
    std::vector<std::vector<TokenId>> seen;

   private:
    Backend& inner_;
  } recorder(model);

  PromptPair pair{{1, 2, 3, 4}, {7}};
  DecodeConfig cfg;
  cfg.max_new_tokens = 20;
  cfg.seed = 3;
  auto rec = generate(pair, recorder, cfg);
  REQUIRE(recorder.seen.size() == 2 * rec.generated.size());
  for (std::size_t step = 0; step < rec.generated.size(); ++step) {
    const auto& s = recorder.seen[2 * step];
    const auto& l = recorder.seen[2 * step + 1];
    REQUIRE(s.size() == pair.standard.size() + step);
    REQUIRE(l.size() == pair.lame.size() + step);
    CHECK(std::equal(s.begin() + 4, s.end(), rec.generated.begin()));
    CHECK(std::equal(l.begin() + 1, l.end(), rec.generated.begin()));
  }
}

TEST_CASE("repaired steps draw from the plausible set") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto vocab = small_vocab(8);
    ScriptedModel model = random_model(rng, vocab);
    DecodeConfig cfg;
    cfg.always_apply_cd = true;
    cfg.eta = 0.9;
    cfg.seed = static_cast<std::uint64_t>(trial);
    cfg.max_new_tokens = 15;
    auto rec = generate({{1, 2}, {2}}, model, cfg, {"t", TraceLevel::kFull});
    CHECK(rec.trace.size() == rec.generated.size());
    for (const auto& step : rec.trace) {
      const auto& allowed = step.verdict->v_thresh;
      CHECK(std::find(allowed.begin(), allowed.end(), step.token) != allowed.end());
      // Replaying the stored distributions reproduces the verdict.
      CHECK(fuse_step(*step.std_dist, *step.lame_dist, cfg) == *step.verdict);
    }
  }
}

TEST_CASE("seeds and sample_n") {
  auto vocab = small_vocab(10);
  std::mt19937_64 rng(77);
  ScriptedModel model = random_model(rng, vocab);
  PromptPair pair{{1, 2}, {2}};
  DecodeConfig cfg;
  cfg.seed = 40;
  cfg.max_new_tokens = 16;

  auto a = sample_n(pair, model, cfg, 15, DecodeMode::kUscd, {"t", TraceLevel::kFull});
  auto b = sample_n(pair, model, cfg, 15, DecodeMode::kUscd, {"t", TraceLevel::kFull});
  REQUIRE(a.size() == 15);
  bool any_difference = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].sample_index == i);
    CHECK(a[i].config.seed == 40 + i);
    CHECK(a[i].generated == b[i].generated);
    CHECK(a[i].trace.size() == b[i].trace.size());
    DecodeConfig single = cfg;
    single.seed = 40 + i;
    CHECK(generate(pair, model, single).generated == a[i].generated);
    any_difference |= a[i].generated != a[0].generated;
  }
  CHECK(any_difference);

  SUBCASE("greedy samples are all identical") {
    DecodeConfig g = cfg;
    g.temperature = 0.0;
    for (DecodeMode mode : {DecodeMode::kStandard, DecodeMode::kUscd}) {
      auto recs = sample_n(pair, model, g, 7, mode);
      for (const auto& r : recs) CHECK(r.generated == recs[0].generated);
    }
  }
  CHECK_THROWS_AS(sample_n(pair, model, cfg, 0, DecodeMode::kUscd), ConfigError);
}

TEST_CASE("stop conditions") {
  auto vocab = small_vocab(4);
  auto logits = [](std::size_t hot) {
    std::vector<double> v(4, -30.0);
    v[hot] = 0.0;
    return v;
  };
  // w1 w2 w1 w2 ... forever.
  ScriptedModel loop(vocab, {{{1}, logits(2)}}, logits(1));
  DecodeConfig cfg = greedy_config();
  cfg.max_new_tokens = 5;
  auto capped = generate_baseline({}, loop, cfg);
  CHECK(capped.finish == FinishReason::kMaxTokens);
  CHECK(capped.generated.size() == 5);

  cfg.max_new_tokens = 50;
  cfg.stop_sequences = {"w2 w1"};
  auto stopped = generate({{}, {}}, loop, cfg);
  CHECK(stopped.finish == FinishReason::kStopSequence);
  CHECK(stopped.completion == "w1 w2 w1");
}

TEST_CASE("backend failures") {
  auto vocab = golden_vocab();
  ScriptedModel model = ScriptedModel::load(testing::data_path("golden/scripted.json"), vocab);
  PromptPair pair = golden_pair(*vocab);
  DecodeConfig cfg = greedy_config();

  SUBCASE("generate rethrows and fills the partial record") {
    Flaky flaky(model);
    GenerationRecord partial;
    CHECK_THROWS_AS(generate(pair, flaky, cfg, {"g"}, &partial), BackendError);
    CHECK(partial.finish == FinishReason::kError);
    CHECK(partial.generated.size() == 1);
    CHECK(partial.error == "injected failure");
  }
  SUBCASE("sample_n marks the failed sample") {
    Flaky flaky(model);
    auto recs = sample_n(pair, flaky, cfg, 3, DecodeMode::kUscd);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].finish == FinishReason::kError);
    CHECK(recs[1].finish == FinishReason::kEos);
    CHECK(recs[1].completion == "for x in xs :");
  }
  SUBCASE("prompt ids outside the vocabulary") {
    CHECK_THROWS_AS(generate_baseline({99}, model, cfg), TokenizeError);
  }
  SUBCASE("invalid configuration") {
    DecodeConfig bad = cfg;
    bad.top_p = 0.0;
    CHECK_THROWS_AS(generate(pair, model, bad), ConfigError);
  }
}

TEST_CASE("TokenSampler") {
  TokenDistribution d({0.1, 0.0, 0.6, 0.3});
  TokenSampler a(9), b(9);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 20000; ++i) {
    TokenId x = a.draw(d);
    REQUIRE(x == b.draw(d));
    ++counts[static_cast<std::size_t>(x)];
  }
  CHECK(counts[1] == 0);
  CHECK(counts[2] / 20000.0 == doctest::Approx(0.6).epsilon(0.03));
  CHECK(counts[0] / 20000.0 == doctest::Approx(0.1).epsilon(0.1));

  TokenSampler c(1);
  for (int i = 0; i < 100; ++i) CHECK(c.draw(TokenDistribution::one_hot(5, 4)) == 4);

  // First draw of seed 0: the top 53 bits of the first mt19937_64 word.
  std::mt19937_64 engine(0);
  double u = static_cast<double>(engine() >> 11) * 0x1.0p-53;
  TokenSampler zero(0);
  CHECK(zero.draw(TokenDistribution({0.5, 0.5})) == (u < 0.5 ? 0 : 1));
}

TEST_CASE("names") {
  CHECK(parse_mode("standard") == DecodeMode::kStandard);
  CHECK(to_string(DecodeMode::kUscd) == "uscd");
  CHECK_THROWS_AS(parse_mode("beam"), ConfigError);
  CHECK(parse_trace_level(to_string(TraceLevel::kVerdicts)) == TraceLevel::kVerdicts);
  CHECK_THROWS_AS(parse_trace_level("loud"), ConfigError);
  CHECK(to_string(FinishReason::kStopSequence) == "stop_sequence");
}
