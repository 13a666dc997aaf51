#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "test_support.hpp"
#include "uscd/error.hpp"
#include "uscd/uscd_core.hpp"

using namespace uscd;

namespace {

DecodeConfig config(double rho, double theta, Estimator est = Estimator::kStdDev) {
  DecodeConfig cfg;
  cfg.rho = rho;
  cfg.theta = theta;
  cfg.estimator = est;
  return cfg;
}

std::vector<TokenId> all_ids(std::size_t n) {
  std::vector<TokenId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<TokenId>(i);
  return ids;
}

}  // namespace

TEST_CASE("defaults") {
  DecodeConfig cfg;
  CHECK(cfg.rho == 0.3);
  CHECK(cfg.theta == 0.005);
  CHECK(cfg.eta == 0.1);
  CHECK(cfg.temperature == 0.8);
  CHECK(cfg.top_p == 0.95);
  CHECK(cfg.estimator == Estimator::kStdDev);
  CHECK_FALSE(cfg.always_apply_cd);
  CHECK_FALSE(cfg.greedy());
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    DecodeConfig cfg;
    mutate(cfg);
    return cfg;
  };
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.rho = -0.1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.theta = -1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.eta = 1.5; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.top_p = 0.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.temperature = -1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.max_new_tokens = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](DecodeConfig& c) { c.stop_sequences = {""}; }).validate(), ConfigError);
  CHECK_NOTHROW(bad([](DecodeConfig& c) { c.temperature = 0; }).validate());
}

TEST_CASE("estimator names round-trip") {
  for (auto e : {Estimator::kStdDev, Estimator::kEntropy, Estimator::kQuartiles}) {
    CHECK(parse_estimator(to_string(e)) == e);
  }
  CHECK_THROWS_AS(parse_estimator("variance"), ConfigError);
}

TEST_CASE("prejudge") {
  DecodeConfig cfg = config(0.3, 0.005);
  CHECK(prejudge(TokenDistribution::uniform(4), cfg));
  CHECK_FALSE(prejudge(TokenDistribution::one_hot(4, 0), cfg));

  cfg.always_apply_cd = true;
  CHECK(prejudge(TokenDistribution::one_hot(4, 0), cfg));

  SUBCASE("entropy compares the other way") {
    DecodeConfig e = config(0.3, 0.5, Estimator::kEntropy);
    CHECK_FALSE(prejudge(TokenDistribution::one_hot(4, 1), e));  // 0 bits: confident
    CHECK(prejudge(TokenDistribution::uniform(4), e));           // 2 bits: flat
  }
  SUBCASE("quartiles follows stddev") {
    DecodeConfig q = config(0.3, 0.1, Estimator::kQuartiles);
    CHECK(prejudge(TokenDistribution::uniform(4), q));
    CHECK_FALSE(prejudge(TokenDistribution::one_hot(4, 1), q));  // IQR 0.25
  }
  SUBCASE("the gauge equal to theta repairs") {
    DecodeConfig at = config(0.3, std_dev(TokenDistribution({0.7, 0.1, 0.1, 0.1})));
    CHECK(prejudge(TokenDistribution({0.7, 0.1, 0.1, 0.1}), at));
  }
}

TEST_CASE("plausibility_filter") {
  CHECK(plausibility_filter(TokenDistribution({0.7, 0.2, 0.06, 0.04}), 0.1) == all_ids(4));
  CHECK(plausibility_filter(TokenDistribution({0.97, 0.01, 0.01, 0.01}), 0.1) ==
        std::vector<TokenId>{0});
  CHECK(plausibility_filter(TokenDistribution::one_hot(6, 4), 0.0) == all_ids(6));
  CHECK(plausibility_filter(TokenDistribution::one_hot(6, 4), 1.0) == std::vector<TokenId>{4});
  // Exactly at the cutoff counts as plausible.
  CHECK(plausibility_filter(TokenDistribution({0.5, 0.5}), 1.0) == all_ids(2));
}

TEST_CASE("fuse_step scores") {
  // p_std(t) = 0.4, p_lame(t) = 0.5: ln 0.4 - 0.3 ln 0.5 = -0.7083466...
  TokenDistribution std_dist({0.4, 0.35, 0.25});
  TokenDistribution lame({0.5, 0.25, 0.25});
  DecodeConfig cfg = config(0.3, 1.0);
  StepVerdict v = fuse_step(std_dist, lame, cfg);
  CHECK(v.repaired);
  CHECK(std::abs(v.fused[0] - (-0.7083465777061714)) < 1e-12);
  CHECK(v.fused[0] == doctest::Approx(std::log(0.4) - 0.3 * std::log(0.5)).epsilon(1e-15));
  CHECK(v.gauge_value == doctest::Approx(std_dev(std_dist)));

  SUBCASE("tokens outside the plausible set are excluded") {
    TokenDistribution peaked({0.97, 0.01, 0.01, 0.01});
    StepVerdict w = fuse_step(peaked, TokenDistribution::uniform(4), config(0.3, 1.0));
    CHECK(w.v_thresh == std::vector<TokenId>{0});
    CHECK(std::isfinite(w.fused[0]));
    for (int i = 1; i < 4; ++i) CHECK(w.fused[static_cast<std::size_t>(i)] == -HUGE_VAL);
  }
  SUBCASE("unrepaired steps score every token") {
    TokenDistribution peaked({0.97, 0.01, 0.01, 0.01});
    StepVerdict w = fuse_step(peaked, TokenDistribution::uniform(4), config(0.3, 0.0));
    CHECK_FALSE(w.repaired);
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.fused[i] == std::log(peaked[i]));
  }
  SUBCASE("zero lame mass is floored") {
    StepVerdict w = fuse_step(TokenDistribution({0.5, 0.5}), TokenDistribution({1.0, 0.0}),
                              config(0.5, 1.0));
    CHECK(std::isfinite(w.fused[1]));
    CHECK(w.fused[1] == doctest::Approx(std::log(0.5) - 0.5 * std::log(1e-12)));
    CHECK(w.fused.argmax() == 1);
  }
  CHECK_THROWS_AS(fuse_step(std_dist, TokenDistribution::uniform(4), cfg), VocabMismatch);
}

TEST_CASE("fuse_step properties on random inputs") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 2 + rng() % 30;
    TokenDistribution s(testing::random_probs(rng, n));
    TokenDistribution l(testing::random_probs(rng, n));
    DecodeConfig cfg = config(unit(rng) * 2.0, unit(rng) * 0.3);
    cfg.eta = unit(rng);
    CAPTURE(trial);

    StepVerdict v = fuse_step(s, l, cfg);
    CHECK_FALSE(v.v_thresh.empty());
    CHECK(v == fuse_step(s, l, cfg));
    for (std::size_t i = 0; i < n; ++i) {
      bool in_set = std::find(v.v_thresh.begin(), v.v_thresh.end(), static_cast<TokenId>(i)) !=
                    v.v_thresh.end();
      CHECK((v.fused[i] == -HUGE_VAL) == (v.repaired && !in_set));
    }

    DecodeConfig zero_theta = cfg;
    zero_theta.theta = 0.0;
    if (std_dev(s) > 0.0) {
      StepVerdict z = fuse_step(s, l, zero_theta);
      CHECK_FALSE(z.repaired);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(std::abs(z.fused[i] - std::log(std::max(s[i], kProbFloor))) < 1e-12);
      }
    }

    DecodeConfig no_contrast = cfg;
    no_contrast.rho = 0.0;
    CHECK(fuse_step(s, l, no_contrast).fused.argmax() == s.argmax());

    for (bool force : {false, true}) {
      DecodeConfig u = cfg;
      u.always_apply_cd = force;
      CHECK(fuse_step(s, TokenDistribution::uniform(n), u).fused.argmax() == s.argmax());
    }
  }
}

TEST_CASE("monotone contrast") {
  TokenDistribution s({0.3, 0.3, 0.4});
  TokenDistribution l({0.1, 0.6, 0.3});
  DecodeConfig cfg = config(0.4, 1.0);
  StepVerdict v = fuse_step(s, l, cfg);
  CHECK(v.fused[0] > v.fused[1]);
}

TEST_CASE("max_std_dev") {
  CHECK(max_std_dev(4) == doctest::Approx(0.4330127).epsilon(1e-7));
  CHECK(max_std_dev(2) == 0.5);
}
