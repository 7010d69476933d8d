#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <string>

#include "crop/model.hpp"

using namespace crop;

TEST_CASE("content hash is deterministic over text bytes") {
  auto p = PromptParameter::make("Think step by step.");
  CHECK(content_hash(p) == content_hash(p));

  // Digests computed with an independent FNV-1a 64 implementation before
  // this suite was written.
  CHECK(content_hash(p) == "b124109db673c674");
  CHECK(content_hash(PromptParameter::make("Think step by step")) ==
        "b09af04e0b99dd92");
  CHECK(content_hash(p) !=
        content_hash(PromptParameter::make("Think step by step")));
}

TEST_CASE("empty prompt text is rejected upstream of hashing") {
  CHECK_THROWS_AS(PromptParameter::make(""), Error);
  CHECK_THROWS_AS(PromptParameter::make("   \n"), Error);
}

TEST_CASE("gradient bundle combines with a single line feed") {
  auto with_reg = GradientBundle::make("task critique", "brevity critique");
  CHECK(with_reg.combined == "task critique\nbrevity critique");

  auto without_reg = GradientBundle::make("task critique", std::nullopt);
  CHECK(without_reg.combined == "task critique");
  CHECK_FALSE(without_reg.reg_gradient.has_value());
}

TEST_CASE("gradient bundle reconstruction recovers both critiques") {
  std::mt19937_64 rng(42);
  auto random_string = [&](bool allow_newlines) {
    std::string s;
    auto len = rng() % 40;
    for (std::size_t i = 0; i < len; ++i) {
      char c = static_cast<char>('a' + rng() % 26);
      if (allow_newlines && rng() % 7 == 0) c = '\n';
      s.push_back(c);
    }
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    std::string a = random_string(true);
    std::string b = random_string(true);
    auto bundle = GradientBundle::make(a, b);
    REQUIRE(bundle.combined.size() == a.size() + 1 + b.size());
    REQUIRE(bundle.combined.substr(0, a.size()) == a);
    REQUIRE(bundle.combined[a.size()] == '\n');
    REQUIRE(bundle.combined.substr(a.size() + 1) == b);
  }
}

TEST_CASE("iteration record arithmetic") {
  auto prompt = PromptParameter::make("p");

  SECTION("table-derived composite score") {
    // accuracy 0.934 and average length 50.0 against the CoT reference
    // 198.4 at lambda 0.2; expected value from hand arithmetic.
    auto r = IterationRecord::make(1, prompt, 467, 25000, 500, 0.2, 198.4);
    CHECK(r.accuracy == Catch::Approx(0.934).epsilon(1e-12));
    CHECK(r.avg_length == Catch::Approx(50.0).epsilon(1e-12));
    CHECK(r.score == Catch::Approx(0.8835967741935484).epsilon(1e-12));
  }

  SECTION("lambda zero reduces the score to plain accuracy") {
    auto r = IterationRecord::make(3, prompt, 7, 1234, 10, 0.0, 100.0);
    CHECK(r.score == Catch::Approx(r.accuracy));
  }

  SECTION("accuracy times batch size recovers the correct count") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 300; ++trial) {
      std::int64_t batch = 1 + static_cast<std::int64_t>(rng() % 64);
      std::int64_t correct = static_cast<std::int64_t>(rng() % (batch + 1));
      auto r = IterationRecord::make(1, prompt, correct, 100, batch, 0.2, 50.0);
      double product = r.accuracy * static_cast<double>(r.batch_size);
      CHECK(std::llround(product) == correct);
      CHECK(std::abs(product - std::llround(product)) < 1e-9);
    }
  }
}

TEST_CASE("canonical decimal normalization") {
  CHECK(canonical_decimal("64") == "64");
  CHECK(canonical_decimal("64.0") == "64");
  CHECK(canonical_decimal("064") == "64");
  CHECK(canonical_decimal("+7") == "7");
  CHECK(canonical_decimal(".5") == "0.5");
  CHECK(canonical_decimal("5.") == "5");
  CHECK(canonical_decimal("-0.00") == "0");
  CHECK(canonical_decimal("$1,200.50") == "1200.5");
  CHECK(canonical_decimal("$ 64") == "64");
  CHECK_FALSE(canonical_decimal("64 dollars").has_value());
  CHECK_FALSE(canonical_decimal("").has_value());
  CHECK_FALSE(canonical_decimal(".").has_value());
  CHECK_FALSE(canonical_decimal("-").has_value());
  CHECK_FALSE(canonical_decimal("1.2.3").has_value());
}

TEST_CASE("run config round-trips through json") {
  RunConfig cfg;
  cfg.lambda = 0.2;
  cfg.batch_size = 8;
  cfg.max_iterations = 4;
  cfg.reg_threshold_tokens = 30;
  cfg.cot_reference_length = 198.4;
  cfg.seed = 1234;
  cfg.backends = {
      {"https://example.test/v1", "gemini-2.0-flash", 0.0, 1024, Role::target, "KEY_A"},
      {"https://example.test/v1", "gemini-2.0-flash", 0.0, 1024, Role::evaluator, "KEY_A"},
      {"https://example.test/v1", "gemini-3.1-pro", 1.0, 2048, Role::optimizer, "KEY_A"},
  };
  cfg.validate();

  auto round = RunConfig::from_json(cfg.to_json());
  CHECK(round.to_json() == cfg.to_json());
  CHECK(round.hash() == cfg.hash());
  CHECK(round.backend(Role::optimizer).model_name == "gemini-3.1-pro");
}

TEST_CASE("run config rejects unknown keys and bad shapes") {
  json base = json::parse(R"({
    "lambda": 0.2, "batch_size": 4, "max_iterations": 2,
    "reg_threshold_tokens": 30, "cot_reference_length": null, "seed": 1,
    "backends": [
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "target"},
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "evaluator"},
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "optimizer"}
    ]})");

  CHECK_NOTHROW(RunConfig::from_json(base));

  SECTION("unknown top-level key") {
    json j = base;
    j["lambd"] = 0.1;
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("unknown backend key") {
    json j = base;
    j["backends"][0]["model"] = "m";
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("missing role backend") {
    json j = base;
    j["backends"][2]["role"] = "target";
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("relative endpoint url") {
    json j = base;
    j["backends"][0]["endpoint_url"] = "example.test/v1";
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
  SECTION("negative lambda") {
    json j = base;
    j["lambda"] = -0.1;
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  }
}

TEST_CASE("run config defaults") {
  json j = json::parse(R"({
    "batch_size": 4, "max_iterations": 2, "seed": 1,
    "backends": [
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "target"},
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "evaluator"},
      {"endpoint_url": "mock:a.json", "model_name": "m", "role": "optimizer"}
    ]})");
  auto cfg = RunConfig::from_json(j);
  CHECK(cfg.lambda == 0.2);
  CHECK(cfg.reg_threshold_tokens == 30);
  CHECK_FALSE(cfg.cot_reference_length.has_value());
  CHECK(cfg.backend(Role::target).temperature == 0.0);
  CHECK(cfg.backend(Role::evaluator).temperature == 0.0);
  CHECK(cfg.backend(Role::optimizer).temperature == 1.0);
  CHECK(cfg.backend(Role::target).max_output_tokens == 1024);
}

TEST_CASE("gold answers compare kind-homogeneously") {
  CHECK(GoldAnswer::numeric("64") == GoldAnswer::numeric("64.0"));
  CHECK_FALSE(GoldAnswer::numeric("64") == GoldAnswer::numeric("65"));
  CHECK(GoldAnswer::index(2) == GoldAnswer::index(2));
  CHECK_FALSE(GoldAnswer::numeric("2") == GoldAnswer::index(2));
  CHECK_THROWS_AS(GoldAnswer::index(-1), Error);
  CHECK_THROWS_AS(GoldAnswer::numeric("not a number"), Error);
}
