// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace msharp;
using fixtures::seq;

namespace {

const Vocab& v1() { return fixtures::model("t1").vocab(); }

}  // namespace

TEST(ParseCompletion, SplitsAfterDelimiter) {
  const auto p = parse_completion(seq(v1(), {"t1", "think_end", "A", "eos"}), v1());
  EXPECT_EQ(p.trace, seq(v1(), {"t1", "think_end"}));
  EXPECT_EQ(p.answer, seq(v1(), {"A", "eos"}));
  EXPECT_FALSE(p.truncated);
}

TEST(ParseCompletion, MissingDelimiterIsTruncated) {
  const auto p = parse_completion(seq(v1(), {"t1", "t2"}), v1());
  EXPECT_EQ(p.trace, seq(v1(), {"t1", "t2"}));
  EXPECT_TRUE(p.answer.empty());
  EXPECT_TRUE(p.truncated);
}

TEST(ParseCompletion, EmptyReasoning) {
  const auto p = parse_completion(seq(v1(), {"think_end", "eos"}), v1());
  EXPECT_EQ(p.trace, seq(v1(), {"think_end"}));
  EXPECT_EQ(p.answer, seq(v1(), {"eos"}));
  EXPECT_FALSE(p.truncated);
}

TEST(ParseCompletion, SplitsAtFirstDelimiterOnly) {
  const auto p = parse_completion(seq(v1(), {"t1", "think_end", "A", "think_end", "eos"}), v1());
  EXPECT_EQ(p.trace, seq(v1(), {"t1", "think_end"}));
  EXPECT_EQ(p.answer, seq(v1(), {"A", "think_end", "eos"}));
}

TEST(ParseCompletion, RoundTripsConcatenation) {
  // Every trace/answer pair over a small alphabet.
  const TokenId te = v1().think_end;
  std::mt19937 gen(3);
  for (int trial = 0; trial < 500; ++trial) {
    TokenSeq trace, answer;
    const int n = static_cast<int>(gen() % 4), m = static_cast<int>(gen() % 4);
    for (int i = 0; i < n; ++i) trace.push_back(static_cast<TokenId>(gen() % 2));
    trace.push_back(te);
    for (int i = 0; i < m; ++i) answer.push_back(static_cast<TokenId>(2 + gen() % 2));
    answer.push_back(v1().eos);
    ParsedCompletion pc{trace, answer, false};
    EXPECT_EQ(parse_completion(pc.joined(), v1()), pc);
  }
}

TEST(Vocab, EncodeDecode) {
  EXPECT_EQ(v1().size(), 6u);
  EXPECT_NE(v1().eos, v1().think_end);
  const auto s = seq(v1(), {"t2", "think_end", "B", "eos"});
  EXPECT_EQ(v1().encode(v1().decode(s)), s);
  EXPECT_THROW(v1().id("nope"), ConfigError);
}

TEST(LogSumExp, Basics) {
  EXPECT_NEAR(log_sum_exp({0.0, 0.0}), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(log_sum_exp({kNegInf, -1.25}), -1.25);
  EXPECT_NEAR(log_sum_exp({-1000.0, -1000.0, -1000.0}), -1000.0 + std::log(3.0), 1e-12);
  EXPECT_EQ(log_sum_exp({kNegInf, kNegInf}), kNegInf);
  EXPECT_THROW(log_sum_exp({0.0, std::nan("")}), NumericError);
  EXPECT_THROW(log_sum_exp(std::span<const double>{}), NumericError);
}

TEST(LogSumExp, ShiftEquivariantAndPermutationInvariant) {
  std::mt19937_64 gen(42);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 9);
    for (double& x : v) x = u(gen);
    const double base = log_sum_exp(v);
    const double c = u(gen) * 10.0;
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;
    EXPECT_NEAR(log_sum_exp(shifted), base + c, 1e-12 * std::max(1.0, std::abs(base + c)));
    std::shuffle(v.begin(), v.end(), gen);
    EXPECT_NEAR(log_sum_exp(v), base, 1e-12 * std::max(1.0, std::abs(base)));
  }
}

TEST(Rng, SplitMixReferenceValue) {
  // First output of the reference splitmix64 generator seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xe220a8397b1dcdafull);
}

TEST(Rng, EngineIsStandardMersenneTwister) {
  Rng rng({5, 9});
  std::mt19937_64 ref(splitmix64(5) ^ splitmix64(9 ^ 0x5851f42d4c957f2dull));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(rng.next(), ref());
}

TEST(Rng, StreamsDiffer) {
  Rng a({1, 0}), b({1, 1}), c({2, 0});
  const auto x = a.next();
  EXPECT_NE(x, b.next());
  EXPECT_NE(x, c.next());
}

TEST(SampleCategorical, ZeroMassNeverDrawn) {
  Rng rng({1, 1});
  const std::vector<double> w{0.0, kNegInf};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_categorical(w, rng), 0u);
}

TEST(SampleCategorical, FairCoinFrequency) {
  Rng rng({2024, 0});
  const std::vector<double> w{std::log(0.5), std::log(0.5)};
  int zeros = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) zeros += sample_categorical(w, rng) == 0;
  EXPECT_NEAR(zeros / double(n), 0.5, 0.01);
}

TEST(SampleCategorical, DeterministicPerState) {
  const std::vector<double> w{-0.3, -1.2, -2.0, -0.1};
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng a({s, 7}), b({s, 7});
    EXPECT_EQ(sample_categorical(w, a), sample_categorical(w, b));
  }
}

TEST(SampleCategorical, AllZeroMassThrows) {
  Rng rng;
  const std::vector<double> w{kNegInf, kNegInf};
  EXPECT_THROW(sample_categorical(w, rng), NumericError);
}

TEST(SampleCategorical, UnnormalizedWeights) {
  Rng rng({8, 8});
  const std::vector<double> w{std::log(3.0), std::log(1.0)};
  int zeros = 0;
  for (int i = 0; i < 40000; ++i) zeros += sample_categorical(w, rng) == 0;
  EXPECT_NEAR(zeros / 40000.0, 0.75, 0.01);
}

TEST(TraceGroup, ValidatesBoundary) {
  EXPECT_NO_THROW(validate_group({{seq(v1(), {"t1", "think_end"})}}, v1()));
  EXPECT_THROW(validate_group({{seq(v1(), {"t1"})}}, v1()), ConfigError);
  EXPECT_THROW(validate_group({}, v1()), ConfigError);
}
