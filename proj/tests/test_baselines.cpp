// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace msharp;
using fixtures::seq;

namespace {

const TabularModel& t1() { return fixtures::model("t1"); }

ParsedCompletion completion(const Vocab& v, std::initializer_list<const char*> answer, bool truncated = false) {
  ParsedCompletion pc;
  pc.trace = seq(v, {"t1", "think_end"});
  pc.answer = seq(v, answer);
  pc.truncated = truncated;
  return pc;
}

}  // namespace

TEST(TemperatureSample, MatchesMarginal) {
  const auto& v = t1().vocab();
  const TokenSeq A = seq(v, {"A", "eos"});
  int hits = 0;
  const int n = 100000;
  for (int s = 0; s < n; ++s) hits += temperature_sample_answer(t1(), "p0", 4, s).answer == A;
  EXPECT_NEAR(hits / double(n), 0.60, 0.01);
}

TEST(TemperatureSample, TruncationAndDeterminism) {
  EXPECT_TRUE(temperature_sample_answer(t1(), "p0", 2, 5).truncated);
  for (std::uint64_t s = 0; s < 10; ++s)
    EXPECT_EQ(temperature_sample_answer(t1(), "p0", 4, s), temperature_sample_answer(t1(), "p0", 4, s));
}

TEST(MajorityVote, T1k32) {
  const auto& v = t1().vocab();
  const TokenSeq A = seq(v, {"A", "eos"});
  int wins = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) wins += majority_vote(t1(), "p0", 32, 4, {}, s).answer == A;
  // A wins when it takes at least 16 of 32 votes (ties favour the smaller key):
  // P(Binomial(32, 0.6) >= 16) = 0.908033.
  const double p = 0.9080334498088461;
  EXPECT_NEAR(wins / double(n), p, 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST(MajorityVote, SingleVoteIsTemperatureSample) {
  for (std::uint64_t s = 0; s < 50; ++s)
    EXPECT_EQ(majority_vote(t1(), "p0", 1, 4, {}, s).answer, temperature_sample_answer(t1(), "p0", 4, s).answer);
}

TEST(MajorityVote, TiesGoToSmallestKey) {
  const auto& v = t1().vocab();
  std::vector<ParsedCompletion> cs{completion(v, {"B", "eos"}), completion(v, {"A", "eos"}),
                                   completion(v, {"B", "eos"}), completion(v, {"A", "eos"})};
  for (int round = 0; round < 10; ++round) {
    std::rotate(cs.begin(), cs.begin() + 1, cs.end());
    const auto r = tally_votes(cs, {});
    EXPECT_EQ(r.key, seq(v, {"A", "eos"}));
    EXPECT_EQ(r.votes, 2u);
  }
}

TEST(MajorityVote, PermutationInvariant) {
  const auto& v = t1().vocab();
  std::vector<ParsedCompletion> cs;
  for (int i = 0; i < 5; ++i) cs.push_back(completion(v, {"A", "eos"}));
  for (int i = 0; i < 3; ++i) cs.push_back(completion(v, {"B", "eos"}));
  cs.push_back(completion(v, {"B"}, true));
  std::mt19937 gen(1);
  const auto ref = tally_votes(cs, {});
  for (int i = 0; i < 20; ++i) {
    std::shuffle(cs.begin(), cs.end(), gen);
    const auto r = tally_votes(cs, {});
    EXPECT_EQ(r.key, ref.key);
    EXPECT_EQ(r.votes, ref.votes);
    EXPECT_EQ(r.usable, 8u);
  }
}

TEST(MajorityVote, CanonicalizerMergesClasses) {
  const auto& v = t1().vocab();
  // Map B onto A: every vote lands in one class.
  AnswerEquiv merge{[&](const TokenSeq& a) {
    TokenSeq out = a;
    for (auto& t : out)
      if (t == v.id("B")) t = v.id("A");
    return out;
  }};
  std::vector<ParsedCompletion> cs{completion(v, {"B", "eos"}), completion(v, {"A", "eos"}),
                                   completion(v, {"B", "eos"})};
  const auto r = tally_votes(cs, merge);
  EXPECT_EQ(r.votes, 3u);
  EXPECT_EQ(r.answer, seq(v, {"B", "eos"}));  // first sampled member
}

TEST(MajorityVote, AllTruncatedThrows) {
  EXPECT_THROW(majority_vote(t1(), "p0", 4, 2, {}, 0), Error);
  EXPECT_THROW(majority_vote(t1(), "p0", 0, 4, {}, 0), ConfigError);
}

TEST(MajorityVote, LargeKFindsArgmax) {
  for (const char* name : {"t1", "t2"}) {
    const auto& m = fixtures::model(name);
    const auto top = oracle::exact_answer_marginal(m, "p0").argmax();
    int wins = 0;
    for (int s = 0; s < 200; ++s) wins += majority_vote(m, "p0", 256, m.max_len(), {}, s).answer == top;
    EXPECT_GE(wins, 198) << name;
  }
}

TEST(JointSharpened, SampleFrequenciesMatchOracle) {
  const JointSharpenedSampler sampler(t1(), "p0", 4.0);
  std::map<std::pair<TokenSeq, TokenSeq>, double> counts;
  const int n = 100000;
  for (int s = 0; s < n; ++s) counts[sampler.sample(s)] += 1.0 / n;
  double tv = 0.0;
  for (const auto& e : sampler.distribution().entries)
    tv += 0.5 * std::abs(counts[{e.trace, e.answer}] - std::exp(e.log_mass));
  EXPECT_LT(tv, 0.01);
}

TEST(JointSharpened, AlphaOneIsBaseCompletionLaw) {
  const auto joint = JointSharpenedSampler(t1(), "p0", 1.0).distribution();
  const auto base = oracle::enumerate_completions(t1(), "p0");
  ASSERT_EQ(joint.entries.size(), base.entries.size());
  for (std::size_t i = 0; i < base.entries.size(); ++i)
    EXPECT_NEAR(joint.entries[i].log_mass, base.entries[i].log_mass, 1e-12);
}

TEST(JointSharpened, GapToMarginalSharpeningAtAlpha4) {
  const auto& v = t1().vocab();
  const TokenSeq A = seq(v, {"A", "eos"});
  const double joint_a = JointSharpenedSampler(t1(), "p0", 4.0).distribution().answer_marginal().prob(A);
  const double marg_a = oracle::exact_marginal_sharpened(t1(), "p0", 4.0).prob(A);
  EXPECT_NEAR(marg_a, 0.1296 / 0.1552, 1e-12);
  EXPECT_GT(std::abs(joint_a - marg_a), 0.01);
  int hits = 0;
  for (int s = 0; s < 20000; ++s) hits += joint_sharpened_sample(t1(), "p0", 4.0, s).second == A;
  EXPECT_NEAR(hits / 20000.0, joint_a, 0.01);
}
