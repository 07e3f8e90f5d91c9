// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace msharp;
using fixtures::seq;

namespace {

const TabularModel& t1() { return fixtures::model("t1"); }

std::vector<ParsedCompletion> completions(std::initializer_list<std::pair<std::size_t, bool>> spec) {
  // (length, truncated) pairs; usable traces end in token 4 (think_end in T1).
  std::vector<ParsedCompletion> out;
  TokenId tag = 0;
  for (auto [len, truncated] : spec) {
    ParsedCompletion pc;
    for (std::size_t i = 0; i + 1 < len; ++i) pc.trace.push_back(tag % 2);
    pc.trace.push_back(truncated ? 0 : 4);
    pc.truncated = truncated;
    out.push_back(pc);
    ++tag;
  }
  return out;
}

TraceGroupSet set_of(std::vector<TraceGroup> groups) {
  TraceGroupSet out;
  std::size_t m = 0;
  for (auto& g : groups) {
    out.provenance.emplace_back();
    for (std::size_t i = 0; i < g.size(); ++i) out.provenance.back().push_back(m++);
  }
  out.groups = std::move(groups);
  return out;
}

TokenSeq z(const Vocab& v, std::initializer_list<const char*> names) { return seq(v, names); }

/// Keeps only the top-`l` entries of each row, like a truncated server.
class TopLView final : public Backend {
 public:
  TopLView(const Backend& inner, std::size_t l) : inner_(inner), l_(l) {}
  const Vocab& vocab() const override { return inner_.vocab(); }
  std::size_t max_len() const override { return inner_.max_len(); }
  LogProbVector next_token_logprobs(const Context& ctx) const override {
    return remote::to_logprob_vector(remote::make_response(inner_.next_token_logprobs(ctx), l_),
                                     inner_.vocab().size());
  }

 private:
  const Backend& inner_;
  std::size_t l_;
};

}  // namespace

TEST(GroupTraces, SequentialAssignment) {
  const auto traces = completions({{2, false}, {3, false}, {4, false}, {5, false}});
  const auto g = group_traces(traces, 2, 2);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->provenance, (std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}}));
  EXPECT_EQ(g->groups[1].traces[0], traces[2].trace);
}

TEST(GroupTraces, TooFewUsableSignalsFallback) {
  const auto traces = completions({{2, true}, {3, false}, {4, true}, {5, true}});
  EXPECT_FALSE(group_traces(traces, 2, 2).has_value());
}

TEST(GroupTraces, RoundRobinReuse) {
  const auto traces = completions({{2, false}, {3, false}, {4, true}, {5, false}});
  const auto g = group_traces(traces, 2, 2);
  ASSERT_TRUE(g);
  ASSERT_EQ(g->groups.size(), 2u);
  for (const auto& grp : g->groups) EXPECT_EQ(grp.size(), 2u);
  // Usable samples are z1, z2, z4: groups (z1, z2), (z4, z1).
  EXPECT_EQ(g->provenance, (std::vector<std::vector<std::size_t>>{{0, 1}, {3, 0}}));
}

TEST(ComputeBudget, Examples) {
  EXPECT_EQ(compute_budget(10, completions({{2, false}, {4, false}})), std::optional<std::size_t>(7));
  EXPECT_EQ(compute_budget(10, completions({{4, false}, {5, false}})), std::optional<std::size_t>(5));
  EXPECT_FALSE(compute_budget(3, completions({{4, false}, {4, false}})).has_value());
  EXPECT_FALSE(compute_budget(4, completions({{4, false}})).has_value());
  EXPECT_EQ(compute_budget(5, completions({{4, false}})), std::optional<std::size_t>(1));
}

TEST(PoeStep, T1MixedGroup) {
  const auto& v = t1().vocab();
  const auto groups = set_of({{{z(v, {"t1", "think_end"}), z(v, {"t2", "think_end"})}}});
  const auto step = poe_step(t1(), groups, PrefixWeights::uniform(1), "p0", {});
  EXPECT_NEAR(std::exp(step.q.logp[v.id("A")]), 0.24 / 0.38, 1e-12);
  EXPECT_NEAR(std::exp(step.q.logp[v.id("B")]), 0.14 / 0.38, 1e-12);
  EXPECT_EQ(step.evaluations, 2u);
}

TEST(PoeStep, DuplicatedGroupsMatchSingle) {
  const auto& m = fixtures::model("t3");
  const auto& v = m.vocab();
  const TraceGroup g{{z(v, {"x", "think_end"}), z(v, {"y", "y", "think_end"})}};
  const auto one = poe_step(m, set_of({g}), PrefixWeights::uniform(1), "p0", {});
  const auto two = poe_step(m, set_of({g, g}), PrefixWeights::uniform(2), "p0", {});
  for (std::size_t i = 0; i < v.size(); ++i)
    if (one.q.logp[i] != kNegInf) EXPECT_NEAR(one.q.logp[i], two.q.logp[i], 1e-12);
}

TEST(PoeStep, SingleExpertIsBackendRow) {
  const auto& m = fixtures::model("t3");
  const auto& v = m.vocab();
  const TokenSeq zz = z(v, {"x", "x", "think_end"});
  PrefixWeights w = PrefixWeights::uniform(1);
  w.step = 1;
  const auto step = poe_step(m, set_of({{{zz}}}), w, "p0", seq(v, {"A"}));
  TokenSeq prefix = zz;
  prefix.push_back(v.id("A"));
  EXPECT_EQ(step.q.logp, m.next_token_logprobs({"p0", prefix}).logp);
}

TEST(PoeStep, ShiftAndDuplicationInvariance) {
  const auto& m = fixtures::model("t3");
  const auto traces = oracle::enumerate_traces(m, "p0");
  const auto& v = m.vocab();
  Rng rng({5, 5});
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TraceGroup> groups(3);
    for (auto& g : groups)
      for (int i = 0; i < 2; ++i) g.traces.push_back(traces[rng.next() % traces.size()].trace);
    PrefixWeights w = PrefixWeights::uniform(3);
    for (double& l : w.ell) l = -5.0 * rng.uniform();
    TokenSeq prefix;
    if (trial % 2) prefix = seq(v, {"B"});
    w.step = prefix.size();
    const auto base = poe_step(m, set_of(groups), w, "p0", prefix);

    PrefixWeights shifted = w;
    for (double& l : shifted.ell) l += 17.25;
    const auto s = poe_step(m, set_of(groups), shifted, "p0", prefix);

    auto doubled = groups;
    doubled.insert(doubled.end(), groups.begin(), groups.end());
    PrefixWeights dw = w;
    dw.ell.insert(dw.ell.end(), w.ell.begin(), w.ell.end());
    const auto d = poe_step(m, set_of(doubled), dw, "p0", prefix);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (base.q.logp[i] == kNegInf) continue;
      EXPECT_NEAR(base.q.logp[i], s.q.logp[i], 1e-12);
      EXPECT_NEAR(base.q.logp[i], d.q.logp[i], 1e-12);
    }
  }
}

TEST(PoeStep, DeadEnd) {
  TabularModel m(t1().vocab(), 4);
  const auto& v = m.vocab();
  auto row = [&](std::map<std::string, double> p) {
    std::vector<double> out(v.size(), 0.0);
    for (auto& [n, x] : p) out[v.id(n)] = x;
    return out;
  };
  m.set_row("p0", seq(v, {"t1", "think_end"}), row({{"A", 1.0}}));
  m.set_row("p0", seq(v, {"t2", "think_end"}), row({{"B", 1.0}}));
  const auto groups = set_of({{{z(v, {"t1", "think_end"}), z(v, {"t2", "think_end"})}}});
  EXPECT_THROW(poe_step(m, groups, PrefixWeights::uniform(1), "p0", {}), DecodeDeadEnd);
}

TEST(PoeStep, TruncatedSupportUsesFloor) {
  const auto& v = t1().vocab();
  TopLView top1(t1(), 1);
  const auto groups = set_of({{{z(v, {"t1", "think_end"}), z(v, {"t2", "think_end"})}}});
  const auto step = poe_step(top1, groups, PrefixWeights::uniform(1), "p0", {}, -30.0);
  // z1 reports only A (0.8), z2 only B (0.7); each misses the other's token.
  const double a = std::log(0.8) - 30.0, b = std::log(0.7) - 30.0;
  EXPECT_NEAR(step.q.logp[v.id("A")], a - log_sum_exp({a, b}), 1e-12);
  EXPECT_TRUE(step.q.support[v.id("B")]);
  EXPECT_FALSE(step.q.support[v.id("t1")]);
  EXPECT_EQ(step.q.logp[v.id("t1")], kNegInf);
}

TEST(UpdatePrefixWeights, T1Example) {
  const auto& v = t1().vocab();
  const auto groups = set_of({{{z(v, {"t1", "think_end"}), z(v, {"t1", "think_end"})}},
                              {{z(v, {"t2", "think_end"}), z(v, {"t2", "think_end"})}}});
  const auto step = poe_step(t1(), groups, PrefixWeights::uniform(2), "p0", {});
  const TokenId A = v.id("A");
  EXPECT_NEAR(step.scores[0][A], 2 * std::log(0.8), 1e-15);
  EXPECT_NEAR(step.scores[1][A], 2 * std::log(0.3), 1e-15);
  const std::vector<double> sc{step.scores[0][A], step.scores[1][A]};
  const auto w = update_prefix_weights(PrefixWeights::uniform(2), sc);
  EXPECT_EQ(w.ell[0], 0.0);
  EXPECT_NEAR(w.ell[1], 2 * std::log(0.3) - 2 * std::log(0.8), 1e-15);
  EXPECT_NEAR(w.offset, 2 * std::log(0.8), 1e-15);
  EXPECT_EQ(w.step, 1u);
}

TEST(UpdatePrefixWeights, EqualMassStaysUniform) {
  const std::vector<double> sc{-1.5, -1.5, -1.5};
  const auto w = update_prefix_weights(PrefixWeights::uniform(3), sc);
  for (double x : w.normalized()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(*std::max_element(w.ell.begin(), w.ell.end()), 0.0);
}

TEST(MarginalSharpenDecode, DeterministicAcrossRunsAndFanOut) {
  const auto& m = fixtures::model("t2");
  DecoderConfig cfg;
  cfg.K = 3;
  cfg.S = 2;
  cfg.L = 5;
  FanOutBackend fan1(m, 1), fan4(m, 4);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto a = marginal_sharpen_decode(m, "p0", cfg, seed);
    EXPECT_EQ(a, marginal_sharpen_decode(m, "p0", cfg, seed));
    EXPECT_EQ(a, marginal_sharpen_decode(fan1, "p0", cfg, seed));
    EXPECT_EQ(a, marginal_sharpen_decode(fan4, "p0", cfg, seed));
    EXPECT_EQ(to_json(a, m.vocab()).dump(), to_json(marginal_sharpen_decode(fan4, "p0", cfg, seed), m.vocab()).dump());
  }
}

TEST(MarginalSharpenDecode, SingleTraceFallsBack) {
  DecoderConfig cfg;
  cfg.K = 1;
  cfg.S = 1;
  cfg.L = 4;
  const auto r = marginal_sharpen_decode(t1(), "p0", cfg, 3);
  EXPECT_TRUE(r.fallback_used);
  EXPECT_FALSE(r.groups.has_value());
  EXPECT_EQ(r.answer.back(), t1().vocab().eos);
}

TEST(MarginalSharpenDecode, NoBudgetFallsBack) {
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 1;
  cfg.L = 2;  // traces use both tokens
  const auto r = marginal_sharpen_decode(t1(), "p0", cfg, 3);
  EXPECT_TRUE(r.fallback_used);
  EXPECT_TRUE(r.budget_exhausted);
}

TEST(MarginalSharpenDecode, BudgetExhaustionFlagged) {
  const auto& m = fixtures::model("t3");
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 2;
  cfg.L = 4;
  int exhausted = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto r = marginal_sharpen_decode(m, "p0", cfg, seed);
    if (r.fallback_used) continue;
    EXPECT_LE(r.answer.size(), r.budget);
    EXPECT_EQ(r.budget_exhausted, r.answer.back() != m.vocab().eos);
    exhausted += r.budget_exhausted;
  }
  EXPECT_GT(exhausted, 0);
}

TEST(MarginalSharpenDecode, MatchesComposedLawOnT1) {
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 1;
  cfg.L = 16;
  std::map<TokenSeq, double> counts;
  const int n = 20000;
  for (int s = 0; s < n; ++s) counts[marginal_sharpen_decode(t1(), "p0", cfg, s).answer] += 1.0;
  const auto law = oracle::composed_decoder_law(t1(), "p0", 2, 1);
  EXPECT_LT(tv_distance(AnswerDist::from_weights(counts), law), 0.02);
}

TEST(MarginalSharpenDecode, MonotoneInK) {
  const auto& v = t1().vocab();
  const TokenSeq A = seq(v, {"A", "eos"});
  const int n = 4000;
  double prev = 0.0;
  for (int K : {1, 2, 4, 8}) {
    DecoderConfig cfg;
    cfg.K = K;
    cfg.S = 1;
    cfg.L = 16;
    int hits = 0;
    for (int s = 0; s < n; ++s) hits += marginal_sharpen_decode(t1(), "p0", cfg, s + 7919).answer == A;
    const double p = hits / double(n);
    EXPECT_GE(p, prev - 3.0 * std::sqrt(0.25 / n) * std::sqrt(2.0)) << "K=" << K;
    prev = p;
  }
  EXPECT_GT(prev, 0.8);
}

TEST(MarginalSharpenDecode, PrefixWeightsTrackPrefixLikelihood) {
  const auto& m = fixtures::model("t3");
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 3;
  cfg.L = 7;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = marginal_sharpen_decode(m, "p0", cfg, seed);
    if (r.fallback_used) continue;
    TokenSeq prefix;
    for (const auto& step : r.steps) {
      for (std::size_t s = 0; s < r.groups->groups.size(); ++s) {
        const double direct = oracle::detail::prefix_log_likelihood(m, "p0", r.groups->groups[s], prefix);
        EXPECT_NEAR(step.log_weights[s] + step.log_offset, direct, 1e-12);
      }
      prefix.push_back(step.token);
    }
  }
}

TEST(MarginalSharpenDecode, EvaluationsPerTokenEqualKS) {
  const auto& m = fixtures::model("t3");
  for (auto [K, S] : {std::pair{2, 2}, {1, 4}, {4, 1}, {3, 2}}) {
    DecoderConfig cfg;
    cfg.K = K;
    cfg.S = S;
    cfg.L = 7;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto r = marginal_sharpen_decode(m, "p0", cfg, seed);
      for (const auto& st : r.steps) EXPECT_EQ(st.evaluations, static_cast<std::size_t>(K * S));
    }
  }
}

TEST(MarginalSharpenDecode, DiagnosticsSerialize) {
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 2;
  cfg.L = 8;
  const auto r = marginal_sharpen_decode(t1(), "p0", cfg, 1);
  const auto j = to_json(r, t1().vocab());
  EXPECT_EQ(j["traces"].size(), 4u);
  EXPECT_EQ(j["answer"].back(), "eos");
  const auto lines = diagnostics_jsonl(r, t1().vocab());
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), static_cast<long>(r.steps.size()));
}

TEST(MarginalSharpenDecode, TruncatedBackendDetachesExperts) {
  const auto& m = fixtures::model("t3");
  TopLView top2(m, 2);
  DecoderConfig cfg;
  cfg.K = 2;
  cfg.S = 2;
  cfg.L = 7;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = marginal_sharpen_decode(top2, "p0", cfg, seed);
    if (!r.fallback_used && !r.budget_exhausted) EXPECT_EQ(r.answer.back(), m.vocab().eos);
  }
}

TEST(DecoderConfig, Validation) {
  DecoderConfig cfg;
  cfg.K = 0;
  EXPECT_THROW(marginal_sharpen_decode(t1(), "p0", cfg, 1), ConfigError);
  EXPECT_EQ(DecoderConfig{}.num_traces(), 32u);
}
