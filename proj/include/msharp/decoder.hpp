// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "backend.hpp"
#include "errors.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "seq.hpp"

namespace msharp {

struct DecoderConfig {
  int K = 4;
  int S = 8;
  std::size_t L = 64;
  int min_usable_traces = 2;
  /// Log-probability used for a candidate token an expert did not report.
  /// Only reachable with truncated (top-L) backends.
  double floor_logprob = -30.0;

  void validate() const {
    if (K < 1 || S < 1 || L < 1 || min_usable_traces < 1)
      throw ConfigError("decoder config fields must be positive");
  }
  std::size_t num_traces() const { return static_cast<std::size_t>(K) * static_cast<std::size_t>(S); }
};

struct TraceGroupSet {
  std::vector<TraceGroup> groups;
  /// provenance[s][i] is the sample index of groups[s].traces[i].
  std::vector<std::vector<std::size_t>> provenance;

  bool operator==(const TraceGroupSet&) const = default;
};

/// Assigns usable (untruncated) traces to S groups of K in sample order,
/// reusing usable traces round-robin when some were truncated. nullopt is
/// the fallback signal.
inline std::optional<TraceGroupSet> group_traces(std::span<const ParsedCompletion> traces, int K, int S,
                                                 int min_usable_traces = 2) {
  std::vector<std::size_t> usable;
  for (std::size_t m = 0; m < traces.size(); ++m)
    if (!traces[m].truncated) usable.push_back(m);
  if (usable.empty() || usable.size() < static_cast<std::size_t>(min_usable_traces)) return std::nullopt;

  TraceGroupSet out;
  out.groups.resize(static_cast<std::size_t>(S));
  out.provenance.resize(static_cast<std::size_t>(S));
  for (std::size_t slot = 0; slot < static_cast<std::size_t>(K * S); ++slot) {
    const std::size_t m = usable[slot % usable.size()];
    const std::size_t s = slot / static_cast<std::size_t>(K);
    out.groups[s].traces.push_back(traces[m].trace);
    out.provenance[s].push_back(m);
  }
  return out;
}

/// floor(L - mean trace length) over all sampled traces; nullopt if < 1.
inline std::optional<std::size_t> compute_budget(std::size_t L, std::span<const ParsedCompletion> traces) {
  if (traces.empty()) throw ConfigError("budget needs at least one trace");
  std::size_t total = 0;
  for (const auto& t : traces) total += t.trace.size();
  const std::size_t M = traces.size();
  const std::size_t mean_ceil = (total + M - 1) / M;  // floor(L - x) == L - ceil(x)
  if (mean_ceil + 1 > L) return std::nullopt;
  return L - mean_ceil;
}

/// Log-prefix weights l_s, kept shifted so that max_s l_s == 0. `offset`
/// accumulates the removed shifts: l_s + offset is the unshifted weight.
struct PrefixWeights {
  std::vector<double> ell;
  std::size_t step = 0;
  double offset = 0.0;

  static PrefixWeights uniform(std::size_t S) { return {std::vector<double>(S, 0.0), 0, 0.0}; }

  std::vector<double> normalized() const {
    std::vector<double> w = ell;
    log_normalize(w);
    for (double& x : w) x = std::exp(x);
    return w;
  }

  bool operator==(const PrefixWeights&) const = default;
};

/// Experts whose reported support lacked a token they were later forced
/// through: they are no longer queried and score every token at the floor.
using DetachedExperts = std::vector<std::vector<bool>>;

struct PoeStep {
  LogProbVector q;
  /// scores[s][v] = sum_i log pi(v | x, z_i^(s), prefix); -inf rows for dead groups.
  std::vector<std::vector<double>> scores;
  /// rows[s][i]: expert outputs, empty for dead groups and detached experts.
  std::vector<std::vector<LogProbVector>> rows;
  std::size_t evaluations = 0;
};

namespace detail {

inline std::vector<Context> expert_contexts(const TraceGroupSet& groups, const std::string& prompt_id,
                                            const TokenSeq& answer_prefix, const PrefixWeights& weights,
                                            const DetachedExperts* detached) {
  std::vector<Context> out;
  for (std::size_t s = 0; s < groups.groups.size(); ++s) {
    if (weights.ell[s] == kNegInf) continue;
    const auto& g = groups.groups[s];
    for (std::size_t i = 0; i < g.traces.size(); ++i) {
      if (detached && (*detached)[s][i]) continue;
      Context ctx{prompt_id, g.traces[i]};
      ctx.prefix.insert(ctx.prefix.end(), answer_prefix.begin(), answer_prefix.end());
      out.push_back(std::move(ctx));
    }
  }
  return out;
}

}  // namespace detail

/// One step of the prefix-weighted product of experts:
///   q(v) proportional to sum_s exp(l_s + sum_i log pi(v | x, z_i^(s), prefix)).
/// One batched backend call covers all live experts. The candidate set is
/// the union of expert supports; tokens outside it get -inf.
inline PoeStep poe_step(const Backend& backend, const TraceGroupSet& groups, const PrefixWeights& weights,
                        const std::string& prompt_id, const TokenSeq& answer_prefix,
                        double floor_logprob = -30.0, const DetachedExperts* detached = nullptr) {
  const std::size_t S = groups.groups.size();
  const std::size_t V = backend.vocab().size();
  if (weights.ell.size() != S) throw ConfigError("prefix weights do not match the number of groups");
  if (weights.step != answer_prefix.size()) throw ConfigError("prefix weights are out of step with the prefix");

  const auto contexts = detail::expert_contexts(groups, prompt_id, answer_prefix, weights, detached);
  const auto results = contexts.empty() ? std::vector<LogProbVector>{}
                                        : backend.batch_next_token_logprobs(contexts);
  if (results.size() != contexts.size()) throw ProtocolError("backend returned a short batch");

  PoeStep out;
  out.evaluations = contexts.size();
  out.rows.resize(S);
  std::vector<bool> candidate(V, false);
  std::size_t next = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const auto& g = groups.groups[s];
    out.rows[s].resize(g.traces.size());
    if (weights.ell[s] == kNegInf) continue;
    for (std::size_t i = 0; i < g.traces.size(); ++i) {
      if (detached && (*detached)[s][i]) continue;
      out.rows[s][i] = results[next++];
      if (out.rows[s][i].size() != V) throw ProtocolError("backend row has the wrong vocabulary size");
      for (std::size_t v = 0; v < V; ++v)
        if (out.rows[s][i].support[v]) candidate[v] = true;
    }
  }

  out.scores.assign(S, std::vector<double>(V, kNegInf));
  for (std::size_t s = 0; s < S; ++s) {
    if (weights.ell[s] == kNegInf) continue;
    const auto& g = groups.groups[s];
    for (std::size_t v = 0; v < V; ++v) {
      if (!candidate[v]) continue;
      double score = 0.0;
      for (std::size_t i = 0; i < g.traces.size(); ++i) {
        const auto& row = out.rows[s][i];
        const bool reported = !row.logp.empty() && row.support[v];
        score += reported ? row.logp[v] : floor_logprob;
      }
      out.scores[s][v] = score;
    }
  }

  std::vector<double> logq(V, kNegInf);
  std::vector<double> mix;
  mix.reserve(S);
  for (std::size_t v = 0; v < V; ++v) {
    if (!candidate[v]) continue;
    mix.clear();
    for (std::size_t s = 0; s < S; ++s)
      if (weights.ell[s] != kNegInf) mix.push_back(weights.ell[s] + out.scores[s][v]);
    if (!mix.empty()) logq[v] = log_sum_exp(mix);
  }
  const double z = log_sum_exp(logq);
  if (z == kNegInf) {
    throw DecodeDeadEnd("every candidate token has zero mass after prefix of length " +
                        std::to_string(answer_prefix.size()));
  }
  for (double& lq : logq) lq -= z;
  out.q.logp = std::move(logq);
  out.q.support = std::move(candidate);
  return out;
}

/// l_s += sum_i log pi(token | ...), then shift so max_s l_s == 0.
inline PrefixWeights update_prefix_weights(const PrefixWeights& weights, std::span<const double> token_scores) {
  if (token_scores.size() != weights.ell.size()) throw ConfigError("score count does not match group count");
  PrefixWeights out = weights;
  for (std::size_t s = 0; s < out.ell.size(); ++s) out.ell[s] += token_scores[s];
  const double hi = *std::max_element(out.ell.begin(), out.ell.end());
  if (hi == kNegInf) throw DecodeDeadEnd("sampled token has zero mass under every group");
  for (double& l : out.ell) l -= hi;
  out.offset += hi;
  out.step += 1;
  return out;
}

struct StepDiagnostics {
  TokenId token = 0;
  double q_entropy = 0.0;
  /// 1 / sum_s w_s^2 for the weights used at this step.
  double effective_groups = 0.0;
  std::size_t evaluations = 0;
  /// Shifted prefix weights l_s used for this step and the removed shift.
  std::vector<double> log_weights;
  double log_offset = 0.0;

  bool operator==(const StepDiagnostics&) const = default;
};

struct AnswerDecode {
  TokenSeq answer;
  bool budget_exhausted = false;
  std::vector<StepDiagnostics> steps;
  PrefixWeights final_weights;
};

/// The answer loop for fixed groups and a fixed budget of T tokens.
inline AnswerDecode decode_answer(const Backend& backend, const std::string& prompt_id,
                                  const TraceGroupSet& groups, std::size_t budget, Rng& rng,
                                  double floor_logprob = -30.0) {
  const TokenId eos = backend.vocab().eos;
  AnswerDecode out;
  PrefixWeights weights = PrefixWeights::uniform(groups.groups.size());
  DetachedExperts detached;
  for (const auto& g : groups.groups) detached.emplace_back(g.traces.size(), false);

  bool ended = false;
  for (std::size_t t = 0; t < budget; ++t) {
    auto step = poe_step(backend, groups, weights, prompt_id, out.answer, floor_logprob, &detached);
    const auto token = static_cast<TokenId>(sample_categorical(step.q.logp, rng));

    StepDiagnostics diag;
    diag.token = token;
    diag.q_entropy = entropy_nats(step.q.logp);
    double sum_sq = 0.0;
    for (double w : weights.normalized()) sum_sq += w * w;
    diag.effective_groups = 1.0 / sum_sq;
    diag.evaluations = step.evaluations;
    diag.log_weights = weights.ell;
    diag.log_offset = weights.offset;
    out.steps.push_back(diag);

    std::vector<double> token_scores(groups.groups.size());
    for (std::size_t s = 0; s < token_scores.size(); ++s) {
      token_scores[s] = step.scores[s][token];
      for (std::size_t i = 0; i < step.rows[s].size(); ++i) {
        const auto& row = step.rows[s][i];
        if (!row.logp.empty() && !row.support[token]) detached[s][i] = true;
      }
    }
    weights = update_prefix_weights(weights, token_scores);
    out.answer.push_back(token);
    if (token == eos) {
      ended = true;
      break;
    }
  }
  out.budget_exhausted = !ended;
  out.final_weights = weights;
  return out;
}

struct DecodeResult {
  std::vector<ParsedCompletion> traces;
  TokenSeq answer;
  bool fallback_used = false;
  bool budget_exhausted = false;
  std::optional<TraceGroupSet> groups;
  std::size_t budget = 0;
  std::vector<StepDiagnostics> steps;

  bool operator==(const DecodeResult&) const = default;
};

/// Samples K*S traces, groups them, and decodes one answer token by token
/// from the prefix-weighted product of experts. Falls back to a fresh base
/// completion when fewer than cfg.min_usable_traces traces are usable or the
/// budget is below one token.
inline DecodeResult marginal_sharpen_decode(const Backend& backend, const std::string& prompt_id,
                                            const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DecodeResult out;
  const std::size_t M = cfg.num_traces();
  out.traces.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    Rng rng({seed, m});
    out.traces.push_back(sample_trace(backend, prompt_id, cfg.L, rng));
  }

  out.groups = group_traces(out.traces, cfg.K, cfg.S, cfg.min_usable_traces);
  const auto budget = compute_budget(cfg.L, out.traces);
  if (!out.groups || !budget) {
    out.groups.reset();
    Rng rng({seed, streams::kFallback});
    const auto base = base_completion(backend, prompt_id, cfg.L, rng);
    out.answer = base.answer;
    out.fallback_used = true;
    out.budget_exhausted = base.truncated;
    return out;
  }
  out.budget = *budget;
  Rng rng({seed, streams::kDecoder});
  auto decoded = decode_answer(backend, prompt_id, *out.groups, *budget, rng, cfg.floor_logprob);
  out.answer = std::move(decoded.answer);
  out.budget_exhausted = decoded.budget_exhausted;
  out.steps = std::move(decoded.steps);
  return out;
}

inline nlohmann::json to_json(const DecodeResult& r, const Vocab& vocab) {
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : r.traces)
    traces.push_back({{"trace", vocab.decode(t.trace)}, {"truncated", t.truncated}});
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"token", vocab.name(s.token)},
                     {"q_entropy", s.q_entropy},
                     {"effective_groups", s.effective_groups},
                     {"evaluations", s.evaluations}});
  nlohmann::json groups = nullptr;
  if (r.groups) groups = r.groups->provenance;
  return {{"answer", vocab.decode(r.answer)}, {"fallback_used", r.fallback_used},
          {"budget_exhausted", r.budget_exhausted}, {"budget", r.budget},
          {"groups", groups}, {"traces", traces}, {"steps", steps}};
}

/// Per-step diagnostics as JSON lines.
inline std::string diagnostics_jsonl(const DecodeResult& r, const Vocab& vocab) {
  std::string out;
  for (std::size_t t = 0; t < r.steps.size(); ++t) {
    const auto& s = r.steps[t];
    out += nlohmann::json{{"step", t + 1},
                          {"token", vocab.name(s.token)},
                          {"q_entropy", s.q_entropy},
                          {"effective_groups", s.effective_groups},
                          {"evaluations", s.evaluations}}
               .dump();
    out += '\n';
  }
  return out;
}

}  // namespace msharp
