// SPDX-License-Identifier: Apache-2.0
#pragma once

// Brute-force exact computations over enumerable backends. Everything here
// sums over complete sequences explicitly; nothing is sampled.

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "answer_dist.hpp"
#include "backend.hpp"
#include "errors.hpp"
#include "numeric.hpp"
#include "seq.hpp"

namespace msharp::oracle {

struct TraceMass {
  TokenSeq trace;
  double log_mass = kNegInf;
};

using ConditionalTable = std::map<TokenSeq, double>;  // answer -> log pi(a | x, z)

namespace detail {

inline LogProbVector exact_row(const Backend& backend, const std::string& prompt_id,
                               const TokenSeq& prefix) {
  auto row = backend.next_token_logprobs(Context{prompt_id, prefix});
  if (!row.exhaustive()) throw OracleError("oracle requires a backend reporting the full vocabulary");
  return row;
}

// Visits every positive-mass continuation of `prefix` that ends in eos.
template <typename Visit>
void walk_to_eos(const Backend& backend, const std::string& prompt_id, TokenSeq& prefix,
                 std::size_t start, double log_mass, Visit&& visit) {
  const auto row = exact_row(backend, prompt_id, prefix);
  const TokenId eos = backend.vocab().eos;
  for (TokenId v = 0; v < row.size(); ++v) {
    if (row.logp[v] == kNegInf) continue;
    prefix.push_back(v);
    if (v == eos) {
      visit(TokenSeq(prefix.begin() + static_cast<std::ptrdiff_t>(start), prefix.end()),
            log_mass + row.logp[v]);
    } else {
      walk_to_eos(backend, prompt_id, prefix, start, log_mass + row.logp[v], visit);
    }
    prefix.pop_back();
  }
}

inline void walk_traces(const Backend& backend, const std::string& prompt_id, TokenSeq& prefix,
                        double log_mass, std::vector<TraceMass>& out) {
  const Vocab& vocab = backend.vocab();
  const auto row = exact_row(backend, prompt_id, prefix);
  for (TokenId v = 0; v < row.size(); ++v) {
    if (row.logp[v] == kNegInf) continue;
    if (v == vocab.eos) {
      throw OracleError("completion [" + vocab.join(prefix) + " eos] ends before the answer boundary");
    }
    prefix.push_back(v);
    if (v == vocab.think_end) {
      out.push_back({prefix, log_mass + row.logp[v]});
    } else {
      walk_traces(backend, prompt_id, prefix, log_mass + row.logp[v], out);
    }
    prefix.pop_back();
  }
}

// Sum over experts of log pi(v | x, z_i, prefix) for every token v.
inline std::vector<double> product_scores(const Backend& backend, const std::string& prompt_id,
                                          const TraceGroup& group, const TokenSeq& answer_prefix) {
  std::vector<double> scores(backend.vocab().size(), 0.0);
  for (const auto& z : group.traces) {
    TokenSeq ctx = z;
    ctx.insert(ctx.end(), answer_prefix.begin(), answer_prefix.end());
    const auto row = exact_row(backend, prompt_id, ctx);
    for (std::size_t v = 0; v < scores.size(); ++v) scores[v] += row.logp[v];
  }
  return scores;
}

// Sum over experts of log pi(prefix | x, z_i), by direct token-by-token lookup.
inline double prefix_log_likelihood(const Backend& backend, const std::string& prompt_id,
                                    const TraceGroup& group, const TokenSeq& answer_prefix) {
  double total = 0.0;
  for (const auto& z : group.traces) {
    TokenSeq ctx = z;
    for (TokenId a : answer_prefix) {
      const auto row = exact_row(backend, prompt_id, ctx);
      if (row.logp[a] == kNegInf) return kNegInf;
      total += row.logp[a];
      ctx.push_back(a);
    }
  }
  return total;
}

}  // namespace detail

/// Every trace (prefix through the first think_end) with its probability
/// under ancestral sampling.
inline std::vector<TraceMass> enumerate_traces(const Backend& backend, const std::string& prompt_id) {
  std::vector<TraceMass> out;
  TokenSeq prefix;
  detail::walk_traces(backend, prompt_id, prefix, 0.0, out);
  return out;
}

/// log pi(a | x, z) for every answer with positive mass after `trace`.
inline ConditionalTable answer_conditional(const Backend& backend, const std::string& prompt_id,
                                           const TokenSeq& trace) {
  ConditionalTable out;
  TokenSeq prefix = trace;
  detail::walk_to_eos(backend, prompt_id, prefix, trace.size(), 0.0,
                      [&](TokenSeq answer, double lp) { out[std::move(answer)] = lp; });
  return out;
}

inline JointDist enumerate_completions(const Backend& backend, const std::string& prompt_id) {
  JointDist out;
  for (const auto& [z, lz] : enumerate_traces(backend, prompt_id))
    for (const auto& [a, la] : answer_conditional(backend, prompt_id, z))
      out.entries.push_back({z, a, lz + la});
  return out;
}

/// m(a | x) = sum_z pi(z, a | x).
inline AnswerDist exact_answer_marginal(const Backend& backend, const std::string& prompt_id) {
  return enumerate_completions(backend, prompt_id).answer_marginal();
}

/// m(a | x)^alpha, renormalized. Any alpha > 0.
inline AnswerDist exact_marginal_sharpened(const Backend& backend, const std::string& prompt_id,
                                           double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  const auto m = exact_answer_marginal(backend, prompt_id);
  std::map<TokenSeq, double> powered;
  for (const auto& e : m.entries()) powered[e.answer] = alpha * e.log_mass;
  return AnswerDist::from_log_masses(powered);
}

/// pi(z, a | x)^alpha, renormalized over complete sequences.
inline JointDist exact_joint_sharpened(const Backend& backend, const std::string& prompt_id,
                                       double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  JointDist out = enumerate_completions(backend, prompt_id);
  std::vector<double> logs;
  for (auto& e : out.entries) logs.push_back(e.log_mass *= alpha);
  const double z = log_sum_exp(logs);
  for (auto& e : out.entries) e.log_mass -= z;
  return out;
}

/// Sum over every K-tuple of traces of prod_i pi_z(z_i) pi(a | x, z_i),
/// normalized over answers.
inline AnswerDist integer_expansion_marginal(const Backend& backend, const std::string& prompt_id,
                                             int K, std::size_t tuple_cap = std::size_t{1} << 20) {
  if (K < 1) throw ConfigError("K must be at least 1");
  const auto traces = enumerate_traces(backend, prompt_id);
  const std::size_t n = traces.size();
  double tuples = std::pow(static_cast<double>(n), K);
  if (tuples > static_cast<double>(tuple_cap)) {
    throw OracleError(std::to_string(n) + "^" + std::to_string(K) +
                      " trace tuples exceed the enumeration cap; use a smaller K");
  }

  std::vector<ConditionalTable> cond;
  std::map<TokenSeq, std::size_t> answer_index;
  for (const auto& t : traces) {
    cond.push_back(answer_conditional(backend, prompt_id, t.trace));
    for (const auto& [a, _] : cond.back()) answer_index.emplace(a, 0);
  }
  std::vector<TokenSeq> answers;
  for (auto& [a, idx] : answer_index) {
    idx = answers.size();
    answers.push_back(a);
  }
  // joint[j][a] = log pi_z(z_j) + log pi(a | z_j)
  std::vector<std::vector<double>> joint(n, std::vector<double>(answers.size(), kNegInf));
  for (std::size_t j = 0; j < n; ++j)
    for (const auto& [a, la] : cond[j]) joint[j][answer_index[a]] = traces[j].log_mass + la;

  std::vector<std::vector<double>> terms(answers.size());
  std::vector<std::size_t> tuple(static_cast<std::size_t>(K), 0);
  while (true) {
    for (std::size_t a = 0; a < answers.size(); ++a) {
      double term = 0.0;
      for (std::size_t j : tuple) term += joint[j][a];
      if (term != kNegInf) terms[a].push_back(term);
    }
    std::size_t pos = 0;
    while (pos < tuple.size() && ++tuple[pos] == n) tuple[pos++] = 0;
    if (pos == tuple.size()) break;
  }
  std::map<TokenSeq, std::vector<double>> by_answer;
  for (std::size_t a = 0; a < answers.size(); ++a) by_answer[answers[a]] = std::move(terms[a]);
  return AnswerDist::from_log_terms(by_answer);
}

/// p_hat(a) proportional to sum_s prod_i pi(a | x, z_i^(s)).
inline AnswerDist empirical_rb_estimate(const Backend& backend, const std::string& prompt_id,
                                        std::span<const TraceGroup> groups) {
  if (groups.empty()) throw ConfigError("empirical estimate needs at least one group");
  const std::size_t K = groups.front().size();
  std::map<TokenSeq, ConditionalTable> cache;
  std::map<TokenSeq, std::vector<double>> terms;
  for (const auto& g : groups) {
    if (g.size() != K) throw ConfigError("trace groups must have equal size");
    validate_group(g, backend.vocab());
    for (const auto& z : g.traces)
      if (!cache.count(z)) cache[z] = answer_conditional(backend, prompt_id, z);
  }
  for (const auto& [_, table] : cache)
    for (const auto& [a, __] : table) terms[a];
  for (const auto& g : groups) {
    for (auto& [a, t] : terms) {
      double term = 0.0;
      for (const auto& z : g.traces) {
        const auto& table = cache[z];
        auto it = table.find(a);
        term += it == table.end() ? kNegInf : it->second;
      }
      if (term != kNegInf) t.push_back(term);
    }
  }
  try {
    return AnswerDist::from_log_terms(terms);
  } catch (const OracleError&) {
    throw OracleError("trace groups assign zero product mass to every answer");
  }
}

/// prod_i pi(a | x, z_i), normalized: the exact target for one fixed group.
inline AnswerDist exact_conditional_given_traces(const Backend& backend, const std::string& prompt_id,
                                                 const TraceGroup& group) {
  return empirical_rb_estimate(backend, prompt_id, std::span<const TraceGroup>(&group, 1));
}

/// log C(prefix) = log sum_r prod_i pi(r | x, z_i, prefix) over complete
/// continuations r, enumerated jointly across experts.
inline double continuation_normalizer(const Backend& backend, const std::string& prompt_id,
                                      const TraceGroup& group, const TokenSeq& answer_prefix) {
  if (!answer_prefix.empty() && answer_prefix.back() == backend.vocab().eos) return 0.0;
  const auto scores = detail::product_scores(backend, prompt_id, group, answer_prefix);
  std::vector<double> terms;
  TokenSeq next = answer_prefix;
  for (TokenId v = 0; v < scores.size(); ++v) {
    if (scores[v] == kNegInf) continue;
    next.push_back(v);
    terms.push_back(scores[v] + continuation_normalizer(backend, prompt_id, group, next));
    next.pop_back();
  }
  return terms.empty() ? kNegInf : log_sum_exp(terms);
}

/// Exact next-token conditional of the empirical estimate given an answer
/// prefix, assembled from prefix likelihood W_s, current-token score, and
/// continuation normalizer C_s. Returns normalized log-probs over the vocabulary.
inline std::vector<double> exact_prefix_conditional(const Backend& backend, const std::string& prompt_id,
                                                    std::span<const TraceGroup> groups,
                                                    const TokenSeq& answer_prefix) {
  const std::size_t V = backend.vocab().size();
  std::vector<std::vector<double>> per_token(V);
  for (const auto& g : groups) {
    const double log_w = detail::prefix_log_likelihood(backend, prompt_id, g, answer_prefix);
    if (log_w == kNegInf) continue;
    const auto scores = detail::product_scores(backend, prompt_id, g, answer_prefix);
    TokenSeq next = answer_prefix;
    for (TokenId v = 0; v < V; ++v) {
      if (scores[v] == kNegInf) continue;
      next.push_back(v);
      per_token[v].push_back(log_w + scores[v] + continuation_normalizer(backend, prompt_id, g, next));
      next.pop_back();
    }
  }
  std::vector<double> out(V, kNegInf);
  for (std::size_t v = 0; v < V; ++v)
    if (!per_token[v].empty()) out[v] = log_sum_exp(per_token[v]);
  log_normalize(out);
  return out;
}

namespace detail {

inline void walk_decoder(const Backend& backend, const std::string& prompt_id,
                         std::span<const TraceGroup> groups, TokenSeq& prefix, double log_path,
                         std::map<TokenSeq, std::vector<double>>& out) {
  const std::size_t V = backend.vocab().size();
  std::vector<std::vector<double>> mix(V);
  for (const auto& g : groups) {
    const double ell = prefix_log_likelihood(backend, prompt_id, g, prefix);
    if (ell == kNegInf) continue;
    const auto scores = product_scores(backend, prompt_id, g, prefix);
    for (std::size_t v = 0; v < V; ++v) mix[v].push_back(ell + scores[v]);
  }
  std::vector<double> q(V, kNegInf);
  for (std::size_t v = 0; v < V; ++v)
    if (!mix[v].empty()) q[v] = log_sum_exp(mix[v]);
  log_normalize(q);
  for (TokenId v = 0; v < V; ++v) {
    if (q[v] == kNegInf) continue;
    prefix.push_back(v);
    if (v == backend.vocab().eos) {
      out[prefix].push_back(log_path + q[v]);
    } else {
      walk_decoder(backend, prompt_id, groups, prefix, log_path + q[v], out);
    }
    prefix.pop_back();
  }
}

}  // namespace detail

/// Exact law of the token-level prefix-weighted decoder for fixed groups,
/// obtained by enumerating its prefix chain. Prefix weights are recomputed
/// from scratch at every node. Assumes the length budget is never binding.
inline AnswerDist decoder_induced_distribution(const Backend& backend, const std::string& prompt_id,
                                               std::span<const TraceGroup> groups) {
  if (groups.empty()) throw ConfigError("decoder law needs at least one group");
  for (const auto& g : groups) validate_group(g, backend.vocab());
  std::map<TokenSeq, std::vector<double>> out;
  TokenSeq prefix;
  detail::walk_decoder(backend, prompt_id, groups, prefix, 0.0, out);
  return AnswerDist::from_log_terms(out);
}

/// Mixture of decoder_induced_distribution over every assignment of K*S
/// i.i.d. traces to S groups of K, weighted by trace probabilities.
inline AnswerDist composed_decoder_law(const Backend& backend, const std::string& prompt_id, int K,
                                       int S, std::size_t tuple_cap = std::size_t{1} << 16) {
  if (K < 1 || S < 1) throw ConfigError("K and S must be positive");
  const auto traces = enumerate_traces(backend, prompt_id);
  const std::size_t n = traces.size();
  const std::size_t M = static_cast<std::size_t>(K * S);
  if (std::pow(static_cast<double>(n), static_cast<double>(M)) > static_cast<double>(tuple_cap))
    throw OracleError("trace assignments exceed the enumeration cap");
  std::map<TokenSeq, std::vector<double>> terms;
  std::vector<std::size_t> tuple(M, 0);
  while (true) {
    std::vector<TraceGroup> groups(static_cast<std::size_t>(S));
    double weight = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      groups[m / static_cast<std::size_t>(K)].traces.push_back(traces[tuple[m]].trace);
      weight += traces[tuple[m]].log_mass;
    }
    const auto law = decoder_induced_distribution(backend, prompt_id, groups);
    for (const auto& e : law.entries())
      terms[e.answer].push_back(weight + e.log_mass);
    std::size_t pos = 0;
    while (pos < M && ++tuple[pos] == n) tuple[pos++] = 0;
    if (pos == M) break;
  }
  return AnswerDist::from_log_terms(terms);
}

}  // namespace msharp::oracle
