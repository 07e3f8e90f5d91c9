// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sequential importance sampling over answer particles for one fixed trace
// group. The proposal is the token-level product of experts; each particle
// accumulates the local normalizers log rho_t that the proposal drops.

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "answer_dist.hpp"
#include "backend.hpp"
#include "decoder.hpp"
#include "errors.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "seq.hpp"

namespace msharp {

struct SisConfig {
  int P = 8;
  int K = 4;
  std::size_t L = 64;
  double ess_threshold_fraction = 0.5;
  bool resample = true;
  double floor_logprob = -30.0;

  void validate() const {
    if (P < 1 || K < 1 || L < 1) throw ConfigError("SIS config fields must be positive");
    if (!(ess_threshold_fraction > 0.0 && ess_threshold_fraction <= 1.0))
      throw ConfigError("ess threshold fraction must lie in (0, 1]");
  }
};

struct Particle {
  TokenSeq prefix;
  double log_weight = 0.0;
  bool terminated = false;
  Rng rng;
};

/// log rho = log sum_v exp(sum_i l_i(v)) - sum_i log sum_v exp(l_i(v)).
/// Rows may be unnormalized logits.
inline double log_rho(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw ConfigError("log_rho needs at least one expert row");
  const std::size_t V = rows.front().size();
  std::vector<double> summed(V, 0.0);
  double normalizers = 0.0;
  for (const auto& row : rows) {
    if (row.size() != V) throw ConfigError("expert rows differ in length");
    for (std::size_t v = 0; v < V; ++v) summed[v] += row[v];
    normalizers += log_sum_exp(row);
  }
  return log_sum_exp(summed) - normalizers;
}

/// (sum w)^2 / sum w^2 of the normalized weights.
inline double ess(std::span<const double> log_weights) {
  const double z = log_sum_exp(log_weights);
  if (z == kNegInf) throw NumericError("ess: no finite weight");
  double sum_sq = 0.0;
  for (double lw : log_weights) {
    const double w = std::exp(lw - z);
    sum_sq += w * w;
  }
  return 1.0 / sum_sq;
}

/// P multinomial draws proportional to weight. Offspring reset to log(1/P)
/// and get fresh streams keyed by the resampling event.
inline std::vector<Particle> resample_multinomial(const std::vector<Particle>& particles, Rng& rng,
                                                  std::uint64_t event = 0) {
  std::vector<double> lw;
  lw.reserve(particles.size());
  for (const auto& p : particles) lw.push_back(p.log_weight);
  const double reset = -std::log(static_cast<double>(particles.size()));
  std::vector<Particle> out;
  out.reserve(particles.size());
  for (std::size_t j = 0; j < particles.size(); ++j) {
    const auto& parent = particles[sample_categorical(lw, rng)];
    Particle child{parent.prefix, reset, parent.terminated,
                   Rng({rng.state().seed, streams::kSisResample + event * particles.size() + j})};
    out.push_back(std::move(child));
  }
  return out;
}

struct SisResult {
  TokenSeq answer;
  std::size_t selected = 0;
  std::vector<Particle> particles;
  std::vector<double> ess_per_step;
  std::size_t resample_events = 0;
  bool budget_exhausted = false;

  /// Normalized final weights.
  std::vector<double> weight_spectrum() const {
    std::vector<double> lw;
    for (const auto& p : particles) lw.push_back(p.log_weight);
    log_normalize(lw);
    for (double& x : lw) x = std::exp(x);
    return lw;
  }

  /// Self-normalized weighted distribution over particle answers.
  AnswerDist weighted_answers() const {
    std::map<TokenSeq, std::vector<double>> terms;
    for (const auto& p : particles) terms[p.prefix].push_back(p.log_weight);
    return AnswerDist::from_log_terms(terms);
  }

  nlohmann::json diagnostics_json() const {
    return {{"ess", ess_per_step}, {"resample_events", resample_events},
            {"final_weights", weight_spectrum()}, {"budget_exhausted", budget_exhausted}};
  }
};

/// Particle p draws its tokens from stream kSisParticle + p, except particle 0
/// which shares the token-level decoder's stream; with P = 1 and no
/// resampling the sampled path therefore matches decode_answer exactly.
inline SisResult sis_decode(const Backend& backend, const std::string& prompt_id, const TraceGroup& group,
                            const SisConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  validate_group(group, backend.vocab());
  if (group.size() != static_cast<std::size_t>(cfg.K))
    throw ConfigError("trace group size does not match K");
  const TokenId eos = backend.vocab().eos;

  TraceGroupSet single;
  single.groups = {group};
  std::vector<ParsedCompletion> parsed;
  for (const auto& z : group.traces) parsed.push_back({z, {}, false});
  single.provenance = {std::vector<std::size_t>(group.size())};
  for (std::size_t i = 0; i < group.size(); ++i) single.provenance[0][i] = i;

  SisResult out;
  for (int p = 0; p < cfg.P; ++p) {
    const std::uint64_t stream = p == 0 ? streams::kDecoder : streams::kSisParticle + static_cast<std::uint64_t>(p);
    out.particles.push_back(Particle{{}, 0.0, false, Rng({seed, stream})});
  }
  Rng control({seed, streams::kSisControl});

  const auto budget = compute_budget(cfg.L, parsed);
  const std::size_t steps = budget.value_or(0);
  const PrefixWeights unit = PrefixWeights::uniform(1);
  for (std::size_t t = 0; t < steps; ++t) {
    bool any_live = false;
    for (auto& particle : out.particles) {
      if (particle.terminated) continue;
      any_live = true;
      PrefixWeights w = unit;
      w.step = particle.prefix.size();
      const auto step = poe_step(backend, single, w, prompt_id, particle.prefix, cfg.floor_logprob);
      // Expert rows over the candidate set, with the floor filled in.
      std::vector<std::vector<double>> rows(group.size(), std::vector<double>(step.q.size(), kNegInf));
      for (std::size_t i = 0; i < group.size(); ++i)
        for (std::size_t v = 0; v < step.q.size(); ++v)
          if (step.q.support[v])
            rows[i][v] = step.rows[0][i].support[v] ? step.rows[0][i].logp[v] : cfg.floor_logprob;
      const double lr = log_rho(rows);
      const auto token = static_cast<TokenId>(sample_categorical(step.q.logp, particle.rng));
      particle.prefix.push_back(token);
      particle.log_weight += lr;
      if (token == eos) particle.terminated = true;
    }
    if (!any_live) break;

    std::vector<double> lw;
    for (const auto& p : out.particles) lw.push_back(p.log_weight);
    const double e = ess(lw);
    out.ess_per_step.push_back(e);
    if (cfg.resample && cfg.P > 1 && e < cfg.ess_threshold_fraction * cfg.P) {
      out.particles = resample_multinomial(out.particles, control, out.resample_events);
      ++out.resample_events;
    }
    bool all_done = true;
    for (const auto& p : out.particles) all_done = all_done && p.terminated;
    if (all_done) break;
  }

  for (const auto& p : out.particles) out.budget_exhausted = out.budget_exhausted || !p.terminated;
  std::vector<double> lw;
  for (const auto& p : out.particles) lw.push_back(p.log_weight);
  out.selected = cfg.P == 1 ? 0 : sample_categorical(lw, control);
  out.answer = out.particles[out.selected].prefix;
  return out;
}

}  // namespace msharp
