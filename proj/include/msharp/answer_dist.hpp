// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "numeric.hpp"
#include "seq.hpp"

namespace msharp {

struct AnswerMass {
  TokenSeq answer;
  double log_mass = kNegInf;

  bool operator==(const AnswerMass&) const = default;
};

/// Finite distribution over complete answers, sorted by answer tokens.
/// Zero-mass answers are not stored.
class AnswerDist {
 public:
  AnswerDist() = default;

  /// Each answer's mass is the log-sum-exp of its terms; the result is
  /// normalized across answers.
  static AnswerDist from_log_terms(const std::map<TokenSeq, std::vector<double>>& terms) {
    std::map<TokenSeq, double> masses;
    for (const auto& [answer, t] : terms) masses[answer] = t.empty() ? kNegInf : log_sum_exp(t);
    return from_log_masses(masses);
  }

  static AnswerDist from_log_masses(const std::map<TokenSeq, double>& masses) {
    std::vector<double> all;
    for (const auto& [_, m] : masses) all.push_back(m);
    if (all.empty() || log_sum_exp(all) == kNegInf)
      throw OracleError("answer distribution has no positive mass");
    const double z = log_sum_exp(all);
    AnswerDist out;
    for (const auto& [answer, m] : masses)
      if (m != kNegInf) out.entries_.push_back({answer, m - z});
    return out;
  }

  /// Normalizes non-negative weights (counts or summed importance weights).
  static AnswerDist from_weights(const std::map<TokenSeq, double>& weights) {
    std::map<TokenSeq, double> masses;
    for (const auto& [answer, w] : weights) masses[answer] = w > 0.0 ? std::log(w) : kNegInf;
    return from_log_masses(masses);
  }

  const std::vector<AnswerMass>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  double log_prob(const TokenSeq& answer) const {
    for (const auto& e : entries_)
      if (e.answer == answer) return e.log_mass;
    return kNegInf;
  }
  double prob(const TokenSeq& answer) const { return std::exp(log_prob(answer)); }

  /// Highest-mass answer; ties go to the smaller answer.
  const TokenSeq& argmax() const {
    if (entries_.empty()) throw OracleError("argmax of an empty distribution");
    const AnswerMass* best = &entries_.front();
    for (const auto& e : entries_)
      if (e.log_mass > best->log_mass) best = &e;
    return best->answer;
  }

  double total_mass() const {
    double total = 0.0;
    for (const auto& e : entries_) total += std::exp(e.log_mass);
    return total;
  }

  nlohmann::json to_json(const Vocab& vocab) const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries_)
      arr.push_back({{"answer", vocab.decode(e.answer)}, {"prob", std::exp(e.log_mass)}});
    return arr;
  }

  bool operator==(const AnswerDist&) const = default;

 private:
  std::vector<AnswerMass> entries_;
};

/// (1/2) sum_a |p(a) - q(a)| over the union of supports.
inline double tv_distance(const AnswerDist& p, const AnswerDist& q) {
  std::map<TokenSeq, std::pair<double, double>> both;
  for (const auto& e : p.entries()) both[e.answer].first = std::exp(e.log_mass);
  for (const auto& e : q.entries()) both[e.answer].second = std::exp(e.log_mass);
  double sum = 0.0;
  for (const auto& [_, pq] : both) sum += std::abs(pq.first - pq.second);
  return 0.5 * sum;
}

/// Largest absolute probability difference over the union of supports.
inline double max_abs_diff(const AnswerDist& p, const AnswerDist& q) {
  std::map<TokenSeq, std::pair<double, double>> both;
  for (const auto& e : p.entries()) both[e.answer].first = std::exp(e.log_mass);
  for (const auto& e : q.entries()) both[e.answer].second = std::exp(e.log_mass);
  double worst = 0.0;
  for (const auto& [_, pq] : both) worst = std::max(worst, std::abs(pq.first - pq.second));
  return worst;
}

struct JointMass {
  TokenSeq trace;
  TokenSeq answer;
  double log_mass = kNegInf;
};

/// Distribution over parsed (trace, answer) completions.
struct JointDist {
  std::vector<JointMass> entries;

  AnswerDist answer_marginal() const {
    std::map<TokenSeq, std::vector<double>> terms;
    for (const auto& e : entries) terms[e.answer].push_back(e.log_mass);
    return AnswerDist::from_log_terms(terms);
  }

  double log_prob(const TokenSeq& trace, const TokenSeq& answer) const {
    for (const auto& e : entries)
      if (e.trace == trace && e.answer == answer) return e.log_mass;
    return kNegInf;
  }

  double total_mass() const {
    double total = 0.0;
    for (const auto& e : entries) total += std::exp(e.log_mass);
    return total;
  }
};

}  // namespace msharp
