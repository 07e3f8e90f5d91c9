// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "answer_dist.hpp"
#include "backend.hpp"
#include "errors.hpp"
#include "oracle.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "seq.hpp"

namespace msharp {

/// Maps an answer to the key it is counted under when voting.
struct AnswerEquiv {
  std::function<TokenSeq(const TokenSeq&)> canonicalize = [](const TokenSeq& a) { return a; };
};

/// Plain ancestral sampling at temperature 1.
inline ParsedCompletion temperature_sample_answer(const Backend& backend, const std::string& prompt_id,
                                                  std::size_t L, std::uint64_t seed) {
  Rng rng({seed, 0});
  return base_completion(backend, prompt_id, L, rng);
}

struct VoteResult {
  TokenSeq answer;       // a representative of the winning class
  TokenSeq key;          // canonical key of the winning class
  std::size_t votes = 0;
  std::size_t usable = 0;
};

/// Tallies answers by canonical key; the plurality wins and ties go to the
/// smallest key. The representative is the first sampled member of the class.
inline VoteResult tally_votes(std::span<const ParsedCompletion> completions, const AnswerEquiv& equiv) {
  std::map<TokenSeq, std::pair<std::size_t, std::size_t>> classes;  // key -> (count, first index)
  std::size_t usable = 0;
  for (std::size_t j = 0; j < completions.size(); ++j) {
    if (completions[j].truncated) continue;
    ++usable;
    auto key = equiv.canonicalize(completions[j].answer);
    auto [it, inserted] = classes.try_emplace(std::move(key), 0, j);
    ++it->second.first;
  }
  if (classes.empty()) throw Error("majority vote: every completion was truncated");
  auto best = classes.begin();
  for (auto it = classes.begin(); it != classes.end(); ++it)
    if (it->second.first > best->second.first) best = it;
  return {completions[best->second.second].answer, best->first, best->second.first, usable};
}

/// Draws k base completions (completion j uses stream j) and votes.
inline VoteResult majority_vote(const Backend& backend, const std::string& prompt_id, int k, std::size_t L,
                                const AnswerEquiv& equiv, std::uint64_t seed) {
  if (k < 1) throw ConfigError("majority vote needs k >= 1");
  std::vector<ParsedCompletion> completions;
  completions.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    Rng rng({seed, static_cast<std::uint64_t>(j)});
    completions.push_back(base_completion(backend, prompt_id, L, rng));
  }
  return tally_votes(completions, equiv);
}

/// Exact sampler for the joint-sharpened target pi(z, a | x)^alpha, built once
/// by enumeration. Stands in for sequence-level power sampling on toy models.
class JointSharpenedSampler {
 public:
  JointSharpenedSampler(const Backend& backend, const std::string& prompt_id, double alpha)
      : dist_(oracle::exact_joint_sharpened(backend, prompt_id, alpha)) {
    for (const auto& e : dist_.entries) log_masses_.push_back(e.log_mass);
  }

  std::pair<TokenSeq, TokenSeq> sample(std::uint64_t seed) const {
    Rng rng({seed, 0});
    const auto& e = dist_.entries[sample_categorical(log_masses_, rng)];
    return {e.trace, e.answer};
  }

  const JointDist& distribution() const noexcept { return dist_; }

 private:
  JointDist dist_;
  std::vector<double> log_masses_;
};

inline std::pair<TokenSeq, TokenSeq> joint_sharpened_sample(const Backend& backend, const std::string& prompt_id,
                                                            double alpha, std::uint64_t seed) {
  return JointSharpenedSampler(backend, prompt_id, alpha).sample(seed);
}

}  // namespace msharp
