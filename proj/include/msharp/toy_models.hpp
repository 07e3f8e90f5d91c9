// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rng.hpp"
#include "seq.hpp"
#include "tabular_model.hpp"

namespace msharp {

struct RandomModelShape {
  int trace_tokens = 2;
  int answer_tokens = 3;
  int max_trace_len = 2;   // reasoning tokens before think_end
  int max_answer_len = 2;  // answer tokens before eos
  double zero_prob = 0.2;  // chance an optional entry is zeroed
  int prompts = 1;
};

/// Seeded random tabular model. Every path emits think_end before any answer
/// token and eos only after at least one answer token. Values depend only on
/// the seed.
inline TabularModel random_tabular_model(std::uint64_t seed, const RandomModelShape& shape = {}) {
  Vocab vocab;
  for (int i = 0; i < shape.trace_tokens; ++i) vocab.names.push_back("r" + std::to_string(i));
  for (int i = 0; i < shape.answer_tokens; ++i) vocab.names.push_back("a" + std::to_string(i));
  vocab.think_end = static_cast<TokenId>(vocab.names.size());
  vocab.names.push_back("think_end");
  vocab.eos = static_cast<TokenId>(vocab.names.size());
  vocab.names.push_back("eos");
  const std::size_t V = vocab.names.size();
  const std::size_t max_len = static_cast<std::size_t>(shape.max_trace_len + shape.max_answer_len + 2);
  TabularModel model(vocab, max_len);
  Rng rng({seed, 0});

  // Exponential weights over `allowed`, optional zeros, at least one survivor.
  auto draw = [&](const std::vector<TokenId>& allowed, const std::vector<TokenId>& keep) {
    std::vector<double> p(V, 0.0);
    double total = 0.0;
    for (TokenId v : allowed) {
      const bool forced = std::find(keep.begin(), keep.end(), v) != keep.end();
      if (!forced && rng.uniform() < shape.zero_prob) continue;
      p[v] = -std::log1p(-rng.uniform()) + 1e-3;
      total += p[v];
    }
    if (total == 0.0) {
      p[allowed.front()] = 1.0;
      total = 1.0;
    }
    for (double& x : p) x /= total;
    return p;
  };

  std::vector<TokenId> trace_ids, answer_ids;
  for (int i = 0; i < shape.trace_tokens; ++i) trace_ids.push_back(static_cast<TokenId>(i));
  for (int i = 0; i < shape.answer_tokens; ++i) answer_ids.push_back(static_cast<TokenId>(shape.trace_tokens + i));

  for (int pi = 0; pi < shape.prompts; ++pi) {
    const std::string pid = "p" + std::to_string(pi);
    std::vector<double> forced_eos(V, 0.0);
    forced_eos[vocab.eos] = 1.0;

    auto answer_phase = [&](auto&& self, TokenSeq& prefix, int depth) -> void {
      if (depth == shape.max_answer_len) {
        model.set_row(pid, prefix, forced_eos);
        return;
      }
      std::vector<TokenId> allowed = answer_ids;
      std::vector<TokenId> keep;
      if (depth > 0) {
        allowed.push_back(vocab.eos);
        keep.push_back(vocab.eos);
      }
      const auto row = draw(allowed, keep);
      model.set_row(pid, prefix, row);
      for (TokenId v : answer_ids) {
        if (row[v] == 0.0) continue;
        prefix.push_back(v);
        self(self, prefix, depth + 1);
        prefix.pop_back();
      }
    };
    auto trace_phase = [&](auto&& self, TokenSeq& prefix, int depth) -> void {
      std::vector<double> row(V, 0.0);
      if (depth == shape.max_trace_len) {
        row[vocab.think_end] = 1.0;
      } else {
        std::vector<TokenId> allowed = trace_ids;
        allowed.push_back(vocab.think_end);
        row = draw(allowed, {});
      }
      model.set_row(pid, prefix, row);
      for (TokenId v = 0; v < V; ++v) {
        if (row[v] == 0.0) continue;
        prefix.push_back(v);
        if (v == vocab.think_end)
          answer_phase(answer_phase, prefix, 0);
        else
          self(self, prefix, depth + 1);
        prefix.pop_back();
      }
    };
    TokenSeq prefix;
    trace_phase(trace_phase, prefix, 0);
  }
  model.validate();
  return model;
}

}  // namespace msharp
