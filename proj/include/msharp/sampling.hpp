// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>

#include "backend.hpp"
#include "rng.hpp"
#include "seq.hpp"

namespace msharp {

/// Ancestral sampling halted right after the answer boundary. A trace that
/// hits max_len or emits eos first comes back truncated.
inline ParsedCompletion sample_trace(const Backend& backend, const std::string& prompt_id,
                                     std::size_t max_len, Rng& rng) {
  const Vocab& vocab = backend.vocab();
  Context ctx{prompt_id, {}};
  const std::size_t cap = std::min(max_len, backend.max_len());
  while (ctx.prefix.size() < cap) {
    const auto lp = backend.next_token_logprobs(ctx);
    const auto tok = static_cast<TokenId>(sample_categorical(lp.logp, rng));
    ctx.prefix.push_back(tok);
    if (tok == vocab.think_end || tok == vocab.eos) break;
  }
  return parse_completion(ctx.prefix, vocab);
}

/// Full ancestral sample up to eos or L tokens. Flagged truncated when
/// either the boundary or the final eos is missing.
inline ParsedCompletion base_completion(const Backend& backend, const std::string& prompt_id,
                                        std::size_t L, Rng& rng) {
  const Vocab& vocab = backend.vocab();
  Context ctx{prompt_id, {}};
  const std::size_t cap = std::min(L, backend.max_len());
  while (ctx.prefix.size() < cap) {
    const auto lp = backend.next_token_logprobs(ctx);
    const auto tok = static_cast<TokenId>(sample_categorical(lp.logp, rng));
    ctx.prefix.push_back(tok);
    if (tok == vocab.eos) break;
  }
  ParsedCompletion out = parse_completion(ctx.prefix, vocab);
  if (ctx.prefix.empty() || ctx.prefix.back() != vocab.eos) out.truncated = true;
  return out;
}

}  // namespace msharp
