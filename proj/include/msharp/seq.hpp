// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"

namespace msharp {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

struct Vocab {
  std::vector<std::string> names;
  TokenId eos = 0;
  TokenId think_end = 0;

  std::size_t size() const noexcept { return names.size(); }

  /// Throws ConfigError for names outside the vocabulary.
  TokenId id(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown token name '" + name + "'");
    return static_cast<TokenId>(it - names.begin());
  }

  const std::string& name(TokenId t) const { return names.at(t); }

  TokenSeq encode(const std::vector<std::string>& tokens) const {
    TokenSeq out;
    out.reserve(tokens.size());
    for (const auto& tok : tokens) out.push_back(id(tok));
    return out;
  }

  std::vector<std::string> decode(const TokenSeq& seq) const {
    std::vector<std::string> out;
    out.reserve(seq.size());
    for (TokenId t : seq) out.push_back(name(t));
    return out;
  }

  std::string join(const TokenSeq& seq, char sep = ' ') const {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += sep;
      out += name(seq[i]);
    }
    return out;
  }

  bool operator==(const Vocab&) const = default;
};

/// A completion split at the answer boundary. The delimiter belongs to the trace.
struct ParsedCompletion {
  TokenSeq trace;
  TokenSeq answer;
  bool truncated = false;

  TokenSeq joined() const {
    TokenSeq out = trace;
    out.insert(out.end(), answer.begin(), answer.end());
    return out;
  }

  bool operator==(const ParsedCompletion&) const = default;
};

inline ParsedCompletion parse_completion(const TokenSeq& seq, const Vocab& vocab) {
  ParsedCompletion out;
  auto it = std::find(seq.begin(), seq.end(), vocab.think_end);
  if (it == seq.end()) {
    out.trace = seq;
    out.truncated = true;
    return out;
  }
  out.trace.assign(seq.begin(), it + 1);
  out.answer.assign(it + 1, seq.end());
  return out;
}

/// K traces acting as experts for one term of the integer-power expansion.
struct TraceGroup {
  std::vector<TokenSeq> traces;

  std::size_t size() const noexcept { return traces.size(); }
  bool operator==(const TraceGroup&) const = default;
};

inline void validate_group(const TraceGroup& group, const Vocab& vocab) {
  if (group.traces.empty()) throw ConfigError("trace group is empty");
  for (const auto& z : group.traces) {
    if (z.empty() || z.back() != vocab.think_end ||
        std::count(z.begin(), z.end(), vocab.think_end) != 1) {
      throw ConfigError("trace '" + vocab.join(z) + "' does not end at the answer boundary");
    }
  }
}

}  // namespace msharp
