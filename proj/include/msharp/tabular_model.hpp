// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "backend.hpp"
#include "errors.hpp"
#include "numeric.hpp"
#include "seq.hpp"

namespace msharp {

struct TokenSeqHash {
  std::size_t operator()(const TokenSeq& seq) const noexcept {
    std::size_t h = 1469598103934665603ull;
    for (TokenId t : seq) {
      h ^= t + 1;
      h *= 1099511628211ull;
    }
    return h;
  }
};

/// Explicit next-token tables for one prompt, keyed by the full prefix.
struct PromptTable {
  std::unordered_map<TokenSeq, std::vector<double>, TokenSeqHash> rows;  // log-probs
  std::optional<TokenSeq> answer_key;
};

/// Fully tabular autoregressive model small enough for exact enumeration.
///
/// Invariants (checked by validate()): every reachable non-terminal prefix
/// has a row; every row is normalized; every reachable prefix of length
/// max_len - 1 puts all of its mass on eos.
class TabularModel final : public Backend {
 public:
  TabularModel() = default;
  TabularModel(Vocab vocab, std::size_t max_len) : vocab_(std::move(vocab)), max_len_(max_len) {}

  const Vocab& vocab() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }

  LogProbVector next_token_logprobs(const Context& ctx) const override {
    const auto& table = prompt(ctx.prompt_id);
    if (ctx.prefix.size() >= max_len_) {
      throw LengthOverflow("prefix of length " + std::to_string(ctx.prefix.size()) +
                           " reaches max_len " + std::to_string(max_len_));
    }
    for (TokenId t : ctx.prefix)
      if (t >= vocab_.size())
        throw UnreachablePrefix("token id " + std::to_string(t) + " is outside the vocabulary");
    auto it = table.rows.find(ctx.prefix);
    if (it == table.rows.end()) {
      throw UnreachablePrefix("no table entry for prefix [" + vocab_.join(ctx.prefix) +
                              "] of prompt '" + ctx.prompt_id + "'");
    }
    return LogProbVector::full(it->second);
  }

  const PromptTable& prompt(const std::string& id) const {
    auto it = prompts_.find(id);
    if (it == prompts_.end()) throw UnknownPrompt("unknown prompt id '" + id + "'");
    return it->second;
  }

  std::vector<std::string> prompt_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : prompts_) ids.push_back(id);
    return ids;
  }

  bool has_prompt(const std::string& id) const { return prompts_.count(id) != 0; }
  const std::map<std::string, PromptTable>& prompts() const noexcept { return prompts_; }

  /// Stores a row of linear probabilities.
  void set_row(const std::string& prompt_id, const TokenSeq& prefix, const std::vector<double>& probs) {
    std::vector<double> logp(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
      logp[i] = probs[i] > 0.0 ? std::log(probs[i]) : kNegInf;
    prompts_[prompt_id].rows[prefix] = std::move(logp);
  }

  void set_answer_key(const std::string& prompt_id, TokenSeq answer) {
    prompts_[prompt_id].answer_key = std::move(answer);
  }

  /// Walks every reachable prefix from the empty one and checks the invariants.
  void validate() const {
    if (vocab_.size() == 0) throw ModelLoadError(ModelLoadError::Kind::vocab, "empty vocabulary");
    if (vocab_.eos == vocab_.think_end)
      throw ModelLoadError(ModelLoadError::Kind::vocab, "eos and think_end must differ");
    if (max_len_ < 2) throw ModelLoadError(ModelLoadError::Kind::vocab, "max_len must be at least 2");
    for (const auto& [id, table] : prompts_) {
      for (const auto& [prefix, row] : table.rows) {
        if (row.size() != vocab_.size()) {
          throw ModelLoadError(ModelLoadError::Kind::parse,
                               "row for prefix [" + vocab_.join(prefix) + "] of prompt '" + id +
                                   "' has " + std::to_string(row.size()) + " entries, expected " +
                                   std::to_string(vocab_.size()));
        }
      }
      TokenSeq prefix;
      validate_from(id, table, prefix);
    }
  }

 private:
  void validate_from(const std::string& id, const PromptTable& table, TokenSeq& prefix) const {
    auto it = table.rows.find(prefix);
    if (it == table.rows.end()) {
      throw ModelLoadError(ModelLoadError::Kind::missing_entry,
                           "prompt '" + id + "': missing table entry for reachable prefix [" +
                               vocab_.join(prefix) + "]");
    }
    const auto& row = it->second;
    double total = 0.0;
    for (double lp : row) total += std::exp(lp);
    if (std::abs(total - 1.0) > 1e-9) {
      std::ostringstream msg;
      msg.precision(12);
      msg << "prompt '" << id << "': distribution for prefix [" << vocab_.join(prefix)
          << "] sums to " << total;
      throw ModelLoadError(ModelLoadError::Kind::normalization, msg.str());
    }
    if (prefix.size() + 1 == max_len_ && std::abs(std::exp(row[vocab_.eos]) - 1.0) > 1e-9) {
      throw ModelLoadError(ModelLoadError::Kind::exceeds_max_len,
                           "prompt '" + id + "': prefix [" + vocab_.join(prefix) +
                               "] has length max_len - 1 but does not force eos");
    }
    for (TokenId v = 0; v < row.size(); ++v) {
      if (row[v] == kNegInf || v == vocab_.eos) continue;
      prefix.push_back(v);
      validate_from(id, table, prefix);
      prefix.pop_back();
    }
  }

  friend TabularModel parse_toy_model(const nlohmann::json& doc);

  Vocab vocab_;
  std::size_t max_len_ = 0;
  std::map<std::string, PromptTable> prompts_;
};

/// Builds and validates a model from the JSON toy-model document. Rows are
/// renormalized after validation so each sums to 1 to rounding.
inline TabularModel parse_toy_model(const nlohmann::json& doc) {
  using Kind = ModelLoadError::Kind;
  try {
    Vocab vocab;
    vocab.names = doc.at("vocab").get<std::vector<std::string>>();
    auto find = [&](const char* name) {
      auto it = std::find(vocab.names.begin(), vocab.names.end(), name);
      if (it == vocab.names.end())
        throw ModelLoadError(Kind::vocab, std::string("vocabulary lacks reserved token '") + name + "'");
      return static_cast<TokenId>(it - vocab.names.begin());
    };
    vocab.eos = find("eos");
    vocab.think_end = find("think_end");
    TabularModel model(vocab, doc.at("max_len").get<std::size_t>());

    for (const auto& [pid, rows] : doc.at("prompts").items()) {
      for (const auto& row : rows) {
        const TokenSeq prefix = vocab.encode(row.at("prefix").get<std::vector<std::string>>());
        auto probs = row.at("probs").get<std::vector<double>>();
        for (double p : probs)
          if (!(p >= 0.0)) throw ModelLoadError(Kind::parse, "negative or NaN probability in prompt '" + pid + "'");
        model.set_row(pid, prefix, probs);
      }
    }
    if (doc.contains("answer_key")) {
      for (const auto& [pid, ans] : doc.at("answer_key").items())
        model.set_answer_key(pid, vocab.encode(ans.get<std::vector<std::string>>()));
    }
    model.validate();
    for (auto& [pid, table] : model.prompts_)
      for (auto& [prefix, row] : table.rows) {
        const double z = log_sum_exp(row);
        if (z != 0.0 && z != kNegInf)
          for (double& lp : row) lp -= z;
      }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(Kind::parse, std::string("malformed toy model: ") + e.what());
  } catch (const ConfigError& e) {
    throw ModelLoadError(Kind::parse, e.what());
  }
}

/// Inverse of parse_toy_model; rows are written in prefix order.
inline nlohmann::json toy_model_to_json(const TabularModel& model) {
  const Vocab& vocab = model.vocab();
  nlohmann::json doc{{"vocab", vocab.names}, {"max_len", model.max_len()}};
  nlohmann::json prompts = nlohmann::json::object();
  nlohmann::json keys = nlohmann::json::object();
  for (const auto& [pid, table] : model.prompts()) {
    std::map<TokenSeq, const std::vector<double>*> ordered;
    for (const auto& [prefix, row] : table.rows) ordered[prefix] = &row;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [prefix, row] : ordered) {
      std::vector<double> probs;
      for (double lp : *row) probs.push_back(std::exp(lp));
      rows.push_back({{"prefix", vocab.decode(prefix)}, {"probs", probs}});
    }
    prompts[pid] = std::move(rows);
    if (table.answer_key) keys[pid] = vocab.decode(*table.answer_key);
  }
  doc["prompts"] = std::move(prompts);
  if (!keys.empty()) doc["answer_key"] = std::move(keys);
  return doc;
}

inline TabularModel load_toy_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError(ModelLoadError::Kind::io, "cannot open toy model file '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(ModelLoadError::Kind::parse, "'" + path + "': " + e.what());
  }
  return parse_toy_model(doc);
}

}  // namespace msharp
