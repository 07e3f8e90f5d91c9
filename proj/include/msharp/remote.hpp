// SPDX-License-Identifier: Apache-2.0
#pragma once

// Wire protocol for remote next-token log-probabilities.
//
//   GET  /v1/info      -> {vocab: [names], eos, think_end, max_len, prompts: [ids],
//                          answer_keys: {prompt: [ids]}}
//   POST /v1/logprobs  {prompt_id, prefixes: [[ids...]...], top_l}
//                      -> {results: [{entries: [[id, logprob]...], exhaustive}...]}
//   errors             -> HTTP 4xx/5xx with {code, message}
//
// Entries list only positive-probability tokens, sorted by descending
// log-probability (ties by id). `exhaustive` means every positive-probability
// token is listed; unlisted tokens then have zero mass. top_l = 0 requests
// the full support. Log-probabilities are written with 17 significant digits.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "backend.hpp"
#include "errors.hpp"
#include "numeric.hpp"
#include "seq.hpp"
#include "tabular_model.hpp"

namespace msharp::remote {

struct TopLEntry {
  TokenId id = 0;
  double logprob = kNegInf;
};

struct TopLResponse {
  std::vector<TopLEntry> entries;
  bool exhaustive = false;
};

inline std::string format_logprob(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// Top-L view of a full row.
inline TopLResponse make_response(const LogProbVector& row, std::size_t top_l) {
  TopLResponse out;
  for (TokenId v = 0; v < row.size(); ++v)
    if (row.support[v] && row.logp[v] != kNegInf) out.entries.push_back({v, row.logp[v]});
  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const TopLEntry& a, const TopLEntry& b) { return a.logprob > b.logprob; });
  const std::size_t positive = out.entries.size();
  if (top_l > 0 && out.entries.size() > top_l) out.entries.resize(top_l);
  out.exhaustive = out.entries.size() == positive && row.exhaustive();
  return out;
}

inline std::string encode_results(const std::vector<TopLResponse>& results) {
  std::string body = "{\"results\":[";
  for (std::size_t r = 0; r < results.size(); ++r) {
    if (r) body += ',';
    body += "{\"entries\":[";
    for (std::size_t e = 0; e < results[r].entries.size(); ++e) {
      if (e) body += ',';
      body += '[' + std::to_string(results[r].entries[e].id) + ',' +
              format_logprob(results[r].entries[e].logprob) + ']';
    }
    body += "],\"exhaustive\":";
    body += results[r].exhaustive ? "true" : "false";
    body += '}';
  }
  body += "]}";
  return body;
}

/// Parses and checks one result object; throws ProtocolError on any violation.
inline TopLResponse decode_result(const nlohmann::json& obj, std::size_t vocab_size) {
  TopLResponse out;
  try {
    out.exhaustive = obj.at("exhaustive").get<bool>();
    std::vector<bool> seen(vocab_size, false);
    for (const auto& pair : obj.at("entries")) {
      if (!pair.is_array() || pair.size() != 2) throw ProtocolError("entry is not an [id, logprob] pair");
      const auto id = pair.at(0).get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw ProtocolError("token id out of range");
      const double lp = pair.at(1).get<double>();
      if (std::isnan(lp) || lp > 1e-9) throw ProtocolError("invalid log-probability");
      if (seen[static_cast<std::size_t>(id)]) throw ProtocolError("duplicate token id in entries");
      seen[static_cast<std::size_t>(id)] = true;
      if (!out.entries.empty() && lp > out.entries.back().logprob)
        throw ProtocolError("entries are not sorted by descending log-probability");
      out.entries.push_back({static_cast<TokenId>(id), lp});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed result: ") + e.what());
  }
  if (out.exhaustive) {
    std::vector<double> lps;
    for (const auto& e : out.entries) lps.push_back(e.logprob);
    if (lps.empty() || std::abs(log_sum_exp(lps)) > 1e-6)
      throw ProtocolError("exhaustive result does not sum to one");
  }
  return out;
}

inline LogProbVector to_logprob_vector(const TopLResponse& r, std::size_t vocab_size) {
  LogProbVector out;
  out.logp.assign(vocab_size, kNegInf);
  out.support.assign(vocab_size, r.exhaustive);
  for (const auto& e : r.entries) {
    out.logp[e.id] = e.logprob;
    out.support[e.id] = true;
  }
  return out;
}

inline std::string error_body(const std::string& code, const std::string& message) {
  return nlohmann::json{{"code", code}, {"message", message}}.dump();
}

/// Serves the protocol over a loaded tabular model on a background thread.
/// Stateless per request.
class MockServer {
 public:
  MockServer(const TabularModel& model, const std::string& host = "127.0.0.1", int port = 0)
      : model_(model), host_(host) {
    install_routes();
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw Error("mock server: cannot bind " + host);
    } else {
      if (!server_.bind_to_port(host, port)) throw Error("mock server: cannot bind " + host + ":" + std::to_string(port));
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  ~MockServer() { stop(); }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  /// Blocks until the server stops.
  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::string url() const { return "http://" + host_ + ":" + std::to_string(port_); }
  std::size_t requests_served() const { return served_.load(); }

 private:
  void install_routes() {
    server_.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json info{{"vocab", model_.vocab().names},
                          {"eos", model_.vocab().eos},
                          {"think_end", model_.vocab().think_end},
                          {"max_len", model_.max_len()},
                          {"prompts", model_.prompt_ids()}};
      nlohmann::json keys = nlohmann::json::object();
      for (const auto& [pid, table] : model_.prompts())
        if (table.answer_key) keys[pid] = *table.answer_key;
      info["answer_keys"] = keys;
      res.set_content(info.dump(), "application/json");
    });
    server_.Post("/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      served_.fetch_add(1);
      handle_logprobs(req, res);
    });
  }

  void reject(httplib::Response& res, int status, const std::string& code, const std::string& message) const {
    res.status = status;
    res.set_content(error_body(code, message), "application/json");
  }

  void handle_logprobs(const httplib::Request& req, httplib::Response& res) const {
    std::string prompt_id;
    std::vector<std::vector<long long>> prefixes;
    std::size_t top_l = 0;
    try {
      const auto body = nlohmann::json::parse(req.body);
      prompt_id = body.at("prompt_id").get<std::string>();
      prefixes = body.at("prefixes").get<std::vector<std::vector<long long>>>();
      const auto l = body.value("top_l", 0LL);
      if (l < 0) return reject(res, 400, "bad_request", "top_l must be non-negative");
      top_l = static_cast<std::size_t>(l);
    } catch (const nlohmann::json::exception& e) {
      return reject(res, 400, "bad_request", e.what());
    }
    if (!model_.has_prompt(prompt_id)) return reject(res, 404, "unknown_prompt", "unknown prompt id '" + prompt_id + "'");

    const std::size_t V = model_.vocab().size();
    std::vector<TopLResponse> results;
    results.reserve(prefixes.size());
    for (const auto& raw : prefixes) {
      if (raw.size() >= model_.max_len())
        return reject(res, 400, "prefix_too_long",
                      "prefix of length " + std::to_string(raw.size()) + " exceeds the server maximum of " +
                          std::to_string(model_.max_len() - 1));
      Context ctx{prompt_id, {}};
      for (long long id : raw) {
        if (id < 0 || static_cast<std::size_t>(id) >= V) return reject(res, 400, "invalid_token", "token id out of range");
        ctx.prefix.push_back(static_cast<TokenId>(id));
      }
      try {
        results.push_back(make_response(model_.next_token_logprobs(ctx), top_l));
      } catch (const UnreachablePrefix& e) {
        return reject(res, 404, "unreachable_prefix", e.what());
      }
    }
    res.set_content(encode_results(results), "application/json");
  }

  const TabularModel& model_;
  std::string host_;
  int port_ = -1;
  httplib::Server server_;
  std::thread thread_;
  std::atomic<std::size_t> served_{0};
};

inline std::unique_ptr<MockServer> serve_mock(const TabularModel& model, const std::string& host = "127.0.0.1",
                                              int port = 0) {
  return std::make_unique<MockServer>(model, host, port);
}

struct ClientConfig {
  std::string url = "http://127.0.0.1:8080";
  std::size_t top_l = 0;
  int attempts = 3;
  std::chrono::milliseconds backoff_base{100};
  bool cache = true;
  std::chrono::milliseconds timeout{5000};
};

/// Backend over the wire protocol. Each batch becomes one POST per prompt id
/// (after cache filtering); results are cached by (prompt id, prefix).
/// Safe for concurrent use.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(ClientConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.attempts < 1) throw ConfigError("remote backend needs at least one attempt");
    const auto info = request_json([&](httplib::Client& c) { return c.Get("/v1/info"); });
    try {
      vocab_.names = info.at("vocab").get<std::vector<std::string>>();
      vocab_.eos = info.at("eos").get<TokenId>();
      vocab_.think_end = info.at("think_end").get<TokenId>();
      max_len_ = info.at("max_len").get<std::size_t>();
      prompt_ids_ = info.value("prompts", std::vector<std::string>{});
      if (info.contains("answer_keys"))
        for (const auto& [pid, key] : info.at("answer_keys").items()) answer_keys_[pid] = key.get<TokenSeq>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed info response: ") + e.what());
    }
    if (vocab_.eos >= vocab_.size() || vocab_.think_end >= vocab_.size())
      throw ProtocolError("info response has reserved ids outside the vocabulary");
  }

  const Vocab& vocab() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }

  LogProbVector next_token_logprobs(const Context& ctx) const override {
    return batch_next_token_logprobs(std::span<const Context>(&ctx, 1)).front();
  }

  std::vector<LogProbVector> batch_next_token_logprobs(std::span<const Context> contexts) const override {
    std::vector<LogProbVector> out(contexts.size());
    std::map<std::string, std::vector<std::size_t>> misses;  // prompt -> indices
    {
      std::lock_guard lock(mutex_);
      for (std::size_t i = 0; i < contexts.size(); ++i) {
        auto it = cfg_.cache ? cache_.find({contexts[i].prompt_id, contexts[i].prefix}) : cache_.end();
        if (it != cache_.end()) {
          out[i] = it->second;
        } else {
          misses[contexts[i].prompt_id].push_back(i);
        }
      }
    }
    for (const auto& [prompt_id, indices] : misses) {
      // Identical contexts within one batch are sent once.
      std::map<TokenSeq, std::size_t> unique;
      std::vector<const TokenSeq*> order;
      for (std::size_t i : indices)
        if (unique.try_emplace(contexts[i].prefix, order.size()).second) order.push_back(&contexts[i].prefix);
      const auto rows = fetch(prompt_id, order);
      std::lock_guard lock(mutex_);
      for (std::size_t i : indices) {
        out[i] = rows[unique.at(contexts[i].prefix)];
        if (cfg_.cache) cache_.emplace(std::make_pair(prompt_id, contexts[i].prefix), out[i]);
      }
    }
    return out;
  }

  const std::vector<std::string>& prompt_ids() const noexcept { return prompt_ids_; }
  std::optional<TokenSeq> answer_key(const std::string& prompt_id) const {
    auto it = answer_keys_.find(prompt_id);
    if (it == answer_keys_.end()) return std::nullopt;
    return it->second;
  }

  /// Logical POST requests sent (retries not counted).
  std::size_t requests() const noexcept { return requests_.load(); }
  std::size_t contexts_sent() const noexcept { return contexts_sent_.load(); }
  std::size_t attempts() const noexcept { return attempts_.load(); }
  void reset_counters() noexcept {
    requests_ = 0;
    contexts_sent_ = 0;
    attempts_ = 0;
  }
  void clear_cache() {
    std::lock_guard lock(mutex_);
    cache_.clear();
  }

 private:
  std::vector<LogProbVector> fetch(const std::string& prompt_id, const std::vector<const TokenSeq*>& prefixes) const {
    nlohmann::json body{{"prompt_id", prompt_id}, {"top_l", cfg_.top_l}};
    body["prefixes"] = nlohmann::json::array();
    for (const auto* p : prefixes) body["prefixes"].push_back(*p);
    const std::string payload = body.dump();
    requests_.fetch_add(1);
    contexts_sent_.fetch_add(prefixes.size());
    const auto reply = request_json(
        [&](httplib::Client& c) { return c.Post("/v1/logprobs", payload, "application/json"); });
    try {
      const auto& results = reply.at("results");
      if (!results.is_array() || results.size() != prefixes.size())
        throw ProtocolError("result count does not match request");
      std::vector<LogProbVector> out;
      out.reserve(results.size());
      for (const auto& r : results) out.push_back(to_logprob_vector(decode_result(r, vocab_.size()), vocab_.size()));
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed logprobs response: ") + e.what());
    }
  }

  template <typename Send>
  nlohmann::json request_json(Send&& send) const {
    std::string last_error;
    for (int attempt = 0; attempt < cfg_.attempts; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff_base * (1 << (attempt - 1)));
      attempts_.fetch_add(1);
      httplib::Client client(cfg_.url);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout).count();
      client.set_connection_timeout(secs);
      client.set_read_timeout(secs);
      auto res = send(client);
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "server status " + std::to_string(res->status);
        continue;
      }
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("response is not JSON: ") + e.what());
      }
      if (res->status >= 400) {
        const std::string code = doc.value("code", "error");
        const std::string message = doc.value("message", "");
        if (code == "unreachable_prefix") throw UnreachablePrefix(message);
        if (code == "prefix_too_long") throw LengthOverflow(message);
        throw ClientError(code, message);
      }
      return doc;
    }
    throw TransportError("remote backend " + cfg_.url + " unreachable after " + std::to_string(cfg_.attempts) +
                         " attempts: " + last_error);
  }

  ClientConfig cfg_;
  Vocab vocab_;
  std::size_t max_len_ = 0;
  std::vector<std::string> prompt_ids_;
  std::map<std::string, TokenSeq> answer_keys_;
  mutable std::mutex mutex_;
  mutable std::map<std::pair<std::string, TokenSeq>, LogProbVector> cache_;
  mutable std::atomic<std::size_t> requests_{0};
  mutable std::atomic<std::size_t> contexts_sent_{0};
  mutable std::atomic<std::size_t> attempts_{0};
};

}  // namespace msharp::remote
