// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "numeric.hpp"
#include "seq.hpp"

namespace msharp {

/// Conditioning context: the prompt plus full generated history.
struct Context {
  std::string prompt_id;
  TokenSeq prefix;

  bool operator==(const Context&) const = default;
};

/// Next-token log-probabilities in nats. `support` marks the tokens the
/// backend reported; unreported tokens hold -inf. Exact backends report all.
struct LogProbVector {
  std::vector<double> logp;
  std::vector<bool> support;

  static LogProbVector full(std::vector<double> logp) {
    LogProbVector out;
    out.support.assign(logp.size(), true);
    out.logp = std::move(logp);
    return out;
  }

  std::size_t size() const noexcept { return logp.size(); }
  bool exhaustive() const {
    return std::all_of(support.begin(), support.end(), [](bool b) { return b; });
  }

  bool operator==(const LogProbVector&) const = default;
};

/// Abstract next-token provider. Implementations must be safe for concurrent
/// const calls.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::size_t max_len() const = 0;
  virtual LogProbVector next_token_logprobs(const Context& ctx) const = 0;

  /// Results are in request order.
  virtual std::vector<LogProbVector> batch_next_token_logprobs(
      std::span<const Context> contexts) const {
    std::vector<LogProbVector> out;
    out.reserve(contexts.size());
    for (const auto& ctx : contexts) out.push_back(next_token_logprobs(ctx));
    return out;
  }
};

/// Counts evaluated contexts and batched calls passing through to `inner`.
class CountingBackend final : public Backend {
 public:
  explicit CountingBackend(const Backend& inner) : inner_(inner) {}

  const Vocab& vocab() const override { return inner_.vocab(); }
  std::size_t max_len() const override { return inner_.max_len(); }

  LogProbVector next_token_logprobs(const Context& ctx) const override {
    evaluations_.fetch_add(1, std::memory_order_relaxed);
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.next_token_logprobs(ctx);
  }

  std::vector<LogProbVector> batch_next_token_logprobs(
      std::span<const Context> contexts) const override {
    evaluations_.fetch_add(contexts.size(), std::memory_order_relaxed);
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.batch_next_token_logprobs(contexts);
  }

  std::size_t evaluations() const noexcept { return evaluations_.load(); }
  std::size_t calls() const noexcept { return calls_.load(); }
  void reset() noexcept {
    evaluations_ = 0;
    calls_ = 0;
  }

 private:
  const Backend& inner_;
  mutable std::atomic<std::size_t> evaluations_{0};
  mutable std::atomic<std::size_t> calls_{0};
};

/// Splits each batch across `threads` workers. Output order and values are
/// independent of the thread count.
class FanOutBackend final : public Backend {
 public:
  FanOutBackend(const Backend& inner, unsigned threads)
      : inner_(inner), threads_(std::max(1u, threads)) {}

  const Vocab& vocab() const override { return inner_.vocab(); }
  std::size_t max_len() const override { return inner_.max_len(); }
  LogProbVector next_token_logprobs(const Context& ctx) const override {
    return inner_.next_token_logprobs(ctx);
  }

  std::vector<LogProbVector> batch_next_token_logprobs(
      std::span<const Context> contexts) const override {
    std::vector<LogProbVector> out(contexts.size());
    const std::size_t workers = std::min<std::size_t>(threads_, contexts.size());
    if (workers <= 1) {
      for (std::size_t i = 0; i < contexts.size(); ++i)
        out[i] = inner_.next_token_logprobs(contexts[i]);
      return out;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      pool.reserve(workers);
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < contexts.size(); i += workers)
              out[i] = inner_.next_token_logprobs(contexts[i]);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return out;
  }

 private:
  const Backend& inner_;
  unsigned threads_;
};

}  // namespace msharp
