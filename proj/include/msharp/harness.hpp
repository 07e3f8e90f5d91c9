// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "answer_dist.hpp"
#include "backend.hpp"
#include "baselines.hpp"
#include "decoder.hpp"
#include "errors.hpp"
#include "oracle.hpp"
#include "remote.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "sis.hpp"
#include "tabular_model.hpp"

namespace msharp {

enum class Method { temperature, majority_vote, marginal, sis, joint_exact };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::temperature: return "temperature";
    case Method::majority_vote: return "majority-vote";
    case Method::marginal: return "marginal";
    case Method::sis: return "sis";
    case Method::joint_exact: return "joint-exact";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::temperature, Method::majority_vote, Method::marginal, Method::sis, Method::joint_exact})
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct ExperimentConfig {
  std::string model_path;
  std::string server_url;
  std::vector<std::string> prompt_ids;  // empty = every prompt
  Method method = Method::marginal;
  std::vector<int> K{4};
  std::vector<int> S{8};
  int budget = 0;  // > 0: sweep every (K, S) with K * S == budget
  std::size_t L = 64;
  int k = 8;
  int P = 8;
  bool resample = true;
  double alpha = 4.0;
  int trials = 100;
  std::uint64_t seed = 0;
  std::size_t top_l = 0;
  bool cache = true;
  unsigned threads = 0;  // 0 = hardware concurrency
  std::string out_path;

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (L < 1) throw ConfigError("L must be at least 1");
    if (model_path.empty() == server_url.empty()) throw ConfigError("exactly one of model path or server URL is required");
    switch (method) {
      case Method::majority_vote:
        if (k < 1) throw ConfigError("majority-vote needs k >= 1");
        break;
      case Method::joint_exact:
        if (!(alpha > 0.0)) throw ConfigError("joint-exact needs alpha > 0");
        break;
      case Method::sis:
        if (P < 1) throw ConfigError("sis needs P >= 1");
        [[fallthrough]];
      case Method::marginal:
        if (budget < 0) throw ConfigError("budget must be non-negative");
        if (budget == 0 && (K.empty() || S.empty())) throw ConfigError("K and S lists must be non-empty");
        for (int x : K)
          if (x < 1) throw ConfigError("K values must be positive");
        for (int x : S)
          if (x < 1) throw ConfigError("S values must be positive");
        if (method == Method::sis && budget == 0 && (S.size() != 1 || S[0] != 1))
          throw ConfigError("sis runs on a single trace group; use S = 1");
        break;
      case Method::temperature:
        break;
    }
  }

  /// (K, S) pairs to run. A positive budget expands to all factorizations.
  std::vector<std::pair<int, int>> allocations() const {
    std::vector<std::pair<int, int>> out;
    if (method != Method::marginal && method != Method::sis) return {{K.empty() ? 1 : K.front(), 1}};
    if (budget > 0) {
      for (int a = 1; a <= budget; ++a)
        if (budget % a == 0 && (method == Method::marginal || budget / a == 1)) out.push_back({a, budget / a});
      return out;
    }
    for (int a : K)
      for (int b : S) out.push_back({a, b});
    return out;
  }
};

/// One decode outcome.
struct TrialRecord {
  TokenSeq answer;
  bool fallback = false;
  bool truncated = false;  // budget exhausted or a base completion lost its delimiter
  std::size_t truncated_traces = 0;
  std::size_t resample_events = 0;
  std::size_t answer_tokens = 0;     // tokens produced by the sharpened decoder
  std::size_t decode_evaluations = 0;
};

inline TrialRecord run_trial(const Backend& backend, const std::string& prompt_id, const ExperimentConfig& cfg,
                             int K, int S, std::uint64_t seed, const JointSharpenedSampler* joint) {
  TrialRecord r;
  switch (cfg.method) {
    case Method::temperature: {
      const auto c = temperature_sample_answer(backend, prompt_id, cfg.L, seed);
      r.answer = c.answer;
      r.truncated = c.truncated;
      break;
    }
    case Method::majority_vote: {
      const auto v = majority_vote(backend, prompt_id, cfg.k, cfg.L, AnswerEquiv{}, seed);
      r.answer = v.answer;
      r.truncated_traces = static_cast<std::size_t>(cfg.k) - v.usable;
      break;
    }
    case Method::marginal: {
      DecoderConfig dc;
      dc.K = K;
      dc.S = S;
      dc.L = cfg.L;
      const auto d = marginal_sharpen_decode(backend, prompt_id, dc, seed);
      r.answer = d.answer;
      r.fallback = d.fallback_used;
      r.truncated = d.budget_exhausted;
      for (const auto& t : d.traces) r.truncated_traces += t.truncated;
      r.answer_tokens = d.steps.size();
      for (const auto& s : d.steps) r.decode_evaluations += s.evaluations;
      break;
    }
    case Method::sis: {
      // Same trace sampling and fallback rule as the token-level decoder.
      DecoderConfig dc;
      dc.K = K;
      dc.S = 1;
      dc.L = cfg.L;
      std::vector<ParsedCompletion> traces;
      for (int m = 0; m < K; ++m) {
        Rng rng({seed, static_cast<std::uint64_t>(m)});
        traces.push_back(sample_trace(backend, prompt_id, cfg.L, rng));
        r.truncated_traces += traces.back().truncated;
      }
      const auto groups = group_traces(traces, K, 1, dc.min_usable_traces);
      if (!groups || !compute_budget(cfg.L, traces)) {
        Rng rng({seed, streams::kFallback});
        const auto base = base_completion(backend, prompt_id, cfg.L, rng);
        r.answer = base.answer;
        r.fallback = true;
        r.truncated = base.truncated;
        break;
      }
      SisConfig sc;
      sc.P = cfg.P;
      sc.K = K;
      sc.L = cfg.L;
      sc.resample = cfg.resample;
      const auto res = sis_decode(backend, prompt_id, groups->groups.front(), sc, seed);
      r.answer = res.answer;
      r.truncated = res.budget_exhausted;
      r.resample_events = res.resample_events;
      r.answer_tokens = res.answer.size();
      break;
    }
    case Method::joint_exact: {
      r.answer = joint->sample(seed).second;
      break;
    }
  }
  return r;
}

/// Runs fn(i) for i in [0, n) on a small pool; exceptions are rethrown in
/// index order.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(n, threads == 0 ? hw : threads);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct OracleTargets {
  std::optional<AnswerDist> marginal;             // m(a | x)
  std::optional<AnswerDist> marginal_sharpened;   // m^alpha, renormalized
  std::optional<AnswerDist> joint_answer;         // answer marginal of pi(z, a)^alpha
};

inline OracleTargets compute_targets(const Backend& backend, const std::string& prompt_id, double alpha) {
  OracleTargets t;
  try {
    t.marginal = oracle::exact_answer_marginal(backend, prompt_id);
    t.marginal_sharpened = oracle::exact_marginal_sharpened(backend, prompt_id, alpha);
    t.joint_answer = oracle::exact_joint_sharpened(backend, prompt_id, alpha).answer_marginal();
  } catch (const OracleError&) {
    // Not enumerable through this backend; targets stay empty.
  }
  return t;
}

struct PromptReport {
  std::string prompt_id;
  AnswerDist distribution;
  std::map<TokenSeq, std::size_t> counts;
  std::optional<double> accuracy;
  std::optional<double> mode_frequency;  // frequency of the exact marginal's argmax
  std::optional<double> tv_marginal;
  std::optional<double> tv_marginal_sharpened;
  std::optional<double> tv_joint_answer;
  std::optional<double> joint_marginal_gap;
  std::optional<double> truncation_bias;  // TV to the untruncated run, top-L servers only
  std::size_t fallbacks = 0;
  std::size_t truncated = 0;
  std::size_t truncated_traces = 0;
  std::size_t resample_events = 0;
  std::size_t answer_tokens = 0;
  std::size_t decode_evaluations = 0;
};

struct ConfigurationReport {
  Method method = Method::marginal;
  int K = 0;
  int S = 0;
  double alpha = 1.0;  // sharpening exponent the oracle targets use
  std::vector<PromptReport> prompts;
  std::size_t backend_calls = 0;
  std::size_t backend_evaluations = 0;
  double wall_ms = 0.0;
};

struct RunReport {
  ExperimentConfig config;
  Vocab vocab;
  std::vector<ConfigurationReport> configurations;
  double wall_ms = 0.0;
};

inline std::optional<double> opt_tv(const std::optional<AnswerDist>& a, const AnswerDist& b) {
  if (!a) return std::nullopt;
  return tv_distance(*a, b);
}

/// Sharpening exponent that defines the oracle target of a configuration.
inline double target_alpha(const ExperimentConfig& cfg, int K) {
  switch (cfg.method) {
    case Method::marginal:
    case Method::sis: return K;
    case Method::temperature: return 1.0;
    default: return cfg.alpha;
  }
}

/// Runs every configuration of the experiment against `backend`. Trial t of
/// prompt i uses seed derive_seed(derive_seed(cfg.seed, i), t), shared across
/// configurations.
inline RunReport run_experiment(const ExperimentConfig& cfg, const Backend& backend,
                                const Backend* untruncated_reference = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.config = cfg;
  report.vocab = backend.vocab();

  std::vector<std::string> prompts = cfg.prompt_ids;
  std::optional<std::vector<std::string>> known;
  if (const auto* tab = dynamic_cast<const TabularModel*>(&backend)) known = tab->prompt_ids();
  if (const auto* rem = dynamic_cast<const remote::RemoteBackend*>(&backend)) known = rem->prompt_ids();
  if (prompts.empty()) {
    if (!known) throw ConfigError("prompt ids are required for a remote backend");
    prompts = *known;
  }
  std::map<std::string, std::optional<TokenSeq>> keys;
  if (const auto* tab = dynamic_cast<const TabularModel*>(&backend))
    for (const auto& p : prompts) keys[p] = tab->prompt(p).answer_key;
  if (const auto* rem = dynamic_cast<const remote::RemoteBackend*>(&backend))
    for (const auto& p : prompts) keys[p] = rem->answer_key(p);

  for (const auto& [K, S] : cfg.allocations()) {
    ConfigurationReport conf;
    conf.method = cfg.method;
    conf.K = K;
    conf.S = S;
    conf.alpha = target_alpha(cfg, K);
    const auto c0 = std::chrono::steady_clock::now();
    CountingBackend counting(backend);

    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
      const std::string& pid = prompts[pi];
      std::optional<JointSharpenedSampler> joint;
      if (cfg.method == Method::joint_exact) joint.emplace(backend, pid, cfg.alpha);
      const auto run_all = [&](const Backend& b, std::vector<TrialRecord>& recs) {
        recs.assign(static_cast<std::size_t>(cfg.trials), {});
        const std::uint64_t prompt_seed = derive_seed(cfg.seed, pi);
        parallel_for(recs.size(), cfg.threads, [&](std::size_t t) {
          recs[t] = run_trial(b, pid, cfg, K, S, derive_seed(prompt_seed, t), joint ? &*joint : nullptr);
        });
      };
      std::vector<TrialRecord> records;
      run_all(counting, records);

      PromptReport pr;
      pr.prompt_id = pid;
      std::map<TokenSeq, double> weights;
      for (const auto& r : records) {
        ++pr.counts[r.answer];
        weights[r.answer] += 1.0;
        pr.fallbacks += r.fallback;
        pr.truncated += r.truncated;
        pr.truncated_traces += r.truncated_traces;
        pr.resample_events += r.resample_events;
        pr.answer_tokens += r.answer_tokens;
        pr.decode_evaluations += r.decode_evaluations;
      }
      pr.distribution = AnswerDist::from_weights(weights);
      if (keys.count(pid) && keys[pid]) pr.accuracy = pr.distribution.prob(*keys[pid]);

      const auto targets = compute_targets(backend, pid, conf.alpha);
      pr.tv_marginal = opt_tv(targets.marginal, pr.distribution);
      pr.tv_marginal_sharpened = opt_tv(targets.marginal_sharpened, pr.distribution);
      pr.tv_joint_answer = opt_tv(targets.joint_answer, pr.distribution);
      if (targets.marginal) pr.mode_frequency = pr.distribution.prob(targets.marginal->argmax());
      if (targets.marginal_sharpened && targets.joint_answer)
        pr.joint_marginal_gap = tv_distance(*targets.marginal_sharpened, *targets.joint_answer);

      if (untruncated_reference) {
        std::vector<TrialRecord> ref;
        run_all(*untruncated_reference, ref);
        std::map<TokenSeq, double> w;
        for (const auto& r : ref) w[r.answer] += 1.0;
        pr.truncation_bias = tv_distance(AnswerDist::from_weights(w), pr.distribution);
      }
      conf.prompts.push_back(std::move(pr));
    }
    conf.backend_calls = counting.calls();
    conf.backend_evaluations = counting.evaluations();
    conf.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - c0).count();
    report.configurations.push_back(std::move(conf));
  }
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline nlohmann::json opt_json(const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(); }

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"model", c.model_path}, {"server", c.server_url},   {"prompts", c.prompt_ids},
          {"method", method_name(c.method)}, {"K", c.K},   {"S", c.S},
          {"budget", c.budget},     {"L", c.L},                 {"k", c.k},
          {"P", c.P},               {"resample", c.resample},   {"alpha", c.alpha},
          {"trials", c.trials},     {"seed", c.seed},           {"top_l", c.top_l},
          {"cache", c.cache}};
}

/// Timing fields are the only nondeterministic part of a report.
inline nlohmann::json to_json(const RunReport& r, bool include_timing = true) {
  nlohmann::json confs = nlohmann::json::array();
  for (const auto& c : r.configurations) {
    nlohmann::json prompts = nlohmann::json::array();
    for (const auto& p : c.prompts) {
      nlohmann::json counts = nlohmann::json::array();
      for (const auto& [a, n] : p.counts) counts.push_back({{"answer", r.vocab.decode(a)}, {"count", n}});
      nlohmann::json pj{{"prompt_id", p.prompt_id},
                        {"distribution", p.distribution.to_json(r.vocab)},
                        {"counts", counts},
                        {"accuracy", opt_json(p.accuracy)},
                        {"mode_frequency", opt_json(p.mode_frequency)},
                        {"tv", {{"marginal", opt_json(p.tv_marginal)},
                                {"marginal_sharpened", opt_json(p.tv_marginal_sharpened)},
                                {"joint_sharpened_answer", opt_json(p.tv_joint_answer)}}},
                        {"joint_marginal_gap", opt_json(p.joint_marginal_gap)},
                        {"truncation_bias", opt_json(p.truncation_bias)},
                        {"counters", {{"fallbacks", p.fallbacks},
                                      {"truncated", p.truncated},
                                      {"truncated_traces", p.truncated_traces},
                                      {"resample_events", p.resample_events},
                                      {"answer_tokens", p.answer_tokens},
                                      {"decode_evaluations", p.decode_evaluations}}}};
      prompts.push_back(std::move(pj));
    }
    nlohmann::json cj{{"method", method_name(c.method)}, {"K", c.K}, {"S", c.S}, {"alpha", c.alpha},
                      {"prompts", prompts}, {"backend_calls", c.backend_calls},
                      {"backend_evaluations", c.backend_evaluations}};
    if (include_timing) cj["wall_ms"] = c.wall_ms;
    confs.push_back(std::move(cj));
  }
  nlohmann::json out{{"config", config_to_json(r.config)}, {"configurations", confs}};
  if (include_timing) out["wall_ms"] = r.wall_ms;
  return out;
}

inline std::string csv_header() {
  return "method,K,S,L,k,P,alpha,trials,prompt,accuracy,mode_frequency,tv_marginal,tv_marginal_sharpened,"
         "tv_joint_answer,joint_marginal_gap,truncation_bias,fallbacks,truncated,truncated_traces,"
         "resample_events,answer_tokens,decode_evaluations,backend_calls,backend_evaluations,wall_ms";
}

inline std::string to_csv(const RunReport& r) {
  std::ostringstream os;
  os.precision(10);
  auto opt = [&](const std::optional<double>& x) {
    if (x) os << *x;
  };
  os << csv_header() << '\n';
  for (const auto& c : r.configurations)
    for (const auto& p : c.prompts) {
      os << method_name(c.method) << ',' << c.K << ',' << c.S << ',' << r.config.L << ',' << r.config.k << ','
         << r.config.P << ',' << c.alpha << ',' << r.config.trials << ',' << p.prompt_id << ',';
      opt(p.accuracy), os << ',';
      opt(p.mode_frequency), os << ',';
      opt(p.tv_marginal), os << ',';
      opt(p.tv_marginal_sharpened), os << ',';
      opt(p.tv_joint_answer), os << ',';
      opt(p.joint_marginal_gap), os << ',';
      opt(p.truncation_bias), os << ',';
      os << p.fallbacks << ',' << p.truncated << ',' << p.truncated_traces << ',' << p.resample_events << ','
         << p.answer_tokens << ',' << p.decode_evaluations << ',' << c.backend_calls << ','
         << c.backend_evaluations << ',' << c.wall_ms << '\n';
    }
  return os.str();
}

/// Loads the backend named by the config and runs it. A remote run with
/// top_l > 0 also replays the trials at top_l = 0 to measure truncation bias.
inline RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunReport report;
  if (!cfg.model_path.empty()) {
    const auto model = load_toy_model(cfg.model_path);
    report = run_experiment(cfg, model);
  } else {
    remote::ClientConfig cc;
    cc.url = cfg.server_url;
    cc.top_l = cfg.top_l;
    cc.cache = cfg.cache;
    remote::RemoteBackend client(cc);
    const ExperimentConfig& resolved = cfg;
    if (cfg.top_l > 0) {
      cc.top_l = 0;
      remote::RemoteBackend full(cc);
      report = run_experiment(resolved, client, &full);
    } else {
      report = run_experiment(resolved, client);
    }
  }
  if (!cfg.out_path.empty()) {
    std::ofstream json_out(cfg.out_path);
    if (!json_out) throw Error("cannot write report to '" + cfg.out_path + "'");
    json_out << to_json(report).dump(2) << '\n';
    std::ofstream csv_out(std::filesystem::path(cfg.out_path).replace_extension(".csv"));
    csv_out << to_csv(report);
  }
  return report;
}

}  // namespace msharp
