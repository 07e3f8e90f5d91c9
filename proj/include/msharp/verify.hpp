// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "answer_dist.hpp"
#include "decoder.hpp"
#include "errors.hpp"
#include "oracle.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "sis.hpp"
#include "tabular_model.hpp"
#include "toy_models.hpp"

namespace msharp {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
  std::vector<std::string> failed() const {
    std::vector<std::string> out;
    for (const auto& c : checks)
      if (!c.passed) out.push_back(c.name);
    return out;
  }
  std::string table() const {
    std::string out;
    std::size_t width = 0;
    for (const auto& c : checks) width = std::max(width, c.name.size());
    for (const auto& c : checks) {
      out += c.passed ? "PASS  " : "FAIL  ";
      out += c.name + std::string(width - c.name.size() + 2, ' ') + c.detail + '\n';
    }
    return out;
  }
};

namespace verify_detail {

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

inline std::vector<TraceGroup> sample_groups(const Backend& b, const std::string& pid, int K, int S,
                                             std::uint64_t seed) {
  std::vector<TraceGroup> groups;
  for (int s = 0; s < S; ++s) {
    TraceGroup g;
    for (int i = 0; i < K; ++i) {
      Rng rng({seed, static_cast<std::uint64_t>(s * K + i)});
      g.traces.push_back(sample_trace(b, pid, b.max_len(), rng).trace);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

// Exact values of the bundled fixtures, derived by hand from their tables.
struct FrozenValue {
  const char* model;
  std::vector<std::string> answer;
  double prob;
};

inline const std::vector<FrozenValue>& frozen_marginals() {
  static const std::vector<FrozenValue> values{
      {"t1", {"A", "eos"}, 0.6},          {"t1", {"B", "eos"}, 0.4},
      {"t2", {"A", "eos"}, 0.30},         {"t2", {"B", "eos"}, 0.155},
      {"t2", {"C", "eos"}, 0.545},        {"t3", {"A", "eos"}, 0.15},
      {"t3", {"B", "eos"}, 0.32},         {"t3", {"A", "A", "eos"}, 0.0854},
      {"t3", {"B", "B", "eos"}, 0.04695}, {"t3", {"B", "A", "B", "eos"}, 0.031525},
  };
  return values;
}

}  // namespace verify_detail

/// Runs the oracle identities and decoder properties against the bundled
/// fixtures in `data_dir` (t1.json, t2.json, t3.json). A missing or invalid
/// fixture yields a single failed "fixtures" check.
inline VerifyReport verify_suite(const std::filesystem::path& data_dir) {
  using namespace verify_detail;
  VerifyReport report;
  std::map<std::string, TabularModel> models;
  try {
    for (const char* name : {"t1", "t2", "t3"})
      models.emplace(name, load_toy_model((data_dir / (std::string(name) + ".json")).string()));
  } catch (const ModelLoadError& e) {
    report.checks.push_back({"fixtures", false, e.what()});
    return report;
  }
  const std::string pid = "p0";
  auto add = [&](std::string name, const std::function<std::pair<bool, std::string>()>& fn) {
    try {
      auto [ok, detail] = fn();
      report.checks.push_back({std::move(name), ok, std::move(detail)});
    } catch (const std::exception& e) {
      report.checks.push_back({std::move(name), false, std::string("exception: ") + e.what()});
    }
  };

  for (const auto& [name, model] : models) {
    add("expansion identity " + name + " K=1..3", [&, &model = model] {
      double worst = 0.0;
      for (int K = 1; K <= 3; ++K)
        worst = std::max(worst, max_abs_diff(oracle::integer_expansion_marginal(model, pid, K),
                                             oracle::exact_marginal_sharpened(model, pid, K)));
      return std::pair{worst <= 1e-12, "max |diff| " + fmt(worst)};
    });
  }
  add("expansion identity random models", [&] {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto m = random_tabular_model(seed);
      for (int K = 1; K <= 3; ++K)
        worst = std::max(worst, max_abs_diff(oracle::integer_expansion_marginal(m, pid, K),
                                             oracle::exact_marginal_sharpened(m, pid, K)));
    }
    return std::pair{worst <= 1e-12, "max |diff| " + fmt(worst)};
  });
  add("estimator limit t1 K=2", [&] {
    const auto& m = models.at("t1");
    const auto est = oracle::empirical_rb_estimate(m, pid, sample_groups(m, pid, 2, 10000, 7));
    const double tv = tv_distance(est, oracle::exact_marginal_sharpened(m, pid, 2));
    return std::pair{tv <= 0.02, "TV " + fmt(tv)};
  });
  for (const char* name : {"t1", "t2"}) {
    add(std::string("forced termination ") + name, [&, name] {
      const auto& m = models.at(name);
      double worst = 0.0;
      for (int K = 1; K <= 3; ++K)
        for (int S = 1; S <= 2; ++S)
          for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto g = sample_groups(m, pid, K, S, seed * 31 + K * 5 + S);
            worst = std::max(worst, max_abs_diff(oracle::decoder_induced_distribution(m, pid, g),
                                                 oracle::empirical_rb_estimate(m, pid, g)));
          }
      return std::pair{worst <= 1e-12, "max |diff| " + fmt(worst)};
    });
  }
  add("rho logit identity", [&] {
    Rng rng({11, 0});
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const int K = 1 + trial % 4;
      const int V = 2 + trial % 5;
      std::vector<std::vector<double>> logits(K, std::vector<double>(V));
      for (auto& row : logits)
        for (double& x : row) x = 6.0 * rng.uniform() - 3.0;
      // Probability space: sum_v prod_i p_i(v) after normalizing each row.
      double direct = 0.0;
      for (int v = 0; v < V; ++v) {
        double prod = 1.0;
        for (const auto& row : logits) {
          double z = 0.0;
          for (double x : row) z += std::exp(x);
          prod *= std::exp(row[v]) / z;
        }
        direct += prod;
      }
      worst = std::max(worst, std::abs(log_rho(logits) - std::log(direct)));
    }
    return std::pair{worst <= 1e-10, "max |diff| " + fmt(worst)};
  });
  add("sis P=1 path equals token decoder", [&] {
    const auto& m = models.at("t3");
    int mismatches = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto g = sample_groups(m, pid, 2, 1, seed + 1000);
      TraceGroupSet set{g, {{0, 1}}};
      std::vector<ParsedCompletion> parsed;
      for (const auto& z : g.front().traces) parsed.push_back({z, {}, false});
      const auto budget = compute_budget(m.max_len(), parsed);
      Rng rng({seed, streams::kDecoder});
      const auto tok = decode_answer(m, pid, set, budget.value_or(0), rng, -30.0);
      SisConfig sc;
      sc.P = 1;
      sc.K = 2;
      sc.L = m.max_len();
      const auto sis = sis_decode(m, pid, g.front(), sc, seed);
      mismatches += sis.answer != tok.answer;
    }
    return std::pair{mismatches == 0, std::to_string(mismatches) + " of 50 seeds differ"};
  });
  add("bundled value regression", [&] {
    double worst = 0.0;
    for (const auto& f : frozen_marginals()) {
      const auto& m = models.at(f.model);
      const double p = oracle::exact_answer_marginal(m, pid).prob(m.vocab().encode(f.answer));
      worst = std::max(worst, std::abs(p - f.prob));
    }
    return std::pair{worst <= 1e-9, "max |diff| " + fmt(worst)};
  });
  return report;
}

}  // namespace msharp
