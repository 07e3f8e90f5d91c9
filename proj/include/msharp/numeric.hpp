// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "errors.hpp"

namespace msharp {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum_i exp(v_i)) with max subtraction. All -inf input yields -inf.
inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw NumericError("log_sum_exp of an empty list");
  double hi = kNegInf;
  for (double v : values) {
    if (std::isnan(v)) throw NumericError("log_sum_exp: NaN input");
    hi = std::max(hi, v);
  }
  if (hi == kNegInf) return kNegInf;
  if (hi == std::numeric_limits<double>::infinity()) return hi;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - hi);
  return hi + std::log(sum);
}

inline double log_sum_exp(std::initializer_list<double> values) {
  return log_sum_exp(std::span<const double>(values.begin(), values.size()));
}

/// Shifts `values` in place so that log_sum_exp(values) == 0.
inline void log_normalize(std::span<double> values) {
  const double z = log_sum_exp(std::span<const double>(values.data(), values.size()));
  if (z == kNegInf) throw NumericError("cannot normalize an all-zero distribution");
  for (double& v : values) v -= z;
}

/// Shannon entropy in nats of a normalized log distribution.
inline double entropy_nats(std::span<const double> log_probs) {
  double h = 0.0;
  for (double lp : log_probs)
    if (lp != kNegInf) h -= std::exp(lp) * lp;
  return h;
}

}  // namespace msharp
