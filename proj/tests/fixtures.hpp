// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <msharp/msharp.hpp>

namespace fixtures {

inline std::string path(const std::string& name) { return std::string(MSHARP_DATA_DIR) + "/" + name + ".json"; }

inline const msharp::TabularModel& model(const std::string& name) {
  static const auto t1 = msharp::load_toy_model(path("t1"));
  static const auto t2 = msharp::load_toy_model(path("t2"));
  static const auto t3 = msharp::load_toy_model(path("t3"));
  if (name == "t1") return t1;
  if (name == "t2") return t2;
  return t3;
}

inline msharp::TokenSeq seq(const msharp::Vocab& v, std::initializer_list<const char*> names) {
  msharp::TokenSeq out;
  for (const char* n : names) out.push_back(v.id(n));
  return out;
}

}  // namespace fixtures
