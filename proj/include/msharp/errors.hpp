// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace msharp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or otherwise unusable numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A context whose prefix has zero probability under the model.
class UnreachablePrefix : public Error {
 public:
  using Error::Error;
};

/// A context longer than the model can condition on.
class LengthOverflow : public Error {
 public:
  using Error::Error;
};

class UnknownPrompt : public Error {
 public:
  using Error::Error;
};

class ModelLoadError : public Error {
 public:
  enum class Kind { io, parse, vocab, normalization, missing_entry, exceeds_max_len };

  ModelLoadError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

/// Every candidate token has zero mass under the product of experts.
class DecodeDeadEnd : public Error {
 public:
  using Error::Error;
};

/// Connection-level failure; the request may be retried.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent wire data.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// The server rejected the request (unknown prompt, oversized prefix, ...).
class ClientError : public Error {
 public:
  ClientError(std::string code, const std::string& message)
      : Error(code + ": " + message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace msharp
