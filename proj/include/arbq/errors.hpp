// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace arbq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input: wrong shapes, non-finite values, bad sign entries.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateCalibration : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SingularHessian : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class IoErrc : std::uint8_t {
  kOpenFailed = 1,
  kBadMagic,
  kUnsupportedVersion,
  kUnknownDtype,
  kTruncated,
  kBadRank,
  kChecksumMismatch,
  kMalformed,
};

inline const char* to_string(IoErrc code) {
  switch (code) {
    case IoErrc::kOpenFailed: return "open-failed";
    case IoErrc::kBadMagic: return "bad-magic";
    case IoErrc::kUnsupportedVersion: return "unsupported-version";
    case IoErrc::kUnknownDtype: return "unknown-dtype";
    case IoErrc::kTruncated: return "truncated";
    case IoErrc::kBadRank: return "bad-rank";
    case IoErrc::kChecksumMismatch: return "checksum-mismatch";
    case IoErrc::kMalformed: return "malformed";
  }
  return "unknown";
}

class IoError : public Error {
 public:
  IoError(IoErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

  IoErrc code() const noexcept { return code_; }

 private:
  IoErrc code_;
};

}  // namespace arbq
