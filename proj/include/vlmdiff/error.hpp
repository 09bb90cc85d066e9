// Copyright 2026 The vlmdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace vlmdiff {

enum class ErrorKind {
  user,              // bad arguments, invalid configuration, precondition violations
  io,                // unreadable or unwritable files
  missing_artifact,  // a prior pipeline stage has not produced its output
  provider,          // caption provider failure (retryable)
  numeric,           // non-finite loss or values
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error user_error(const std::string& msg) { return Error(ErrorKind::user, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::io, msg); }

}  // namespace vlmdiff
