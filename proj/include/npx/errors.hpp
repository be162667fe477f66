#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace npx {

/// Base for every error raised by the library. The CLI maps ValidationError
/// to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: shapes, ranges, config keys, dataset layout.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content (JSON syntax, truncated checkpoint, ...).
class ParseError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step, std::string last_checkpoint)
      : Error(what), step_(step), last_checkpoint_(std::move(last_checkpoint)) {}

  std::int64_t step() const noexcept { return step_; }
  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  std::int64_t step_;
  std::string last_checkpoint_;
};

/// Constant image or similar input that makes a statistic undefined.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace npx
