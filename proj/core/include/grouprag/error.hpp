#pragma once

#include <stdexcept>
#include <string>

namespace grouprag {

/// Root of every exception the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: missing files, malformed records, violated preconditions.
/// The CLI maps this to exit code 1.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A live completion backend gave up after exhausting its retries.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, int attempt_count)
      : Error(what), attempt_count_(attempt_count) {}

  int attempt_count() const noexcept { return attempt_count_; }

 private:
  int attempt_count_;
};

/// A mock script had no rule for a request and no default response.
class ScriptError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or other numerical breakdown during policy training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace grouprag
