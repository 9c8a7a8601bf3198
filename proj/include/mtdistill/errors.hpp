#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtdistill {

/// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based line number when known (0 otherwise).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0, std::string raw = {})
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line), raw_(std::move(raw)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::size_t line_;
  std::string raw_;
};

/// Records that parsed but broke a data invariant.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::vector<std::string> ids)
      : Error(what), ids_(std::move(ids)) {}

  const std::vector<std::string>& offending_ids() const noexcept { return ids_; }

 private:
  std::vector<std::string> ids_;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Backend could not be reached or answered with a transport-level failure.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Backend answered but nothing usable could be extracted.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class EvalError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed; names the stage so callers can report it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace mtdistill
