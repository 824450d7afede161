#pragma once

#include <stdexcept>
#include <string>

namespace tsam {

// Base for every error raised by the library. Callers that only care about
// "something in tsam failed" can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors, all-zero attention columns, empty renormalization windows.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class DecompositionError : public Error {
 public:
  using Error::Error;
};

// A non-finite value showed up where it must not. `stage()` names where.
class NumericalError : public Error {
 public:
  NumericalError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed tensor-exchange manifests or payloads. `field()` is the manifest
// key that did not check out.
class IngestionError : public Error {
 public:
  IngestionError(std::string field, const std::string& what)
      : Error("manifest field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// A verification harness could not build the regime it was asked to test.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

}  // namespace tsam
