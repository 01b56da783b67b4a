#pragma once

#include <stdexcept>
#include <string>

namespace hdseg {

// Every error the library raises derives from Error so callers (the CLI in
// particular) can map whole families onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes, lengths or class counts disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input that is structurally valid but carries no usable mass (all-zero
/// distributions, empty fusion sets).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters, unknown keys, unsupported kinds.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

/// A loss component went NaN/Inf during training. `component()` names it.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace hdseg
