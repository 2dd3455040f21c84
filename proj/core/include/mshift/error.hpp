#pragma once

#include <stdexcept>
#include <string>

namespace mshift {

// Base of every error thrown by the library. Each subclass maps to one
// failure family so callers (the CLI in particular) can pick an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or generator settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Required derived state (statistics, momentum copy) is missing or stale.
class StateError : public Error {
 public:
  using Error::Error;
};

// Parameter bookkeeping drifted: frozen tensors changed, shapes mismatch.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mshift
