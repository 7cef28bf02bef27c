#pragma once

#include <stdexcept>
#include <string>

namespace comatch {

// Root of every error the library throws. Callers that only care about
// "something in comatch failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A mask leaves nothing to normalize or pool over.
class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

class EmptySequenceError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, bad index, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpointError : public Error {
 public:
  using Error::Error;
};

// Checkpoint is well formed but does not match what the caller asked for.
class MismatchError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf showed up where training cannot continue.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace comatch
