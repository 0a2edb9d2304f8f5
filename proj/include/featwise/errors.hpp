#pragma once

#include <stdexcept>
#include <string>

namespace featwise {

// Every failure raised by the library derives from Error so callers can catch
// the whole family at a boundary (the CLI does exactly that).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or channel widths.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an op (log of a non-positive).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A documented precondition does not hold.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A tensor that should be attached to a graph is not.
class LookupError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Not enough classes or samples to satisfy a request.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace featwise
