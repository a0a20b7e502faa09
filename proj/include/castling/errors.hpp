#pragma once

#include <stdexcept>
#include <string>

namespace castling {

// Exception taxonomy. Everything thrown by this library derives from Error so
// callers (and the CLI) can map failures onto exit codes in one place:
// config/shape problems -> exit 2, numerical failures -> exit 3.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree with an operation's contract.
struct ShapeError : Error {
  using Error::Error;
};

// A config value is out of range or a config file is malformed.
struct ConfigError : Error {
  using Error::Error;
};

// An input value is outside an operation's mathematical domain.
struct DomainError : Error {
  using Error::Error;
};

// An API was used against its stated contract (e.g. backward on a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

// A numerical invariant broke at runtime: NaN gradients, degenerate
// normalization denominators, non-finite loss.
struct NumericError : Error {
  using Error::Error;
};

} // namespace castling
