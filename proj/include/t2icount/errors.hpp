#pragma once

#include <stdexcept>
#include <string>

namespace t2i {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shapes that do not satisfy an operation's contract.
struct DimensionError : Error {
  using Error::Error;
};

// Bad values: NaN pixels, empty prompts, negative densities, unknown names.
struct InputError : Error {
  using Error::Error;
};

// Dataset files that are missing or malformed.
struct IngestionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};

}  // namespace t2i
