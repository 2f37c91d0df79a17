#pragma once

#include <stdexcept>
#include <string>

namespace nlcnn {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatches between tensors or against an operation's
// contract.
struct ShapeError : Error {
  using Error::Error;
};

// API misuse: calling an operation outside its stated preconditions
// (e.g. backward on a non-scalar loss).
struct ContractError : Error {
  using Error::Error;
};

// A forward result contained NaN or Inf.
struct NumericError : Error {
  using Error::Error;
};

// Filesystem-level failures (open/read/write).
struct IoError : Error {
  using Error::Error;
};

// Audio decode failures, with a machine-checkable kind.
struct DecodeError : Error {
  enum class Kind {
    NotRiff,
    UnsupportedCodec,
    UnsupportedRate,
    UnsupportedLayout,
    Truncated,
    Empty,
  };
  Kind kind;
  DecodeError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Config-file and preset problems. line/column are 1-based; 0 means
// "not tied to a file location" (e.g. unknown preset name).
struct ConfigError : Error {
  int line = 0;
  int column = 0;
  ConfigError(const std::string& msg, int line_ = 0, int column_ = 0)
      : Error(line_ > 0 ? msg + " (line " + std::to_string(line_) + ", column " +
                              std::to_string(column_) + ")"
                        : msg),
        line(line_),
        column(column_) {}
};

}  // namespace nlcnn
