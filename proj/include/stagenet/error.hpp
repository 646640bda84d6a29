#pragma once

#include <stdexcept>
#include <string>

namespace stagenet {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree, or a shape is not allowed for the op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A class label, layer name or index that does not exist.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration (specs, plans, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A quantity that is mathematically undefined for the given input.
class UndefinedError : public Error {
 public:
  using Error::Error;
};

// Binary/JSON file parse and compatibility failures.
class FormatError : public Error {
 public:
  enum class Kind {
    unrecognized,    // bad magic
    truncated,       // file ends before the header says it should
    malformed,       // structurally invalid content
    missing_entry,   // expected layer absent
    unknown_entry,   // layer present that the target does not have
    shape_mismatch,  // layer present with different tensor shapes
  };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace stagenet
