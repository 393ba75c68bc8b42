#pragma once

#include <stdexcept>
#include <string>

namespace wdfq {

// Machine-readable error taxonomy. Every CLI failure path maps one of these
// codes to a distinct nonzero exit status and prints the code on stderr.
enum class ErrorCode {
  Shape,          // tensor extents incompatible with an operation
  Config,         // invalid or inconsistent configuration
  UnsupportedOp,  // op id not present in the kernel registry
  Registry,       // duplicate parameter name
  Io,             // file could not be read or written
  Format,         // malformed file contents (header, magic, payload)
  Pairing,        // RGB/IR image extents disagree
  Divisibility,   // spatial extents violate a divisibility requirement
  Argument,       // invalid argument value
  Numeric,        // numerical failure (singular matrix, non-finite value)
  Statistics,     // too few samples for a statistic
  Divergence,     // training loss became non-finite
};

const char* error_code_name(ErrorCode code);
int error_exit_status(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace wdfq
