#include "wdfq/errors.hpp"

namespace wdfq {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Shape: return "WDFQ_E_SHAPE";
    case ErrorCode::Config: return "WDFQ_E_CONFIG";
    case ErrorCode::UnsupportedOp: return "WDFQ_E_UNSUPPORTED_OP";
    case ErrorCode::Registry: return "WDFQ_E_REGISTRY";
    case ErrorCode::Io: return "WDFQ_E_IO";
    case ErrorCode::Format: return "WDFQ_E_FORMAT";
    case ErrorCode::Pairing: return "WDFQ_E_PAIR";
    case ErrorCode::Divisibility: return "WDFQ_E_DIVISIBLE";
    case ErrorCode::Argument: return "WDFQ_E_ARG";
    case ErrorCode::Numeric: return "WDFQ_E_NUMERIC";
    case ErrorCode::Statistics: return "WDFQ_E_STATS";
    case ErrorCode::Divergence: return "WDFQ_E_DIVERGED";
  }
  return "WDFQ_E_UNKNOWN";
}

int error_exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::Shape: return 2;
    case ErrorCode::Config: return 3;
    case ErrorCode::UnsupportedOp: return 4;
    case ErrorCode::Registry: return 5;
    case ErrorCode::Io: return 6;
    case ErrorCode::Format: return 7;
    case ErrorCode::Pairing: return 8;
    case ErrorCode::Divisibility: return 9;
    case ErrorCode::Argument: return 10;
    case ErrorCode::Numeric: return 11;
    case ErrorCode::Statistics: return 12;
    case ErrorCode::Divergence: return 13;
  }
  return 1;
}

}  // namespace wdfq
