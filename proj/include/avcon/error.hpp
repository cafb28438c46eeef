#pragma once

#include <stdexcept>
#include <string>

namespace avcon {

enum class ErrorKind {
  invalid_input,
  config,
  data,
  decode,
  shape,
  out_of_range,
  numeric,
  version,
  integrity,
  missing_prerequisite,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_input: return "invalid input";
    case ErrorKind::config: return "config error";
    case ErrorKind::data: return "data error";
    case ErrorKind::decode: return "decode error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::out_of_range: return "out of range";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::version: return "version mismatch";
    case ErrorKind::integrity: return "integrity error";
    case ErrorKind::missing_prerequisite: return "missing prerequisite";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit codes used by the CLI.
inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::missing_prerequisite:
      return 2;
    case ErrorKind::numeric:
      return 4;
    case ErrorKind::invalid_input:
    case ErrorKind::shape:
      return 5;
    default:
      return 3;  // data, decode, out_of_range, version, integrity
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace avcon
