#pragma once

#include <stdexcept>
#include <string>

namespace ptsr {

// Error categories map 1:1 onto CLI exit codes and C API status values.
enum class ErrorKind {
  Usage,    // invalid configuration, flags, or violated preconditions
  Io,       // filesystem, parsing, serialization
  Numeric,  // domain violations, non-finite losses or gradients
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& msg) {
  throw Error(ErrorKind::Usage, msg);
}
[[noreturn]] inline void throw_io(const std::string& msg) {
  throw Error(ErrorKind::Io, msg);
}
[[noreturn]] inline void throw_numeric(const std::string& msg) {
  throw Error(ErrorKind::Numeric, msg);
}

}  // namespace ptsr
