#pragma once

#include <stdexcept>
#include <string>

namespace muse {

/// Broad failure category. The CLI maps these onto its exit codes.
enum class ErrorKind {
  usage,     // bad argument, range or configuration error
  data,      // malformed, corrupt or inconsistent input data
  internal,  // I/O failure or broken invariant inside the library
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& message) {
  throw Error(ErrorKind::usage, message);
}

[[noreturn]] inline void throw_data(const std::string& message) {
  throw Error(ErrorKind::data, message);
}

[[noreturn]] inline void throw_internal(const std::string& message) {
  throw Error(ErrorKind::internal, message);
}

}  // namespace muse
