#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fontgen {

using real = double;

// Bad arguments or configuration. The CLI maps this to exit code 2.
class ArgumentError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Tensor/layer dimension mismatch.
class ShapeError : public ArgumentError {
  using ArgumentError::ArgumentError;
};

// Missing files, malformed manifests, unknown ids. Exit code 3.
class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss terms and similar numeric failures. Exit code 4.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shortest decimal form that round-trips to the same double. All emitted
// logs and reports go through this so reruns are byte-identical.
inline std::string format_real(real v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline real parse_real(const std::string& s) {
  char* end = nullptr;
  real v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ArgumentError("not a number: '" + s + "'");
  return v;
}

}  // namespace fontgen
