#pragma once

#include <stdexcept>
#include <string>

namespace projforge {

/// Base of every error raised by the library. The CLI maps the two
/// subclasses onto its exit codes (2 for input errors, 3 for numerics).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: malformed files, inconsistent shapes, invalid parameters.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Singular systems, diverged training, non-finite losses.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kInput = 2;
inline constexpr int kNumerical = 3;
}  // namespace exit_code

}  // namespace projforge
