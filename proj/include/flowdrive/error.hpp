#pragma once

#include <stdexcept>
#include <string>

#include <fmt/format.h>

namespace flowdrive {

/// Base exception for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a tensor op or integration step produces NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowdrive

#define FD_CHECK(cond, ...)                                                   \
  do {                                                                        \
    if (!(cond)) {                                                            \
      throw ::flowdrive::Error(fmt::format(__VA_ARGS__));                     \
    }                                                                         \
  } while (false)
