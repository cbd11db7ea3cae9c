#pragma once

#include <stdexcept>
#include <string>

namespace pbd {

// Every failure raised by the toolkit. The message is the user-facing text.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a call violates a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

}  // namespace pbd
