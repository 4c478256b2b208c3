#ifndef MMN_ERROR_HPP_
#define MMN_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace mmn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes; the message names the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on an argument does not hold.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Corpus, checkpoint or other on-disk input is missing or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad command line or configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmn

#endif  // MMN_ERROR_HPP_
