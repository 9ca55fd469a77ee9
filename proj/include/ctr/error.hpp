#pragma once

#include <stdexcept>
#include <string>

namespace ctr {

/// Base for all engine errors. Messages are meant for end users of the CLI.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctr
