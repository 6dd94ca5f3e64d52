#pragma once

#include <stdexcept>
#include <string>

namespace tal {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

// Bad magic, wrong version, CRC mismatch, truncated payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

// File is well-formed but does not describe what the caller asked for.
class SpecMismatchError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

} // namespace tal
