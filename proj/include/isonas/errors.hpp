#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace isonas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or matrix shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in an intermediate value.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  using Error::Error;
};

/// Fixed-point iteration hit its cap; `last_iterate` holds where it stopped.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_iterate)
      : Error(what), last_iterate(last_iterate) {}
  double last_iterate;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. `offset` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::string path)
      : Error(what), path(std::move(path)) {}
  std::string path;
};

}  // namespace isonas
