#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sell {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Argument outside an operation's domain (empty vector, odd length, ...).
class InvalidInput : public Error {
public:
  using Error::Error;
};

/// Incompatible shapes between operands.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Operator hyperparameters invalid, or parameters inconsistent with a spec.
class SpecError : public Error {
public:
  using Error::Error;
};

/// Non-finite values encountered while training.
class DivergedError : public Error {
public:
  DivergedError(const std::string &what, int epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

private:
  int epoch_;
};

class NoCommonSupport : public Error {
public:
  using Error::Error;
};

/// Target parameter count outside what a kind can reach; carries the feasible range.
class OutOfSupport : public Error {
public:
  OutOfSupport(const std::string &what, double lo, double hi)
      : Error(what + " (feasible [" + std::to_string(lo) + ", " + std::to_string(hi) + "])"),
        lo_(lo), hi_(hi) {}
  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }

private:
  double lo_;
  double hi_;
};

class NoCrossover : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed input file; `offset` is the byte position reported by the parser.
class ParseError : public Error {
public:
  ParseError(const std::string &file, std::size_t offset, const std::string &detail)
      : Error(file + ": parse error at byte " + std::to_string(offset) + ": " + detail),
        file_(file), offset_(offset) {}
  const std::string &file() const noexcept { return file_; }
  std::size_t offset() const noexcept { return offset_; }

private:
  std::string file_;
  std::size_t offset_;
};

class IoError : public Error {
public:
  using Error::Error;
};

} // namespace sell
