#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dcopf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid power-system data (bad bus index, non-positive reactance, ...).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// Reduced susceptance matrix is singular, i.e. the network is disconnected.
class SingularNetworkError : public Error {
 public:
  using Error::Error;
};

/// Total load outside [sum p_min, sum p_max].
class InfeasibleLoadError : public Error {
 public:
  enum class Direction { kBelowMinimum, kAboveMaximum };

  InfeasibleLoadError(Direction direction, double total_load, double limit);

  Direction direction() const { return direction_; }
  double total_load() const { return total_load_; }
  double limit() const { return limit_; }

 private:
  Direction direction_;
  double total_load_;
  double limit_;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A loss term or forward value became NaN/Inf. `term()` names the culprit.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string term, const std::string& detail);
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Malformed input file. `line()` is 1-based; 0 when the file is empty.
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t line, const std::string& detail);
  const std::string& path() const { return path_; }
  std::size_t line() const { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

}  // namespace dcopf
