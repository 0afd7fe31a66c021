#pragma once

#include <stdexcept>
#include <string>

namespace margingate {

// Bad shapes, out-of-range ids, malformed inputs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Position, cache or context capacity exceeded.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operation was called under a numerics mode that does not support it.
class ModeViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A ratio or statistic whose denominator is empty.
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class EmptyInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A checked runtime invariant failed. The CLI maps this to exit code 4.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace margingate
