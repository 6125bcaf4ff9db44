#pragma once

#include <stdexcept>
#include <string>

namespace skycat {

/// Input violates a documented precondition or type invariant.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Pixel or array index outside the valid range.
class BoundsError : public std::out_of_range {
 public:
  explicit BoundsError(const std::string& what) : std::out_of_range(what) {}
};

/// Unknown key (source id, image id, task id).
class LookupError : public std::out_of_range {
 public:
  explicit LookupError(const std::string& what) : std::out_of_range(what) {}
};

/// Malformed file contents or I/O failure.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace skycat
