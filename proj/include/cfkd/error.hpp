#pragma once

#include <stdexcept>
#include <string>

namespace cfkd {

// Bad configuration: empty splits, invalid sizes, unknown kinds, malformed
// config fields. `field()` carries a JSON-path-like locator when known.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, std::string field = {})
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Input that does not match what a model expects (shape mismatch, label
// out of range).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A NaN/Inf showed up where it must not.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Human or cluster teacher session that did not complete (timeout, abort).
class TeacherSessionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cfkd
