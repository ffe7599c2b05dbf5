#pragma once

#include <stdexcept>
#include <string>

namespace xane3 {

/// Base of every error raised by the library. `kind()` is a short stable tag
/// used by the command line front end for machine-parsable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& what) : Error("non-finite", what) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& what) : Error("value", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class DivergedError : public Error {
 public:
  explicit DivergedError(const std::string& what) : Error("diverged", what) {}
};

}  // namespace xane3
