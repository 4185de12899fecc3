#pragma once

#include <stdexcept>
#include <string>

namespace drdm {

/// Base class for all failures raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or inconsistent configuration / input contract violation.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// A required file (manifest, checkpoint, run directory) is absent.
class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace drdm
