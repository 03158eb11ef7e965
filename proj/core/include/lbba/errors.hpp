#pragma once

#include <stdexcept>
#include <string>

namespace lbba {

/// Failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  config,
  data,
  numeric,
  provenance,
  dimension,
  checkpoint,
  unsupported,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct ProvenanceError : Error {
  explicit ProvenanceError(const std::string& what) : Error(ErrorKind::provenance, what) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
};

struct UnsupportedArchitectureError : Error {
  explicit UnsupportedArchitectureError(const std::string& what)
      : Error(ErrorKind::unsupported, what) {}
};

/// config=2, data=3, numeric=4, provenance=5; everything else is 1.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::config:
    return 2;
  case ErrorKind::data:
  case ErrorKind::checkpoint:
    return 3;
  case ErrorKind::numeric:
    return 4;
  case ErrorKind::provenance:
    return 5;
  default:
    return 1;
  }
}

}  // namespace lbba
