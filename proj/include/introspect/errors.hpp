#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace introspect {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed configuration or input file. `path` is the file (may be empty for
// in-memory data), `field` a JSON-pointer-like location inside it.
class SchemaError : public Error {
 public:
  SchemaError(std::string path, std::string field, const std::string& what)
      : Error(format(path, field, what)), path_(std::move(path)), field_(std::move(field)) {}

  const std::string& path() const { return path_; }
  const std::string& field() const { return field_; }

 private:
  static std::string format(const std::string& path, const std::string& field,
                            const std::string& what) {
    std::string out = "schema error";
    if (!path.empty()) out += " in " + path;
    if (!field.empty()) out += " at " + field;
    return out + ": " + what;
  }

  std::string path_;
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DecompositionError : public NumericalError {
 public:
  DecompositionError(std::size_t pivot, double value)
      : NumericalError("cholesky failed: pivot " + std::to_string(pivot) +
                       " is not positive (" + std::to_string(value) + ")"),
        pivot_(pivot) {}

  std::size_t pivot() const { return pivot_; }

 private:
  std::size_t pivot_;
};

}  // namespace introspect
