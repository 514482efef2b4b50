#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "introspect/errors.hpp"
#include "introspect/numerics.hpp"

namespace introspect::io {

using nlohmann::json;

/// Parses a JSON file; IO and syntax problems surface as SchemaError.
json read_json(const std::filesystem::path& path);

/// Writes `j` (two-space indent, trailing newline) via a temporary file and
/// rename, creating parent directories.
void write_json(const json& j, const std::filesystem::path& path);
void write_text(const std::string& text, const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Typed field access with path-aware errors.
class Reader {
 public:
  Reader(const json& j, std::string file, std::string where = {})
      : j_(j), file_(std::move(file)), where_(std::move(where)) {}

  const json& raw() const { return j_; }
  const std::string& where() const { return where_; }
  const std::string& file() const { return file_; }

  bool has(const std::string& key) const;
  Reader at(const std::string& key) const;
  Reader at(std::size_t index) const;
  std::size_t size() const;

  double number() const;
  long long integer() const;
  std::size_t count() const;
  std::string string() const;
  bool boolean() const;
  std::vector<double> numbers() const;
  Matrix matrix() const;

  double number(const std::string& key, double fallback) const;
  std::size_t count(const std::string& key, std::size_t fallback) const;
  std::string string(const std::string& key, const std::string& fallback) const;
  bool boolean(const std::string& key, bool fallback) const;

  [[noreturn]] void fail(const std::string& what) const;

 private:
  const json& j_;
  std::string file_;
  std::string where_;
};

json to_json(const Matrix& m);

}  // namespace introspect::io
