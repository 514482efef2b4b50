#include "introspect/json_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace introspect::io {

namespace fs = std::filesystem;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError(path.string(), "", "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string(), "", std::string("invalid JSON: ") + e.what());
  }
}

void write_text(const std::string& text, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const json& j, const fs::path& path) { write_text(j.dump(2) + "\n", path); }

bool Reader::has(const std::string& key) const {
  return j_.is_object() && j_.contains(key) && !j_.at(key).is_null();
}

Reader Reader::at(const std::string& key) const {
  if (!j_.is_object()) fail("expected an object");
  auto it = j_.find(key);
  if (it == j_.end()) throw SchemaError(file_, where_ + "/" + key, "missing field");
  return Reader(*it, file_, where_ + "/" + key);
}

Reader Reader::at(std::size_t index) const {
  if (!j_.is_array()) fail("expected an array");
  if (index >= j_.size()) fail("index " + std::to_string(index) + " out of range");
  return Reader(j_[index], file_, where_ + "/" + std::to_string(index));
}

std::size_t Reader::size() const {
  if (!j_.is_array()) fail("expected an array");
  return j_.size();
}

double Reader::number() const {
  if (!j_.is_number()) fail("expected a number");
  const double v = j_.get<double>();
  if (!std::isfinite(v)) fail("expected a finite number");
  return v;
}

long long Reader::integer() const {
  if (!j_.is_number_integer()) fail("expected an integer");
  return j_.get<long long>();
}

std::size_t Reader::count() const {
  const long long v = integer();
  if (v < 0) fail("expected a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::string Reader::string() const {
  if (!j_.is_string()) fail("expected a string");
  return j_.get<std::string>();
}

bool Reader::boolean() const {
  if (!j_.is_boolean()) fail("expected a boolean");
  return j_.get<bool>();
}

std::vector<double> Reader::numbers() const {
  const std::size_t n = size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = at(i).number();
  return out;
}

Matrix Reader::matrix() const {
  const std::size_t r = size();
  std::vector<std::vector<double>> rows(r);
  for (std::size_t i = 0; i < r; ++i) {
    rows[i] = at(i).numbers();
    if (i > 0 && rows[i].size() != rows[0].size()) at(i).fail("ragged matrix row");
  }
  return Matrix::from_rows(rows);
}

double Reader::number(const std::string& key, double fallback) const {
  return has(key) ? at(key).number() : fallback;
}

std::size_t Reader::count(const std::string& key, std::size_t fallback) const {
  return has(key) ? at(key).count() : fallback;
}

std::string Reader::string(const std::string& key, const std::string& fallback) const {
  return has(key) ? at(key).string() : fallback;
}

bool Reader::boolean(const std::string& key, bool fallback) const {
  return has(key) ? at(key).boolean() : fallback;
}

void Reader::fail(const std::string& what) const {
  throw SchemaError(file_, where_.empty() ? "/" : where_, what);
}

json to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i)
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  return rows;
}

}  // namespace introspect::io
