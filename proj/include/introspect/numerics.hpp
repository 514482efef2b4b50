#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace introspect {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  std::vector<std::vector<double>> to_rows() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix outer(std::span<const double> a, std::span<const double> b);
Matrix kronecker(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

/// Lower-triangular L with L·Lᵀ = a. Throws DecompositionError naming the
/// first non-positive pivot.
Matrix cholesky(const Matrix& a);

/// Solves L·X = B for lower-triangular L.
Matrix solve_lower(const Matrix& lower, const Matrix& b);
/// Solves Lᵀ·X = B for lower-triangular L.
Matrix solve_lower_transposed(const Matrix& lower, const Matrix& b);

/// log Σ exp(v). Entries may be -inf. Throws on empty input.
double log_sum_exp(std::span<const double> v);
std::vector<double> softmax(std::span<const double> v);
std::vector<double> log_softmax(std::span<const double> v);

/// Index of the maximum entry, lowest index on ties.
std::size_t argmax(std::span<const double> v);

/// Σ -p log p with 0·log 0 = 0 (nats).
double entropy(std::span<const double> p);

/// Counter-based random stream. Value k of a stream is a pure function of
/// (seed, stream id, k), so derived streams are reproducible regardless of
/// the order in which they are consumed.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t position() const { return counter_; }

  /// Independent child stream; does not advance this one.
  RngStream derive(std::uint64_t child) const;

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

/// n standard normal draws from a fresh copy of `stream`.
std::vector<double> std_normal(RngStream stream, std::size_t n);

/// Fisher–Yates permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, RngStream& stream);

}  // namespace introspect
