// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and the small set of kernels the rest of the
// library is built on.

#pragma once

#include <cstddef>
#include <memory>
#include <type_traits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mora {

/// Base for every error the library raises. The C API maps the kind onto a
/// status code.
class Error : public std::runtime_error {
 public:
  enum class Kind { InvalidArgument, Shape, Numeric, Format, Io, State, Verify };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(Kind::Shape, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Kind::Numeric, what) {}
};

/// Allocator whose no-argument construct leaves trivial values uninitialized.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    std::allocator_traits<std::allocator<T>>::construct(*this, p, std::forward<Args>(args)...);
  }
};

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Storage with unspecified contents, for outputs that are fully overwritten.
  static Matrix uninitialized(std::size_t rows, std::size_t cols) {
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_.resize(rows * cols);
    return m;
  }
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data);
  Matrix(std::initializer_list<std::initializer_list<T>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const T> values);
  static Matrix column(std::span<const T> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  void fill(T v);
  /// Reinterprets the storage with a new shape of the same element count.
  void reshape(std::size_t rows, std::size_t cols);

  template <typename U>
  Matrix<U> cast() const {
    auto out = Matrix<U>::uninitialized(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T, DefaultInitAllocator<T>> data_;
};

std::string shape_string(std::size_t rows, std::size_t cols);

template <typename T>
std::string shape_of(const Matrix<T>& m) {
  return shape_string(m.rows(), m.cols());
}

// Products. `matmul_nt` computes a * b^T and `matmul_tn` computes a^T * b
// without materializing the transpose. Accumulating variants add into `out`.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
void matmul_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
template <typename T>
void matmul_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);

template <typename T>
std::vector<T> matvec(const Matrix<T>& a, std::span<const T> x);

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);
template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> subtract(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> scale(const Matrix<T>& a, T factor);
/// a += factor * b
template <typename T>
void axpy(T factor, const Matrix<T>& b, Matrix<T>& a);

template <typename T>
T max_abs(const Matrix<T>& a);
template <typename T>
T frobenius_norm(const Matrix<T>& a);
template <typename T>
bool all_finite(const Matrix<T>& a);

/// Singular values, descending, via one-sided Jacobi rotations on the
/// shorter side. Throws NumericError if `max_sweeps` sweeps do not bring
/// every column pair to orthogonality within `tol`.
template <typename T>
std::vector<double> singular_values(const Matrix<T>& a, double tol = 1e-12, int max_sweeps = 60);

/// Number of singular values strictly greater than `threshold`.
template <typename T>
std::size_t numerical_rank(const Matrix<T>& a, double threshold);

}  // namespace mora
