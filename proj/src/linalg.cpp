// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/linalg.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mora {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
MapC<T> view(const Matrix<T>& m) {
  return MapC<T>(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

template <typename T>
Map<T> view(Matrix<T>& m) {
  return Map<T>(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

[[noreturn]] void mismatch(const char* op, std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(ar, ac) + " and " +
                   shape_string(br, bc));
}

template <typename T>
void require_same_shape(const char* op, const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) mismatch(op, a.rows(), a.cols(), b.rows(), b.cols());
}

}  // namespace

std::string shape_string(std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(rows, cols));
  }
}

template <typename T>
Matrix<T>::Matrix(std::initializer_list<std::initializer_list<T>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
  return m;
}

template <typename T>
Matrix<T> Matrix<T>::diagonal(std::span<const T> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

template <typename T>
Matrix<T> Matrix<T>::column(std::span<const T> values) {
  return Matrix(values.size(), 1, std::vector<T>(values.begin(), values.end()));
}

template <typename T>
void Matrix<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
void Matrix<T>::reshape(std::size_t rows, std::size_t cols) {
  if (rows * cols != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(rows_, cols_) + " to " + shape_string(rows, cols));
  }
  rows_ = rows;
  cols_ = cols;
}

template <typename T>
void matmul_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.rows()) mismatch("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  if (out.rows() != a.rows() || out.cols() != b.cols()) mismatch("matmul output", out.rows(), out.cols(), a.rows(), b.cols());
  if (a.empty() || b.empty()) return;
  view(out).noalias() += view(a) * view(b);
}

template <typename T>
void matmul_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.cols()) mismatch("matmul_nt", a.rows(), a.cols(), b.rows(), b.cols());
  if (out.rows() != a.rows() || out.cols() != b.rows()) mismatch("matmul_nt output", out.rows(), out.cols(), a.rows(), b.rows());
  if (a.empty() || b.empty()) return;
  view(out).noalias() += view(a) * view(b).transpose();
}

template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.rows() != b.rows()) mismatch("matmul_tn", a.rows(), a.cols(), b.rows(), b.cols());
  if (out.rows() != a.cols() || out.cols() != b.cols()) mismatch("matmul_tn output", out.rows(), out.cols(), a.cols(), b.cols());
  if (a.empty() || b.empty()) return;
  view(out).noalias() += view(a).transpose() * view(b);
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) mismatch("matmul", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix<T> out = Matrix<T>::uninitialized(a.rows(), b.cols());
  if (a.cols() == 0) out.fill(T(0));
  else view(out).noalias() = view(a) * view(b);
  return out;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) mismatch("matmul_nt", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix<T> out = Matrix<T>::uninitialized(a.rows(), b.rows());
  if (a.cols() == 0) out.fill(T(0));
  else view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) mismatch("matmul_tn", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix<T> out = Matrix<T>::uninitialized(a.cols(), b.cols());
  if (a.rows() == 0) out.fill(T(0));
  else view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

template <typename T>
std::vector<T> matvec(const Matrix<T>& a, std::span<const T> x) {
  if (a.cols() != x.size()) mismatch("matvec", a.rows(), a.cols(), x.size(), 1);
  std::vector<T> y(a.rows(), T(0));
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T acc = 0;
    const T* row = a.data() + i * a.cols();
    for (std::size_t j = 0; j < a.cols(); ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape("add", a, b);
  Matrix<T> out = a;
  axpy(T(1), b, out);
  return out;
}

template <typename T>
Matrix<T> subtract(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape("subtract", a, b);
  Matrix<T> out = a;
  axpy(T(-1), b, out);
  return out;
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T factor) {
  Matrix<T> out = a;
  for (auto& v : out.values()) v *= factor;
  return out;
}

template <typename T>
void axpy(T factor, const Matrix<T>& b, Matrix<T>& a) {
  require_same_shape("axpy", a, b);
  T* dst = a.data();
  const T* src = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] += factor * src[i];
}

template <typename T>
T max_abs(const Matrix<T>& a) {
  T m = 0;
  for (T v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T frobenius_norm(const Matrix<T>& a) {
  double s = 0;
  for (T v : a.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return static_cast<T>(std::sqrt(s));
}

template <typename T>
bool all_finite(const Matrix<T>& a) {
  for (T v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
std::vector<double> singular_values(const Matrix<T>& a, double tol, int max_sweeps) {
  if (!(tol > 0)) throw Error(Error::Kind::InvalidArgument, "singular_values: tol must be positive");
  if (!all_finite(a)) throw NumericError("singular_values: input " + shape_of(a) + " has non-finite entries");

  // Work on the columns of the taller orientation so there are min(m, n)
  // columns to orthogonalize.
  const bool flip = a.rows() < a.cols();
  const std::size_t m = flip ? a.cols() : a.rows();
  const std::size_t n = flip ? a.rows() : a.cols();
  if (n == 0) return {};

  // Column-major working copy: column j occupies work[j*m, (j+1)*m).
  std::vector<double> work(m * n);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double v = static_cast<double>(a(i, j));
      if (flip)
        work[i * m + j] = v;
      else
        work[j * m + i] = v;
    }

  std::vector<double> norms(n);
  auto col = [&](std::size_t j) { return work.data() + j * m; };
  auto dot = [&](const double* x, const double* y) {
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += x[i] * y[i];
    return s;
  };

  // Columns whose norm falls to rounding level relative to the whole matrix
  // are treated as exact zeros; rotating them against each other never settles.
  double total = 0;
  for (double v : work) total += v * v;
  const double negligible = total * 1e-30;

  int sweep = 0;
  for (;; ++sweep) {
    if (sweep >= max_sweeps) {
      throw NumericError("singular_values: no convergence after " + std::to_string(sweep) + " sweeps on " +
                         shape_of(a));
    }
    for (std::size_t j = 0; j < n; ++j) norms[j] = dot(col(j), col(j));
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* x = col(p);
        double* y = col(q);
        const double alpha = norms[p];
        const double beta = norms[q];
        if (alpha <= negligible || beta <= negligible) continue;
        const double gamma = dot(x, y);
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xi = x[i];
          const double yi = y[i];
          x[i] = c * xi - s * yi;
          y[i] = s * xi + c * yi;
        }
        norms[p] = alpha - t * gamma;
        norms[q] = beta + t * gamma;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(dot(col(j), col(j)));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

template <typename T>
std::size_t numerical_rank(const Matrix<T>& a, double threshold) {
  if (!(threshold > 0)) throw Error(Error::Kind::InvalidArgument, "numerical_rank: threshold must be positive");
  const auto sv = singular_values(a);
  return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s > threshold; }));
}

#define MORA_INSTANTIATE(T)                                                               \
  template class Matrix<T>;                                                               \
  template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                          \
  template Matrix<T> matmul_nt(const Matrix<T>&, const Matrix<T>&);                       \
  template Matrix<T> matmul_tn(const Matrix<T>&, const Matrix<T>&);                       \
  template void matmul_acc(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);               \
  template void matmul_nt_acc(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);            \
  template void matmul_tn_acc(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);            \
  template std::vector<T> matvec(const Matrix<T>&, std::span<const T>);                   \
  template Matrix<T> transpose(const Matrix<T>&);                                         \
  template Matrix<T> add(const Matrix<T>&, const Matrix<T>&);                             \
  template Matrix<T> subtract(const Matrix<T>&, const Matrix<T>&);                        \
  template Matrix<T> scale(const Matrix<T>&, T);                                          \
  template void axpy(T, const Matrix<T>&, Matrix<T>&);                                    \
  template T max_abs(const Matrix<T>&);                                                   \
  template T frobenius_norm(const Matrix<T>&);                                            \
  template bool all_finite(const Matrix<T>&);                                             \
  template std::vector<double> singular_values(const Matrix<T>&, double, int);            \
  template std::size_t numerical_rank(const Matrix<T>&, double);

MORA_INSTANTIATE(float)
MORA_INSTANTIATE(double)

#undef MORA_INSTANTIATE

}  // namespace mora
