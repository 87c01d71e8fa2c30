// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// High-rank square-matrix adapters (MoRA) and the low-rank LoRA baseline.
//
// A MoRA adapter owns one trainable r_hat x r_hat matrix M and computes
//
//   delta(x) = decompress(M * compress(x))
//
// where compress maps the k-dimensional input into M's input space and
// decompress maps M's output back to d dimensions. Both are fixed linear
// maps, so the composite is multiplication by an explicit d x k matrix that
// `expand_delta_w` materializes and `merge_into` folds into a base weight.
//
// Batched entry points take one input vector per row. Compressed values are
// stored as a matrix with `r_hat` columns and `chunks` rows per input row:
// one row for Truncation and Sharing, ceil(k / r_hat) rows for Decouple and
// Rotation.

#pragma once

#include "mora/linalg.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace mora {

enum class GroupScheme : std::uint8_t {
  Strided,     // group j = {j, j + r_hat, j + 2 r_hat, ...}; decompress tiles
  Contiguous,  // group j = j-th block of ceil(n / r_hat) indices; decompress repeats
};

enum class OperatorType : std::uint8_t { Truncation, Sharing, Decouple, Rotation };

struct OperatorKind {
  OperatorType type = OperatorType::Decouple;
  GroupScheme scheme = GroupScheme::Strided;  // meaningful for Sharing only

  static constexpr OperatorKind truncation() { return {OperatorType::Truncation, GroupScheme::Strided}; }
  static constexpr OperatorKind sharing(GroupScheme s = GroupScheme::Strided) { return {OperatorType::Sharing, s}; }
  static constexpr OperatorKind decouple() { return {OperatorType::Decouple, GroupScheme::Strided}; }
  static constexpr OperatorKind rotation() { return {OperatorType::Rotation, GroupScheme::Strided}; }

  bool chunked() const { return type == OperatorType::Decouple || type == OperatorType::Rotation; }

  /// Checkpoint tag: 0 Truncation, 1 Sharing/Strided, 2 Sharing/Contiguous,
  /// 3 Decouple, 4 Rotation.
  std::uint8_t tag() const;
  static OperatorKind from_tag(std::uint8_t tag);

  /// "truncation", "sharing-strided", "sharing-contiguous", "decouple", "rotation".
  std::string name() const;
  static OperatorKind parse(std::string_view name);

  bool operator==(const OperatorKind& other) const {
    return type == other.type && (type != OperatorType::Sharing || scheme == other.scheme);
  }
};

GroupScheme flipped(GroupScheme s);

/// floor(sqrt((d + k) r)), minus one when odd and the operator rotates
/// coordinate pairs. Rejects r > min(d, k).
std::size_t rhat_for(std::size_t d, std::size_t k, std::size_t r, OperatorKind op = OperatorKind::decouple());

/// Rotation angle for coordinate pair `pair` (0-based): 10000^(-2 pair / r_hat).
double rotation_theta(std::size_t pair, std::size_t r_hat);

template <typename T>
class MoraAdapter {
 public:
  MoraAdapter(std::size_t d, std::size_t k, std::size_t r, OperatorKind op);
  /// Explicit side length, used when restoring a checkpoint.
  MoraAdapter(std::size_t d, std::size_t k, std::size_t r, std::size_t r_hat, OperatorKind op);

  std::size_t d() const { return d_; }
  std::size_t k() const { return k_; }
  std::size_t r() const { return r_; }
  std::size_t r_hat() const { return r_hat_; }
  const OperatorKind& op() const { return op_; }
  void set_op(OperatorKind op);

  const Matrix<T>& M() const { return m_; }
  Matrix<T>& M() { return m_; }
  void set_M(Matrix<T> m);

  /// Number of compressed rows per input row.
  std::size_t chunks() const;
  std::size_t trainable_count() const { return r_hat_ * r_hat_; }

 private:
  void validate() const;

  std::size_t d_, k_, r_, r_hat_;
  OperatorKind op_;
  Matrix<T> m_;
};

template <typename T>
Matrix<T> compress(const Matrix<T>& x, OperatorKind op, std::size_t r_hat);
template <typename T>
Matrix<T> decompress(const Matrix<T>& y, OperatorKind op, std::size_t r_hat, std::size_t d, std::size_t batch);

/// Transposes of the two operators: `adjoint_compress` maps compressed-shaped
/// gradients back to the k-dimensional input, `adjoint_decompress` maps a
/// d-dimensional upstream gradient to compressed shape.
template <typename T>
Matrix<T> adjoint_compress(const Matrix<T>& g, OperatorKind op, std::size_t r_hat, std::size_t k, std::size_t batch);
template <typename T>
Matrix<T> adjoint_decompress(const Matrix<T>& u, OperatorKind op, std::size_t r_hat, std::size_t chunks);

template <typename T>
Matrix<T> adapter_delta(const MoraAdapter<T>& a, const Matrix<T>& x);
template <typename T>
std::vector<T> adapter_delta(const MoraAdapter<T>& a, std::span<const T> x);

template <typename T>
Matrix<T> expand_delta_w(const MoraAdapter<T>& a);

template <typename T>
Matrix<T> merge_into(const Matrix<T>& w0, const MoraAdapter<T>& a);

/// dLoss/dM summed over the rows of `x` given dLoss/d(adapter output).
template <typename T>
Matrix<T> grad_M(const MoraAdapter<T>& a, const Matrix<T>& x, const Matrix<T>& upstream);
/// dLoss/dx, i.e. expand_delta_w(a)^T applied to each upstream row.
template <typename T>
Matrix<T> grad_x(const MoraAdapter<T>& a, const Matrix<T>& upstream);

template <typename T>
class LoraAdapter {
 public:
  /// A ~ N(0, init_std^2) (init_std <= 0 means 1/sqrt(r)), B = 0.
  LoraAdapter(std::size_t d, std::size_t k, std::size_t r, double alpha, std::mt19937_64& rng, double init_std = 0);
  LoraAdapter(std::size_t d, std::size_t k, std::size_t r, double alpha, Matrix<T> a, Matrix<T> b);

  std::size_t d() const { return d_; }
  std::size_t k() const { return k_; }
  std::size_t r() const { return r_; }
  double alpha() const { return alpha_; }
  T scaling() const { return static_cast<T>(alpha_ / static_cast<double>(r_)); }
  std::size_t trainable_count() const { return (d_ + k_) * r_; }

  const Matrix<T>& A() const { return a_; }
  const Matrix<T>& B() const { return b_; }
  Matrix<T>& A() { return a_; }
  Matrix<T>& B() { return b_; }

  void reinitialize(std::mt19937_64& rng, double init_std = 0);

 private:
  std::size_t d_, k_, r_;
  double alpha_;
  Matrix<T> a_;
  Matrix<T> b_;
};

template <typename T>
Matrix<T> lora_delta(const LoraAdapter<T>& a, const Matrix<T>& x);
template <typename T>
std::vector<T> lora_delta(const LoraAdapter<T>& a, std::span<const T> x);
template <typename T>
Matrix<T> expand_delta_w(const LoraAdapter<T>& a);
template <typename T>
Matrix<T> merge_into(const Matrix<T>& w0, const LoraAdapter<T>& a);

template <typename T>
struct LoraGrads {
  Matrix<T> a;
  Matrix<T> b;
  Matrix<T> x;
};

template <typename T>
LoraGrads<T> lora_grads(const LoraAdapter<T>& a, const Matrix<T>& x, const Matrix<T>& upstream);

}  // namespace mora
