// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward kernels shared by the differentiable tape and the cached decoder,
// so both paths produce the same arithmetic.

#pragma once

#include "mora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mora::kernels {

/// y = x / rms(x) * gain per row; writes 1/rms per row into `inv` when given.
template <typename T>
void rms_norm(const T* x, const T* gain, T* y, std::size_t rows, std::size_t cols, T eps, T* inv = nullptr) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* in = x + i * cols;
    T ss = 0;
    for (std::size_t j = 0; j < cols; ++j) ss += in[j] * in[j];
    const T r = T(1) / std::sqrt(ss / static_cast<T>(cols) + eps);
    if (inv) inv[i] = r;
    T* o = y + i * cols;
    for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] * r * gain[j];
  }
}

template <typename T>
T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

/// y = silu(a) * b elementwise.
template <typename T>
void swiglu(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * sigmoid(a[i]) * b[i];
}

/// Rotates consecutive coordinate pairs of every head in place by
/// position * theta_p, theta_p = 10000^(-2p / head_dim). Row r sits at
/// position offset + r % seq; `sign` -1 applies the inverse rotation.
template <typename T>
void rotate_positions(Matrix<T>& m, std::size_t seq, std::size_t heads, T sign, std::size_t offset = 0) {
  const std::size_t cols = m.cols();
  const std::size_t head_dim = cols / heads;
  const std::size_t pairs = head_dim / 2;
  std::vector<T> cs(seq * pairs), sn(seq * pairs);
  for (std::size_t pos = 0; pos < seq; ++pos)
    for (std::size_t p = 0; p < pairs; ++p) {
      const double angle = static_cast<double>(offset + pos) *
                           std::pow(10000.0, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
      cs[pos * pairs + p] = static_cast<T>(std::cos(angle));
      sn[pos * pairs + p] = sign * static_cast<T>(std::sin(angle));
    }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const std::size_t pos = r % seq;
    T* row = m.data() + r * cols;
    for (std::size_t h = 0; h < heads; ++h) {
      T* v = row + h * head_dim;
      for (std::size_t p = 0; p < pairs; ++p) {
        const T c = cs[pos * pairs + p], s = sn[pos * pairs + p];
        const T x0 = v[2 * p], x1 = v[2 * p + 1];
        v[2 * p] = c * x0 - s * x1;
        v[2 * p + 1] = s * x0 + c * x1;
      }
    }
  }
}

/// One query row of one head attending over `count` key/value rows spaced
/// `stride` apart. Adds the attended values into `out`; stores the
/// probabilities in `probs` when given. `scores` needs `count` slots.
template <typename T>
void attend(const T* q, const T* k, const T* v, std::size_t stride, std::size_t count, std::size_t hd, T scale,
            T* out, T* scores, T* probs = nullptr) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    const T* kj = k + j * stride;
    T s = 0;
    for (std::size_t c = 0; c < hd; ++c) s += q[c] * kj[c];
    scores[j] = s * scale;
    mx = std::max(mx, scores[j]);
  }
  T total = 0;
  for (std::size_t j = 0; j < count; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    total += scores[j];
  }
  for (std::size_t j = 0; j < count; ++j) {
    const T p = scores[j] / total;
    if (probs) probs[j] = p;
    const T* vj = v + j * stride;
    for (std::size_t c = 0; c < hd; ++c) out[c] += p * vj[c];
  }
}

}  // namespace mora::kernels
