// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/adapters.hpp"

#include "fault.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>

namespace mora {

namespace detail {

namespace {
std::atomic<int> g_fault{0};
}

Fault active_fault() { return static_cast<Fault>(g_fault.load(std::memory_order_relaxed)); }
void set_active_fault(Fault f) { g_fault.store(static_cast<int>(f), std::memory_order_relaxed); }

}  // namespace detail

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

[[noreturn]] void invalid(const std::string& what) { throw Error(Error::Kind::InvalidArgument, what); }

// cos/sin of chunk * theta_p for every chunk and coordinate pair.
struct RotationTable {
  std::size_t pairs;
  std::vector<double> cos_, sin_;

  RotationTable(std::size_t chunks, std::size_t r_hat) : pairs(r_hat / 2), cos_(chunks * pairs), sin_(chunks * pairs) {
    for (std::size_t c = 0; c < chunks; ++c)
      for (std::size_t p = 0; p < pairs; ++p) {
        const double angle = static_cast<double>(c) * rotation_theta(p, r_hat);
        cos_[c * pairs + p] = std::cos(angle);
        sin_[c * pairs + p] = std::sin(angle);
      }
  }

  // Applies R_chunk (or its transpose) in place to one r_hat-long row.
  template <typename T>
  void apply(std::size_t chunk, T* row, bool transpose) const {
    for (std::size_t p = 0; p < pairs; ++p) {
      const T c = static_cast<T>(cos_[chunk * pairs + p]);
      const T s = transpose ? static_cast<T>(-sin_[chunk * pairs + p]) : static_cast<T>(sin_[chunk * pairs + p]);
      const T x0 = row[2 * p];
      const T x1 = row[2 * p + 1];
      row[2 * p] = c * x0 - s * x1;
      row[2 * p + 1] = s * x0 + c * x1;
    }
  }
};

void require_reducing(OperatorKind op, std::size_t r_hat, std::size_t k) {
  if ((op.type == OperatorType::Truncation || op.type == OperatorType::Sharing) && r_hat > k) {
    invalid(op.name() + ": r_hat " + std::to_string(r_hat) + " exceeds input dimension " + std::to_string(k));
  }
}

}  // namespace

std::uint8_t OperatorKind::tag() const {
  switch (type) {
    case OperatorType::Truncation: return 0;
    case OperatorType::Sharing: return scheme == GroupScheme::Strided ? 1 : 2;
    case OperatorType::Decouple: return 3;
    case OperatorType::Rotation: return 4;
  }
  return 255;
}

OperatorKind OperatorKind::from_tag(std::uint8_t tag) {
  switch (tag) {
    case 0: return truncation();
    case 1: return sharing(GroupScheme::Strided);
    case 2: return sharing(GroupScheme::Contiguous);
    case 3: return decouple();
    case 4: return rotation();
    default: throw Error(Error::Kind::Format, "unknown operator tag " + std::to_string(tag));
  }
}

std::string OperatorKind::name() const {
  switch (type) {
    case OperatorType::Truncation: return "truncation";
    case OperatorType::Sharing: return scheme == GroupScheme::Strided ? "sharing-strided" : "sharing-contiguous";
    case OperatorType::Decouple: return "decouple";
    case OperatorType::Rotation: return "rotation";
  }
  return "?";
}

OperatorKind OperatorKind::parse(std::string_view name) {
  if (name == "truncation") return truncation();
  if (name == "sharing" || name == "sharing-strided") return sharing(GroupScheme::Strided);
  if (name == "sharing-contiguous") return sharing(GroupScheme::Contiguous);
  if (name == "decouple") return decouple();
  if (name == "rotation") return rotation();
  invalid("unknown operator '" + std::string(name) + "'");
}

GroupScheme flipped(GroupScheme s) {
  return s == GroupScheme::Strided ? GroupScheme::Contiguous : GroupScheme::Strided;
}

std::size_t rhat_for(std::size_t d, std::size_t k, std::size_t r, OperatorKind op) {
  if (d == 0 || k == 0 || r == 0) invalid("rhat_for: d, k and r must be positive");
  if (r > std::min(d, k)) {
    invalid("rhat_for: rank " + std::to_string(r) + " exceeds min(d, k) = " + std::to_string(std::min(d, k)));
  }
  const std::size_t budget = (d + k) * r;
  auto r_hat = static_cast<std::size_t>(std::sqrt(static_cast<double>(budget)));
  while (r_hat * r_hat > budget) --r_hat;
  while ((r_hat + 1) * (r_hat + 1) <= budget) ++r_hat;
  if (op.type == OperatorType::Rotation && r_hat % 2 == 1) --r_hat;
  return r_hat;
}

double rotation_theta(std::size_t pair, std::size_t r_hat) {
  return std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(r_hat));
}

// ---------------------------------------------------------------------------
// MoraAdapter

template <typename T>
MoraAdapter<T>::MoraAdapter(std::size_t d, std::size_t k, std::size_t r, OperatorKind op)
    : MoraAdapter(d, k, r, rhat_for(d, k, r, op), op) {}

template <typename T>
MoraAdapter<T>::MoraAdapter(std::size_t d, std::size_t k, std::size_t r, std::size_t r_hat, OperatorKind op)
    : d_(d), k_(k), r_(r), r_hat_(r_hat), op_(op), m_(r_hat, r_hat) {
  validate();
}

template <typename T>
void MoraAdapter<T>::validate() const {
  if (d_ == 0 || k_ == 0 || r_hat_ == 0) invalid("MoraAdapter: dimensions must be positive");
  require_reducing(op_, r_hat_, k_);
  if (op_.type == OperatorType::Rotation && r_hat_ % 2 != 0) {
    invalid("MoraAdapter: rotation needs an even r_hat, got " + std::to_string(r_hat_));
  }
}

template <typename T>
void MoraAdapter<T>::set_op(OperatorKind op) {
  OperatorKind old = op_;
  op_ = op;
  try {
    validate();
  } catch (...) {
    op_ = old;
    throw;
  }
}

template <typename T>
void MoraAdapter<T>::set_M(Matrix<T> m) {
  if (m.rows() != r_hat_ || m.cols() != r_hat_) {
    throw ShapeError("MoraAdapter: M must be " + shape_string(r_hat_, r_hat_) + ", got " + shape_of(m));
  }
  m_ = std::move(m);
}

template <typename T>
std::size_t MoraAdapter<T>::chunks() const {
  return op_.chunked() ? ceil_div(k_, r_hat_) : 1;
}

// ---------------------------------------------------------------------------
// Operators

template <typename T>
Matrix<T> compress(const Matrix<T>& x, OperatorKind op, std::size_t r_hat) {
  const std::size_t batch = x.rows();
  const std::size_t k = x.cols();
  if (r_hat == 0) invalid("compress: r_hat must be positive");
  require_reducing(op, r_hat, k);

  switch (op.type) {
    case OperatorType::Truncation: {
      Matrix<T> y(batch, r_hat);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < r_hat; ++j) y(b, j) = x(b, j);
      return y;
    }
    case OperatorType::Sharing: {
      Matrix<T> y(batch, r_hat);
      const std::size_t block = ceil_div(k, r_hat);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* in = x.data() + b * k;
        T* out = y.data() + b * r_hat;
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t g = op.scheme == GroupScheme::Strided ? i % r_hat : i / block;
          out[g] += in[i];
        }
      }
      return y;
    }
    case OperatorType::Decouple:
    case OperatorType::Rotation: {
      const std::size_t n = ceil_div(k, r_hat);
      Matrix<T> y(batch * n, r_hat);
      for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.data() + b * k, k, y.data() + b * n * r_hat);
      if (op.type == OperatorType::Rotation) {
        if (r_hat % 2 != 0) invalid("compress: rotation needs an even r_hat");
        RotationTable table(n, r_hat);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 1; c < n; ++c) table.apply(c, y.data() + (b * n + c) * r_hat, false);
      }
      return y;
    }
  }
  return {};
}

template <typename T>
Matrix<T> decompress(const Matrix<T>& y, OperatorKind op, std::size_t r_hat, std::size_t d, std::size_t batch) {
  if (y.cols() != r_hat) {
    throw ShapeError("decompress: expected " + std::to_string(r_hat) + " columns, got " + shape_of(y));
  }
  Matrix<T> out(batch, d);
  if (!op.chunked()) {
    if (y.rows() != batch) {
      throw ShapeError("decompress(" + op.name() + "): expected " + std::to_string(batch) + " rows, got " + shape_of(y));
    }
    const std::size_t block = ceil_div(d, r_hat);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* in = y.data() + b * r_hat;
      T* o = out.data() + b * d;
      for (std::size_t i = 0; i < d; ++i) {
        switch (op.type) {
          case OperatorType::Truncation: o[i] = i < r_hat ? in[i] : T(0); break;
          default: o[i] = in[op.scheme == GroupScheme::Strided ? i % r_hat : i / block]; break;
        }
      }
      if (op.type == OperatorType::Sharing && detail::active_fault() == detail::Fault::SharingDecompressSign) o[0] = -o[0];
    }
    return out;
  }
  if (batch == 0 || y.rows() % batch != 0) {
    throw ShapeError("decompress(" + op.name() + "): " + shape_of(y) + " is not a whole number of chunks for " +
                     std::to_string(batch) + " rows");
  }
  const std::size_t n = y.rows() / batch;
  const std::size_t span = std::min(d, n * r_hat);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(y.data() + b * n * r_hat, span, out.data() + b * d);
  return out;
}

template <typename T>
Matrix<T> adjoint_compress(const Matrix<T>& g, OperatorKind op, std::size_t r_hat, std::size_t k, std::size_t batch) {
  if (g.cols() != r_hat) throw ShapeError("adjoint_compress: expected " + std::to_string(r_hat) + " columns");
  require_reducing(op, r_hat, k);
  Matrix<T> x(batch, k);
  if (!op.chunked()) {
    if (g.rows() != batch) throw ShapeError("adjoint_compress: row count mismatch " + shape_of(g));
    const std::size_t block = ceil_div(k, r_hat);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* in = g.data() + b * r_hat;
      T* o = x.data() + b * k;
      for (std::size_t i = 0; i < k; ++i) {
        switch (op.type) {
          case OperatorType::Truncation: o[i] = i < r_hat ? in[i] : T(0); break;
          default: o[i] = in[op.scheme == GroupScheme::Strided ? i % r_hat : i / block]; break;
        }
      }
    }
    return x;
  }
  const std::size_t n = ceil_div(k, r_hat);
  if (g.rows() != batch * n) throw ShapeError("adjoint_compress: expected " + std::to_string(batch * n) + " rows");
  if (op.type == OperatorType::Rotation) {
    Matrix<T> unrotated = g;
    RotationTable table(n, r_hat);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 1; c < n; ++c) table.apply(c, unrotated.data() + (b * n + c) * r_hat, true);
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(unrotated.data() + b * n * r_hat, k, x.data() + b * k);
    return x;
  }
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(g.data() + b * n * r_hat, k, x.data() + b * k);
  return x;
}

template <typename T>
Matrix<T> adjoint_decompress(const Matrix<T>& u, OperatorKind op, std::size_t r_hat, std::size_t chunks) {
  const std::size_t batch = u.rows();
  const std::size_t d = u.cols();
  if (!op.chunked()) {
    Matrix<T> g(batch, r_hat);
    const std::size_t block = ceil_div(d, r_hat);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* in = u.data() + b * d;
      T* o = g.data() + b * r_hat;
      for (std::size_t i = 0; i < d; ++i) {
        switch (op.type) {
          case OperatorType::Truncation:
            if (i < r_hat) o[i] = in[i];
            break;
          default: o[op.scheme == GroupScheme::Strided ? i % r_hat : i / block] += in[i]; break;
        }
      }
    }
    return g;
  }
  Matrix<T> g(batch * chunks, r_hat);
  const std::size_t span = std::min(d, chunks * r_hat);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(u.data() + b * d, span, g.data() + b * chunks * r_hat);
  return g;
}

template <typename T>
Matrix<T> adapter_delta(const MoraAdapter<T>& a, const Matrix<T>& x) {
  if (x.cols() != a.k()) throw ShapeError("adapter_delta: input " + shape_of(x) + " but k = " + std::to_string(a.k()));
  const Matrix<T> c = compress(x, a.op(), a.r_hat());
  const Matrix<T> mid = matmul_nt(c, a.M());
  return decompress(mid, a.op(), a.r_hat(), a.d(), x.rows());
}

template <typename T>
std::vector<T> adapter_delta(const MoraAdapter<T>& a, std::span<const T> x) {
  Matrix<T> row(1, x.size(), std::vector<T>(x.begin(), x.end()));
  const auto out = adapter_delta(a, row);
  return {out.data(), out.data() + out.size()};
}

template <typename T>
Matrix<T> expand_delta_w(const MoraAdapter<T>& a) {
  const std::size_t d = a.d(), k = a.k(), rh = a.r_hat();
  const Matrix<T>& m = a.M();
  Matrix<T> w(d, k);
  switch (a.op().type) {
    case OperatorType::Truncation:
      for (std::size_t i = 0; i < std::min(d, rh); ++i)
        for (std::size_t j = 0; j < rh; ++j) w(i, j) = m(i, j);
      break;
    case OperatorType::Sharing: {
      const bool strided = a.op().scheme == GroupScheme::Strided;
      const std::size_t block_out = ceil_div(d, rh), block_in = ceil_div(k, rh);
      for (std::size_t i = 0; i < d; ++i) {
        const std::size_t gi = strided ? i % rh : i / block_out;
        for (std::size_t j = 0; j < k; ++j) w(i, j) = m(gi, strided ? j % rh : j / block_in);
      }
      break;
    }
    case OperatorType::Decouple:
    case OperatorType::Rotation: {
      const std::size_t n = ceil_div(k, rh);
      const bool rotate = a.op().type == OperatorType::Rotation;
      std::optional<RotationTable> table;
      if (rotate) table.emplace(n, rh);
      Matrix<T> block = m;
      for (std::size_t c = 0; c < n; ++c) {
        if (rotate) {
          // P^c = M R_c: rotate each row of M by R_c^T.
          block = m;
          for (std::size_t row = 0; row < rh; ++row) table->apply(c, block.data() + row * rh, true);
        }
        for (std::size_t bi = 0; bi < rh && c * rh + bi < d; ++bi)
          for (std::size_t bj = 0; bj < rh && c * rh + bj < k; ++bj) w(c * rh + bi, c * rh + bj) = block(bi, bj);
      }
      break;
    }
  }
  return w;
}

template <typename T>
Matrix<T> merge_into(const Matrix<T>& w0, const MoraAdapter<T>& a) {
  if (w0.rows() != a.d() || w0.cols() != a.k()) {
    throw ShapeError("merge_into: base " + shape_of(w0) + " vs adapter " + shape_string(a.d(), a.k()));
  }
  return add(w0, expand_delta_w(a));
}

template <typename T>
Matrix<T> grad_M(const MoraAdapter<T>& a, const Matrix<T>& x, const Matrix<T>& upstream) {
  if (x.rows() != upstream.rows() || x.cols() != a.k() || upstream.cols() != a.d()) {
    throw ShapeError("grad_M: input " + shape_of(x) + ", upstream " + shape_of(upstream));
  }
  const Matrix<T> c = compress(x, a.op(), a.r_hat());
  const Matrix<T> du = adjoint_decompress(upstream, a.op(), a.r_hat(), a.chunks());
  return matmul_tn(du, c);
}

template <typename T>
Matrix<T> grad_x(const MoraAdapter<T>& a, const Matrix<T>& upstream) {
  if (upstream.cols() != a.d()) throw ShapeError("grad_x: upstream " + shape_of(upstream));
  const Matrix<T> du = adjoint_decompress(upstream, a.op(), a.r_hat(), a.chunks());
  return adjoint_compress(matmul(du, a.M()), a.op(), a.r_hat(), a.k(), upstream.rows());
}

// ---------------------------------------------------------------------------
// LoraAdapter

template <typename T>
LoraAdapter<T>::LoraAdapter(std::size_t d, std::size_t k, std::size_t r, double alpha, std::mt19937_64& rng,
                            double init_std)
    : d_(d), k_(k), r_(r), alpha_(alpha), a_(r, k), b_(d, r) {
  if (d == 0 || k == 0 || r == 0) invalid("LoraAdapter: dimensions must be positive");
  if (r > std::min(d, k)) invalid("LoraAdapter: rank exceeds min(d, k)");
  if (!(alpha > 0)) invalid("LoraAdapter: alpha must be positive");
  reinitialize(rng, init_std);
}

template <typename T>
LoraAdapter<T>::LoraAdapter(std::size_t d, std::size_t k, std::size_t r, double alpha, Matrix<T> a, Matrix<T> b)
    : d_(d), k_(k), r_(r), alpha_(alpha), a_(std::move(a)), b_(std::move(b)) {
  if (a_.rows() != r || a_.cols() != k || b_.rows() != d || b_.cols() != r) {
    throw ShapeError("LoraAdapter: A " + shape_of(a_) + " and B " + shape_of(b_) + " do not match d=" +
                     std::to_string(d) + " k=" + std::to_string(k) + " r=" + std::to_string(r));
  }
}

template <typename T>
void LoraAdapter<T>::reinitialize(std::mt19937_64& rng, double init_std) {
  const double sd = init_std > 0 ? init_std : 1.0 / std::sqrt(static_cast<double>(r_));
  std::normal_distribution<double> normal(0.0, sd);
  for (auto& v : a_.values()) v = static_cast<T>(normal(rng));
  b_.fill(T(0));
}

template <typename T>
Matrix<T> lora_delta(const LoraAdapter<T>& a, const Matrix<T>& x) {
  if (x.cols() != a.k()) throw ShapeError("lora_delta: input " + shape_of(x) + " but k = " + std::to_string(a.k()));
  Matrix<T> mid = matmul_nt(x, a.A());
  for (auto& v : mid.values()) v *= a.scaling();
  return matmul_nt(mid, a.B());
}

template <typename T>
std::vector<T> lora_delta(const LoraAdapter<T>& a, std::span<const T> x) {
  Matrix<T> row(1, x.size(), std::vector<T>(x.begin(), x.end()));
  const auto out = lora_delta(a, row);
  return {out.data(), out.data() + out.size()};
}

template <typename T>
Matrix<T> expand_delta_w(const LoraAdapter<T>& a) {
  return scale(matmul(a.B(), a.A()), a.scaling());
}

template <typename T>
Matrix<T> merge_into(const Matrix<T>& w0, const LoraAdapter<T>& a) {
  if (w0.rows() != a.d() || w0.cols() != a.k()) {
    throw ShapeError("merge_into: base " + shape_of(w0) + " vs adapter " + shape_string(a.d(), a.k()));
  }
  return add(w0, expand_delta_w(a));
}

template <typename T>
LoraGrads<T> lora_grads(const LoraAdapter<T>& a, const Matrix<T>& x, const Matrix<T>& upstream) {
  if (x.rows() != upstream.rows() || x.cols() != a.k() || upstream.cols() != a.d()) {
    throw ShapeError("lora_grads: input " + shape_of(x) + ", upstream " + shape_of(upstream));
  }
  const T s = a.scaling();
  Matrix<T> mid = matmul_nt(x, a.A());  // batch x r
  for (auto& v : mid.values()) v *= s;
  Matrix<T> dmid = matmul(upstream, a.B());  // batch x r
  for (auto& v : dmid.values()) v *= s;
  LoraGrads<T> g;
  g.b = matmul_tn(upstream, mid);
  g.a = matmul_tn(dmid, x);
  g.x = matmul(dmid, a.A());
  return g;
}

#define MORA_INSTANTIATE(T)                                                                               \
  template class MoraAdapter<T>;                                                                          \
  template class LoraAdapter<T>;                                                                          \
  template Matrix<T> compress(const Matrix<T>&, OperatorKind, std::size_t);                               \
  template Matrix<T> decompress(const Matrix<T>&, OperatorKind, std::size_t, std::size_t, std::size_t);   \
  template Matrix<T> adjoint_compress(const Matrix<T>&, OperatorKind, std::size_t, std::size_t,           \
                                      std::size_t);                                                       \
  template Matrix<T> adjoint_decompress(const Matrix<T>&, OperatorKind, std::size_t, std::size_t);        \
  template Matrix<T> adapter_delta(const MoraAdapter<T>&, const Matrix<T>&);                              \
  template std::vector<T> adapter_delta(const MoraAdapter<T>&, std::span<const T>);                       \
  template Matrix<T> expand_delta_w(const MoraAdapter<T>&);                                               \
  template Matrix<T> merge_into(const Matrix<T>&, const MoraAdapter<T>&);                                 \
  template Matrix<T> grad_M(const MoraAdapter<T>&, const Matrix<T>&, const Matrix<T>&);                   \
  template Matrix<T> grad_x(const MoraAdapter<T>&, const Matrix<T>&);                                     \
  template Matrix<T> lora_delta(const LoraAdapter<T>&, const Matrix<T>&);                                 \
  template std::vector<T> lora_delta(const LoraAdapter<T>&, std::span<const T>);                          \
  template Matrix<T> expand_delta_w(const LoraAdapter<T>&);                                               \
  template Matrix<T> merge_into(const Matrix<T>&, const LoraAdapter<T>&);                                 \
  template LoraGrads<T> lora_grads(const LoraAdapter<T>&, const Matrix<T>&, const Matrix<T>&);

MORA_INSTANTIATE(float)
MORA_INSTANTIATE(double)

#undef MORA_INSTANTIATE

}  // namespace mora
