// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mora/tape.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mora {

template <typename T>
typename Tape<T>::Id Tape<T>::push(Matrix<T> value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
typename Tape<T>::Id Tape<T>::constant(Matrix<T> value) {
  return push(std::move(value), false);
}

template <typename T>
typename Tape<T>::Id Tape<T>::parameter(const Matrix<T>& value, Matrix<T>* grad_sink) {
  Node n;
  n.ref = &value;
  n.requires_grad = grad_sink != nullptr;
  n.sink = grad_sink;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
const Matrix<T>& Tape<T>::value(Id id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.owned;
}

template <typename T>
Matrix<T>& Tape<T>::grad_of(Id id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Matrix<T>& v = value(id);
    n.grad = Matrix<T>(v.rows(), v.cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(Id id, Matrix<T>&& contribution) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Matrix<T>& v = value(id);
    if (contribution.rows() != v.rows() || contribution.cols() != v.cols())
      throw ShapeError("gradient " + shape_of(contribution) + " for value " + shape_of(v));
    n.grad = std::move(contribution);
  } else {
    axpy(T(1), contribution, n.grad);
  }
}

template <typename T>
void Tape<T>::accumulate(Id id, const Matrix<T>& contribution) {
  if (nodes_[id].grad.empty()) {
    accumulate(id, Matrix<T>(contribution));
  } else {
    axpy(T(1), contribution, nodes_[id].grad);
  }
}

template <typename T>
typename Tape<T>::Id Tape<T>::linear(Id x, Id w) {
  const Id out = push(matmul_nt(value(x), value(w)), requires_grad(x) || requires_grad(w));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [x, w](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(x)) {
      if (t.nodes_[x].grad.empty()) t.accumulate(x, matmul(g, t.value(w)));
      else matmul_acc(g, t.value(w), t.grad_of(x));
    }
    if (t.requires_grad(w)) matmul_tn_acc(g, t.value(x), t.grad_of(w));
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::add(Id a, Id b) {
  const Id out = push(mora::add(value(a), value(b)), requires_grad(a) || requires_grad(b));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [a, b](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(a)) t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, g);
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::rms_norm(Id x, Id gain, T eps) {
  const Matrix<T>& xv = value(x);
  const Matrix<T>& gv = value(gain);
  if (gv.size() != xv.cols()) throw ShapeError("rms_norm: gain " + shape_of(gv) + " for input " + shape_of(xv));
  const std::size_t rows = xv.rows(), cols = xv.cols();
  auto y = Matrix<T>::uninitialized(rows, cols);
  std::vector<T> inv(rows);
  kernels::rms_norm(xv.data(), gv.data(), y.data(), rows, cols, eps, inv.data());
  const Id out = push(std::move(y), requires_grad(x) || requires_grad(gain));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [x, gain, inv = std::move(inv)](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    const Matrix<T>& xv = t.value(x);
    const Matrix<T>& gv = t.value(gain);
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (t.requires_grad(gain)) {
      Matrix<T>& gg = t.grad_of(gain);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gg.data()[j] += g(i, j) * xv(i, j) * inv[i];
    }
    if (t.requires_grad(x)) {
      Matrix<T>& gx = t.grad_of(x);
      for (std::size_t i = 0; i < rows; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += g(i, j) * gv.data()[j] * xv(i, j);
        const T c = dot * inv[i] * inv[i] * inv[i] / static_cast<T>(cols);
        for (std::size_t j = 0; j < cols; ++j) gx(i, j) += inv[i] * g(i, j) * gv.data()[j] - c * xv(i, j);
      }
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::swiglu(Id gate, Id up) {
  const Matrix<T>& a = value(gate);
  const Matrix<T>& b = value(up);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("swiglu: " + shape_of(a) + " vs " + shape_of(b));
  auto y = Matrix<T>::uninitialized(a.rows(), a.cols());
  kernels::swiglu(a.data(), b.data(), y.data(), a.size());
  const Id out = push(std::move(y), requires_grad(gate) || requires_grad(up));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [gate, up](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    const Matrix<T>& a = t.value(gate);
    const Matrix<T>& b = t.value(up);
    Matrix<T>* ga = t.requires_grad(gate) ? &t.grad_of(gate) : nullptr;
    Matrix<T>* gb = t.requires_grad(up) ? &t.grad_of(up) : nullptr;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T av = a.data()[i];
      const T s = kernels::sigmoid(av);
      if (gb) gb->data()[i] += g.data()[i] * av * s;
      if (ga) ga->data()[i] += g.data()[i] * b.data()[i] * s * (T(1) + av * (T(1) - s));
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::embedding(std::span<const int> ids, Id table) {
  const Matrix<T>& tv = value(table);
  auto y = Matrix<T>::uninitialized(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw Error(Error::Kind::InvalidArgument, "embedding: token " + std::to_string(ids[i]) +
                                                    " outside vocabulary of " + std::to_string(tv.rows()));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * tv.cols(), tv.cols(), y.data() + i * tv.cols());
  }
  const Id out = push(std::move(y), requires_grad(table));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [table, ids = std::vector<int>(ids.begin(), ids.end())](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    Matrix<T>& gt = t.grad_of(table);
    const std::size_t cols = gt.cols();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += g(i, j);
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::rope(Id x, std::size_t seq, std::size_t heads) {
  const Matrix<T>& xv = value(x);
  if (heads == 0 || xv.cols() % heads != 0 || (xv.cols() / heads) % 2 != 0 || seq == 0 || xv.rows() % seq != 0) {
    throw ShapeError("rope: " + shape_of(xv) + " does not split into " + std::to_string(heads) +
                     " even-width heads over sequences of " + std::to_string(seq));
  }
  Matrix<T> y = xv;
  kernels::rotate_positions(y, seq, heads, T(1));
  const Id out = push(std::move(y), requires_grad(x));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [x, seq, heads](Tape& t, Id self) {
    Matrix<T> g = t.grad(self);
    kernels::rotate_positions(g, seq, heads, T(-1));
    t.accumulate(x, std::move(g));
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::causal_attention(Id q, Id k, Id v, std::size_t seq, std::size_t heads) {
  const Matrix<T>& qv = value(q);
  const Matrix<T>& kv = value(k);
  const Matrix<T>& vv = value(v);
  if (qv.rows() != kv.rows() || qv.rows() != vv.rows() || qv.cols() != kv.cols() || qv.cols() != vv.cols() ||
      seq == 0 || qv.rows() % seq != 0 || heads == 0 || qv.cols() % heads != 0) {
    throw ShapeError("causal_attention: q " + shape_of(qv) + ", k " + shape_of(kv) + ", v " + shape_of(vv));
  }
  const std::size_t cols = qv.cols();
  const std::size_t hd = cols / heads;
  const std::size_t batch = qv.rows() / seq;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Matrix<T> y(qv.rows(), cols);
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> scores(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* pbase = probs.data() + (b * heads + h) * seq * seq;
      const std::size_t first = b * seq * cols + h * hd;
      for (std::size_t i = 0; i < seq; ++i) {
        kernels::attend(qv.data() + first + i * cols, kv.data() + first, vv.data() + first, cols, i + 1, hd, scale,
                        y.data() + first + i * cols, scores.data(), pbase + i * seq);
      }
    }

  const Id out = push(std::move(y), requires_grad(q) || requires_grad(k) || requires_grad(v));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [q, k, v, seq, heads, probs = std::move(probs)](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    const Matrix<T>& qv = t.value(q);
    const Matrix<T>& kv = t.value(k);
    const Matrix<T>& vv = t.value(v);
    const std::size_t cols = qv.cols();
    const std::size_t hd = cols / heads;
    const std::size_t batch = qv.rows() / seq;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Matrix<T>* gq = t.requires_grad(q) ? &t.grad_of(q) : nullptr;
    Matrix<T>* gk = t.requires_grad(k) ? &t.grad_of(k) : nullptr;
    Matrix<T>* gv = t.requires_grad(v) ? &t.grad_of(v) : nullptr;
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* pbase = probs.data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const T* gi = g.data() + (b * seq + i) * cols + h * hd;
          const T* pi = pbase + i * seq;
          T weighted = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = vv.data() + (b * seq + j) * cols + h * hd;
            T s = 0;
            for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
            dp[j] = s;
            weighted += s * pi[j];
            if (gv) {
              T* gvj = gv->data() + (b * seq + j) * cols + h * hd;
              for (std::size_t c = 0; c < hd; ++c) gvj[c] += pi[j] * gi[c];
            }
          }
          const T* qi = qv.data() + (b * seq + i) * cols + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = pi[j] * (dp[j] - weighted) * scale;
            if (ds == T(0)) continue;
            const T* kj = kv.data() + (b * seq + j) * cols + h * hd;
            if (gq) {
              T* gqi = gq->data() + (b * seq + i) * cols + h * hd;
              for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
            }
            if (gk) {
              T* gkj = gk->data() + (b * seq + j) * cols + h * hd;
              for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::mora_delta(Id x, Id m, OperatorKind op, std::size_t d) {
  const Matrix<T>& mv = value(m);
  const std::size_t r_hat = mv.rows();
  const std::size_t batch = value(x).rows();
  const std::size_t k = value(x).cols();
  Matrix<T> c = compress(value(x), op, r_hat);
  Matrix<T> y = decompress(matmul_nt(c, mv), op, r_hat, d, batch);
  const Id out = push(std::move(y), requires_grad(x) || requires_grad(m));
  if (!requires_grad(out)) return out;
  const std::size_t chunks = c.rows() / std::max<std::size_t>(batch, 1);
  nodes_[out].back = [x, m, op, k, chunks, c = std::move(c)](Tape& t, Id self) {
    const Matrix<T>& mv = t.value(m);
    const std::size_t r_hat = mv.rows();
    const Matrix<T> du = adjoint_decompress(t.grad(self), op, r_hat, chunks);
    if (t.requires_grad(m)) matmul_tn_acc(du, c, t.grad_of(m));
    if (t.requires_grad(x)) {
      t.accumulate(x, adjoint_compress(matmul(du, mv), op, r_hat, k, du.rows() / chunks));
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::lora_delta(Id x, Id a, Id b, T scaling) {
  Matrix<T> mid = matmul_nt(value(x), value(a));
  for (auto& v : mid.values()) v *= scaling;
  Matrix<T> y = matmul_nt(mid, value(b));
  const Id out = push(std::move(y), requires_grad(x) || requires_grad(a) || requires_grad(b));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [x, a, b, scaling, mid = std::move(mid)](Tape& t, Id self) {
    const Matrix<T>& g = t.grad(self);
    if (t.requires_grad(b)) matmul_tn_acc(g, mid, t.grad_of(b));
    if (!t.requires_grad(a) && !t.requires_grad(x)) return;
    Matrix<T> dmid = matmul(g, t.value(b));
    for (auto& v : dmid.values()) v *= scaling;
    if (t.requires_grad(a)) matmul_tn_acc(dmid, t.value(x), t.grad_of(a));
    if (t.requires_grad(x)) matmul_acc(dmid, t.value(a), t.grad_of(x));
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::cross_entropy(Id logits, std::span<const int> targets) {
  const Matrix<T>& lv = value(logits);
  if (targets.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_of(lv));
  }
  const std::size_t vocab = lv.cols();
  Matrix<T> probs(lv.rows(), vocab);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= vocab) {
      throw Error(Error::Kind::InvalidArgument, "cross_entropy: target " + std::to_string(targets[i]) +
                                                    " outside vocabulary of " + std::to_string(vocab));
    }
    const T* row = lv.data() + i * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs(i, j) = std::exp(row[j] - mx);
      z += probs(i, j);
    }
    for (std::size_t j = 0; j < vocab; ++j) probs(i, j) /= z;
    total += static_cast<double>(mx + std::log(z) - row[targets[i]]);
    ++count;
  }
  const T loss = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  const Id out = push(Matrix<T>(1, 1, loss), requires_grad(logits));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [logits, count, probs = std::move(probs),
                      targets = std::vector<int>(targets.begin(), targets.end())](Tape& t, Id self) {
    if (count == 0) return;
    const T g = t.grad(self)(0, 0) / static_cast<T>(count);
    Matrix<T>& gl = t.grad_of(logits);
    const std::size_t vocab = gl.cols();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] < 0) continue;
      for (std::size_t j = 0; j < vocab; ++j) gl(i, j) += g * probs(i, j);
      gl(i, static_cast<std::size_t>(targets[i])) -= g;
    }
  };
  return out;
}

template <typename T>
typename Tape<T>::Id Tape<T>::inner_product(Id a, const Matrix<T>& weights) {
  const Matrix<T>& av = value(a);
  if (av.rows() != weights.rows() || av.cols() != weights.cols()) {
    throw ShapeError("inner_product: " + shape_of(av) + " vs " + shape_of(weights));
  }
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av.data()[i] * weights.data()[i];
  const Id out = push(Matrix<T>(1, 1, s), requires_grad(a));
  if (!requires_grad(out)) return out;
  nodes_[out].back = [a, weights](Tape& t, Id self) { axpy(t.grad(self)(0, 0), weights, t.grad_of(a)); };
  return out;
}

template <typename T>
void Tape<T>::backward(Id loss) {
  const Matrix<T>& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + shape_of(lv));
  visits_ = 0;
  if (!requires_grad(loss)) return;
  grad_of(loss).fill(T(1));
  for (Id id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.back) n.back(*this, id);
    if (n.sink) axpy(T(1), n.grad, *n.sink);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mora
