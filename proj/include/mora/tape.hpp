// Copyright 2026 The MoRA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over the handful of matrix primitives the
// tiny decoder needs. Activations are matrices with one row per token.
// Nodes are appended in evaluation order, so walking the node list
// backwards is a reverse topological order.

#pragma once

#include "mora/adapters.hpp"
#include "mora/linalg.hpp"

#include <functional>
#include <span>
#include <vector>

namespace mora {

template <typename T>
class Tape {
 public:
  using Id = std::size_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives a gradient.
  Id constant(Matrix<T> value);
  /// A view of caller-owned storage. When `grad_sink` is non-null the
  /// parameter is trainable and backward() adds its gradient to the sink;
  /// otherwise it is frozen and no gradient is ever formed for it.
  Id parameter(const Matrix<T>& value, Matrix<T>* grad_sink);

  const Matrix<T>& value(Id id) const;
  bool requires_grad(Id id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// x * w^T
  Id linear(Id x, Id w);
  Id add(Id a, Id b);
  Id rms_norm(Id x, Id gain, T eps = T(1e-5));
  /// silu(gate) * up
  Id swiglu(Id gate, Id up);
  Id embedding(std::span<const int> ids, Id table);
  /// Rotary positions on rows laid out as batch x seq, columns as heads x head_dim.
  Id rope(Id x, std::size_t seq, std::size_t heads);
  Id causal_attention(Id q, Id k, Id v, std::size_t seq, std::size_t heads);
  Id mora_delta(Id x, Id m, OperatorKind op, std::size_t d);
  Id lora_delta(Id x, Id a, Id b, T scaling);
  /// Mean token cross-entropy; targets < 0 are ignored. Produces a 1x1 node.
  Id cross_entropy(Id logits, std::span<const int> targets);
  /// sum(a .* weights), a 1x1 node.
  Id inner_product(Id a, const Matrix<T>& weights);

  /// Runs reverse mode from a 1x1 node. Throws on a non-scalar loss.
  void backward(Id loss);
  std::size_t last_backward_visits() const { return visits_; }

 private:
  struct Node {
    Matrix<T> owned;
    const Matrix<T>* ref = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    Matrix<T>* sink = nullptr;
    std::function<void(Tape&, Id)> back;
  };

  Id push(Matrix<T> value, bool requires_grad);
  Matrix<T>& grad_of(Id id);
  /// Adds `contribution` to the gradient of `id`, taking ownership when the
  /// gradient has not been formed yet.
  void accumulate(Id id, Matrix<T>&& contribution);
  void accumulate(Id id, const Matrix<T>& contribution);
  const Matrix<T>& grad(Id id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace mora
