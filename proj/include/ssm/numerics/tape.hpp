// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "ssm/numerics/tensor.hpp"

namespace ssm {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear recording of a forward pass. Each node owns its value and an
/// adjoint closure that pushes its gradient into its parents; `backward`
/// replays the closures in reverse recording order.
class Tape {
 public:
  using Adjoint = std::function<void(Tape&, const Tensor& grad, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Frozen parameters enter as constants; trainable ones accumulate into
  /// `p.grad` on backward.
  Var param(Parameter& p) {
    if (!p.trainable) return constant(p.value);
    Parameter* target = &p;
    return push(p.value, true, [target](Tape&, const Tensor& g, const Tensor&) {
      target->has_grad = true;
      auto out = target->grad.values();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i];
    });
  }

  /// Records an op result. The adjoint only runs when a parent needs gradients.
  Var record(Tensor value, std::initializer_list<Var> parents, Adjoint adjoint) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || needs_grad(p);
    return push(std::move(value), needs, needs ? std::move(adjoint) : Adjoint{});
  }
  Var record(Tensor value, const std::vector<Var>& parents, Adjoint adjoint) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || needs_grad(p);
    return push(std::move(value), needs, needs ? std::move(adjoint) : Adjoint{});
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id()).needs_grad; }
  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }

  /// Adds `g` into the adjoint of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_.at(v.id());
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    auto out = n.grad.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i];
  }
  /// Direct access to the adjoint buffer of `v`, allocated on demand.
  /// Returns nullptr for constants.
  Tensor* grad_buffer(Var v) {
    Node& n = nodes_.at(v.id());
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void backward(Var loss) {
    Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) throw InvalidArgument("backward expects a scalar loss");
    if (!root.needs_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.adjoint) continue;
      n.adjoint(*this, n.grad, n.value);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Adjoint adjoint;
  };

  Var push(Tensor value, bool needs, Adjoint adjoint) {
    nodes_.push_back(Node{std::move(value), Tensor{}, needs, std::move(adjoint)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

}  // namespace ssm
