// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "danet/errors.hpp"
#include "danet/tensor.hpp"

namespace danet {

template <class T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <class T>
class Var {
public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient store produced by Tape::backward, keyed by tensor id.
template <class T>
class Gradients {
public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor<T>>> g) : grads_(std::move(g)) {}

  bool has(const Var<T>& v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }

  /// Gradient of `v`; zeros when `v` was not reached from the loss.
  Tensor<T> get(const Var<T>& v) const {
    if (has(v)) return *grads_[v.id()];
    return Tensor<T>(v.shape());
  }

  const Tensor<T>& at(const Var<T>& v) const {
    if (!has(v)) throw ContractError("no gradient recorded for tensor id " + std::to_string(v.id()));
    return *grads_[v.id()];
  }

private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

/// Write access to the gradient buffers of a node's inputs during backward.
template <class T>
class GradSink {
public:
  GradSink(std::vector<std::optional<Tensor<T>>>& grads, const Tape<T>& tape,
           const std::vector<std::size_t>& inputs)
      : grads_(grads), tape_(tape), inputs_(inputs) {}

  /// Accumulation buffer for input `k`, or nullptr when that input needs no
  /// gradient. Contributions must be added, never assigned.
  Tensor<T>* operator[](std::size_t k) {
    std::size_t id = inputs_[k];
    if (!tape_.requires_grad(id)) return nullptr;
    auto& slot = grads_[id];
    if (!slot) slot.emplace(tape_.value(id).shape());
    return &*slot;
  }

private:
  std::vector<std::optional<Tensor<T>>>& grads_;
  const Tape<T>& tape_;
  const std::vector<std::size_t>& inputs_;
};

/// Reverse-mode differentiation record. Ids are assigned in creation order,
/// so every node's inputs precede it. Single-threaded; one tape per step.
template <class T>
class Tape {
public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, GradSink<T>& sink)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    entries_.push_back({std::move(value), requires_grad, true});
    return Var<T>(this, entries_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an op output. No node is stored when no input requires grad.
  Var<T> record(std::string op, Tensor<T> out, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    return record(std::move(op), std::move(out), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(std::string op, Tensor<T> out, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (v.tape() != this) throw ContractError(op + ": operand belongs to a different tape");
      ids.push_back(v.id());
      needs = needs || requires_grad(v.id());
    }
    entries_.push_back({std::move(out), needs, false});
    std::size_t id = entries_.size() - 1;
    if (needs) nodes_.push_back(Node{std::move(op), std::move(ids), id, std::move(fn)});
    return Var<T>(this, id);
  }

  const Tensor<T>& value(std::size_t id) const { return entries_.at(id).value; }
  bool requires_grad(std::size_t id) const { return entries_.at(id).requires_grad; }
  bool is_leaf(std::size_t id) const { return entries_.at(id).leaf; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::deque<Node>& nodes() const noexcept { return nodes_; }

  /// Reverse sweep from a scalar loss. Gradients of intermediate tensors are
  /// released once consumed; leaf gradients are returned.
  Gradients<T> backward(const Var<T>& loss) const {
    if (loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
    if (loss.value().size() != 1)
      throw ContractError("backward: loss must be scalar, got " + loss.shape().str());
    std::vector<std::optional<Tensor<T>>> grads(entries_.size());
    if (!requires_grad(loss.id())) return Gradients<T>(std::move(grads));
    grads[loss.id()].emplace(loss.shape(), T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& g = grads[it->output];
      if (!g) continue;
      GradSink<T> sink(grads, *this, it->inputs);
      it->backward(*g, sink);
      if (!is_leaf(it->output)) g.reset();
    }
    return Gradients<T>(std::move(grads));
  }

private:
  struct Entry {
    Tensor<T> value;
    bool requires_grad;
    bool leaf;
  };
  std::deque<Entry> entries_;
  std::deque<Node> nodes_;
};

template <class T>
Gradients<T> backward(const Var<T>& loss) {
  if (!loss.valid()) throw ContractError("backward: invalid loss handle");
  return loss.tape()->backward(loss);
}

} // namespace danet
