// Reverse-mode autodiff tape. Every differentiable op appends one node holding
// its output value and a closure that scatters the output gradient into the
// gradients of its inputs.
#pragma once

#include <cassert>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spexplus/tensor.hpp"

namespace spexplus {

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tape;

// Lightweight handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

template <typename T>
class Tape {
 public:
  // Called with the tape and the node's final output gradient.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A value with no gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  // A leaf whose gradient can be read back with grad() after backward.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  // A leaf bound to a trainable tensor. Repeated calls with the same tensor
  // return the same node, so a weight used on two paths gets one summed
  // gradient, which backward() adds into param.grad().
  Var<T> parameter(Tensor<T>& param) {
    if (auto it = param_nodes_.find(&param); it != param_nodes_.end())
      return {this, it->second};
    Var<T> v = push(Tensor<T>(param.shape(), param.storage()), param.requires_grad(), {});
    nodes_[v.id].param = &param;
    param_nodes_.emplace(&param, v.id);
    return v;
  }

  // Appends an op output. `backward` is only kept (and only invoked) when at
  // least one input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs,
                BackwardFn backward) {
    check_open();
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape != this) throw TapeError("input recorded on a different tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
#ifndef NDEBUG
    if (!value.all_finite())
      throw std::runtime_error("non-finite value produced by a forward op");
#endif
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Mutable gradient buffer of an input, or an empty span when the input
  // does not require a gradient.
  std::span<T> grad_sink(Var<T> v) {
    auto& node = nodes_[v.id];
    if (!node.requires_grad) return {};
    if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
    return node.grad;
  }

  // Gradient of a leaf created with variable() after backward().
  const std::vector<T>& grad(Var<T> v) const {
    if (!consumed_) throw TapeError("grad() requested before backward()");
    return nodes_.at(v.id).grad;
  }

  void backward(Var<T> loss) {
    check_open();
    if (loss.tape != this) throw TapeError("loss recorded on a different tape");
    auto& root = nodes_[loss.id];
    if (root.value.size() != 1)
      throw TapeError("backward() needs a scalar loss, got shape " +
                      shape_str(root.value.shape()));
    consumed_ = true;
    if (!root.requires_grad) return;
    root.grad.assign(1, T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      if (node.backward) {
        node.backward(*this, node.grad);
      } else if (node.param != nullptr) {
        node.param->accumulate_grad(node.grad);
      }
    }
  }

  // Drops all recorded nodes so the tape can be reused for a new pass.
  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
  };

  void check_open() const {
    if (consumed_)
      throw TapeError("tape already consumed by backward(); re-record the graph");
  }

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    check_open();
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward), nullptr, {}});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_nodes_;
  bool consumed_ = false;
};

}  // namespace spexplus
