#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pal/tensor/tensor.hpp"

namespace pal {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  inline bool requires_grad() const;
  // Gradient held on the tape after backward(); empty if none reached this node.
  inline std::span<const double> grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Backward rule: receives dL/d(output) and accumulates into its inputs via
// Tape::grad_of, guarded by Tape::needs_grad.
using BackwardFn = std::function<void(std::span<const double> grad_out, Tape& tape)>;

// Reverse-mode record of tensor operations. Nodes are appended in execution
// order, so the tape is topologically sorted by construction. Confined to one
// thread.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf bound to an external tensor (a parameter). Its value is read in
  // place; backward() accumulates into the tensor's grad when it requires one.
  Var param(Tensor& t, std::string_view name = {}) {
    Node& n = nodes_.emplace_back();
    n.external = &t;
    n.requires_grad = grad_enabled_ && t.requires_grad();
    n.op = name.empty() ? "param" : std::string(name);
    return {this, nodes_.size() - 1};
  }

  // Owned leaf that never receives gradient.
  Var constant(Tensor t) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(t);
    n.op = "constant";
    return {this, nodes_.size() - 1};
  }

  // Owned leaf with a gradient readable through Var::grad().
  Var variable(Tensor t) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(t);
    n.requires_grad = grad_enabled_;
    n.op = "variable";
    return {this, nodes_.size() - 1};
  }

  // Appends an operation. Non-finite outputs abort with the op name.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NonFiniteError("non-finite value produced by " + std::string(op));
    }
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape() != this) throw std::invalid_argument(std::string(op) + ": input from another tape");
      needs = needs || nodes_[in.id()].requires_grad;
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.op = std::string(op);
    n.requires_grad = grad_enabled_ && needs;
    if (n.requires_grad) n.backward = std::move(backward);
    return {this, nodes_.size() - 1};
  }

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  // Zero-initialised on first access within a backward pass.
  std::span<double> grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }
  std::span<double> grad_of(const Var& v) { return grad_of(v.id()); }

  std::span<const double> node_grad(std::size_t id) const { return nodes_[id].grad; }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }

  // Populates gradients for every node reachable from `loss`. Parameter
  // tensors accumulate: calling backward twice without zeroing doubles them.
  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: tensor not on this tape");
    if (value(loss.id()).size() != 1) {
      throw DimensionError("backward: loss must be scalar, got " + shape_str(value(loss.id()).shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    visits_ = 0;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_of(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      ++visits_;
      if (n.backward) {
        // The closure may touch other nodes' grads; keep our own buffer stable.
        std::vector<double> g = std::move(n.grad);
        n.backward(g, *this);
        n.grad = std::move(g);
      }
      if (n.external) {
        std::vector<double>& dst = n.external->grad_storage();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  std::size_t last_backward_visits() const { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string op;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->needs_grad(id_); }
inline std::span<const double> Var::grad() const { return tape_->node_grad(id_); }

}  // namespace pal
