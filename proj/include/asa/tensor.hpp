#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace asa {

/// Raised when a caller breaks a documented precondition (bad shape, index, config).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grad buffers.
  std::function<void(const Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles that records the operations producing it
/// so gradients can be pulled back with backward().
///
/// Tensor is a handle: copies share storage and graph position.
class Tensor {
 public:
  using BackwardFn = std::function<void(const detail::Node&)>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) throw ContractViolation("tensor shape must have at least one axis");
    for (auto e : shape)
      if (e == 0) throw ContractViolation("tensor extents must be positive: " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw ContractViolation("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  /// Builds the result of a differentiable primitive. The backward function and
  /// parent links are kept only when some input requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                        BackwardFn backward) {
    return from_op(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(backward));
  }

  static Tensor from_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                        BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      for (const auto& in : inputs)
        if (in.requires_grad()) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires a gradient,
  /// then releases the recorded graph.
  void backward() const {
    if (numel() != 1)
      throw ContractViolation("backward() needs a scalar output, got shape " + shape_str(shape()));
    if (!requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* parent = node->parents[next++].get();
        if (visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      auto* node = *it;
      if (node->backward && !node->grad.empty()) node->backward(*node);
    }
    for (auto* node : order) {
      if (node->backward) {
        node->backward = nullptr;
        node->parents.clear();
      }
    }
  }

 private:
  std::shared_ptr<detail::Node> node_;

  friend std::vector<double>* grad_sink(const Tensor& t);
};

/// Gradient buffer of `t` if it takes part in differentiation, otherwise nullptr.
inline std::vector<double>* grad_sink(const Tensor& t) {
  return t.requires_grad() ? &t.node_->grad_buffer() : nullptr;
}

/// Gradients of a scalar output with respect to each parameter. Parameters not
/// reachable from `output` get all-zero gradients.
inline std::vector<std::vector<double>> grad(const Tensor& output, std::span<Tensor> parameters) {
  if (output.numel() != 1)
    throw ContractViolation("grad() needs a scalar output, got shape " + shape_str(output.shape()));
  for (auto& p : parameters) p.zero_grad();
  output.backward();
  std::vector<std::vector<double>> out;
  out.reserve(parameters.size());
  for (auto& p : parameters) out.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

}  // namespace asa
