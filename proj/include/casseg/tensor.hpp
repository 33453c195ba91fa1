#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a Node. Operations that see at least one
// input requiring gradients record their inputs and a backward rule on the
// result; everything else produces plain constants. Layout for volumetric
// activations is (batch, channel, z, y, x), x fastest.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "casseg/error.hpp"

namespace casseg::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  bool is_leaf() const { return inputs.empty(); }
  std::span<T> ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{});
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, T{}, requires_grad);
  }
  static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
    return from_data(shape, std::vector<T>(static_cast<std::size_t>(nn::numel(shape)), value), requires_grad);
  }
  static Tensor from_data(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
    require(static_cast<std::int64_t>(values.size()) == nn::numel(shape), ErrorKind::Shape,
            "tensor data length " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from_data({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> values() const { return node_->value; }
  // Mutable access is for leaves (parameters, inputs); mutating a recorded
  // intermediate invalidates its consumers' backward rules.
  std::span<T> values() { return node_->value; }
  T item() const {
    require(numel() == 1, ErrorKind::Misuse, "item() on non-scalar tensor " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no history.
  Tensor detach() const { return from_data(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. History is recorded only when grad mode is on and an
// input requires gradients.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  const bool needs = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
                       return t.defined() && t.requires_grad();
                     });
  if (needs) {
    node->requires_grad = true;
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Adds g into an input's gradient if that input participates.
template <class T>
inline void accumulate_grad(Node<T>* input, std::span<const T> g) {
  if (input == nullptr || !input->requires_grad) return;
  auto dst = input->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// Topologically ordered nodes reachable from a root; inputs precede users.
template <class T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child != nullptr && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::span<Node<T>* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node<T>*> nodes_;
};

// Populates d(loss)/d(t) for every requires_grad tensor reachable from loss.
// Leaf gradients accumulate across calls; intermediate ones are recomputed.
template <class T>
void backward(const Graph<T>& graph, const Tensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorKind::Misuse,
          "backward needs a scalar loss, got shape " + (loss.defined() ? to_string(loss.shape()) : "undefined"));
  auto nodes = graph.nodes();
  require(!nodes.empty() && nodes.back() == loss.node(), ErrorKind::Misuse, "graph was not traced from this loss");
  for (Node<T>* n : nodes) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T{});
  }
  if (!loss.node()->requires_grad) return;
  loss.node()->ensure_grad()[0] += T{1};
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
  }
}

template <class T>
void backward(const Tensor<T>& loss) {
  backward(Graph<T>::trace(loss), loss);
}

}  // namespace casseg::nn
