#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mdup {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Disables graph recording in the current thread while alive.
class NoGradGuard {
  public:
    NoGradGuard() : prev_(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }

  private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// Shared handle to a dense row-major tensor. Copies alias the same storage;
// use clone() for an independent leaf.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)));
    }

    static Tensor full(Shape shape, T value) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    explicit operator bool() const { return static_cast<bool>(node_); }
    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    // Row/column view: a rank-1 tensor is treated as a single row.
    std::size_t rows() const { return ndim() == 1 ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }
    T item() const {
        if (numel() != 1) throw std::logic_error("tensor: item() on " + shape_str(shape()));
        return node_->data[0];
    }
    T& operator[](std::size_t i) { return node_->data[i]; }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // Independent leaf with copied values and no history.
    Tensor clone() const { return Tensor(shape(), values()); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    static Tensor from_node(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

  private:
    std::shared_ptr<Node<T>> node_;
};

// Builds a result node, wiring parents and the backward closure only when
// recording is enabled and some input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto out = Tensor<T>(std::move(shape), std::move(values));
    if (!NoGradGuard::enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    auto* node = out.node();
    node->requires_grad = true;
    for (auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::move(backward);
    return out;
}

// Reverse topological order of the graph reachable from `root` through nodes
// that require grad. Each node appears exactly once.
template <typename T>
std::vector<Node<T>*> computation_tape(const Tensor<T>& root) {
    std::vector<Node<T>*> order;
    if (!root.requires_grad()) return order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; graphs can be deep (one node per op).
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());
    return order;
}

// Seeds d(root)/d(root) = 1 and propagates to every leaf that requires grad.
// Leaf gradients accumulate across calls until zero_grad().
template <typename T>
void backward(const Tensor<T>& root) {
    if (root.numel() != 1) throw std::logic_error("backward: root must be a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;
    auto tape = computation_tape(root);
    root.node()->ensure_grad()[0] += T(1);
    for (Node<T>* node : tape) {
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Interior nodes keep no gradient after the pass.
    for (Node<T>* node : tape) {
        if (node->backward_fn) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

}  // namespace mdup
