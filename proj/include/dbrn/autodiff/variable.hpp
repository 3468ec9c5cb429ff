#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dbrn/core/tensor.hpp"

namespace dbrn {

// Reverse-mode autodiff over dense tensors. Graphs are built eagerly; node
// creation order is a valid topological order, so backward runs nodes in
// descending id. Single-writer training; no-grad inference is lock-free.

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // lazily allocated, same shape as value
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop; // accumulates into parents' grads
    bool requires_grad = false;
    int64_t id = 0;

    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

inline int64_t next_node_id() {
    static std::atomic<int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad && grad_enabled();
        n->id = next_node_id();
        return Var(std::move(n));
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& val() const { return n_->value; }
    Tensor<T>& val() { return n_->value; }
    Tensor<T>& grad() const { return n_->ensure_grad(); }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() const {
        if (!n_->grad.empty()) n_->grad.fill(T(0));
    }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return n_; }

    const Shape& shape() const { return n_->value.shape(); }
    int64_t numel() const { return n_->value.numel(); }

private:
    std::shared_ptr<Node<T>> n_;
};

// Builds an op node. `fn` must accumulate (+=) into parents' ensure_grad().
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool rg = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) rg = true;
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents)
            if (p.defined()) n->parents.push_back(p.node());
        n->backprop = std::move(fn);
    }
    n->id = next_node_id();
    return Var<T>(std::move(n));
}

// Runs reverse-mode accumulation from a scalar root (numel()==1).
template <typename T>
void backward(const Var<T>& root) {
    if (!root.defined() || !root.requires_grad())
        throw parameter_error("backward: root does not require grad");
    if (root.numel() != 1) throw parameter_error("backward: root must be scalar");

    // Collect reachable grad-requiring nodes.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node<T>* a, Node<T>* b) { return a->id > b->id; });

    root.node()->ensure_grad().fill(T(1));
    for (Node<T>* n : order) {
        if (n->backprop) {
            n->backprop(*n);
            n->backprop = nullptr; // release captured buffers as we go
        }
    }
}

} // namespace dbrn
