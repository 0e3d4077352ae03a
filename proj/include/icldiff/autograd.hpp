#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace icl {

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&)            = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Receives the node itself; parents are reached through node.parents so closures hold no owning cycle.
    std::function<void(Node&)> backward_fn;

    bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }

    Tensor<T>& ensure_grad() {
        if (grad.shape != value.shape || grad.size() != value.size()) {
            grad = Tensor<T>(value.shape);
        }
        return grad;
    }
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value         = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    int64_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    const Tensor<T>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->has_grad(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Reverse-mode sweep seeded with d(self)/d(self) = 1 at every element.
    void backward() const {
        if (!node_->requires_grad) {
            return;
        }
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node<T>* p = n->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        auto& g = node_->ensure_grad();
        std::fill(g.data.begin(), g.data.end(), T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && n->has_grad()) {
                n->backward_fn(*n);
            }
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds an op result; records parents and the backward closure only when some parent needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
    auto node   = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs  = false;
    if (grad_enabled()) {
        for (auto& p : parents) {
            needs = needs || p.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) {
            node->parents.push_back(p.node());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

/// Gradient buffer of the i-th parent, or nullptr when that parent takes no gradient.
template <typename T>
T* parent_grad(Node<T>& n, size_t i) {
    auto& p = n.parents[i];
    if (!p->requires_grad) {
        return nullptr;
    }
    return p->ensure_grad().ptr();
}

}  // namespace icl
