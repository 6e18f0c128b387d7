#ifndef DOME_TENSOR_HPP
#define DOME_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dome/rng.hpp"
#include "dome/util.hpp"

namespace dome {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Reverse-mode autodiff tensor. A Tensor is a shared handle to a graph
// node holding values, an optional gradient buffer, and a backward
// closure that scatters the node's gradient into its parents.
//
// Templated on the scalar type: float for training, double for the
// finite-difference test suites.
template <typename R>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<R> value;
        std::vector<R> grad;
        bool requires_grad = false;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), R(0));
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), R(0), requires_grad);
    }

    static Tensor filled(Shape shape, R v, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(shape_numel(t.node_->shape), v);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<R> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument(str("tensor: shape ", shape_str(shape),
                                            " does not match data length ", data.size()));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(R v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, R stddev = R(1), bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->value) v = static_cast<R>(rng.normal()) * stddev;
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, R lo, R hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->value) v = static_cast<R>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::vector<R>& values() { return node_->value; }
    const std::vector<R>& values() const { return node_->value; }
    R* data() { return node_->value.data(); }
    const R* data() const { return node_->value.data(); }

    std::vector<R>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<R>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    R item() const {
        if (numel() != 1)
            throw std::invalid_argument(str("item: tensor has ", numel(), " elements"));
        return node_->value[0];
    }

    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), R(0));
    }

    void set_requires_grad(bool rq) { node_->requires_grad = rq; }

    // Detached copy of the values (no graph history).
    Tensor detach() const {
        return Tensor::from(node_->shape, node_->value, false);
    }

    // Runs reverse-mode accumulation from this scalar node. Gradients add
    // into every reachable node that requires them; parameters keep their
    // accumulated grads until zero_grad.
    void backward() {
        if (numel() != 1)
            throw std::invalid_argument("backward: root must be a scalar");
        if (!node_->requires_grad) return;

        // Iterative DFS topological order.
        std::vector<Node*> order;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({node_.get(), 0});
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].get();
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        // A node's closure reads its own grad buffer, which stays empty when
        // no downstream op routed gradient into it; allocate all up front.
        for (Node* n : order) n->ensure_grad();
        node_->grad[0] += R(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward) n->backward(*n);
        }
    }

    // --- graph construction (used by ops.hpp) ---

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

    static Tensor make_op(const char* op, Shape shape,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
        Tensor out;
        out.node_ = std::make_shared<Node>();
        out.node_->shape = std::move(shape);
        out.node_->value.assign(shape_numel(out.node_->shape), R(0));
        out.node_->op = op;
        bool rq = false;
        for (const auto& in : inputs) rq = rq || in.requires_grad();
        out.node_->requires_grad = rq;
        if (rq) {
            out.node_->parents.reserve(inputs.size());
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

private:
    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dome

#endif  // DOME_TENSOR_HPP
