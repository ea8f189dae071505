#pragma once

#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "looplab/autodiff/tensor.hpp"

namespace looplab::ad {

template <std::floating_point Real>
class Graph;

// One recorded primitive application. `backward` reads this node's gradient
// and accumulates into the gradients of `parents`.
template <std::floating_point Real>
struct Node {
    std::string_view op;
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad; // empty means zero
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    std::int64_t index = -1; // position on the tape, -1 when untracked
    bool requires_grad = false;

    std::size_t numel() const { return value.size(); }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    // Gradient buffer sized to the value, allocated on first use.
    std::vector<Real>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), Real{0});
        return grad;
    }
};

// Handle to a node. Cheap to copy; keeps the node alive.
template <std::floating_point Real>
class Var {
public:
    Var() = default;
    Var(Graph<Real>* g, std::shared_ptr<Node<Real>> n) : graph_(g), node_(std::move(n)) {}

    bool valid() const { return node_ != nullptr; }
    Graph<Real>& graph() const { return *graph_; }
    Node<Real>& node() const { return *node_; }
    const std::shared_ptr<Node<Real>>& node_ptr() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    const std::vector<Real>& data() const { return node_->value; }
    std::size_t numel() const { return node_->numel(); }
    std::size_t rows() const { return node_->rows(); }
    std::size_t cols() const { return node_->cols(); }
    std::int64_t index() const { return node_->index; }
    std::string_view op() const { return node_->op; }

    Tensor<Real> value() const { return Tensor<Real>(node_->shape, node_->value); }
    Real item() const;

private:
    Graph<Real>* graph_ = nullptr;
    std::shared_ptr<Node<Real>> node_;
};

// Define-by-run tape. Built fresh for every step and consumed by a single
// reverse sweep. With recording off, nodes are not retained and no backward
// closures are stored, so intermediates are released as soon as their last
// handle goes away.
template <std::floating_point Real>
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return tape_.size(); }
    const std::vector<std::shared_ptr<Node<Real>>>& tape() const { return tape_; }

    // Leaf holding a trainable tensor; it receives a gradient on backward().
    // Binding the same name twice returns the existing leaf.
    Var<Real> parameter(const std::string& name, const Tensor<Real>& value);
    // Leaf with no gradient.
    Var<Real> constant(const Tensor<Real>& value);
    Var<Real> constant(Shape shape, std::vector<Real> data);
    // Leaf that takes part in differentiation without being a named parameter.
    Var<Real> input(const Tensor<Real>& value);

    // Used by primitive implementations: validates finiteness, links parents
    // and stores the adjoint rule when any parent needs a gradient.
    Var<Real> make(std::string_view op, Shape shape, std::vector<Real> value,
                   std::vector<Var<Real>> parents, std::function<void(Node<Real>&)> backward);

    // Reverse sweep from a scalar node. Returns d loss / d p for every
    // registered parameter; parameters the loss does not reach get zeros.
    std::map<std::string, Tensor<Real>> backward(const Var<Real>& loss);

    // Gradient accumulated at a tracked node after backward(). Interior nodes
    // only keep theirs with retain_grads set.
    Tensor<Real> grad(const Var<Real>& v) const;

    bool check_finite = true;
    bool retain_grads = false;

private:
    bool recording_;
    std::vector<std::shared_ptr<Node<Real>>> tape_;
    std::vector<std::pair<std::string, std::shared_ptr<Node<Real>>>> params_;
    std::map<std::string, std::size_t> param_index_;
};

extern template class Var<float>;
extern template class Var<double>;
extern template class Graph<float>;
extern template class Graph<double>;

} // namespace looplab::ad
