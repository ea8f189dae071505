#include "looplab/autodiff/graph.hpp"

#include <cmath>

#include "looplab/errors.hpp"

namespace looplab::ad {

template <std::floating_point Real>
Real Var<Real>::item() const {
    if (node_->numel() != 1) {
        throw ContractError("item: expected a single-element tensor, got shape " +
                            shape_string(node_->shape));
    }
    return node_->value[0];
}

template <std::floating_point Real>
Var<Real> Graph<Real>::parameter(const std::string& name, const Tensor<Real>& value) {
    if (auto it = param_index_.find(name); it != param_index_.end())
        return Var<Real>(this, params_[it->second].second);
    auto n = std::make_shared<Node<Real>>();
    n->op = "parameter";
    n->shape = value.shape;
    n->value = value.data;
    n->requires_grad = recording_;
    if (recording_) {
        n->index = static_cast<std::int64_t>(tape_.size());
        tape_.push_back(n);
    }
    param_index_.emplace(name, params_.size());
    params_.emplace_back(name, n);
    return Var<Real>(this, std::move(n));
}

template <std::floating_point Real>
Var<Real> Graph<Real>::input(const Tensor<Real>& value) {
    auto n = std::make_shared<Node<Real>>();
    n->op = "input";
    n->shape = value.shape;
    n->value = value.data;
    n->requires_grad = recording_;
    if (recording_) {
        n->index = static_cast<std::int64_t>(tape_.size());
        tape_.push_back(n);
    }
    return Var<Real>(this, std::move(n));
}

template <std::floating_point Real>
Var<Real> Graph<Real>::constant(const Tensor<Real>& value) {
    return constant(value.shape, value.data);
}

template <std::floating_point Real>
Var<Real> Graph<Real>::constant(Shape shape, std::vector<Real> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("constant: shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " entries");
    }
    auto n = std::make_shared<Node<Real>>();
    n->op = "constant";
    n->shape = std::move(shape);
    n->value = std::move(data);
    if (recording_) {
        n->index = static_cast<std::int64_t>(tape_.size());
        tape_.push_back(n);
    }
    return Var<Real>(this, std::move(n));
}

template <std::floating_point Real>
Var<Real> Graph<Real>::make(std::string_view op, Shape shape, std::vector<Real> value,
                            std::vector<Var<Real>> parents,
                            std::function<void(Node<Real>&)> backward) {
    if (check_finite) {
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (!std::isfinite(value[i])) {
                const std::string where = recording_ ? "#" + std::to_string(tape_.size())
                                                     : std::string("(untracked)");
                throw NumericError("op '" + std::string(op) + "' at node " + where +
                                   " produced a non-finite value at flat index " +
                                   std::to_string(i) + " (output shape " +
                                   shape_string(shape) + ")");
            }
        }
    }
    auto n = std::make_shared<Node<Real>>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (!recording_) return Var<Real>(this, std::move(n));

    bool needs = false;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) {
        if (&p.graph() != this) {
            throw ContractError("op '" + std::string(op) + "' mixes nodes from different graphs");
        }
        needs = needs || p.node().requires_grad;
        n->parents.push_back(p.node_ptr());
    }
    n->requires_grad = needs;
    if (needs) n->backward = std::move(backward);
    n->index = static_cast<std::int64_t>(tape_.size());
    tape_.push_back(n);
    return Var<Real>(this, std::move(n));
}

template <std::floating_point Real>
std::map<std::string, Tensor<Real>> Graph<Real>::backward(const Var<Real>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_string(loss.shape()));
    }
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");

    if (loss.index() >= 0 && loss.node().requires_grad) {
        loss.node().grad_buffer()[0] += Real{1};
        for (std::int64_t i = loss.index(); i >= 0; --i) {
            Node<Real>& n = *tape_[static_cast<std::size_t>(i)];
            if (n.grad.empty() || !n.backward) continue;
            n.backward(n);
            // Interior gradients are not needed once propagated.
            if (!retain_grads) std::vector<Real>().swap(n.grad);
        }
    }

    std::map<std::string, Tensor<Real>> out;
    for (const auto& [name, n] : params_) {
        if (n->grad.empty())
            out[name] = Tensor<Real>::zeros(n->shape);
        else
            out[name] = Tensor<Real>(n->shape, n->grad);
    }
    return out;
}

template <std::floating_point Real>
Tensor<Real> Graph<Real>::grad(const Var<Real>& v) const {
    if (v.node().grad.empty()) return Tensor<Real>::zeros(v.shape());
    return Tensor<Real>(v.shape(), v.node().grad);
}

template class Var<float>;
template class Var<double>;
template class Graph<float>;
template class Graph<double>;

} // namespace looplab::ad
