#include "looplab/autodiff/tensor.hpp"

#include <cmath>
#include <numeric>

#include "looplab/errors.hpp"

namespace looplab::ad {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <std::floating_point Real>
Tensor<Real>::Tensor(Shape s, std::vector<Real> d, bool grad)
    : shape(std::move(s)), data(std::move(d)), requires_grad(grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " entries but data has " +
                         std::to_string(data.size()));
    }
}

template <std::floating_point Real>
Tensor<Real> Tensor<Real>::zeros(Shape s) {
    return full(std::move(s), Real{0});
}

template <std::floating_point Real>
Tensor<Real> Tensor<Real>::full(Shape s, Real value) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<Real>(n, value));
}

template <std::floating_point Real>
Real l2_norm(const Tensor<Real>& t) {
    long double acc = 0;
    for (Real x : t.data) acc += static_cast<long double>(x) * x;
    return static_cast<Real>(std::sqrt(acc));
}

template <std::floating_point Real>
bool all_finite(const Tensor<Real>& t) {
    for (Real x : t.data)
        if (!std::isfinite(x)) return false;
    return true;
}

template struct Tensor<float>;
template struct Tensor<double>;
template float l2_norm(const Tensor<float>&);
template double l2_norm(const Tensor<double>&);
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

} // namespace looplab::ad
