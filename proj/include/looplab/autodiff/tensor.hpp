#pragma once

#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

namespace looplab::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array. Most kernels view it as a matrix whose column count
// is the last dimension and whose row count folds every leading dimension.
template <std::floating_point Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<Real> d, bool grad = false);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, Real value);
    static Tensor scalar(Real value) { return full({}, value); }

    std::size_t numel() const { return data.size(); }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    Real& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    Real at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool operator==(const Tensor&) const = default;
};

// Euclidean norm of the flattened array.
template <std::floating_point Real>
Real l2_norm(const Tensor<Real>& t);

template <std::floating_point Real>
bool all_finite(const Tensor<Real>& t);

// Widening/narrowing copy between precisions.
template <std::floating_point To, std::floating_point From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.requires_grad = t.requires_grad;
    out.data.assign(t.data.begin(), t.data.end());
    return out;
}

extern template struct Tensor<float>;
extern template struct Tensor<double>;

} // namespace looplab::ad
