#pragma once

#include <concepts>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "looplab/autodiff/ops.hpp"

namespace looplab::ad {

// A primal value together with its directional derivative. Both halves are
// ordinary graph nodes: tangents are produced by composing primitives, so a
// reverse sweep can differentiate through them. An absent tangent is zero.
template <std::floating_point Real>
struct DualVar {
    Var<Real> primal;
    std::optional<Var<Real>> tangent;

    DualVar() = default;
    DualVar(Var<Real> p) : primal(std::move(p)) {} // NOLINT: constants convert implicitly
    DualVar(Var<Real> p, std::optional<Var<Real>> t) : primal(std::move(p)), tangent(std::move(t)) {}

    bool has_tangent() const { return tangent.has_value(); }
    const Shape& shape() const { return primal.shape(); }
    // The tangent, materialized as zeros when absent.
    Var<Real> tangent_or_zero() const;
};

// Maps on latent states that can be run with or without a tangent.
template <std::floating_point Real>
using StateMap = std::function<DualVar<Real>(const DualVar<Real>&)>;

// Tangent-propagating versions of the primitives. Each computes the primal
// with the plain primitive and the tangent by composing primitives.
namespace dual {

template <std::floating_point Real>
DualVar<Real> matmul(const DualVar<Real>& a, const DualVar<Real>& b);
template <std::floating_point Real>
DualVar<Real> batched_matmul(const DualVar<Real>& a, const DualVar<Real>& b, std::size_t groups,
                             bool transpose_b);
template <std::floating_point Real>
DualVar<Real> transpose(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> reshape(const DualVar<Real>& a, Shape shape);

template <std::floating_point Real>
DualVar<Real> add(const DualVar<Real>& a, const DualVar<Real>& b);
template <std::floating_point Real>
DualVar<Real> sub(const DualVar<Real>& a, const DualVar<Real>& b);
template <std::floating_point Real>
DualVar<Real> mul(const DualVar<Real>& a, const DualVar<Real>& b);
template <std::floating_point Real>
DualVar<Real> scale(const DualVar<Real>& a, Real s);
template <std::floating_point Real>
DualVar<Real> add_scalar(const DualVar<Real>& a, Real s);
template <std::floating_point Real>
DualVar<Real> relu(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> gelu(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> sin(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> cos(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> sqrt(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> reciprocal(const DualVar<Real>& a);

template <std::floating_point Real>
DualVar<Real> add_row(const DualVar<Real>& a, const DualVar<Real>& v);
template <std::floating_point Real>
DualVar<Real> mul_row(const DualVar<Real>& a, const DualVar<Real>& v);
template <std::floating_point Real>
DualVar<Real> sub_col(const DualVar<Real>& a, const DualVar<Real>& v);
template <std::floating_point Real>
DualVar<Real> mul_col(const DualVar<Real>& a, const DualVar<Real>& v);

template <std::floating_point Real>
DualVar<Real> sum(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> mean(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> squared_norm(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> row_sum(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> row_mean(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> segment_sum(const DualVar<Real>& a, std::size_t segments);
template <std::floating_point Real>
DualVar<Real> scale_segments(const DualVar<Real>& a, const DualVar<Real>& s);

template <std::floating_point Real>
DualVar<Real> softmax(const DualVar<Real>& a);
template <std::floating_point Real>
DualVar<Real> causal_softmax(const DualVar<Real>& a, std::size_t seq_len);
template <std::floating_point Real>
DualVar<Real> layer_norm(const DualVar<Real>& x, const DualVar<Real>& gain,
                         const DualVar<Real>& bias, Real eps = Real(kDefaultNormEps));
template <std::floating_point Real>
DualVar<Real> rms_norm(const DualVar<Real>& x, const DualVar<Real>& gain,
                       Real eps = Real(kDefaultNormEps));
template <std::floating_point Real>
DualVar<Real> simple_norm(const DualVar<Real>& x, Real eps = Real(kDefaultNormEps));

template <std::floating_point Real>
DualVar<Real> embedding(const DualVar<Real>& table, std::span<const int> ids);
template <std::floating_point Real>
DualVar<Real> concat_rows(const std::vector<DualVar<Real>>& parts);
template <std::floating_point Real>
DualVar<Real> slice_rows(const DualVar<Real>& a, std::size_t begin, std::size_t end);
template <std::floating_point Real>
DualVar<Real> concat_cols(const std::vector<DualVar<Real>>& parts);
template <std::floating_point Real>
DualVar<Real> slice_cols(const DualVar<Real>& a, std::size_t begin, std::size_t end);
template <std::floating_point Real>
DualVar<Real> split_heads(const DualVar<Real>& x, std::size_t batch, std::size_t seq,
                          std::size_t heads);
template <std::floating_point Real>
DualVar<Real> merge_heads(const DualVar<Real>& x, std::size_t batch, std::size_t seq,
                          std::size_t heads);

// No tangent rule: throws UnsupportedOpError when the logits carry a tangent.
template <std::floating_point Real>
DualVar<Real> cross_entropy(const DualVar<Real>& logits, std::span<const int> targets,
                            std::span<const Real> weights);

} // namespace dual

// Runs fn on (state, tangent) and returns (fn(state), J v) with J the
// Jacobian of fn at state. The result lives on state's graph.
template <std::floating_point Real>
DualVar<Real> jvp_forward(const StateMap<Real>& fn, const Var<Real>& state, const Var<Real>& tangent);

// Central difference (fn(x + step v) - fn(x - step v)) / (2 step), evaluated
// on a throwaway non-recording graph.
template <std::floating_point Real>
Tensor<Real> finite_diff_jvp(const StateMap<Real>& fn, const Tensor<Real>& state,
                             const Tensor<Real>& tangent, Real step);

} // namespace looplab::ad
