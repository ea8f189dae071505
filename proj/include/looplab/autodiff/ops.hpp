#pragma once

#include <concepts>
#include <cstddef>
#include <span>
#include <vector>

#include "looplab/autodiff/graph.hpp"

// Differentiable primitives. Every function records one node on the operand
// graph. Matrix views: cols = last dimension, rows = everything before it.
namespace looplab::ad {

inline constexpr double kDefaultNormEps = 1e-5;

// --- linear algebra -------------------------------------------------------

// [.., k] x [k, m] -> [.., m]
template <std::floating_point Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b);

// Grouped matmul. a: [G*m, k]. b: [G*k, n], or [G*n, k] when transpose_b.
// Output [G*m, n].
template <std::floating_point Real>
Var<Real> batched_matmul(const Var<Real>& a, const Var<Real>& b, std::size_t groups,
                         bool transpose_b);

// 2-D transpose.
template <std::floating_point Real>
Var<Real> transpose(const Var<Real>& a);

template <std::floating_point Real>
Var<Real> reshape(const Var<Real>& a, Shape shape);

// --- elementwise ----------------------------------------------------------

template <std::floating_point Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <std::floating_point Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b);
template <std::floating_point Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b);
template <std::floating_point Real>
Var<Real> scale(const Var<Real>& a, Real s);
template <std::floating_point Real>
Var<Real> add_scalar(const Var<Real>& a, Real s);

template <std::floating_point Real>
Var<Real> relu(const Var<Real>& a);
// tanh approximation
template <std::floating_point Real>
Var<Real> gelu(const Var<Real>& a);
// Exact derivative of the tanh-approximate GELU, itself differentiable.
template <std::floating_point Real>
Var<Real> gelu_derivative(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> sin(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> cos(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> sqrt(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> reciprocal(const Var<Real>& a);

// --- broadcasting ---------------------------------------------------------

// a [r, c] (+|*) row vector v [c]
template <std::floating_point Real>
Var<Real> add_row(const Var<Real>& a, const Var<Real>& v);
template <std::floating_point Real>
Var<Real> mul_row(const Var<Real>& a, const Var<Real>& v);
// a [r, c] (-|*) column vector v [r, 1]
template <std::floating_point Real>
Var<Real> sub_col(const Var<Real>& a, const Var<Real>& v);
template <std::floating_point Real>
Var<Real> mul_col(const Var<Real>& a, const Var<Real>& v);

// --- reductions -----------------------------------------------------------

template <std::floating_point Real>
Var<Real> sum(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> mean(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> squared_norm(const Var<Real>& a);
// [r, c] -> [r, 1]
template <std::floating_point Real>
Var<Real> row_sum(const Var<Real>& a);
template <std::floating_point Real>
Var<Real> row_mean(const Var<Real>& a);
// Sum over each of `segments` equal contiguous blocks of rows -> [segments, 1].
template <std::floating_point Real>
Var<Real> segment_sum(const Var<Real>& a, std::size_t segments);
// Multiply every row of segment k by s[k]; s is [segments, 1].
template <std::floating_point Real>
Var<Real> scale_segments(const Var<Real>& a, const Var<Real>& s);

// --- softmax & normalization ---------------------------------------------

template <std::floating_point Real>
Var<Real> softmax(const Var<Real>& a);
// Row softmax where row i of every block of `seq_len` rows only sees
// columns <= i. Masked entries come out as exact zeros.
template <std::floating_point Real>
Var<Real> causal_softmax(const Var<Real>& a, std::size_t seq_len);

template <std::floating_point Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gain, const Var<Real>& bias,
                     Real eps = Real(kDefaultNormEps));
template <std::floating_point Real>
Var<Real> rms_norm(const Var<Real>& x, const Var<Real>& gain, Real eps = Real(kDefaultNormEps));
// x / RMS(x), no affine parameters.
template <std::floating_point Real>
Var<Real> simple_norm(const Var<Real>& x, Real eps = Real(kDefaultNormEps));
// 1 / sqrt(var_row(x) + eps) as [r, 1]; centered selects variance about the
// row mean (LayerNorm) versus the raw second moment (RMS).
template <std::floating_point Real>
Var<Real> row_inv_std(const Var<Real>& x, bool centered, Real eps);

// --- indexing & layout ----------------------------------------------------

// table [V, d], ids -> [ids.size(), d]
template <std::floating_point Real>
Var<Real> embedding(const Var<Real>& table, std::span<const int> ids);

template <std::floating_point Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts);
template <std::floating_point Real>
Var<Real> slice_rows(const Var<Real>& a, std::size_t begin, std::size_t end);
template <std::floating_point Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts);
template <std::floating_point Real>
Var<Real> slice_cols(const Var<Real>& a, std::size_t begin, std::size_t end);

// [B*M, H*dh] <-> [B*H*M, dh]
template <std::floating_point Real>
Var<Real> split_heads(const Var<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads);
template <std::floating_point Real>
Var<Real> merge_heads(const Var<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads);

// --- losses ---------------------------------------------------------------

// sum_i weight[i] * -log softmax(logits[i])[target[i]]; rows with weight 0
// contribute nothing, including to the gradient.
template <std::floating_point Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const int> targets,
                        std::span<const Real> weights);

} // namespace looplab::ad
