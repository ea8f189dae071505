#include "looplab/autodiff/dual.hpp"

#include "looplab/errors.hpp"

namespace looplab::ad {

template <std::floating_point Real>
Var<Real> DualVar<Real>::tangent_or_zero() const {
    if (tangent) return *tangent;
    return primal.graph().constant(Tensor<Real>::zeros(primal.shape()));
}

namespace dual {
namespace {

template <class Real>
using Opt = std::optional<Var<Real>>;

template <class Real>
Opt<Real> tsum(Opt<Real> a, Opt<Real> b) {
    if (!a) return b;
    if (!b) return a;
    return ad::add(*a, *b);
}

template <class Real>
Var<Real> zeros_like(const Var<Real>& v) {
    return v.graph().constant(Tensor<Real>::zeros(v.shape()));
}

// Applies a linear shape/layout op to the tangent when there is one.
template <class Real, class F>
DualVar<Real> linear(const DualVar<Real>& a, F f) {
    DualVar<Real> out(f(a.primal));
    if (a.tangent) out.tangent = f(*a.tangent);
    return out;
}

} // namespace

template <std::floating_point Real>
DualVar<Real> matmul(const DualVar<Real>& a, const DualVar<Real>& b) {
    DualVar<Real> out(ad::matmul(a.primal, b.primal));
    Opt<Real> ta, tb;
    if (a.tangent) ta = ad::matmul(*a.tangent, b.primal);
    if (b.tangent) tb = ad::matmul(a.primal, *b.tangent);
    out.tangent = tsum(ta, tb);
    return out;
}

template <std::floating_point Real>
DualVar<Real> batched_matmul(const DualVar<Real>& a, const DualVar<Real>& b, std::size_t groups,
                             bool transpose_b) {
    DualVar<Real> out(ad::batched_matmul(a.primal, b.primal, groups, transpose_b));
    Opt<Real> ta, tb;
    if (a.tangent) ta = ad::batched_matmul(*a.tangent, b.primal, groups, transpose_b);
    if (b.tangent) tb = ad::batched_matmul(a.primal, *b.tangent, groups, transpose_b);
    out.tangent = tsum(ta, tb);
    return out;
}

template <std::floating_point Real>
DualVar<Real> transpose(const DualVar<Real>& a) {
    return linear(a, [](const Var<Real>& v) { return ad::transpose(v); });
}

template <std::floating_point Real>
DualVar<Real> reshape(const DualVar<Real>& a, Shape shape) {
    return linear(a, [&shape](const Var<Real>& v) { return ad::reshape(v, shape); });
}

template <std::floating_point Real>
DualVar<Real> add(const DualVar<Real>& a, const DualVar<Real>& b) {
    return {ad::add(a.primal, b.primal), tsum(a.tangent, b.tangent)};
}

template <std::floating_point Real>
DualVar<Real> sub(const DualVar<Real>& a, const DualVar<Real>& b) {
    DualVar<Real> out(ad::sub(a.primal, b.primal));
    if (a.tangent && b.tangent) out.tangent = ad::sub(*a.tangent, *b.tangent);
    else if (a.tangent) out.tangent = a.tangent;
    else if (b.tangent) out.tangent = ad::scale(*b.tangent, Real(-1));
    return out;
}

template <std::floating_point Real>
DualVar<Real> mul(const DualVar<Real>& a, const DualVar<Real>& b) {
    DualVar<Real> out(ad::mul(a.primal, b.primal));
    Opt<Real> ta, tb;
    if (a.tangent) ta = ad::mul(*a.tangent, b.primal);
    if (b.tangent) tb = ad::mul(a.primal, *b.tangent);
    out.tangent = tsum(ta, tb);
    return out;
}

template <std::floating_point Real>
DualVar<Real> scale(const DualVar<Real>& a, Real s) {
    return linear(a, [s](const Var<Real>& v) { return ad::scale(v, s); });
}

template <std::floating_point Real>
DualVar<Real> add_scalar(const DualVar<Real>& a, Real s) {
    return {ad::add_scalar(a.primal, s), a.tangent};
}

template <std::floating_point Real>
DualVar<Real> relu(const DualVar<Real>& a) {
    DualVar<Real> out(ad::relu(a.primal));
    if (a.tangent) {
        std::vector<Real> mask(a.primal.numel());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = a.primal.data()[i] > 0 ? Real(1) : Real(0);
        out.tangent = ad::mul(*a.tangent, a.primal.graph().constant(a.shape(), std::move(mask)));
    }
    return out;
}

template <std::floating_point Real>
DualVar<Real> gelu(const DualVar<Real>& a) {
    DualVar<Real> out(ad::gelu(a.primal));
    if (a.tangent) out.tangent = ad::mul(*a.tangent, ad::gelu_derivative(a.primal));
    return out;
}

template <std::floating_point Real>
DualVar<Real> sin(const DualVar<Real>& a) {
    DualVar<Real> out(ad::sin(a.primal));
    if (a.tangent) out.tangent = ad::mul(*a.tangent, ad::cos(a.primal));
    return out;
}

template <std::floating_point Real>
DualVar<Real> cos(const DualVar<Real>& a) {
    DualVar<Real> out(ad::cos(a.primal));
    if (a.tangent) out.tangent = ad::mul(*a.tangent, ad::scale(ad::sin(a.primal), Real(-1)));
    return out;
}

template <std::floating_point Real>
DualVar<Real> sqrt(const DualVar<Real>& a) {
    DualVar<Real> out(ad::sqrt(a.primal));
    if (a.tangent) out.tangent = ad::mul(*a.tangent, ad::scale(ad::reciprocal(out.primal), Real(0.5)));
    return out;
}

template <std::floating_point Real>
DualVar<Real> reciprocal(const DualVar<Real>& a) {
    DualVar<Real> out(ad::reciprocal(a.primal));
    if (a.tangent)
        out.tangent = ad::mul(*a.tangent, ad::scale(ad::mul(out.primal, out.primal), Real(-1)));
    return out;
}

template <std::floating_point Real>
DualVar<Real> add_row(const DualVar<Real>& a, const DualVar<Real>& v) {
    DualVar<Real> out(ad::add_row(a.primal, v.primal));
    if (v.tangent) out.tangent = ad::add_row(a.tangent ? *a.tangent : zeros_like(a.primal), *v.tangent);
    else out.tangent = a.tangent;
    return out;
}

template <std::floating_point Real>
DualVar<Real> mul_row(const DualVar<Real>& a, const DualVar<Real>& v) {
    DualVar<Real> out(ad::mul_row(a.primal, v.primal));
    Opt<Real> ta, tv;
    if (a.tangent) ta = ad::mul_row(*a.tangent, v.primal);
    if (v.tangent) tv = ad::mul_row(a.primal, *v.tangent);
    out.tangent = tsum(ta, tv);
    return out;
}

template <std::floating_point Real>
DualVar<Real> sub_col(const DualVar<Real>& a, const DualVar<Real>& v) {
    DualVar<Real> out(ad::sub_col(a.primal, v.primal));
    if (v.tangent) out.tangent = ad::sub_col(a.tangent ? *a.tangent : zeros_like(a.primal), *v.tangent);
    else out.tangent = a.tangent;
    return out;
}

template <std::floating_point Real>
DualVar<Real> mul_col(const DualVar<Real>& a, const DualVar<Real>& v) {
    DualVar<Real> out(ad::mul_col(a.primal, v.primal));
    Opt<Real> ta, tv;
    if (a.tangent) ta = ad::mul_col(*a.tangent, v.primal);
    if (v.tangent) tv = ad::mul_col(a.primal, *v.tangent);
    out.tangent = tsum(ta, tv);
    return out;
}

template <std::floating_point Real>
DualVar<Real> sum(const DualVar<Real>& a) {
    return linear(a, [](const Var<Real>& v) { return ad::sum(v); });
}

template <std::floating_point Real>
DualVar<Real> mean(const DualVar<Real>& a) {
    return linear(a, [](const Var<Real>& v) { return ad::mean(v); });
}

template <std::floating_point Real>
DualVar<Real> squared_norm(const DualVar<Real>& a) {
    DualVar<Real> out(ad::squared_norm(a.primal));
    if (a.tangent) out.tangent = ad::scale(ad::sum(ad::mul(a.primal, *a.tangent)), Real(2));
    return out;
}

template <std::floating_point Real>
DualVar<Real> row_sum(const DualVar<Real>& a) {
    return linear(a, [](const Var<Real>& v) { return ad::row_sum(v); });
}

template <std::floating_point Real>
DualVar<Real> row_mean(const DualVar<Real>& a) {
    return linear(a, [](const Var<Real>& v) { return ad::row_mean(v); });
}

template <std::floating_point Real>
DualVar<Real> segment_sum(const DualVar<Real>& a, std::size_t segments) {
    return linear(a, [segments](const Var<Real>& v) { return ad::segment_sum(v, segments); });
}

template <std::floating_point Real>
DualVar<Real> scale_segments(const DualVar<Real>& a, const DualVar<Real>& s) {
    DualVar<Real> out(ad::scale_segments(a.primal, s.primal));
    Opt<Real> ta, ts;
    if (a.tangent) ta = ad::scale_segments(*a.tangent, s.primal);
    if (s.tangent) ts = ad::scale_segments(a.primal, *s.tangent);
    out.tangent = tsum(ta, ts);
    return out;
}

namespace {

// d softmax = y * (t - rowsum(y * t)); masked entries have y = 0.
template <class Real>
Var<Real> softmax_tangent(const Var<Real>& y, const Var<Real>& t) {
    return ad::mul(y, ad::sub_col(t, ad::row_sum(ad::mul(y, t))));
}

// Tangent of x_hat = (x - c) * inv, with c the row mean (centered) or 0.
template <class Real>
Var<Real> normalized_tangent(const Var<Real>& xhat, const Var<Real>& inv, const Var<Real>& tx,
                             bool centered) {
    Var<Real> t = centered ? ad::sub_col(tx, ad::row_mean(tx)) : tx;
    t = ad::sub(t, ad::mul_col(xhat, ad::row_mean(ad::mul(xhat, tx))));
    return ad::mul_col(t, inv);
}

template <class Real>
Var<Real> normalized(const Var<Real>& x, const Var<Real>& inv, bool centered) {
    return ad::mul_col(centered ? ad::sub_col(x, ad::row_mean(x)) : x, inv);
}

} // namespace

template <std::floating_point Real>
DualVar<Real> softmax(const DualVar<Real>& a) {
    DualVar<Real> out(ad::softmax(a.primal));
    if (a.tangent) out.tangent = softmax_tangent(out.primal, *a.tangent);
    return out;
}

template <std::floating_point Real>
DualVar<Real> causal_softmax(const DualVar<Real>& a, std::size_t seq_len) {
    DualVar<Real> out(ad::causal_softmax(a.primal, seq_len));
    if (a.tangent) out.tangent = softmax_tangent(out.primal, *a.tangent);
    return out;
}

template <std::floating_point Real>
DualVar<Real> layer_norm(const DualVar<Real>& x, const DualVar<Real>& gain, const DualVar<Real>& bias,
                         Real eps) {
    DualVar<Real> out(ad::layer_norm(x.primal, gain.primal, bias.primal, eps));
    if (!x.tangent && !gain.tangent && !bias.tangent) return out;
    const Var<Real> inv = ad::row_inv_std(x.primal, true, eps);
    const Var<Real> xhat = normalized(x.primal, inv, true);
    Opt<Real> t;
    if (x.tangent) t = ad::mul_row(normalized_tangent(xhat, inv, *x.tangent, true), gain.primal);
    if (gain.tangent) t = tsum(t, Opt<Real>(ad::mul_row(xhat, *gain.tangent)));
    if (bias.tangent) t = tsum(t, Opt<Real>(ad::add_row(zeros_like(x.primal), *bias.tangent)));
    out.tangent = t;
    return out;
}

template <std::floating_point Real>
DualVar<Real> rms_norm(const DualVar<Real>& x, const DualVar<Real>& gain, Real eps) {
    DualVar<Real> out(ad::rms_norm(x.primal, gain.primal, eps));
    if (!x.tangent && !gain.tangent) return out;
    const Var<Real> inv = ad::row_inv_std(x.primal, false, eps);
    const Var<Real> xhat = normalized(x.primal, inv, false);
    Opt<Real> t;
    if (x.tangent) t = ad::mul_row(normalized_tangent(xhat, inv, *x.tangent, false), gain.primal);
    if (gain.tangent) t = tsum(t, Opt<Real>(ad::mul_row(xhat, *gain.tangent)));
    out.tangent = t;
    return out;
}

template <std::floating_point Real>
DualVar<Real> simple_norm(const DualVar<Real>& x, Real eps) {
    DualVar<Real> out(ad::simple_norm(x.primal, eps));
    if (!x.tangent) return out;
    const Var<Real> inv = ad::row_inv_std(x.primal, false, eps);
    out.tangent = normalized_tangent(normalized(x.primal, inv, false), inv, *x.tangent, false);
    return out;
}

template <std::floating_point Real>
DualVar<Real> embedding(const DualVar<Real>& table, std::span<const int> ids) {
    return linear(table, [ids](const Var<Real>& v) { return ad::embedding(v, ids); });
}

template <std::floating_point Real>
DualVar<Real> concat_rows(const std::vector<DualVar<Real>>& parts) {
    std::vector<Var<Real>> primals;
    bool any = false;
    for (const auto& p : parts) {
        primals.push_back(p.primal);
        any = any || p.tangent.has_value();
    }
    DualVar<Real> out(ad::concat_rows(primals));
    if (any) {
        std::vector<Var<Real>> tangents;
        for (const auto& p : parts) tangents.push_back(p.tangent_or_zero());
        out.tangent = ad::concat_rows(tangents);
    }
    return out;
}

template <std::floating_point Real>
DualVar<Real> slice_rows(const DualVar<Real>& a, std::size_t begin, std::size_t end) {
    return linear(a, [=](const Var<Real>& v) { return ad::slice_rows(v, begin, end); });
}

template <std::floating_point Real>
DualVar<Real> concat_cols(const std::vector<DualVar<Real>>& parts) {
    std::vector<Var<Real>> primals;
    bool any = false;
    for (const auto& p : parts) {
        primals.push_back(p.primal);
        any = any || p.tangent.has_value();
    }
    DualVar<Real> out(ad::concat_cols(primals));
    if (any) {
        std::vector<Var<Real>> tangents;
        for (const auto& p : parts) tangents.push_back(p.tangent_or_zero());
        out.tangent = ad::concat_cols(tangents);
    }
    return out;
}

template <std::floating_point Real>
DualVar<Real> slice_cols(const DualVar<Real>& a, std::size_t begin, std::size_t end) {
    return linear(a, [=](const Var<Real>& v) { return ad::slice_cols(v, begin, end); });
}

template <std::floating_point Real>
DualVar<Real> split_heads(const DualVar<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    return linear(x, [=](const Var<Real>& v) { return ad::split_heads(v, batch, seq, heads); });
}

template <std::floating_point Real>
DualVar<Real> merge_heads(const DualVar<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    return linear(x, [=](const Var<Real>& v) { return ad::merge_heads(v, batch, seq, heads); });
}

template <std::floating_point Real>
DualVar<Real> cross_entropy(const DualVar<Real>& logits, std::span<const int> targets,
                            std::span<const Real> weights) {
    if (logits.tangent)
        throw UnsupportedOpError("op 'cross_entropy' has no tangent rule");
    return DualVar<Real>(ad::cross_entropy(logits.primal, targets, weights));
}

} // namespace dual

template <std::floating_point Real>
DualVar<Real> jvp_forward(const StateMap<Real>& fn, const Var<Real>& state, const Var<Real>& tangent) {
    if (state.shape() != tangent.shape()) {
        throw ShapeError("jvp_forward: tangent shape " + shape_string(tangent.shape()) +
                         " differs from state shape " + shape_string(state.shape()));
    }
    DualVar<Real> out = fn(DualVar<Real>(state, tangent));
    return {out.primal, out.tangent_or_zero()};
}

template <std::floating_point Real>
Tensor<Real> finite_diff_jvp(const StateMap<Real>& fn, const Tensor<Real>& state,
                             const Tensor<Real>& tangent, Real step) {
    if (!(step > 0)) throw ContractError("finite_diff_jvp: step must be positive");
    if (state.shape != tangent.shape) {
        throw ShapeError("finite_diff_jvp: tangent shape " + shape_string(tangent.shape) +
                         " differs from state shape " + shape_string(state.shape));
    }
    auto eval = [&](Real sign) {
        Graph<Real> g(false);
        Tensor<Real> x = state;
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += sign * step * tangent.data[i];
        return fn(DualVar<Real>(g.constant(x))).primal.value();
    };
    Tensor<Real> plus = eval(Real(1));
    const Tensor<Real> minus = eval(Real(-1));
    for (std::size_t i = 0; i < plus.data.size(); ++i)
        plus.data[i] = (plus.data[i] - minus.data[i]) / (Real(2) * step);
    return plus;
}

#define LOOPLAB_INSTANTIATE_DUAL(R)                                                                  \
    template struct DualVar<R>;                                                                      \
    namespace dual {                                                                                 \
    template DualVar<R> matmul(const DualVar<R>&, const DualVar<R>&);                                \
    template DualVar<R> batched_matmul(const DualVar<R>&, const DualVar<R>&, std::size_t, bool);    \
    template DualVar<R> transpose(const DualVar<R>&);                                                \
    template DualVar<R> reshape(const DualVar<R>&, Shape);                                           \
    template DualVar<R> add(const DualVar<R>&, const DualVar<R>&);                                   \
    template DualVar<R> sub(const DualVar<R>&, const DualVar<R>&);                                   \
    template DualVar<R> mul(const DualVar<R>&, const DualVar<R>&);                                   \
    template DualVar<R> scale(const DualVar<R>&, R);                                                 \
    template DualVar<R> add_scalar(const DualVar<R>&, R);                                            \
    template DualVar<R> relu(const DualVar<R>&);                                                     \
    template DualVar<R> gelu(const DualVar<R>&);                                                     \
    template DualVar<R> sin(const DualVar<R>&);                                                      \
    template DualVar<R> cos(const DualVar<R>&);                                                      \
    template DualVar<R> sqrt(const DualVar<R>&);                                                     \
    template DualVar<R> reciprocal(const DualVar<R>&);                                               \
    template DualVar<R> add_row(const DualVar<R>&, const DualVar<R>&);                               \
    template DualVar<R> mul_row(const DualVar<R>&, const DualVar<R>&);                               \
    template DualVar<R> sub_col(const DualVar<R>&, const DualVar<R>&);                               \
    template DualVar<R> mul_col(const DualVar<R>&, const DualVar<R>&);                               \
    template DualVar<R> sum(const DualVar<R>&);                                                      \
    template DualVar<R> mean(const DualVar<R>&);                                                     \
    template DualVar<R> squared_norm(const DualVar<R>&);                                             \
    template DualVar<R> row_sum(const DualVar<R>&);                                                  \
    template DualVar<R> row_mean(const DualVar<R>&);                                                 \
    template DualVar<R> segment_sum(const DualVar<R>&, std::size_t);                                 \
    template DualVar<R> scale_segments(const DualVar<R>&, const DualVar<R>&);                        \
    template DualVar<R> softmax(const DualVar<R>&);                                                  \
    template DualVar<R> causal_softmax(const DualVar<R>&, std::size_t);                              \
    template DualVar<R> layer_norm(const DualVar<R>&, const DualVar<R>&, const DualVar<R>&, R);      \
    template DualVar<R> rms_norm(const DualVar<R>&, const DualVar<R>&, R);                           \
    template DualVar<R> simple_norm(const DualVar<R>&, R);                                           \
    template DualVar<R> embedding(const DualVar<R>&, std::span<const int>);                          \
    template DualVar<R> concat_rows(const std::vector<DualVar<R>>&);                                 \
    template DualVar<R> slice_rows(const DualVar<R>&, std::size_t, std::size_t);                     \
    template DualVar<R> concat_cols(const std::vector<DualVar<R>>&);                                 \
    template DualVar<R> slice_cols(const DualVar<R>&, std::size_t, std::size_t);                     \
    template DualVar<R> split_heads(const DualVar<R>&, std::size_t, std::size_t, std::size_t);       \
    template DualVar<R> merge_heads(const DualVar<R>&, std::size_t, std::size_t, std::size_t);       \
    template DualVar<R> cross_entropy(const DualVar<R>&, std::span<const int>, std::span<const R>);  \
    }                                                                                                \
    template DualVar<R> jvp_forward(const StateMap<R>&, const Var<R>&, const Var<R>&);              \
    template Tensor<R> finite_diff_jvp(const StateMap<R>&, const Tensor<R>&, const Tensor<R>&, R);

LOOPLAB_INSTANTIATE_DUAL(float)
LOOPLAB_INSTANTIATE_DUAL(double)

#undef LOOPLAB_INSTANTIATE_DUAL

} // namespace looplab::ad
