#include "looplab/autodiff/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "looplab/errors.hpp"

namespace looplab::ad {
namespace {

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <class Real>
using CMapMat = Eigen::Map<const RowMat<Real>>;

template <class Real>
CMapMat<Real> view(const std::vector<Real>& v, std::size_t r, std::size_t c, std::size_t off = 0) {
    return CMapMat<Real>(v.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class Real>
MapMat<Real> view_mut(std::vector<Real>& v, std::size_t r, std::size_t c, std::size_t off = 0) {
    return MapMat<Real>(v.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b,
                             std::string_view detail = {}) {
    std::string msg = "op '" + std::string(op) + "': incompatible shapes " + shape_string(a) +
                      " and " + shape_string(b);
    if (!detail.empty()) msg += " (" + std::string(detail) + ")";
    throw ShapeError(msg);
}

template <class Real>
Node<Real>& parent(Node<Real>& n, std::size_t i) {
    return *n.parents[i];
}

template <class Real>
bool wants(Node<Real>& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}

template <class Real>
void require_same(std::string_view op, const Var<Real>& a, const Var<Real>& b) {
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <class Real>
Shape with_last(const Shape& s, std::size_t last) {
    Shape out = s;
    if (out.empty()) out.push_back(last);
    else out.back() = last;
    return out;
}

template <class Real, class F>
Var<Real> unary(std::string_view op, const Var<Real>& a, F f,
                std::function<void(Node<Real>&)> bw) {
    std::vector<Real> out(a.numel());
    const auto& x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return a.graph().make(op, a.shape(), std::move(out), {a}, std::move(bw));
}

// Elementwise adjoint: grad_in += grad_out * d(x, y) where y is the output.
template <class Real, class D>
std::function<void(Node<Real>&)> elementwise_bw(D d) {
    return [d](Node<Real>& n) {
        auto& p = parent(n, 0);
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * d(p.value[i], n.value[i]);
    };
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <class Real>
Real gelu_value(Real x) {
    const Real u = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
}
template <class Real>
Real gelu_first(Real x) {
    const Real u = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
    const Real du = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * x * x);
    const Real t = std::tanh(u);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
}
template <class Real>
Real gelu_second(Real x) {
    const Real u = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
    const Real du = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * x * x);
    const Real ddu = Real(kGeluC) * Real(6 * kGeluA) * x;
    const Real t = std::tanh(u);
    const Real s = Real(1) - t * t;
    return s * du + Real(0.5) * x * s * (ddu - Real(2) * t * du * du);
}

} // namespace

// --- linear algebra -------------------------------------------------------

template <std::floating_point Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
    if (b.shape().size() != 2 || a.shape().empty() || a.cols() != b.shape()[0])
        shape_fail("matmul", a.shape(), b.shape());
    const std::size_t r = a.rows(), k = a.cols(), m = b.cols();
    std::vector<Real> out(r * m);
    view_mut(out, r, m).noalias() = view(a.data(), r, k) * view(b.data(), k, m);
    return a.graph().make("matmul", with_last<Real>(a.shape(), m), std::move(out), {a, b},
                          [r, k, m](Node<Real>& n) {
                              auto g = view(n.grad, r, m);
                              if (wants(n, 0))
                                  view_mut(parent(n, 0).grad_buffer(), r, k).noalias() +=
                                      g * view(parent(n, 1).value, k, m).transpose();
                              if (wants(n, 1))
                                  view_mut(parent(n, 1).grad_buffer(), k, m).noalias() +=
                                      view(parent(n, 0).value, r, k).transpose() * g;
                          });
}

template <std::floating_point Real>
Var<Real> batched_matmul(const Var<Real>& a, const Var<Real>& b, std::size_t groups,
                         bool transpose_b) {
    if (groups == 0 || a.rows() % groups != 0 || b.rows() % groups != 0)
        shape_fail("batched_matmul", a.shape(), b.shape(), "rows not divisible by group count");
    const std::size_t m = a.rows() / groups, k = a.cols();
    std::size_t n_out;
    if (transpose_b) {
        if (b.cols() != k) shape_fail("batched_matmul", a.shape(), b.shape(), "inner dims");
        n_out = b.rows() / groups;
    } else {
        if (b.rows() / groups != k) shape_fail("batched_matmul", a.shape(), b.shape(), "inner dims");
        n_out = b.cols();
    }
    const std::size_t bsz = k * n_out;
    std::vector<Real> out(groups * m * n_out);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        auto A = view(a.data(), m, k, gi * m * k);
        auto C = view_mut(out, m, n_out, gi * m * n_out);
        if (transpose_b)
            C.noalias() = A * view(b.data(), n_out, k, gi * bsz).transpose();
        else
            C.noalias() = A * view(b.data(), k, n_out, gi * bsz);
    }
    return a.graph().make(
        "batched_matmul", {groups * m, n_out}, std::move(out), {a, b},
        [groups, m, k, n_out, bsz, transpose_b](Node<Real>& n) {
            auto& pa = parent(n, 0);
            auto& pb = parent(n, 1);
            const bool wa = wants(n, 0), wb = wants(n, 1);
            for (std::size_t gi = 0; gi < groups; ++gi) {
                auto G = view(n.grad, m, n_out, gi * m * n_out);
                auto A = view(pa.value, m, k, gi * m * k);
                if (transpose_b) {
                    auto B = view(pb.value, n_out, k, gi * bsz);
                    if (wa) view_mut(pa.grad_buffer(), m, k, gi * m * k).noalias() += G * B;
                    if (wb)
                        view_mut(pb.grad_buffer(), n_out, k, gi * bsz).noalias() += G.transpose() * A;
                } else {
                    auto B = view(pb.value, k, n_out, gi * bsz);
                    if (wa)
                        view_mut(pa.grad_buffer(), m, k, gi * m * k).noalias() += G * B.transpose();
                    if (wb)
                        view_mut(pb.grad_buffer(), k, n_out, gi * bsz).noalias() += A.transpose() * G;
                }
            }
        });
}

template <std::floating_point Real>
Var<Real> transpose(const Var<Real>& a) {
    if (a.shape().size() != 2) shape_fail("transpose", a.shape(), {}, "expects a 2-D tensor");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<Real> out(r * c);
    view_mut(out, c, r) = view(a.data(), r, c).transpose();
    return a.graph().make("transpose", {c, r}, std::move(out), {a}, [r, c](Node<Real>& n) {
        view_mut(parent(n, 0).grad_buffer(), r, c) += view(n.grad, c, r).transpose();
    });
}

template <std::floating_point Real>
Var<Real> reshape(const Var<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
    return a.graph().make("reshape", std::move(shape), a.data(), {a}, [](Node<Real>& n) {
        auto& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// --- elementwise ----------------------------------------------------------

template <std::floating_point Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
    require_same("add", a, b);
    std::vector<Real> out(a.data());
    const auto& y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
    return a.graph().make("add", a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!wants(n, p)) continue;
            auto& g = parent(n, p).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <std::floating_point Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
    require_same("sub", a, b);
    std::vector<Real> out(a.data());
    const auto& y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
    return a.graph().make("sub", a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
        if (wants(n, 0)) {
            auto& g = parent(n, 0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (wants(n, 1)) {
            auto& g = parent(n, 1).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <std::floating_point Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
    require_same("mul", a, b);
    std::vector<Real> out(a.data());
    const auto& y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
    return a.graph().make("mul", a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        if (wants(n, 0)) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
        }
        if (wants(n, 1)) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
        }
    });
}

template <std::floating_point Real>
Var<Real> scale(const Var<Real>& a, Real s) {
    return unary<Real>("scale", a, [s](Real x) { return x * s; },
                       elementwise_bw<Real>([s](Real, Real) { return s; }));
}

template <std::floating_point Real>
Var<Real> add_scalar(const Var<Real>& a, Real s) {
    return unary<Real>("add_scalar", a, [s](Real x) { return x + s; },
                       elementwise_bw<Real>([](Real, Real) { return Real(1); }));
}

template <std::floating_point Real>
Var<Real> relu(const Var<Real>& a) {
    return unary<Real>("relu", a, [](Real x) { return x > 0 ? x : Real(0); },
                       elementwise_bw<Real>([](Real x, Real) { return x > 0 ? Real(1) : Real(0); }));
}

template <std::floating_point Real>
Var<Real> gelu(const Var<Real>& a) {
    return unary<Real>("gelu", a, [](Real x) { return gelu_value(x); },
                       elementwise_bw<Real>([](Real x, Real) { return gelu_first(x); }));
}

template <std::floating_point Real>
Var<Real> gelu_derivative(const Var<Real>& a) {
    return unary<Real>("gelu_derivative", a, [](Real x) { return gelu_first(x); },
                       elementwise_bw<Real>([](Real x, Real) { return gelu_second(x); }));
}

template <std::floating_point Real>
Var<Real> sin(const Var<Real>& a) {
    return unary<Real>("sin", a, [](Real x) { return std::sin(x); },
                       elementwise_bw<Real>([](Real x, Real) { return std::cos(x); }));
}

template <std::floating_point Real>
Var<Real> cos(const Var<Real>& a) {
    return unary<Real>("cos", a, [](Real x) { return std::cos(x); },
                       elementwise_bw<Real>([](Real x, Real) { return -std::sin(x); }));
}

template <std::floating_point Real>
Var<Real> sqrt(const Var<Real>& a) {
    return unary<Real>("sqrt", a, [](Real x) { return std::sqrt(x); },
                       elementwise_bw<Real>([](Real, Real y) { return Real(0.5) / y; }));
}

template <std::floating_point Real>
Var<Real> reciprocal(const Var<Real>& a) {
    return unary<Real>("reciprocal", a, [](Real x) { return Real(1) / x; },
                       elementwise_bw<Real>([](Real, Real y) { return -y * y; }));
}

// Reductions stay in plain loops: Eigen picks its vector peel from the
// buffer address, so its sums differ bitwise between allocations.
template <std::floating_point Real>
std::vector<Real> row_sums(const std::vector<Real>& x, std::size_t r, std::size_t c) {
    std::vector<Real> out(r, Real{0});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
    return out;
}

template <std::floating_point Real>
void add_col_sums(std::vector<Real>& dst, const std::vector<Real>& x, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dst[j] += x[i * c + j];
}

// --- broadcasting ---------------------------------------------------------

template <std::floating_point Real>
Var<Real> add_row(const Var<Real>& a, const Var<Real>& v) {
    const std::size_t r = a.rows(), c = a.cols();
    if (v.numel() != c) shape_fail("add_row", a.shape(), v.shape());
    std::vector<Real> out(a.data());
    view_mut(out, r, c).rowwise() += view(v.data(), 1, c).row(0);
    return a.graph().make("add_row", a.shape(), std::move(out), {a, v}, [r, c](Node<Real>& n) {
        auto g = view(n.grad, r, c);
        if (wants(n, 0)) view_mut(parent(n, 0).grad_buffer(), r, c) += g;
        if (wants(n, 1)) add_col_sums(parent(n, 1).grad_buffer(), n.grad, r, c);
    });
}

template <std::floating_point Real>
Var<Real> mul_row(const Var<Real>& a, const Var<Real>& v) {
    const std::size_t r = a.rows(), c = a.cols();
    if (v.numel() != c) shape_fail("mul_row", a.shape(), v.shape());
    std::vector<Real> out(a.data());
    const auto& s = v.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= s[j];
    return a.graph().make("mul_row", a.shape(), std::move(out), {a, v}, [r, c](Node<Real>& n) {
        auto& pa = parent(n, 0);
        auto& pv = parent(n, 1);
        if (wants(n, 0)) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * pv.value[j];
        }
        if (wants(n, 1)) {
            auto& g = pv.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j] * pa.value[i * c + j];
        }
    });
}

template <std::floating_point Real>
Var<Real> sub_col(const Var<Real>& a, const Var<Real>& v) {
    const std::size_t r = a.rows(), c = a.cols();
    if (v.numel() != r) shape_fail("sub_col", a.shape(), v.shape());
    std::vector<Real> out(a.data());
    const auto& s = v.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] -= s[i];
    return a.graph().make("sub_col", a.shape(), std::move(out), {a, v}, [r, c](Node<Real>& n) {
        auto g = view(n.grad, r, c);
        if (wants(n, 0)) view_mut(parent(n, 0).grad_buffer(), r, c) += g;
        if (wants(n, 1)) {
            const auto sums = row_sums(n.grad, r, c);
            auto& gv = parent(n, 1).grad_buffer();
            for (std::size_t i = 0; i < r; ++i) gv[i] -= sums[i];
        }
    });
}

template <std::floating_point Real>
Var<Real> mul_col(const Var<Real>& a, const Var<Real>& v) {
    const std::size_t r = a.rows(), c = a.cols();
    if (v.numel() != r) shape_fail("mul_col", a.shape(), v.shape());
    std::vector<Real> out(a.data());
    const auto& s = v.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= s[i];
    return a.graph().make("mul_col", a.shape(), std::move(out), {a, v}, [r, c](Node<Real>& n) {
        auto& pa = parent(n, 0);
        auto& pv = parent(n, 1);
        if (wants(n, 0)) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * pv.value[i];
        }
        if (wants(n, 1)) {
            auto& g = pv.grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                Real acc = 0;
                for (std::size_t j = 0; j < c; ++j) acc += n.grad[i * c + j] * pa.value[i * c + j];
                g[i] += acc;
            }
        }
    });
}

// --- reductions -----------------------------------------------------------

template <std::floating_point Real>
Var<Real> sum(const Var<Real>& a) {
    Real acc = 0;
    for (Real x : a.data()) acc += x;
    return a.graph().make("sum", {}, {acc}, {a}, [](Node<Real>& n) {
        auto& g = parent(n, 0).grad_buffer();
        for (auto& x : g) x += n.grad[0];
    });
}

template <std::floating_point Real>
Var<Real> mean(const Var<Real>& a) {
    if (a.numel() == 0) throw ContractError("op 'mean': empty tensor");
    Real acc = 0;
    for (Real x : a.data()) acc += x;
    const Real inv = Real(1) / static_cast<Real>(a.numel());
    return a.graph().make("mean", {}, {acc * inv}, {a}, [inv](Node<Real>& n) {
        auto& g = parent(n, 0).grad_buffer();
        for (auto& x : g) x += n.grad[0] * inv;
    });
}

template <std::floating_point Real>
Var<Real> squared_norm(const Var<Real>& a) {
    Real acc = 0;
    for (Real x : a.data()) acc += x * x;
    return a.graph().make("squared_norm", {}, {acc}, {a}, [](Node<Real>& n) {
        auto& p = parent(n, 0);
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += Real(2) * n.grad[0] * p.value[i];
    });
}

template <std::floating_point Real>
Var<Real> row_sum(const Var<Real>& a) {
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<Real> out = row_sums(a.data(), r, c);
    return a.graph().make("row_sum", {r, 1}, std::move(out), {a}, [r, c](Node<Real>& n) {
        view_mut(parent(n, 0).grad_buffer(), r, c).colwise() += view(n.grad, r, 1).col(0);
    });
}

template <std::floating_point Real>
Var<Real> row_mean(const Var<Real>& a) {
    const std::size_t r = a.rows(), c = a.cols();
    const Real inv = Real(1) / static_cast<Real>(c);
    std::vector<Real> out = row_sums(a.data(), r, c);
    for (auto& x : out) x *= inv;
    return a.graph().make("row_mean", {r, 1}, std::move(out), {a}, [r, c, inv](Node<Real>& n) {
        view_mut(parent(n, 0).grad_buffer(), r, c).colwise() += view(n.grad, r, 1).col(0) * inv;
    });
}

template <std::floating_point Real>
Var<Real> segment_sum(const Var<Real>& a, std::size_t segments) {
    if (segments == 0 || a.rows() % segments != 0)
        shape_fail("segment_sum", a.shape(), {segments}, "rows not divisible by segment count");
    const std::size_t per = a.numel() / segments;
    std::vector<Real> out(segments, Real(0));
    const auto& x = a.data();
    for (std::size_t s = 0; s < segments; ++s)
        for (std::size_t i = 0; i < per; ++i) out[s] += x[s * per + i];
    return a.graph().make("segment_sum", {segments, 1}, std::move(out), {a},
                          [segments, per](Node<Real>& n) {
                              auto& g = parent(n, 0).grad_buffer();
                              for (std::size_t s = 0; s < segments; ++s)
                                  for (std::size_t i = 0; i < per; ++i) g[s * per + i] += n.grad[s];
                          });
}

template <std::floating_point Real>
Var<Real> scale_segments(const Var<Real>& a, const Var<Real>& s) {
    const std::size_t segments = s.numel();
    if (segments == 0 || a.rows() % segments != 0)
        shape_fail("scale_segments", a.shape(), s.shape(), "rows not divisible by segment count");
    const std::size_t per = a.numel() / segments;
    std::vector<Real> out(a.data());
    for (std::size_t k = 0; k < segments; ++k)
        for (std::size_t i = 0; i < per; ++i) out[k * per + i] *= s.data()[k];
    return a.graph().make("scale_segments", a.shape(), std::move(out), {a, s},
                          [segments, per](Node<Real>& n) {
                              auto& pa = parent(n, 0);
                              auto& ps = parent(n, 1);
                              if (wants(n, 0)) {
                                  auto& g = pa.grad_buffer();
                                  for (std::size_t k = 0; k < segments; ++k)
                                      for (std::size_t i = 0; i < per; ++i)
                                          g[k * per + i] += n.grad[k * per + i] * ps.value[k];
                              }
                              if (wants(n, 1)) {
                                  auto& g = ps.grad_buffer();
                                  for (std::size_t k = 0; k < segments; ++k) {
                                      Real acc = 0;
                                      for (std::size_t i = 0; i < per; ++i)
                                          acc += n.grad[k * per + i] * pa.value[k * per + i];
                                      g[k] += acc;
                                  }
                              }
                          });
}

// --- softmax & normalization ---------------------------------------------

namespace {

template <class Real>
Var<Real> softmax_impl(std::string_view op, const Var<Real>& a, std::size_t seq_len) {
    const std::size_t r = a.rows(), c = a.cols();
    const auto& x = a.data();
    std::vector<Real> out(r * c, Real(0));
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t visible = seq_len ? (i % seq_len) + 1 : c;
        const Real* xi = x.data() + i * c;
        Real* yi = out.data() + i * c;
        Real mx = xi[0];
        for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, xi[j]);
        Real z = 0;
        for (std::size_t j = 0; j < visible; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        const Real iz = Real(1) / z;
        for (std::size_t j = 0; j < visible; ++j) yi[j] *= iz;
    }
    return a.graph().make(op, a.shape(), std::move(out), {a}, [r, c](Node<Real>& n) {
        auto& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
            const Real* y = n.value.data() + i * c;
            const Real* gy = n.grad.data() + i * c;
            Real dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
        }
    });
}

// Per-row normalization kernel shared by the three operators.
template <class Real>
Var<Real> norm_impl(std::string_view op, const Var<Real>& x, const Var<Real>* gain,
                    const Var<Real>* bias, bool centered, Real eps) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gain && gain->numel() != c) shape_fail(op, x.shape(), gain->shape(), "gain");
    if (bias && bias->numel() != c) shape_fail(op, x.shape(), bias->shape(), "bias");
    const auto& xv = x.data();
    std::vector<Real> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const Real* xi = xv.data() + i * c;
        Real mu = 0;
        if (centered) {
            for (std::size_t j = 0; j < c; ++j) mu += xi[j];
            mu /= static_cast<Real>(c);
        }
        Real var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        const Real inv = Real(1) / std::sqrt(var / static_cast<Real>(c) + eps);
        for (std::size_t j = 0; j < c; ++j) {
            Real y = (xi[j] - mu) * inv;
            if (gain) y *= gain->data()[j];
            if (bias) y += bias->data()[j];
            out[i * c + j] = y;
        }
    }
    std::vector<Var<Real>> parents{x};
    if (gain) parents.push_back(*gain);
    if (bias) parents.push_back(*bias);
    const bool has_gain = gain != nullptr, has_bias = bias != nullptr;
    return x.graph().make(
        op, x.shape(), std::move(out), std::move(parents),
        [r, c, centered, eps, has_gain, has_bias](Node<Real>& n) {
            auto& px = parent(n, 0);
            Node<Real>* pg = has_gain ? n.parents[1].get() : nullptr;
            Node<Real>* pb = has_bias ? n.parents[has_gain ? 2 : 1].get() : nullptr;
            std::vector<Real> xhat(c), gxhat(c);
            for (std::size_t i = 0; i < r; ++i) {
                const Real* xi = px.value.data() + i * c;
                const Real* gy = n.grad.data() + i * c;
                Real mu = 0;
                if (centered) {
                    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                    mu /= static_cast<Real>(c);
                }
                Real var = 0;
                for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                const Real inv = Real(1) / std::sqrt(var / static_cast<Real>(c) + eps);
                Real mean_g = 0, mean_gx = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    xhat[j] = (xi[j] - mu) * inv;
                    gxhat[j] = pg ? gy[j] * pg->value[j] : gy[j];
                    mean_g += gxhat[j];
                    mean_gx += gxhat[j] * xhat[j];
                }
                mean_g /= static_cast<Real>(c);
                mean_gx /= static_cast<Real>(c);
                if (px.requires_grad) {
                    auto& gx = px.grad_buffer();
                    for (std::size_t j = 0; j < c; ++j)
                        gx[i * c + j] +=
                            inv * (gxhat[j] - (centered ? mean_g : Real(0)) - xhat[j] * mean_gx);
                }
                if (pg && pg->requires_grad) {
                    auto& gg = pg->grad_buffer();
                    for (std::size_t j = 0; j < c; ++j) gg[j] += gy[j] * xhat[j];
                }
                if (pb && pb->requires_grad) {
                    auto& gb = pb->grad_buffer();
                    for (std::size_t j = 0; j < c; ++j) gb[j] += gy[j];
                }
            }
        });
}

} // namespace

template <std::floating_point Real>
Var<Real> softmax(const Var<Real>& a) {
    return softmax_impl<Real>("softmax", a, 0);
}

template <std::floating_point Real>
Var<Real> causal_softmax(const Var<Real>& a, std::size_t seq_len) {
    if (seq_len == 0 || a.cols() != seq_len || a.rows() % seq_len != 0)
        shape_fail("causal_softmax", a.shape(), {seq_len, seq_len});
    return softmax_impl<Real>("causal_softmax", a, seq_len);
}

template <std::floating_point Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gain, const Var<Real>& bias, Real eps) {
    return norm_impl<Real>("layer_norm", x, &gain, &bias, true, eps);
}

template <std::floating_point Real>
Var<Real> rms_norm(const Var<Real>& x, const Var<Real>& gain, Real eps) {
    return norm_impl<Real>("rms_norm", x, &gain, nullptr, false, eps);
}

template <std::floating_point Real>
Var<Real> simple_norm(const Var<Real>& x, Real eps) {
    return norm_impl<Real>("simple_norm", x, nullptr, nullptr, false, eps);
}

template <std::floating_point Real>
Var<Real> row_inv_std(const Var<Real>& x, bool centered, Real eps) {
    const std::size_t r = x.rows(), c = x.cols();
    const auto& xv = x.data();
    std::vector<Real> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const Real* xi = xv.data() + i * c;
        Real mu = 0;
        if (centered) {
            for (std::size_t j = 0; j < c; ++j) mu += xi[j];
            mu /= static_cast<Real>(c);
        }
        Real var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        out[i] = Real(1) / std::sqrt(var / static_cast<Real>(c) + eps);
    }
    return x.graph().make("row_inv_std", {r, 1}, std::move(out), {x}, [r, c, centered](Node<Real>& n) {
        auto& px = parent(n, 0);
        auto& g = px.grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
            const Real* xi = px.value.data() + i * c;
            Real mu = 0;
            if (centered) {
                for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                mu /= static_cast<Real>(c);
            }
            const Real inv = n.value[i];
            const Real k = -n.grad[i] * inv * inv * inv / static_cast<Real>(c);
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += k * (xi[j] - mu);
        }
    });
}

// --- indexing & layout ----------------------------------------------------

template <std::floating_point Real>
Var<Real> embedding(const Var<Real>& table, std::span<const int> ids) {
    if (table.shape().size() != 2) shape_fail("embedding", table.shape(), {}, "table must be 2-D");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    std::vector<Real> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw VocabularyError("embedding: id " + std::to_string(ids[i]) +
                                  " outside table of " + std::to_string(vocab) + " rows");
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return table.graph().make("embedding", {ids.size(), d}, std::move(out), {table},
                              [saved = std::move(saved), d](Node<Real>& n) {
                                  auto& g = parent(n, 0).grad_buffer();
                                  for (std::size_t i = 0; i < saved.size(); ++i)
                                      for (std::size_t j = 0; j < d; ++j)
                                          g[static_cast<std::size_t>(saved[i]) * d + j] +=
                                              n.grad[i * d + j];
                              });
}

template <std::floating_point Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) shape_fail("concat_rows", parts[0].shape(), p.shape());
        rows += p.rows();
    }
    std::vector<Real> out;
    out.reserve(rows * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return parts[0].graph().make("concat_rows", {rows, c}, std::move(out), parts, [](Node<Real>& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[off + i];
            }
            off += p->numel();
        }
    });
}

template <std::floating_point Real>
Var<Real> slice_rows(const Var<Real>& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.rows())
        shape_fail("slice_rows", a.shape(), {begin, end}, "row range out of bounds");
    const std::size_t c = a.cols();
    std::vector<Real> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * c));
    return a.graph().make("slice_rows", {end - begin, c}, std::move(out), {a},
                          [begin, c](Node<Real>& n) {
                              auto& g = parent(n, 0).grad_buffer();
                              for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * c + i] += n.grad[i];
                          });
}

template <std::floating_point Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) shape_fail("concat_cols", parts[0].shape(), p.shape());
        c += p.cols();
    }
    std::vector<Real> out(r * c);
    std::size_t off = 0;
    for (const auto& p : parts) {
        view_mut(out, r, c).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.cols())) =
            view(p.data(), r, p.cols());
        off += p.cols();
    }
    return parts[0].graph().make("concat_cols", {r, c}, std::move(out), parts, [r, c](Node<Real>& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            const std::size_t pc = p->cols();
            if (p->requires_grad)
                view_mut(p->grad_buffer(), r, pc) +=
                    view(n.grad, r, c).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(pc));
            off += pc;
        }
    });
}

template <std::floating_point Real>
Var<Real> slice_cols(const Var<Real>& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.cols())
        shape_fail("slice_cols", a.shape(), {begin, end}, "column range out of bounds");
    const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
    std::vector<Real> out(r * w);
    view_mut(out, r, w) =
        view(a.data(), r, c).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(w));
    return a.graph().make("slice_cols", {r, w}, std::move(out), {a}, [r, c, w, begin](Node<Real>& n) {
        view_mut(parent(n, 0).grad_buffer(), r, c)
            .middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(w)) += view(n.grad, r, w);
    });
}

namespace {

// Copies between the token-major [B*M, H*dh] and head-major [B*H*M, dh] layouts.
template <class Real>
void permute_heads(const Real* src, Real* dst, std::size_t batch, std::size_t seq, std::size_t heads,
                   std::size_t dh, bool to_heads, bool accumulate) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t m = 0; m < seq; ++m) {
                const std::size_t tok = (b * seq + m) * heads * dh + h * dh;
                const std::size_t hm = ((b * heads + h) * seq + m) * dh;
                const Real* s = src + (to_heads ? tok : hm);
                Real* d = dst + (to_heads ? hm : tok);
                if (accumulate)
                    for (std::size_t j = 0; j < dh; ++j) d[j] += s[j];
                else
                    std::copy_n(s, dh, d);
            }
}

} // namespace

template <std::floating_point Real>
Var<Real> split_heads(const Var<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    if (heads == 0 || x.cols() % heads != 0 || x.rows() != batch * seq)
        shape_fail("split_heads", x.shape(), {batch, seq, heads});
    const std::size_t dh = x.cols() / heads;
    std::vector<Real> out(x.numel());
    permute_heads(x.data().data(), out.data(), batch, seq, heads, dh, true, false);
    return x.graph().make("split_heads", {batch * heads * seq, dh}, std::move(out), {x},
                          [batch, seq, heads, dh](Node<Real>& n) {
                              permute_heads(n.grad.data(), parent(n, 0).grad_buffer().data(), batch,
                                            seq, heads, dh, false, true);
                          });
}

template <std::floating_point Real>
Var<Real> merge_heads(const Var<Real>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    if (x.rows() != batch * heads * seq) shape_fail("merge_heads", x.shape(), {batch, seq, heads});
    const std::size_t dh = x.cols();
    std::vector<Real> out(x.numel());
    permute_heads(x.data().data(), out.data(), batch, seq, heads, dh, false, false);
    return x.graph().make("merge_heads", {batch * seq, heads * dh}, std::move(out), {x},
                          [batch, seq, heads, dh](Node<Real>& n) {
                              permute_heads(n.grad.data(), parent(n, 0).grad_buffer().data(), batch,
                                            seq, heads, dh, true, true);
                          });
}

// --- losses ---------------------------------------------------------------

template <std::floating_point Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const int> targets,
                        std::span<const Real> weights) {
    const std::size_t r = logits.rows(), c = logits.cols();
    if (targets.size() != r || weights.size() != r)
        shape_fail("cross_entropy", logits.shape(), {targets.size(), weights.size()},
                   "one target and one weight per row");
    const auto& x = logits.data();
    Real loss = 0;
    for (std::size_t i = 0; i < r; ++i) {
        if (weights[i] == Real(0)) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
            throw VocabularyError("cross_entropy: target " + std::to_string(targets[i]) +
                                  " outside vocabulary of " + std::to_string(c));
        const Real* xi = x.data() + i * c;
        const Real mx = *std::max_element(xi, xi + c);
        Real z = 0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
        loss += weights[i] * (mx + std::log(z) - xi[targets[i]]);
    }
    std::vector<int> t(targets.begin(), targets.end());
    std::vector<Real> w(weights.begin(), weights.end());
    return logits.graph().make(
        "cross_entropy", {}, {loss}, {logits},
        [r, c, t = std::move(t), w = std::move(w)](Node<Real>& n) {
            auto& p = parent(n, 0);
            auto& g = p.grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                if (w[i] == Real(0)) continue;
                const Real* xi = p.value.data() + i * c;
                const Real mx = *std::max_element(xi, xi + c);
                Real z = 0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
                const Real k = n.grad[0] * w[i];
                for (std::size_t j = 0; j < c; ++j) {
                    const Real pj = std::exp(xi[j] - mx) / z;
                    g[i * c + j] += k * (pj - (static_cast<int>(j) == t[i] ? Real(1) : Real(0)));
                }
            }
        });
}

// --- instantiations ---------------------------------------------------------

#define LOOPLAB_INSTANTIATE_OPS(R)                                                              \
    template Var<R> matmul(const Var<R>&, const Var<R>&);                                       \
    template Var<R> batched_matmul(const Var<R>&, const Var<R>&, std::size_t, bool);           \
    template Var<R> transpose(const Var<R>&);                                                   \
    template Var<R> reshape(const Var<R>&, Shape);                                              \
    template Var<R> add(const Var<R>&, const Var<R>&);                                          \
    template Var<R> sub(const Var<R>&, const Var<R>&);                                          \
    template Var<R> mul(const Var<R>&, const Var<R>&);                                          \
    template Var<R> scale(const Var<R>&, R);                                                    \
    template Var<R> add_scalar(const Var<R>&, R);                                               \
    template Var<R> relu(const Var<R>&);                                                        \
    template Var<R> gelu(const Var<R>&);                                                        \
    template Var<R> gelu_derivative(const Var<R>&);                                             \
    template Var<R> sin(const Var<R>&);                                                         \
    template Var<R> cos(const Var<R>&);                                                         \
    template Var<R> sqrt(const Var<R>&);                                                        \
    template Var<R> reciprocal(const Var<R>&);                                                  \
    template Var<R> add_row(const Var<R>&, const Var<R>&);                                      \
    template Var<R> mul_row(const Var<R>&, const Var<R>&);                                      \
    template Var<R> sub_col(const Var<R>&, const Var<R>&);                                      \
    template Var<R> mul_col(const Var<R>&, const Var<R>&);                                      \
    template Var<R> sum(const Var<R>&);                                                         \
    template Var<R> mean(const Var<R>&);                                                        \
    template Var<R> squared_norm(const Var<R>&);                                                \
    template Var<R> row_sum(const Var<R>&);                                                     \
    template Var<R> row_mean(const Var<R>&);                                                    \
    template Var<R> segment_sum(const Var<R>&, std::size_t);                                    \
    template Var<R> scale_segments(const Var<R>&, const Var<R>&);                               \
    template Var<R> softmax(const Var<R>&);                                                     \
    template Var<R> causal_softmax(const Var<R>&, std::size_t);                                 \
    template Var<R> layer_norm(const Var<R>&, const Var<R>&, const Var<R>&, R);                 \
    template Var<R> rms_norm(const Var<R>&, const Var<R>&, R);                                  \
    template Var<R> simple_norm(const Var<R>&, R);                                              \
    template Var<R> row_inv_std(const Var<R>&, bool, R);                                        \
    template Var<R> embedding(const Var<R>&, std::span<const int>);                             \
    template Var<R> concat_rows(const std::vector<Var<R>>&);                                    \
    template Var<R> slice_rows(const Var<R>&, std::size_t, std::size_t);                        \
    template Var<R> concat_cols(const std::vector<Var<R>>&);                                    \
    template Var<R> slice_cols(const Var<R>&, std::size_t, std::size_t);                        \
    template Var<R> split_heads(const Var<R>&, std::size_t, std::size_t, std::size_t);          \
    template Var<R> merge_heads(const Var<R>&, std::size_t, std::size_t, std::size_t);          \
    template Var<R> cross_entropy(const Var<R>&, std::span<const int>, std::span<const R>);

LOOPLAB_INSTANTIATE_OPS(float)
LOOPLAB_INSTANTIATE_OPS(double)

#undef LOOPLAB_INSTANTIATE_OPS

} // namespace looplab::ad
