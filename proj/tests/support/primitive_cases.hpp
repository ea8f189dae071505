#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "looplab/autodiff/dual.hpp"
#include "oracles.hpp"

// Every primitive as a scalar function of its inputs, and every tangent rule
// through each differentiable argument.
namespace looplab::testing {

using namespace looplab::ad;

// Fixed pseudo-random projection so every op output reduces to a scalar
// with a non-trivial gradient.
inline Var<double> project(const Var<double>& v) {
    std::mt19937_64 rng(v.numel() * 7919 + 17);
    Tensor<double> w = random_tensor(v.shape(), rng);
    return sum(mul(v, v.graph().constant(w)));
}

inline std::vector<Tensor<double>> reverse_gradient(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t));
    g.backward(f(g, vars));
    std::vector<Tensor<double>> out;
    for (const auto& v : vars) out.push_back(g.grad(v));
    return out;
}

struct GradCase {
    std::string name;
    ScalarFn fn;
    std::vector<Tensor<double>> inputs;
};

inline Tensor<double> away_from_zero(Tensor<double> t) {
    for (auto& x : t.data) x = x >= 0 ? x + 0.1 : x - 0.1;
    return t;
}

inline std::vector<GradCase> gradient_cases() {
    std::mt19937_64 rng(1234);
    auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
    auto pos = [&](Shape s) { return random_tensor(std::move(s), rng, 0.5, 2.0); };
    static const std::vector<int> ids{3, 0, 4, 3, 1};
    static const std::vector<int> targets{2, 0, 4, 1};
    static const std::vector<double> weights{1.0, 0.0, 0.5, 2.0};

    using V = std::vector<Var<double>>;
    return {
        {"matmul", [](auto&, const V& x) { return project(matmul(x[0], x[1])); }, {r({2, 3, 4}), r({4, 5})}},
        {"batched_matmul", [](auto&, const V& x) { return project(batched_matmul(x[0], x[1], 2, false)); },
         {r({6, 4}), r({8, 5})}},
        {"batched_matmul_t", [](auto&, const V& x) { return project(batched_matmul(x[0], x[1], 2, true)); },
         {r({6, 4}), r({10, 4})}},
        {"transpose", [](auto&, const V& x) { return project(transpose(x[0])); }, {r({3, 5})}},
        {"reshape", [](auto&, const V& x) { return project(reshape(x[0], {5, 3})); }, {r({3, 5})}},
        {"add", [](auto&, const V& x) { return project(add(x[0], x[1])); }, {r({3, 4}), r({3, 4})}},
        {"sub", [](auto&, const V& x) { return project(sub(x[0], x[1])); }, {r({3, 4}), r({3, 4})}},
        {"mul", [](auto&, const V& x) { return project(mul(x[0], x[1])); }, {r({3, 4}), r({3, 4})}},
        {"scale", [](auto&, const V& x) { return project(scale(x[0], 2.5)); }, {r({3, 4})}},
        {"add_scalar", [](auto&, const V& x) { return project(mul(add_scalar(x[0], 0.7), x[0])); }, {r({3, 4})}},
        {"relu", [](auto&, const V& x) { return project(relu(x[0])); }, {away_from_zero(r({4, 5}))}},
        {"gelu", [](auto&, const V& x) { return project(gelu(x[0])); }, {random_tensor({4, 5}, rng, -3, 3)}},
        {"gelu_derivative", [](auto&, const V& x) { return project(gelu_derivative(x[0])); },
         {random_tensor({4, 5}, rng, -3, 3)}},
        {"sin", [](auto&, const V& x) { return project(sin(x[0])); }, {r({3, 4})}},
        {"cos", [](auto&, const V& x) { return project(cos(x[0])); }, {r({3, 4})}},
        {"sqrt", [](auto&, const V& x) { return project(sqrt(x[0])); }, {pos({3, 4})}},
        {"reciprocal", [](auto&, const V& x) { return project(reciprocal(x[0])); }, {pos({3, 4})}},
        {"add_row", [](auto&, const V& x) { return project(add_row(x[0], x[1])); }, {r({3, 4}), r({4})}},
        {"mul_row", [](auto&, const V& x) { return project(mul_row(x[0], x[1])); }, {r({3, 4}), r({4})}},
        {"sub_col", [](auto&, const V& x) { return project(sub_col(x[0], x[1])); }, {r({3, 4}), r({3, 1})}},
        {"mul_col", [](auto&, const V& x) { return project(mul_col(x[0], x[1])); }, {r({3, 4}), r({3, 1})}},
        {"sum", [](auto&, const V& x) { return mul(sum(x[0]), sum(x[0])); }, {r({3, 4})}},
        {"mean", [](auto&, const V& x) { return mul(mean(x[0]), mean(x[0])); }, {r({3, 4})}},
        {"squared_norm", [](auto&, const V& x) { return squared_norm(x[0]); }, {r({3, 4})}},
        {"row_sum", [](auto&, const V& x) { return project(row_sum(x[0])); }, {r({3, 4})}},
        {"row_mean", [](auto&, const V& x) { return project(row_mean(x[0])); }, {r({3, 4})}},
        {"segment_sum", [](auto&, const V& x) { return project(segment_sum(x[0], 3)); }, {r({6, 4})}},
        {"scale_segments", [](auto&, const V& x) { return project(scale_segments(x[0], x[1])); },
         {r({6, 4}), r({3, 1})}},
        {"softmax", [](auto&, const V& x) { return project(softmax(x[0])); }, {random_tensor({3, 5}, rng, -2, 2)}},
        {"causal_softmax", [](auto&, const V& x) { return project(causal_softmax(x[0], 4)); },
         {random_tensor({8, 4}, rng, -2, 2)}},
        {"layer_norm", [](auto&, const V& x) { return project(layer_norm(x[0], x[1], x[2])); },
         {r({4, 6}), r({6}), r({6})}},
        {"rms_norm", [](auto&, const V& x) { return project(rms_norm(x[0], x[1])); }, {r({4, 6}), r({6})}},
        {"simple_norm", [](auto&, const V& x) { return project(simple_norm(x[0])); }, {r({4, 6})}},
        {"row_inv_std_centered", [](auto&, const V& x) { return project(row_inv_std(x[0], true, 1e-5)); },
         {r({4, 6})}},
        {"row_inv_std_raw", [](auto&, const V& x) { return project(row_inv_std(x[0], false, 1e-5)); },
         {r({4, 6})}},
        {"embedding", [](auto&, const V& x) { return project(embedding(x[0], std::span<const int>(ids))); },
         {r({5, 3})}},
        {"concat_rows", [](auto&, const V& x) { return project(concat_rows<double>({x[0], x[1]})); },
         {r({2, 3}), r({4, 3})}},
        {"slice_rows", [](auto&, const V& x) { return project(slice_rows(x[0], 1, 3)); }, {r({4, 3})}},
        {"concat_cols", [](auto&, const V& x) { return project(concat_cols<double>({x[0], x[1]})); },
         {r({3, 2}), r({3, 4})}},
        {"slice_cols", [](auto&, const V& x) { return project(slice_cols(x[0], 1, 4)); }, {r({3, 5})}},
        {"split_heads", [](auto&, const V& x) { return project(split_heads(x[0], 2, 3, 2)); }, {r({6, 4})}},
        {"merge_heads", [](auto&, const V& x) { return project(merge_heads(x[0], 2, 3, 2)); }, {r({12, 2})}},
        {"cross_entropy",
         [](auto&, const V& x) {
             return cross_entropy(x[0], std::span<const int>(targets), std::span<const double>(weights));
         },
         {random_tensor({4, 5}, rng, -2, 2)}},
    };
}

struct JvpCase {
    std::string name;
    StateMap<double> fn;
    Shape shape;
};

// Every tangent rule, exercised through each differentiable argument.
inline std::vector<JvpCase> jvp_cases() {
    std::mt19937_64 rng(99);
    auto c = [&](Shape s) { return random_tensor(std::move(s), rng); };
    auto k = [](const DualVar<double>& h, const Tensor<double>& t) {
        return DualVar<double>(h.primal.graph().constant(t));
    };
    const auto A = c({3, 4}), B = c({4, 5}), S = c({3, 4}), R = c({4}), Col = c({3, 1});
    const auto G = c({6, 4}), Seg = c({3, 1}), Gain = c({4}), Bias = c({4}), Bt = c({10, 4});
    static const std::vector<int> ids{2, 0, 1, 2};
    using D = DualVar<double>;
    return {
        {"matmul_left", [=](const D& h) { return dual::matmul(h, k(h, B)); }, {3, 4}},
        {"matmul_right", [=](const D& h) { return dual::matmul(k(h, A), h); }, {4, 5}},
        {"batched_matmul_left", [=](const D& h) { return dual::batched_matmul(h, k(h, Bt), 2, true); }, {6, 4}},
        {"batched_matmul_right", [=](const D& h) { return dual::batched_matmul(k(h, G), h, 2, true); }, {10, 4}},
        {"batched_matmul_plain", [=](const D& h) { return dual::batched_matmul(k(h, G), h, 2, false); }, {8, 3}},
        {"transpose", [](const D& h) { return dual::transpose(h); }, {3, 4}},
        {"reshape", [](const D& h) { return dual::reshape(h, {4, 3}); }, {3, 4}},
        {"add", [=](const D& h) { return dual::add(h, k(h, S)); }, {3, 4}},
        {"sub_left", [=](const D& h) { return dual::sub(h, k(h, S)); }, {3, 4}},
        {"sub_right", [=](const D& h) { return dual::sub(k(h, S), h); }, {3, 4}},
        {"mul", [=](const D& h) { return dual::mul(dual::mul(h, k(h, S)), h); }, {3, 4}},
        {"scale", [](const D& h) { return dual::scale(h, -1.5); }, {3, 4}},
        {"add_scalar", [](const D& h) { return dual::mul(dual::add_scalar(h, 0.3), h); }, {3, 4}},
        {"relu", [](const D& h) { return dual::relu(dual::add_scalar(h, 0.05)); }, {3, 4}},
        {"gelu", [](const D& h) { return dual::gelu(dual::scale(h, 2.0)); }, {3, 4}},
        {"sin", [](const D& h) { return dual::sin(h); }, {3, 4}},
        {"cos", [](const D& h) { return dual::cos(h); }, {3, 4}},
        {"sqrt", [](const D& h) { return dual::sqrt(dual::add_scalar(dual::mul(h, h), 0.5)); }, {3, 4}},
        {"reciprocal", [](const D& h) { return dual::reciprocal(dual::add_scalar(dual::mul(h, h), 0.5)); }, {3, 4}},
        {"add_row_left", [=](const D& h) { return dual::add_row(h, k(h, R)); }, {3, 4}},
        {"add_row_right", [=](const D& h) { return dual::add_row(k(h, S), h); }, {4}},
        {"mul_row_left", [=](const D& h) { return dual::mul_row(h, k(h, R)); }, {3, 4}},
        {"mul_row_right", [=](const D& h) { return dual::mul_row(k(h, S), h); }, {4}},
        {"sub_col_left", [=](const D& h) { return dual::sub_col(h, k(h, Col)); }, {3, 4}},
        {"sub_col_right", [=](const D& h) { return dual::sub_col(k(h, S), h); }, {3, 1}},
        {"mul_col_left", [=](const D& h) { return dual::mul_col(h, k(h, Col)); }, {3, 4}},
        {"mul_col_right", [=](const D& h) { return dual::mul_col(k(h, S), h); }, {3, 1}},
        {"sum", [](const D& h) { return dual::sum(h); }, {3, 4}},
        {"mean", [](const D& h) { return dual::mean(h); }, {3, 4}},
        {"squared_norm", [](const D& h) { return dual::squared_norm(h); }, {3, 4}},
        {"row_sum", [](const D& h) { return dual::row_sum(h); }, {3, 4}},
        {"row_mean", [](const D& h) { return dual::row_mean(h); }, {3, 4}},
        {"segment_sum", [](const D& h) { return dual::segment_sum(h, 3); }, {6, 4}},
        {"scale_segments_left", [=](const D& h) { return dual::scale_segments(h, k(h, Seg)); }, {6, 4}},
        {"scale_segments_right", [=](const D& h) { return dual::scale_segments(k(h, G), h); }, {3, 1}},
        {"softmax", [](const D& h) { return dual::softmax(h); }, {3, 4}},
        {"causal_softmax", [](const D& h) { return dual::causal_softmax(h, 4); }, {8, 4}},
        {"layer_norm_x", [=](const D& h) { return dual::layer_norm(h, k(h, Gain), k(h, Bias)); }, {3, 4}},
        {"layer_norm_gain", [=](const D& h) { return dual::layer_norm(k(h, S), h, k(h, Bias)); }, {4}},
        {"layer_norm_bias", [=](const D& h) { return dual::layer_norm(k(h, S), k(h, Gain), h); }, {4}},
        {"rms_norm_x", [=](const D& h) { return dual::rms_norm(h, k(h, Gain)); }, {3, 4}},
        {"rms_norm_gain", [=](const D& h) { return dual::rms_norm(k(h, S), h); }, {4}},
        {"simple_norm", [](const D& h) { return dual::simple_norm(h); }, {3, 4}},
        {"embedding", [](const D& h) { return dual::embedding(h, std::span<const int>(ids)); }, {3, 4}},
        {"concat_rows", [=](const D& h) { return dual::concat_rows<double>({h, k(h, S)}); }, {2, 4}},
        {"slice_rows", [](const D& h) { return dual::slice_rows(h, 1, 3); }, {4, 2}},
        {"concat_cols", [=](const D& h) { return dual::concat_cols<double>({k(h, S), h}); }, {3, 2}},
        {"slice_cols", [](const D& h) { return dual::slice_cols(h, 1, 3); }, {3, 4}},
        {"split_heads", [](const D& h) { return dual::split_heads(h, 2, 3, 2); }, {6, 4}},
        {"merge_heads", [](const D& h) { return dual::merge_heads(h, 2, 3, 2); }, {12, 2}},
    };
}

} // namespace looplab::testing
