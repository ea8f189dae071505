#pragma once

// Test-only reference computations. Nothing here calls the reverse sweep or
// the tangent rules, so they stay independent of the paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "looplab/autodiff/graph.hpp"

namespace looplab::testing {

using ad::Graph;
using ad::Tensor;
using ad::Var;

inline Tensor<double> random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& x : t.data) x = dist(rng);
    return t;
}

inline Tensor<double> random_normal(ad::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (auto& x : t.data) x = dist(rng);
    return t;
}

// Scalar function of several input tensors, built on whatever graph it is given.
using ScalarFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
    Graph<double> g(false);
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.constant(t));
    return f(g, vars).item();
}

// Central-difference gradient of f with respect to every entry of every input.
inline std::vector<Tensor<double>> finite_diff_gradient(const ScalarFn& f,
                                                        std::vector<Tensor<double>> inputs,
                                                        double step = 1e-5) {
    std::vector<Tensor<double>> out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor<double> g = Tensor<double>::zeros(inputs[k].shape);
        for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
            const double x0 = inputs[k].data[i];
            inputs[k].data[i] = x0 + step;
            const double fp = eval_scalar(f, inputs);
            inputs[k].data[i] = x0 - step;
            const double fm = eval_scalar(f, inputs);
            inputs[k].data[i] = x0;
            g.data[i] = (fp - fm) / (2 * step);
        }
        out.push_back(std::move(g));
    }
    return out;
}

// Largest |a - b| / (max(|a|, |b|) + floor / rel_tol) style error: returns the
// worst ratio of |a - b| to the allowed band rel_tol * max(|a|,|b|) + abs_floor.
// A value <= 1 means every entry is within tolerance.
inline double worst_band_ratio(const std::vector<double>& a, const std::vector<double>& b,
                               double rel_tol, double abs_floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double band = rel_tol * std::max(std::abs(a[i]), std::abs(b[i])) + abs_floor;
        worst = std::max(worst, std::abs(a[i] - b[i]) / band);
    }
    return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

} // namespace looplab::testing
