#include "looplab/dynamics/dynamics.hpp"

#include <cmath>
#include <random>

#include <Eigen/SVD>

#include "looplab/errors.hpp"

namespace looplab::dynamics {

std::string_view to_string(Verdict v) {
    switch (v) {
    case Verdict::Converged: return "converged";
    case Verdict::Diverged: return "diverged";
    case Verdict::Wandering: return "wandering";
    }
    return "?";
}

template <std::floating_point Real>
ConvergenceReport trajectory_stats(const std::vector<Tensor<Real>>& states, const ConvergenceThresholds& th) {
    if (states.size() < 2)
        throw ContractError("trajectory_stats needs at least 2 states, got " + std::to_string(states.size()));
    ConvergenceReport r;
    for (const auto& s : states) {
        if (s.shape != states[0].shape) throw ShapeError("trajectory_stats: states differ in shape");
        r.state_norms.push_back(double(ad::l2_norm(s)));
    }
    for (std::size_t t = 0; t + 1 < states.size(); ++t) {
        double d2 = 0;
        for (std::size_t i = 0; i < states[t].numel(); ++i) {
            const double d = double(states[t + 1].data[i]) - double(states[t].data[i]);
            d2 += d * d;
        }
        r.successive_deltas.push_back(std::sqrt(d2));
        r.relative_deltas.push_back(r.successive_deltas.back() / std::max(1.0, r.state_norms[t]));
    }

    const std::size_t n = r.relative_deltas.size();
    std::size_t first = n; // first index from which every relative delta is under tol
    while (first > 0 && r.relative_deltas[first - 1] <= th.tol) --first;
    const std::size_t need = std::min(th.window, n);
    if (n - first >= need) {
        r.verdict = Verdict::Converged;
        r.first_converged_step = first;
        return r;
    }
    for (double norm : r.state_norms) {
        if (norm >= th.div_factor * r.state_norms[0]) {
            r.verdict = Verdict::Diverged;
            return r;
        }
    }
    r.verdict = Verdict::Wandering;
    return r;
}

template <std::floating_point Real>
std::vector<double> token_norms(const Tensor<Real>& state) {
    std::vector<double> out(state.rows());
    for (std::size_t r = 0; r < state.rows(); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < state.cols(); ++c) s += double(state.at(r, c)) * double(state.at(r, c));
        out[r] = std::sqrt(s);
    }
    return out;
}

template <std::floating_point Real>
PCAResult pca_project(const std::vector<Tensor<Real>>& states) {
    if (states.size() < 3)
        throw ContractError("pca_project needs at least 3 states, got " + std::to_string(states.size()));
    const std::size_t n = states.size(), dim = states[0].numel();
    if (dim < 2) throw ContractError("pca_project needs a state dimension of at least 2");
    Eigen::MatrixXd x(n, dim);
    for (std::size_t t = 0; t < n; ++t) {
        if (states[t].numel() != dim) throw ShapeError("pca_project: states differ in size");
        for (std::size_t i = 0; i < dim; ++i) x(Eigen::Index(t), Eigen::Index(i)) = double(states[t].data[i]);
    }
    x.rowwise() -= x.colwise().mean();

    PCAResult r;
    r.total_variance = x.squaredNorm() / double(n);
    if (r.total_variance == 0.0)
        throw DegenerateCovarianceError("pca_project: all " + std::to_string(n) +
                                        " states are identical (explained variance 0, 0)");

    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd c = svd.matrixV().col(k);
        // Fix the sign so the largest-magnitude entry is positive.
        Eigen::Index arg;
        c.cwiseAbs().maxCoeff(&arg);
        if (c(arg) < 0) c = -c;
        r.components[k].assign(c.data(), c.data() + c.size());
        r.explained_variance[k] = k < sv.size() ? sv(k) * sv(k) / double(n) : 0.0;
    }
    r.projections.resize(n);
    for (std::size_t t = 0; t < n; ++t)
        for (int k = 0; k < 2; ++k)
            r.projections[t][k] = x.row(Eigen::Index(t)).dot(
                Eigen::Map<const Eigen::VectorXd>(r.components[k].data(), Eigen::Index(dim)));
    return r;
}

template <std::floating_point Real>
SpectralProbe<Real> estimate_spectral_radius(const ad::StateMap<Real>& fn, const Tensor<Real>& h, std::size_t k,
                                             std::uint64_t seed, const std::optional<Tensor<Real>>& v0) {
    if (k < 1) throw ContractError("estimate_spectral_radius: K must be at least 1");
    Tensor<Real> v;
    if (v0) {
        if (v0->shape != h.shape) throw ShapeError("estimate_spectral_radius: v0 shape " + ad::shape_string(v0->shape) +
                                                   " differs from state shape " + ad::shape_string(h.shape));
        v = *v0;
    } else {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        v = Tensor<Real>::zeros(h.shape);
        for (auto& x : v.data) x = Real(normal(rng));
    }
    const Real n0 = ad::l2_norm(v);
    for (auto& x : v.data) x /= n0 + Real(kDirectionEps);

    SpectralProbe<Real> p;
    p.k_steps = k;
    for (std::size_t step = 0; step < k; ++step) {
        ad::Graph<Real> g(false);
        const auto out = ad::jvp_forward(fn, g.constant(h), g.constant(v));
        Tensor<Real> j = out.tangent->value();
        const Real nj = ad::l2_norm(j);
        for (auto& x : j.data) x /= nj + Real(kDirectionEps);
        v = std::move(j);
        p.rho_estimate = double(nj);
    }
    p.direction = std::move(v);
    return p;
}

template <std::floating_point Real>
SpectralProbe<Real> estimate_spectral_radius(const model::LoopedModel<Real>& model, const Tensor<Real>& h,
                                             std::size_t k, std::uint64_t seed, std::size_t at_iteration) {
    auto p = estimate_spectral_radius<Real>(model::block_map(model, model::SeqLayout{1, h.rows()}), h, k, seed);
    p.at_iteration = at_iteration;
    return p;
}

nlohmann::json to_json(const ConvergenceReport& r) {
    nlohmann::json j{{"verdict", to_string(r.verdict)},
                     {"state_norms", r.state_norms},
                     {"successive_deltas", r.successive_deltas},
                     {"relative_deltas", r.relative_deltas}};
    j["first_converged_step"] = r.first_converged_step ? nlohmann::json(*r.first_converged_step) : nlohmann::json();
    return j;
}

nlohmann::json to_json(const PCAResult& r) {
    nlohmann::json proj = nlohmann::json::array();
    for (const auto& p : r.projections) proj.push_back({p[0], p[1]});
    return {{"components", {r.components[0], r.components[1]}},
            {"projections", proj},
            {"explained_variance", {r.explained_variance[0], r.explained_variance[1]}},
            {"total_variance", r.total_variance}};
}

template <std::floating_point Real>
nlohmann::json to_json(const SpectralProbe<Real>& p) {
    return {{"rho_estimate", p.rho_estimate},
            {"k_steps", p.k_steps},
            {"direction", p.direction.data},
            {"at_iteration", p.at_iteration}};
}

nlohmann::json trajectory_dump(const ConvergenceReport& r) {
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t t = 0; t < r.state_norms.size(); ++t) {
        nlohmann::json rec{{"t", t}, {"state_norm", r.state_norms[t]}};
        rec["delta"] = t < r.successive_deltas.size() ? nlohmann::json(r.successive_deltas[t]) : nlohmann::json();
        out.push_back(std::move(rec));
    }
    return out;
}

#define LOOPLAB_INSTANTIATE_DYNAMICS(R)                                                                          \
    template ConvergenceReport trajectory_stats<R>(const std::vector<Tensor<R>>&, const ConvergenceThresholds&); \
    template std::vector<double> token_norms<R>(const Tensor<R>&);                                               \
    template PCAResult pca_project<R>(const std::vector<Tensor<R>>&);                                            \
    template SpectralProbe<R> estimate_spectral_radius<R>(const ad::StateMap<R>&, const Tensor<R>&, std::size_t, \
                                                          std::uint64_t, const std::optional<Tensor<R>>&);       \
    template SpectralProbe<R> estimate_spectral_radius<R>(const model::LoopedModel<R>&, const Tensor<R>&,       \
                                                          std::size_t, std::uint64_t, std::size_t);              \
    template nlohmann::json to_json<R>(const SpectralProbe<R>&);

LOOPLAB_INSTANTIATE_DYNAMICS(float)
LOOPLAB_INSTANTIATE_DYNAMICS(double)

} // namespace looplab::dynamics
