#include <doctest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "looplab/dynamics/dynamics.hpp"
#include "looplab/errors.hpp"
#include "oracles.hpp"

using namespace looplab;
using namespace looplab::dynamics;
using looplab::testing::random_normal;

namespace {

// h [1, D] -> h A^T, i.e. the column map v -> A v.
ad::StateMap<double> linear_map(const Eigen::MatrixXd& a) {
    const auto D = std::size_t(a.rows());
    Tensor<double> at = Tensor<double>::zeros({D, D});
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) at.at(i, j) = a(Eigen::Index(j), Eigen::Index(i));
    return [at](const ad::DualVar<double>& h) {
        return ad::dual::matmul(h, ad::DualVar<double>(h.primal.graph().constant(at)));
    };
}

Tensor<double> row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>({1, n}, std::move(v));
}

std::vector<Tensor<double>> as_states(const std::vector<Eigen::VectorXd>& xs) {
    std::vector<Tensor<double>> out;
    for (const auto& x : xs) out.push_back(row(std::vector<double>(x.data(), x.data() + x.size())));
    return out;
}

double projected_variance(const std::vector<Tensor<double>>& states, const Eigen::VectorXd& u) {
    std::vector<double> p;
    for (const auto& s : states) p.push_back(Eigen::Map<const Eigen::VectorXd>(s.data.data(), u.size()).dot(u));
    double mean = 0;
    for (double x : p) mean += x / double(p.size());
    double var = 0;
    for (double x : p) var += (x - mean) * (x - mean) / double(p.size());
    return var;
}

} // namespace

TEST_SUITE("dynamics") {

TEST_CASE("constant trajectory converges at step 0") {
    std::vector<Tensor<double>> s(6, row({1.0, -2.0, 0.5}));
    const auto r = trajectory_stats(s);
    CHECK(r.verdict == Verdict::Converged);
    REQUIRE(r.first_converged_step);
    CHECK(*r.first_converged_step == 0);
    for (double d : r.successive_deltas) CHECK(d == 0.0);
}

TEST_CASE("linear growth diverges") {
    std::vector<Tensor<double>> s;
    for (int t = 0; t < 64; ++t) s.push_back(row({double(t) * 0.6, double(t) * 0.8}));
    const auto r = trajectory_stats(s);
    CHECK(r.verdict == Verdict::Diverged);
    CHECK(r.state_norms.back() == doctest::Approx(63.0));
}

TEST_CASE("a bounded oscillation wanders") {
    std::vector<Tensor<double>> s;
    for (int t = 0; t < 20; ++t) s.push_back(row({t % 2 ? 1.0 : -1.0, 1.0}));
    CHECK(trajectory_stats(s).verdict == Verdict::Wandering);
}

TEST_CASE("convergence needs the full window") {
    std::vector<Tensor<double>> s;
    for (int t = 0; t < 10; ++t) s.push_back(row({t < 8 ? double(t) : 7.0, 1.0}));
    // Only the last delta is zero.
    CHECK(trajectory_stats(s).verdict == Verdict::Wandering);
    s.push_back(row({7.0, 1.0}));
    s.push_back(row({7.0, 1.0}));
    const auto r = trajectory_stats(s);
    CHECK(r.verdict == Verdict::Converged);
    CHECK(*r.first_converged_step == 7);
}

TEST_CASE("trajectory_stats needs two states") {
    std::vector<Tensor<double>> s(1, row({1.0}));
    CHECK_THROWS_AS(trajectory_stats(s), ContractError);
}

TEST_CASE("pca of points on a line has one nonzero component") {
    const Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(6, -1.0, 2.0).normalized();
    std::vector<Eigen::VectorXd> xs;
    for (double a : {0.5, -1.0, 3.0, 2.0, -0.25}) xs.push_back(a * u);
    const auto r = pca_project(as_states(xs));
    CHECK(r.explained_variance[0] > 0.5);
    CHECK(r.explained_variance[1] < 1e-12);
    for (const auto& p : r.projections) CHECK(std::abs(p[1]) < 1e-9);
}

TEST_CASE("pca recovers a planted two-dimensional subspace") {
    std::mt19937_64 rng(1);
    const std::size_t D = 20;
    Eigen::VectorXd offset = Eigen::VectorXd::Random(D);
    std::vector<Eigen::VectorXd> xs;
    std::normal_distribution<double> n(0, 1);
    for (int t = 0; t < 40; ++t) {
        Eigen::VectorXd x = offset;
        x(3) += 3.0 * n(rng);
        x(11) += 1.0 * n(rng);
        xs.push_back(x);
    }
    const auto r = pca_project(as_states(xs));
    for (const auto& c : r.components) {
        Eigen::Map<const Eigen::VectorXd> v(c.data(), D);
        double out_of_plane = 0;
        for (std::size_t i = 0; i < D; ++i)
            if (i != 3 && i != 11) out_of_plane += v(Eigen::Index(i)) * v(Eigen::Index(i));
        CHECK(std::sqrt(out_of_plane) < 1e-6);
    }
}

TEST_CASE("pca invariants: orthonormal, ordered, trace identity, variance maximization") {
    std::mt19937_64 rng(7);
    std::vector<Tensor<double>> states;
    for (int t = 0; t < 30; ++t) states.push_back(random_normal({3, 4}, rng, 1.0 + 0.1 * t));
    const auto r = pca_project(states);
    Eigen::Map<const Eigen::VectorXd> c0(r.components[0].data(), 12), c1(r.components[1].data(), 12);
    CHECK(std::abs(c0.norm() - 1) < 1e-6);
    CHECK(std::abs(c1.norm() - 1) < 1e-6);
    CHECK(std::abs(c0.dot(c1)) < 1e-6);
    CHECK(r.explained_variance[0] >= r.explained_variance[1]);
    CHECK(r.explained_variance[1] >= 0);
    CHECK(r.projections.size() == states.size());

    // Oracle: eigen-decomposition of the explicit covariance.
    Eigen::MatrixXd x(30, 12);
    for (int t = 0; t < 30; ++t)
        for (int i = 0; i < 12; ++i) x(t, i) = states[std::size_t(t)].data[std::size_t(i)];
    x.rowwise() -= x.colwise().mean();
    const Eigen::MatrixXd cov = x.transpose() * x / 30.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const auto ev = es.eigenvalues();
    CHECK(r.explained_variance[0] == doctest::Approx(ev(11)).epsilon(1e-10));
    CHECK(r.explained_variance[1] == doctest::Approx(ev(10)).epsilon(1e-10));
    CHECK(ev.sum() == doctest::Approx(x.rowwise().squaredNorm().mean()).epsilon(1e-12));
    CHECK(r.total_variance == doctest::Approx(ev.sum()).epsilon(1e-12));
    CHECK(projected_variance(states, c0) == doctest::Approx(r.explained_variance[0]).epsilon(1e-10));

    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 1000; ++trial) {
        Eigen::VectorXd u(12);
        for (auto& e : u) e = n(rng);
        u.normalize();
        CHECK(projected_variance(states, u) <= r.explained_variance[0] + 1e-8);
    }
}

TEST_CASE("pca of identical states is degenerate") {
    std::vector<Tensor<double>> s(5, row({1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(pca_project(s), DegenerateCovarianceError);
    std::vector<Tensor<double>> two(2, row({1.0, 2.0}));
    CHECK_THROWS_AS(pca_project(two), ContractError);
}

TEST_CASE("power iteration on diag(2,1)") {
    Eigen::MatrixXd a = Eigen::Vector2d(2, 1).asDiagonal();
    const auto fn = linear_map(a);
    const auto h = row({0.3, -0.7});
    const auto v0 = row({1 / std::sqrt(2.0), 1 / std::sqrt(2.0)});
    const auto one = estimate_spectral_radius<double>(fn, h, 1, 0, v0);
    CHECK(one.rho_estimate == doctest::Approx(std::sqrt(2.5)).epsilon(1e-12));
    CHECK(one.k_steps == 1);
    const auto many = estimate_spectral_radius<double>(fn, h, 200, 0, v0);
    CHECK(std::abs(many.rho_estimate - 2.0) < 1e-6);
    CHECK(std::abs(ad::l2_norm(many.direction) - 1.0) < 1e-6);
}

TEST_CASE("identity map has rho 1") {
    const ad::StateMap<double> id = [](const ad::DualVar<double>& h) { return h; };
    std::mt19937_64 rng(3);
    const auto h = random_normal({4, 3}, rng);
    for (std::size_t k : {1u, 5u, 50u})
        for (std::uint64_t seed : {1u, 2u}) CHECK(std::abs(estimate_spectral_radius(id, h, k, seed).rho_estimate - 1.0) < 1e-11);
}

TEST_CASE("zero jacobian gives rho 0") {
    const ad::StateMap<double> zero = [](const ad::DualVar<double>& h) {
        return ad::DualVar<double>(h.primal.graph().constant(Tensor<double>::zeros(h.shape())));
    };
    CHECK(estimate_spectral_radius(zero, row({1.0, 2.0}), 3, 1).rho_estimate == 0.0);
}

TEST_CASE("power iteration matches an eigen-decomposition on random B^T B") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> size(2, 32);
    std::normal_distribution<double> n(0, 1);
    int accepted = 0;
    double worst = 0;
    while (accepted < 50) {
        const int d = size(rng);
        Eigen::MatrixXd b(d, d);
        for (auto& e : b.reshaped()) e = n(rng);
        const Eigen::MatrixXd a = b.transpose() * b;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
        const double l1 = es.eigenvalues()(d - 1), l2 = es.eigenvalues()(d - 2);
        // Simple dominant eigenvalue with a gap 200 steps can resolve.
        if (l2 / l1 > 0.95) continue;
        ++accepted;
        Tensor<double> h = Tensor<double>::zeros({1, std::size_t(d)});
        const auto p = estimate_spectral_radius(linear_map(a), h, 200, std::uint64_t(accepted));
        worst = std::max(worst, std::abs(p.rho_estimate - l1) / l1);
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("single-step estimate tracks the scaled Frobenius norm in expectation") {
    std::mt19937_64 rng(5);
    const int D = 8;
    Eigen::MatrixXd a(D, D);
    std::normal_distribution<double> n(0, 1);
    for (auto& e : a.reshaped()) e = n(rng);
    const auto fn = linear_map(a);
    const Tensor<double> h = Tensor<double>::zeros({1, std::size_t(D)});
    const int draws = 100000;
    double acc = 0;
    for (int i = 0; i < draws; ++i) {
        const double r = estimate_spectral_radius(fn, h, 1, std::uint64_t(i)).rho_estimate;
        acc += r * r;
    }
    const double expected = a.squaredNorm() / D;
    CHECK(std::abs(acc / draws - expected) / expected < 0.02);
}

TEST_CASE("rho estimate ignores the sign and, for large K, the seed of v0") {
    std::mt19937_64 rng(9);
    const int D = 10;
    Eigen::MatrixXd b(D, D);
    std::normal_distribution<double> n(0, 1);
    Eigen::MatrixXd a;
    for (;;) {
        for (auto& e : b.reshaped()) e = n(rng);
        a = b.transpose() * b;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
        if (es.eigenvalues()(D - 2) / es.eigenvalues()(D - 1) < 0.9) break;
    }
    const auto fn = linear_map(a);
    const Tensor<double> h = Tensor<double>::zeros({1, std::size_t(D)});
    auto v = random_normal({1, std::size_t(D)}, rng);
    auto neg = v;
    for (auto& x : neg.data) x = -x;
    CHECK(estimate_spectral_radius<double>(fn, h, 3, 0, v).rho_estimate ==
          doctest::Approx(estimate_spectral_radius<double>(fn, h, 3, 0, neg).rho_estimate).epsilon(1e-14));
    const double r1 = estimate_spectral_radius(fn, h, 200, 1).rho_estimate;
    const double r2 = estimate_spectral_radius(fn, h, 200, 2).rho_estimate;
    CHECK(std::abs(r1 - r2) / r1 < 1e-4);
}

TEST_CASE("probe of a model whose block is the identity") {
    model::ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 8;
    c.max_seq_len = 6;
    c.norm_placement = model::NormPlacement::Pre;
    model::LoopedModel<double> m{c, model::init_parameters<double>(c, 1)};
    for (auto& [name, t] : m.params.tensors)
        if (name.ends_with(".wo") || name.ends_with(".w2")) std::fill(t.data.begin(), t.data.end(), 0.0);
    std::mt19937_64 rng(4);
    const auto p = estimate_spectral_radius(m, random_normal({5, 8}, rng), 2, 7, 12);
    CHECK(std::abs(p.rho_estimate - 1.0) < 1e-11);
    CHECK(p.at_iteration == 12);
    CHECK(p.direction.shape == ad::Shape{5, 8});
}

TEST_CASE("json emission") {
    std::vector<Tensor<double>> s;
    for (int t = 0; t < 4; ++t) s.push_back(row({double(t), 1.0}));
    const auto r = trajectory_stats(s);
    const auto j = to_json(r);
    CHECK(j.at("verdict") == "wandering");
    CHECK(j.at("state_norms").size() == 4);
    CHECK(j.at("first_converged_step").is_null());
    const auto dump = trajectory_dump(r);
    REQUIRE(dump.size() == 4);
    CHECK(dump[1].at("t") == 1);
    CHECK(dump[1].at("delta") == doctest::Approx(1.0));
    CHECK(dump[3].at("delta").is_null());
    const auto pj = to_json(pca_project(s));
    CHECK(pj.at("projections").size() == 4);
    CHECK(pj.at("components").size() == 2);
    SpectralProbe<double> p;
    p.rho_estimate = 0.5;
    p.direction = row({1.0, 0.0});
    const auto probe = to_json(p);
    CHECK(probe.at("rho_estimate") == 0.5);
    CHECK(probe.contains("k_steps"));
    CHECK(probe.contains("at_iteration"));
}

}
