#pragma once

#include <array>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "looplab/autodiff/dual.hpp"
#include "looplab/model/looped_model.hpp"

namespace looplab::dynamics {

using ad::Tensor;

enum class Verdict { Converged, Diverged, Wandering };
std::string_view to_string(Verdict v);

struct ConvergenceThresholds {
    double tol = 1e-4;       // relative successive delta
    std::size_t window = 3;  // trailing steps that must all be under tol
    double div_factor = 10.0;
};

struct ConvergenceReport {
    Verdict verdict = Verdict::Wandering;
    std::vector<double> state_norms;        // ||h^(t)||, flattened
    std::vector<double> successive_deltas;  // ||h^(t+1) - h^(t)||
    std::vector<double> relative_deltas;    // delta / max(1, ||h^(t)||)
    std::optional<std::size_t> first_converged_step;
};

// Converged when the last `window` relative deltas are all <= tol (fewer if
// the trajectory is shorter); otherwise diverged when some ||h^(t)|| reaches
// div_factor * ||h^(0)||; otherwise wandering.
template <std::floating_point Real>
ConvergenceReport trajectory_stats(const std::vector<Tensor<Real>>& states, const ConvergenceThresholds& th = {});

// Euclidean norm of each row (token) of a state.
template <std::floating_point Real>
std::vector<double> token_norms(const Tensor<Real>& state);

struct PCAResult {
    std::array<std::vector<double>, 2> components;
    std::vector<std::array<double, 2>> projections;
    std::array<double, 2> explained_variance{};
    double total_variance = 0.0;
};

// PCA over iteration steps, one observation per flattened state. Covariance
// is normalized by the number of states.
template <std::floating_point Real>
PCAResult pca_project(const std::vector<Tensor<Real>>& states);

inline constexpr double kDirectionEps = 1e-12;

template <std::floating_point Real>
struct SpectralProbe {
    double rho_estimate = 0.0;
    std::size_t k_steps = 0;
    Tensor<Real> direction;
    std::size_t at_iteration = 0;
};

// Power iteration v <- Jv / (||Jv|| + eps) on non-recording graphs. v0 is a
// normalized standard normal draw from `seed` unless given.
template <std::floating_point Real>
SpectralProbe<Real> estimate_spectral_radius(const ad::StateMap<Real>& fn, const Tensor<Real>& h, std::size_t k,
                                             std::uint64_t seed,
                                             const std::optional<Tensor<Real>>& v0 = std::nullopt);

// Probe of the model's recurrent block at a single-sequence state [M, d].
template <std::floating_point Real>
SpectralProbe<Real> estimate_spectral_radius(const model::LoopedModel<Real>& model, const Tensor<Real>& h,
                                             std::size_t k, std::uint64_t seed, std::size_t at_iteration = 0);

nlohmann::json to_json(const ConvergenceReport& r);
nlohmann::json to_json(const PCAResult& r);
template <std::floating_point Real>
nlohmann::json to_json(const SpectralProbe<Real>& p);
// Per-step records {t, state_norm, delta}; delta is null on the last step.
nlohmann::json trajectory_dump(const ConvergenceReport& r);

} // namespace looplab::dynamics
