#pragma once

#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "looplab/arith/arith.hpp"
#include "looplab/model/looped_model.hpp"
#include "looplab/trainer/batch.hpp"

namespace looplab::trainer {

struct LoopDistribution {
    enum class Kind { LogNormal, Poisson, Uniform, Fixed };
    Kind kind = Kind::Fixed;
    double mu = 0.0;      // LogNormal
    double sigma = 1.0;   // LogNormal
    double rate = 1.0;    // Poisson
    std::size_t clip_min = 4;
    std::size_t clip_max = 4;

    static LoopDistribution log_normal(double mu, double sigma, std::size_t lo, std::size_t hi);
    static LoopDistribution poisson(double rate, std::size_t lo, std::size_t hi);
    static LoopDistribution uniform(std::size_t lo, std::size_t hi);
    static LoopDistribution fixed(std::size_t t);

    void validate() const;
    bool operator==(const LoopDistribution&) const = default;
};

std::string_view to_string(LoopDistribution::Kind k);
void to_json(nlohmann::json& j, const LoopDistribution& d);
void from_json(const nlohmann::json& j, LoopDistribution& d);
std::string describe(const LoopDistribution& d);

// LogNormal: round(exp(N(mu, sigma))); Poisson: a draw with the given rate;
// Uniform: integer uniform on the clip range; Fixed: t. All clipped.
std::size_t sample_loop_depth(const LoopDistribution& d, std::mt19937_64& rng);
// Maps a raw draw onto [clip_min, clip_max].
std::size_t clip_loop_depth(const LoopDistribution& d, double raw);

// The random-loop settings studied for the addition testbed: three
// distributions with two parameter sets each, for the sandwich models and
// for the Pre/Post LayerNorm models.
struct NamedDistribution {
    std::string name;
    LoopDistribution dist;
};
std::vector<NamedDistribution> sandwich_study_distributions();
std::vector<NamedDistribution> pre_post_study_distributions();

enum class ObjectiveForm { Convex, Additive };
enum class Schedule { Constant, Cosine };

struct TrainConfig {
    double lambda_weight = 0.1;
    ObjectiveForm objective_form = ObjectiveForm::Convex;
    std::size_t power_steps = 1;
    LoopDistribution loop_dist = LoopDistribution::log_normal(2.0, 0.7, 1, 100);
    double l2_consistency_weight = 0.0;
    double learning_rate = 1e-4;
    Schedule schedule = Schedule::Cosine;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_opt = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0; // global norm; 0 disables
    std::size_t batch_size = 64;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    bool detach_direction = true;
    arith::LossMask loss_mask = arith::LossMask::AllNextTokens;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepMetrics {
    std::size_t step = 0;
    std::size_t sampled_t = 0;
    double sft_loss = 0;
    double jsrr_loss = 0;
    double l2_loss = 0;
    double total_loss = 0;
    double gradient_norm = 0; // before clipping
    double learning_rate = 0;
    std::optional<double> rho_probe; // mean per-sample ||Jv|| of the JSRR term
};

nlohmann::json to_json(const StepMetrics& m);

template <std::floating_point Real>
using GradMap = std::map<std::string, ad::Tensor<Real>>;

// Mean over the batch of the summed masked next-token NLL.
template <std::floating_point Real>
ad::Var<Real> sft_loss(const ad::Var<Real>& logits, const SequenceBatch& batch);

// Mean over adjacent pairs of ||h^(k+1) - h^(k)||^2 per sample, over real rows.
template <std::floating_point Real>
ad::Var<Real> l2_consistency_loss(const std::vector<ad::Var<Real>>& states, const SequenceBatch& batch);

template <std::floating_point Real>
struct JsrrResult {
    ad::Var<Real> loss;    // mean over samples of ||j_i||^2
    double mean_rho = 0;   // mean over samples of ||j_i||
};

// K normalized JVP steps of `fn` at the recorded state h_t, one direction
// per sample drawn from rng and confined to real rows.
template <std::floating_point Real>
JsrrResult<Real> jsrr_loss(const ad::StateMap<Real>& fn, const ad::Var<Real>& h_t, const SequenceBatch& batch,
                           std::size_t k, std::mt19937_64& rng, bool detach_direction);

template <std::floating_point Real>
struct AdamState {
    std::map<std::string, ad::Tensor<Real>> m, v;
    bool operator==(const AdamState&) const = default;
};

double learning_rate_at(const TrainConfig& c, std::size_t step);

// Decoupled weight decay with bias correction; `step` counts from 0.
template <std::floating_point Real>
void optimizer_update(AdamState<Real>& state, model::Parameters<Real>& params, const GradMap<Real>& grads,
                      std::size_t step, const TrainConfig& c);

// Scales grads in place to global norm <= max_norm; returns the norm before.
template <std::floating_point Real>
double clip_gradients(GradMap<Real>& grads, double max_norm);

// One STARS step: sample t, forward, combined loss, one update. Draws t from
// (seed, loop-sampling, step) and JSRR directions from (seed, jsrr, step).
// On a non-finite loss or gradient, throws NumericError and leaves model and
// optimizer state untouched.
template <std::floating_point Real>
StepMetrics stars_step(model::LoopedModel<Real>& model, AdamState<Real>& opt, const SequenceBatch& batch,
                       const TrainConfig& c, std::size_t step);

// Plain next-token training at depth t.
template <std::floating_point Real>
StepMetrics sft_step(model::LoopedModel<Real>& model, AdamState<Real>& opt, const SequenceBatch& batch,
                     std::size_t t, const TrainConfig& c, std::size_t step);

// Sample indices of the batch used at `step`: each epoch is a fresh
// permutation from (seed, batch-order, epoch), the remainder dropped.
std::vector<std::size_t> batch_indices(std::size_t n_samples, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t step);

} // namespace looplab::trainer
