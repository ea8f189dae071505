#include "looplab/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "looplab/errors.hpp"
#include "looplab/json_util.hpp"
#include "looplab/rng.hpp"

namespace looplab::trainer {

using Kind = LoopDistribution::Kind;

LoopDistribution LoopDistribution::log_normal(double mu, double sigma, std::size_t lo, std::size_t hi) {
    LoopDistribution d;
    d.kind = Kind::LogNormal;
    d.mu = mu;
    d.sigma = sigma;
    d.clip_min = lo;
    d.clip_max = hi;
    return d;
}

LoopDistribution LoopDistribution::poisson(double rate, std::size_t lo, std::size_t hi) {
    LoopDistribution d;
    d.kind = Kind::Poisson;
    d.rate = rate;
    d.clip_min = lo;
    d.clip_max = hi;
    return d;
}

LoopDistribution LoopDistribution::uniform(std::size_t lo, std::size_t hi) {
    LoopDistribution d;
    d.kind = Kind::Uniform;
    d.clip_min = lo;
    d.clip_max = hi;
    return d;
}

LoopDistribution LoopDistribution::fixed(std::size_t t) {
    LoopDistribution d;
    d.kind = Kind::Fixed;
    d.clip_min = d.clip_max = t;
    return d;
}

void LoopDistribution::validate() const {
    if (clip_min < 1) throw ValidationError("loop_dist: clip_min must be at least 1");
    if (clip_max < clip_min) throw ValidationError("loop_dist: clip_max must be at least clip_min");
    if (kind == Kind::Fixed && clip_min != clip_max) throw ValidationError("loop_dist: Fixed needs clip_min == clip_max");
    if (kind == Kind::LogNormal && !(sigma > 0)) throw ValidationError("loop_dist: sigma must be positive");
    if (kind == Kind::Poisson && !(rate > 0)) throw ValidationError("loop_dist: rate must be positive");
}

std::string_view to_string(Kind k) {
    switch (k) {
    case Kind::LogNormal: return "LogNormal";
    case Kind::Poisson: return "Poisson";
    case Kind::Uniform: return "Uniform";
    case Kind::Fixed: return "Fixed";
    }
    return "?";
}

void to_json(nlohmann::json& j, const LoopDistribution& d) {
    j = {{"kind", to_string(d.kind)}};
    switch (d.kind) {
    case Kind::LogNormal:
        j["mu"] = d.mu;
        j["sigma"] = d.sigma;
        break;
    case Kind::Poisson: j["rate"] = d.rate; break;
    case Kind::Uniform: break;
    case Kind::Fixed: j["t"] = d.clip_min; return;
    }
    j["clip_min"] = d.clip_min;
    j["clip_max"] = d.clip_max;
}

void from_json(const nlohmann::json& j, LoopDistribution& d) {
    if (!j.is_object() || !j.contains("kind")) throw ValidationError("loop_dist: missing 'kind'");
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "Fixed") {
        require_known_keys(j, "loop_dist", {"kind", "t"});
        if (!j.contains("t")) throw ValidationError("loop_dist: Fixed needs 't'");
        d = LoopDistribution::fixed(j.at("t").get<std::size_t>());
    } else if (kind == "LogNormal") {
        require_known_keys(j, "loop_dist", {"kind", "mu", "sigma", "clip_min", "clip_max"});
        d = LoopDistribution::log_normal(j.at("mu").get<double>(), j.at("sigma").get<double>(),
                                         j.at("clip_min").get<std::size_t>(), j.at("clip_max").get<std::size_t>());
    } else if (kind == "Poisson") {
        require_known_keys(j, "loop_dist", {"kind", "rate", "clip_min", "clip_max"});
        d = LoopDistribution::poisson(j.at("rate").get<double>(), j.at("clip_min").get<std::size_t>(),
                                      j.at("clip_max").get<std::size_t>());
    } else if (kind == "Uniform") {
        require_known_keys(j, "loop_dist", {"kind", "clip_min", "clip_max"});
        d = LoopDistribution::uniform(j.at("clip_min").get<std::size_t>(), j.at("clip_max").get<std::size_t>());
    } else {
        throw ValidationError("loop_dist: unknown kind '" + kind + "'");
    }
    d.validate();
}

std::string describe(const LoopDistribution& d) {
    const std::string range = "[" + std::to_string(d.clip_min) + ", " + std::to_string(d.clip_max) + "]";
    char buf[96];
    switch (d.kind) {
    case Kind::LogNormal: std::snprintf(buf, sizeof buf, "LogNormal(mu=%g, sigma=%g) on ", d.mu, d.sigma); break;
    case Kind::Poisson: std::snprintf(buf, sizeof buf, "Poisson(%g) on ", d.rate); break;
    case Kind::Uniform: std::snprintf(buf, sizeof buf, "Uniform on "); break;
    case Kind::Fixed: return "Fixed(" + std::to_string(d.clip_min) + ")";
    }
    return buf + range;
}

std::size_t clip_loop_depth(const LoopDistribution& d, double raw) {
    if (!(raw >= double(d.clip_min))) return d.clip_min; // also catches NaN
    if (raw >= double(d.clip_max)) return d.clip_max;
    return std::size_t(raw);
}

std::size_t sample_loop_depth(const LoopDistribution& d, std::mt19937_64& rng) {
    auto clip = [&](double x) { return clip_loop_depth(d, x); };
    switch (d.kind) {
    case Kind::LogNormal: {
        std::normal_distribution<double> n(d.mu, d.sigma);
        return clip(std::round(std::exp(n(rng))));
    }
    case Kind::Poisson: {
        std::poisson_distribution<long long> p(d.rate);
        return clip(double(p(rng)));
    }
    case Kind::Uniform: {
        std::uniform_int_distribution<std::size_t> u(d.clip_min, d.clip_max);
        return u(rng);
    }
    case Kind::Fixed: return d.clip_min;
    }
    return d.clip_min;
}

std::vector<NamedDistribution> sandwich_study_distributions() {
    return {{"lognormal-set1", LoopDistribution::log_normal(2.62, 0.60, 1, 40)},
            {"lognormal-set2", LoopDistribution::log_normal(2.00, 0.70, 1, 100)},
            {"poisson-set1", LoopDistribution::poisson(5, 1, 30)},
            {"poisson-set2", LoopDistribution::poisson(10, 1, 30)},
            {"uniform-set1", LoopDistribution::uniform(1, 10)},
            {"uniform-set2", LoopDistribution::uniform(1, 40)}};
}

std::vector<NamedDistribution> pre_post_study_distributions() {
    return {{"lognormal-set1", LoopDistribution::log_normal(2.62, 0.60, 1, 40)},
            {"lognormal-set2", LoopDistribution::log_normal(3.2, 0.45, 1, 80)},
            {"poisson-set1", LoopDistribution::poisson(5, 1, 30)},
            {"poisson-set2", LoopDistribution::poisson(10, 1, 30)},
            {"uniform-set1", LoopDistribution::uniform(1, 10)},
            {"uniform-set2", LoopDistribution::uniform(1, 30)}};
}

void TrainConfig::validate() const {
    if (!(lambda_weight >= 0 && lambda_weight <= 1)) throw ValidationError("train.lambda_weight must lie in [0, 1]");
    if (power_steps < 1) throw ValidationError("train.power_steps must be at least 1");
    loop_dist.validate();
    if (!(l2_consistency_weight >= 0)) throw ValidationError("train.l2_consistency_weight must be nonnegative");
    if (!(learning_rate > 0)) throw ValidationError("train.learning_rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("train.beta1/beta2 must lie in [0, 1)");
    if (!(eps_opt > 0)) throw ValidationError("train.eps_opt must be positive");
    if (!(weight_decay >= 0)) throw ValidationError("train.weight_decay must be nonnegative");
    if (!(grad_clip >= 0)) throw ValidationError("train.grad_clip must be nonnegative");
    if (batch_size < 1) throw ValidationError("train.batch_size must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lambda_weight", c.lambda_weight},
         {"objective_form", c.objective_form == ObjectiveForm::Convex ? "convex" : "additive"},
         {"power_steps", c.power_steps},
         {"loop_dist", c.loop_dist},
         {"l2_consistency_weight", c.l2_consistency_weight},
         {"learning_rate", c.learning_rate},
         {"schedule", c.schedule == Schedule::Cosine ? "cosine" : "constant"},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps_opt", c.eps_opt},
         {"weight_decay", c.weight_decay},
         {"grad_clip", c.grad_clip},
         {"batch_size", c.batch_size},
         {"steps", c.steps},
         {"detach_direction", c.detach_direction},
         {"loss_mask", arith::to_string(c.loss_mask)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    require_known_keys(j, "train",
                       {"lambda_weight", "objective_form", "power_steps", "loop_dist", "l2_consistency_weight",
                        "learning_rate", "schedule", "beta1", "beta2", "eps_opt", "weight_decay", "grad_clip",
                        "batch_size", "steps", "detach_direction", "loss_mask"});
    read_optional(j, "lambda_weight", c.lambda_weight);
    std::string s;
    if (j.contains("objective_form")) {
        read_optional(j, "objective_form", s);
        if (s == "convex") c.objective_form = ObjectiveForm::Convex;
        else if (s == "additive") c.objective_form = ObjectiveForm::Additive;
        else throw ValidationError("train.objective_form must be convex or additive, got '" + s + "'");
    }
    read_optional(j, "power_steps", c.power_steps);
    if (j.contains("loop_dist")) c.loop_dist = j.at("loop_dist").get<LoopDistribution>();
    read_optional(j, "l2_consistency_weight", c.l2_consistency_weight);
    read_optional(j, "learning_rate", c.learning_rate);
    if (j.contains("schedule")) {
        read_optional(j, "schedule", s);
        if (s == "cosine") c.schedule = Schedule::Cosine;
        else if (s == "constant") c.schedule = Schedule::Constant;
        else throw ValidationError("train.schedule must be cosine or constant, got '" + s + "'");
    }
    read_optional(j, "beta1", c.beta1);
    read_optional(j, "beta2", c.beta2);
    read_optional(j, "eps_opt", c.eps_opt);
    read_optional(j, "weight_decay", c.weight_decay);
    read_optional(j, "grad_clip", c.grad_clip);
    read_optional(j, "batch_size", c.batch_size);
    read_optional(j, "steps", c.steps);
    read_optional(j, "detach_direction", c.detach_direction);
    if (j.contains("loss_mask")) {
        read_optional(j, "loss_mask", s);
        c.loss_mask = arith::parse_loss_mask(s);
    }
}

nlohmann::json to_json(const StepMetrics& m) {
    nlohmann::json j{{"step", m.step},
                     {"sampled_t", m.sampled_t},
                     {"sft_loss", m.sft_loss},
                     {"jsrr_loss", m.jsrr_loss},
                     {"l2_loss", m.l2_loss},
                     {"total_loss", m.total_loss},
                     {"gradient_norm", m.gradient_norm},
                     {"learning_rate", m.learning_rate}};
    j["rho_probe"] = m.rho_probe ? nlohmann::json(*m.rho_probe) : nlohmann::json();
    return j;
}

template <std::floating_point Real>
ad::Var<Real> sft_loss(const ad::Var<Real>& logits, const SequenceBatch& batch) {
    if (logits.rows() != batch.targets.size())
        throw ShapeError("sft_loss: logits " + ad::shape_string(logits.shape()) + " for " +
                         std::to_string(batch.targets.size()) + " targets");
    if (std::none_of(batch.loss_mask.begin(), batch.loss_mask.end(), [](double w) { return w != 0; }))
        throw ContractError("sft_loss: the loss mask selects no positions");
    std::vector<Real> w(batch.loss_mask.begin(), batch.loss_mask.end());
    const auto nll = ad::cross_entropy(logits, std::span<const int>(batch.targets), std::span<const Real>(w));
    return ad::scale(nll, Real(1) / Real(batch.batch()));
}

namespace {

template <std::floating_point Real>
ad::Var<Real> row_mask(ad::Graph<Real>& g, const SequenceBatch& batch) {
    return g.constant({batch.real_rows.size(), 1}, std::vector<Real>(batch.real_rows.begin(), batch.real_rows.end()));
}

// Per-sample Euclidean norms of a masked [rows, d] tensor.
template <std::floating_point Real>
std::vector<double> sample_norms(const ad::Tensor<Real>& x, std::size_t batch) {
    const std::size_t per = x.numel() / batch;
    std::vector<double> out(batch, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < per; ++i) out[s] += double(x.data[s * per + i]) * double(x.data[s * per + i]);
        out[s] = std::sqrt(out[s]);
    }
    return out;
}

template <std::floating_point Real>
ad::Tensor<Real> normalize_samples(ad::Tensor<Real> x, std::size_t batch) {
    const auto norms = sample_norms(x, batch);
    const std::size_t per = x.numel() / batch;
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < per; ++i) x.data[s * per + i] = Real(double(x.data[s * per + i]) / (norms[s] + 1e-12));
    return x;
}

} // namespace

template <std::floating_point Real>
ad::Var<Real> l2_consistency_loss(const std::vector<ad::Var<Real>>& states, const SequenceBatch& batch) {
    if (states.size() < 3)
        throw ContractError("l2_consistency_loss needs t >= 2 (got " + std::to_string(states.size()) + " states)");
    auto& g = states[0].graph();
    const auto mask = row_mask(g, batch);
    ad::Var<Real> total;
    for (std::size_t k = 0; k + 1 < states.size(); ++k) {
        auto term = ad::squared_norm(ad::mul_col(ad::sub(states[k + 1], states[k]), mask));
        total = total.valid() ? ad::add(total, term) : term;
    }
    return ad::scale(total, Real(1) / Real((states.size() - 1) * batch.batch()));
}

template <std::floating_point Real>
JsrrResult<Real> jsrr_loss(const ad::StateMap<Real>& fn, const ad::Var<Real>& h_t, const SequenceBatch& batch,
                           std::size_t k, std::mt19937_64& rng, bool detach_direction) {
    if (k < 1) throw ContractError("jsrr_loss: K must be at least 1");
    auto& g = h_t.graph();
    const std::size_t B = batch.batch();
    const auto mask = row_mask(g, batch);

    std::normal_distribution<double> normal(0.0, 1.0);
    ad::Tensor<Real> v0 = ad::Tensor<Real>::zeros(h_t.shape());
    const std::size_t d = h_t.cols();
    for (std::size_t r = 0; r < h_t.rows(); ++r)
        if (batch.real_rows[r] != 0)
            for (std::size_t c = 0; c < d; ++c) v0.data[r * d + c] = Real(normal(rng));
    ad::Var<Real> v = g.constant(normalize_samples(std::move(v0), B));

    ad::Var<Real> j;
    for (std::size_t step = 0; step < k; ++step) {
        j = ad::mul_col(*ad::jvp_forward(fn, h_t, v).tangent, mask);
        if (step + 1 == k) break;
        if (detach_direction) {
            v = g.constant(normalize_samples(j.value(), B));
        } else {
            auto norms = ad::sqrt(ad::segment_sum(ad::mul(j, j), B));
            v = ad::scale_segments(j, ad::reciprocal(ad::add_scalar(norms, Real(1e-12))));
        }
    }
    JsrrResult<Real> out;
    out.loss = ad::scale(ad::squared_norm(j), Real(1) / Real(B));
    for (double n : sample_norms(j.value(), B)) out.mean_rho += n / double(B);
    return out;
}

double learning_rate_at(const TrainConfig& c, std::size_t step) {
    if (c.schedule == Schedule::Constant || c.steps == 0) return c.learning_rate;
    const double frac = std::min(1.0, double(step) / double(c.steps));
    return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <std::floating_point Real>
void optimizer_update(AdamState<Real>& state, model::Parameters<Real>& params, const GradMap<Real>& grads,
                      std::size_t step, const TrainConfig& c) {
    const double lr = learning_rate_at(c, step);
    const double bc1 = 1.0 - std::pow(c.beta1, double(step + 1));
    const double bc2 = 1.0 - std::pow(c.beta2, double(step + 1));
    for (auto& [name, p] : params.tensors) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.shape != p.shape) m = ad::Tensor<Real>::zeros(p.shape);
        if (v.shape != p.shape) v = ad::Tensor<Real>::zeros(p.shape);
        auto git = grads.find(name);
        const ad::Tensor<Real>* g = git == grads.end() ? nullptr : &git->second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g ? double(g->data[i]) : 0.0;
            const double mi = c.beta1 * double(m.data[i]) + (1 - c.beta1) * gi;
            const double vi = c.beta2 * double(v.data[i]) + (1 - c.beta2) * gi * gi;
            m.data[i] = Real(mi);
            v.data[i] = Real(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.eps_opt) + c.weight_decay * double(p.data[i]);
            p.data[i] = Real(double(p.data[i]) - lr * update);
        }
    }
}

template <std::floating_point Real>
double clip_gradients(GradMap<Real>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [_, g] : grads)
        for (Real x : g.data) sq += double(x) * double(x);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [_, g] : grads)
            for (auto& x : g.data) x = Real(double(x) * s);
    }
    return norm;
}

namespace {

template <std::floating_point Real>
void apply_update(model::LoopedModel<Real>& model, AdamState<Real>& opt, GradMap<Real>& grads, const TrainConfig& c,
                  std::size_t step, StepMetrics& m) {
    m.gradient_norm = clip_gradients(grads, c.grad_clip);
    if (!std::isfinite(m.gradient_norm))
        throw NumericError("step " + std::to_string(step) + ": non-finite gradient norm");
    m.learning_rate = learning_rate_at(c, step);
    optimizer_update(opt, model.params, grads, step, c);
}

} // namespace

template <std::floating_point Real>
StepMetrics stars_step(model::LoopedModel<Real>& model, AdamState<Real>& opt, const SequenceBatch& batch,
                       const TrainConfig& c, std::size_t step) {
    StepMetrics m;
    m.step = step;
    auto loop_rng = make_rng(c.seed, Stream::LoopSampling, step);
    m.sampled_t = sample_loop_depth(c.loop_dist, loop_rng);

    GradMap<Real> grads;
    try {
        ad::Graph<Real> g;
        const bool use_l2 = c.l2_consistency_weight > 0 && m.sampled_t >= 2;
        auto pass = model::forward_graph(g, model, batch.tokens, m.sampled_t, use_l2);
        auto sft = sft_loss(pass.logits, batch);
        m.sft_loss = double(sft.item());
        ad::Var<Real> total = sft;
        const Real lambda = Real(c.lambda_weight);
        if (c.lambda_weight > 0) {
            auto dir_rng = make_rng(c.seed, Stream::JsrrDirection, step);
            auto jr = jsrr_loss(model::block_map(model, batch.tokens.layout), pass.final_state, batch, c.power_steps,
                                dir_rng, c.detach_direction);
            m.jsrr_loss = double(jr.loss.item());
            m.rho_probe = jr.mean_rho;
            const auto sft_part = c.objective_form == ObjectiveForm::Convex ? ad::scale(sft, Real(1) - lambda) : sft;
            total = ad::add(sft_part, ad::scale(jr.loss, lambda));
        }
        if (use_l2) {
            auto l2 = l2_consistency_loss(pass.states, batch);
            m.l2_loss = double(l2.item());
            total = ad::add(total, ad::scale(l2, Real(c.l2_consistency_weight)));
        }
        m.total_loss = double(total.item());
        if (!std::isfinite(m.total_loss)) throw NumericError("non-finite total loss");
        grads = g.backward(total);
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    apply_update(model, opt, grads, c, step, m);
    return m;
}

template <std::floating_point Real>
StepMetrics sft_step(model::LoopedModel<Real>& model, AdamState<Real>& opt, const SequenceBatch& batch,
                     std::size_t t, const TrainConfig& c, std::size_t step) {
    StepMetrics m;
    m.step = step;
    m.sampled_t = t;
    ad::Graph<Real> g;
    auto logits = model::forward_graph(g, model, batch.tokens, t, false).logits;
    auto loss = sft_loss(logits, batch);
    m.sft_loss = m.total_loss = double(loss.item());
    auto grads = g.backward(loss);
    apply_update(model, opt, grads, c, step, m);
    return m;
}

std::vector<std::size_t> batch_indices(std::size_t n_samples, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t step) {
    if (n_samples == 0) throw ContractError("batch_indices: empty dataset");
    const std::size_t bs = std::min(batch_size, n_samples);
    const std::size_t per_epoch = n_samples / bs;
    const std::size_t epoch = step / per_epoch, slot = step % per_epoch;
    std::vector<std::size_t> perm(n_samples);
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    auto rng = make_rng(seed, Stream::BatchOrder, epoch);
    std::shuffle(perm.begin(), perm.end(), rng);
    return std::vector<std::size_t>(perm.begin() + std::ptrdiff_t(slot * bs), perm.begin() + std::ptrdiff_t((slot + 1) * bs));
}

#define LOOPLAB_INSTANTIATE_TRAINER(R)                                                                            \
    template ad::Var<R> sft_loss<R>(const ad::Var<R>&, const SequenceBatch&);                                     \
    template ad::Var<R> l2_consistency_loss<R>(const std::vector<ad::Var<R>>&, const SequenceBatch&);             \
    template JsrrResult<R> jsrr_loss<R>(const ad::StateMap<R>&, const ad::Var<R>&, const SequenceBatch&,          \
                                        std::size_t, std::mt19937_64&, bool);                                     \
    template void optimizer_update<R>(AdamState<R>&, model::Parameters<R>&, const GradMap<R>&, std::size_t,       \
                                      const TrainConfig&);                                                        \
    template double clip_gradients<R>(GradMap<R>&, double);                                                       \
    template StepMetrics stars_step<R>(model::LoopedModel<R>&, AdamState<R>&, const SequenceBatch&,               \
                                       const TrainConfig&, std::size_t);                                          \
    template StepMetrics sft_step<R>(model::LoopedModel<R>&, AdamState<R>&, const SequenceBatch&, std::size_t,   \
                                     const TrainConfig&, std::size_t);

LOOPLAB_INSTANTIATE_TRAINER(float)
LOOPLAB_INSTANTIATE_TRAINER(double)

} // namespace looplab::trainer
