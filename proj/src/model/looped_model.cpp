#include "looplab/model/looped_model.hpp"

#include <cmath>
#include <random>

#include "looplab/errors.hpp"

namespace looplab::model {

namespace {

void add_norm_specs(std::map<std::string, ParamSpec>& out, const std::string& prefix, NormOperator op,
                    std::size_t d) {
    if (op == NormOperator::SimpleNorm) return;
    out[prefix + ".gain"] = {{d}, ParamInit::Ones};
    if (op == NormOperator::LayerNorm) out[prefix + ".bias"] = {{d}, ParamInit::Zeros};
}

bool has_norm_in(NormPlacement p) { return p != NormPlacement::Post; }
bool has_norm_out(NormPlacement p) { return p != NormPlacement::Pre; }

void add_unit_specs(std::map<std::string, ParamSpec>& out, const std::string& prefix, const ModelConfig& c) {
    const std::size_t d = c.d_model;
    for (std::size_t l = 0; l < c.n_block_layers; ++l) {
        const std::string layer = prefix + ".layer" + std::to_string(l);
        for (const char* sub : {".attn", ".ffn"}) {
            const std::string s = layer + sub;
            if (has_norm_in(c.norm_placement)) add_norm_specs(out, s + ".norm_in", c.norm_operator, d);
            if (has_norm_out(c.norm_placement)) add_norm_specs(out, s + ".norm_out", c.norm_operator, d);
        }
        const std::string a = layer + ".attn.";
        for (const char* w : {"wq", "wk", "wv"}) out[a + w] = {{d, d}, ParamInit::Normal};
        for (const char* b : {"bq", "bk", "bv", "bo"}) out[a + b] = {{d}, ParamInit::Zeros};
        out[a + "wo"] = {{d, d}, ParamInit::ResidualNormal};
        const std::string f = layer + ".ffn.";
        out[f + "w1"] = {{d, c.d_ff}, ParamInit::Normal};
        out[f + "b1"] = {{c.d_ff}, ParamInit::Zeros};
        out[f + "w2"] = {{c.d_ff, d}, ParamInit::ResidualNormal};
        out[f + "b2"] = {{d}, ParamInit::Zeros};
    }
}

template <std::floating_point Real>
DualVar<Real> param(const LoopedModel<Real>& m, ad::Graph<Real>& g, const std::string& name) {
    return DualVar<Real>(g.parameter(name, m.params.at(name)));
}

template <std::floating_point Real>
DualVar<Real> apply_norm(const LoopedModel<Real>& m, const DualVar<Real>& x, const std::string& prefix) {
    auto& g = x.primal.graph();
    switch (m.config.norm_operator) {
    case NormOperator::LayerNorm:
        return ad::dual::layer_norm(x, param(m, g, prefix + ".gain"), param(m, g, prefix + ".bias"));
    case NormOperator::RMSNorm:
        return ad::dual::rms_norm(x, param(m, g, prefix + ".gain"));
    case NormOperator::SimpleNorm:
        return ad::dual::simple_norm(x);
    }
    throw ContractError("unknown norm operator");
}

template <std::floating_point Real>
DualVar<Real> linear(const LoopedModel<Real>& m, const DualVar<Real>& x, const std::string& w,
                     const std::string& b) {
    auto& g = x.primal.graph();
    return ad::dual::add_row(ad::dual::matmul(x, param(m, g, w)), param(m, g, b));
}

template <std::floating_point Real>
DualVar<Real> attention(const LoopedModel<Real>& m, const DualVar<Real>& x, const std::string& p,
                        SeqLayout lay) {
    namespace d = ad::dual;
    const std::size_t H = m.config.n_heads;
    const std::size_t dh = m.config.d_model / H;
    auto q = d::split_heads(linear(m, x, p + "wq", p + "bq"), lay.batch, lay.seq, H);
    auto k = d::split_heads(linear(m, x, p + "wk", p + "bk"), lay.batch, lay.seq, H);
    auto v = d::split_heads(linear(m, x, p + "wv", p + "bv"), lay.batch, lay.seq, H);
    auto scores = d::scale(d::batched_matmul(q, k, lay.batch * H, true), Real(1 / std::sqrt(double(dh))));
    auto probs = d::causal_softmax(scores, lay.seq);
    auto ctx = d::merge_heads(d::batched_matmul(probs, v, lay.batch * H, false), lay.batch, lay.seq, H);
    return linear(m, ctx, p + "wo", p + "bo");
}

template <std::floating_point Real>
DualVar<Real> feed_forward(const LoopedModel<Real>& m, const DualVar<Real>& x, const std::string& p) {
    return linear(m, ad::dual::gelu(linear(m, x, p + "w1", p + "b1")), p + "w2", p + "b2");
}

template <std::floating_point Real, class F>
DualVar<Real> wrap_sublayer(const LoopedModel<Real>& m, const DualVar<Real>& x, const std::string& s, F&& f) {
    namespace d = ad::dual;
    switch (m.config.norm_placement) {
    case NormPlacement::Pre:
        return d::add(x, f(apply_norm(m, x, s + ".norm_in")));
    case NormPlacement::Post:
        return apply_norm(m, d::add(x, f(x)), s + ".norm_out");
    case NormPlacement::PreSandwich:
        return d::add(x, apply_norm(m, f(apply_norm(m, x, s + ".norm_in")), s + ".norm_out"));
    case NormPlacement::PostSandwich:
        return apply_norm(m, d::add(x, f(apply_norm(m, x, s + ".norm_in"))), s + ".norm_out");
    }
    throw ContractError("unknown norm placement");
}

template <std::floating_point Real>
DualVar<Real> unit(const LoopedModel<Real>& m, DualVar<Real> h, const std::string& prefix, SeqLayout lay) {
    if (h.primal.rows() != lay.rows() || h.primal.cols() != m.config.d_model) {
        throw ShapeError("block '" + prefix + "': state shape " + ad::shape_string(h.shape()) +
                         " does not match layout [" + std::to_string(lay.rows()) + ", " +
                         std::to_string(m.config.d_model) + "]");
    }
    if (lay.seq > m.config.max_seq_len) {
        throw ContractError("sequence length " + std::to_string(lay.seq) + " exceeds max_seq_len " +
                            std::to_string(m.config.max_seq_len));
    }
    for (std::size_t l = 0; l < m.config.n_block_layers; ++l) {
        const std::string layer = prefix + ".layer" + std::to_string(l);
        h = wrap_sublayer(m, h, layer + ".attn",
                          [&](const DualVar<Real>& x) { return attention(m, x, layer + ".attn.", lay); });
        h = wrap_sublayer(m, h, layer + ".ffn",
                          [&](const DualVar<Real>& x) { return feed_forward(m, x, layer + ".ffn."); });
    }
    return h;
}

} // namespace

std::map<std::string, ParamSpec> parameter_specs(const ModelConfig& c) {
    c.validate();
    std::map<std::string, ParamSpec> out;
    out["embed.token"] = {{c.vocab_size, c.d_model}, ParamInit::Normal};
    out["embed.pos"] = {{c.max_seq_len, c.d_model}, ParamInit::Normal};
    for (std::size_t k = 0; k < c.n_prelude_blocks; ++k) add_unit_specs(out, "prelude" + std::to_string(k), c);
    add_unit_specs(out, "recurrent", c);
    for (std::size_t k = 0; k < c.n_coda_blocks; ++k) add_unit_specs(out, "coda" + std::to_string(k), c);
    add_norm_specs(out, "head.norm", c.norm_operator, c.d_model);
    if (!c.tie_embeddings) out["head.weight"] = {{c.d_model, c.vocab_size}, ParamInit::Normal};
    return out;
}

template <std::floating_point Real>
const Tensor<Real>& Parameters<Real>::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
}

template <std::floating_point Real>
Tensor<Real>& Parameters<Real>::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
}

template <std::floating_point Real>
std::size_t Parameters<Real>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.numel();
    return n;
}

template <std::floating_point Real>
Parameters<Real> init_parameters(const ModelConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, kInitStd);
    const double residual = 1.0 / std::sqrt(2.0 * double(config.n_block_layers));
    Parameters<Real> p;
    for (const auto& [name, spec] : parameter_specs(config)) {
        Tensor<Real> t = Tensor<Real>::zeros(spec.shape);
        for (auto& x : t.data) {
            switch (spec.init) {
            case ParamInit::Normal: x = Real(normal(rng)); break;
            case ParamInit::ResidualNormal: x = Real(normal(rng) * residual); break;
            case ParamInit::Ones: x = Real(1); break;
            case ParamInit::Zeros: break;
            }
        }
        p.tensors.emplace(name, std::move(t));
    }
    return p;
}

TokenBatch single_sequence(std::span<const int> tokens) {
    return TokenBatch{SeqLayout{1, tokens.size()}, std::vector<int>(tokens.begin(), tokens.end())};
}

template <std::floating_point Real>
DualVar<Real> recurrent_block(const LoopedModel<Real>& model, const DualVar<Real>& h, SeqLayout layout) {
    return unit(model, h, "recurrent", layout);
}

template <std::floating_point Real>
ad::StateMap<Real> block_map(const LoopedModel<Real>& model, SeqLayout layout) {
    return [&model, layout](const DualVar<Real>& h) { return recurrent_block(model, h, layout); };
}

template <std::floating_point Real>
Var<Real> prelude(ad::Graph<Real>& g, const LoopedModel<Real>& model, const TokenBatch& tokens) {
    const auto& c = model.config;
    const SeqLayout lay = tokens.layout;
    if (tokens.ids.size() != lay.rows())
        throw ShapeError("token batch holds " + std::to_string(tokens.ids.size()) + " ids for layout " +
                         std::to_string(lay.batch) + "x" + std::to_string(lay.seq));
    if (lay.seq > c.max_seq_len)
        throw ContractError("sequence length " + std::to_string(lay.seq) + " exceeds max_seq_len " +
                            std::to_string(c.max_seq_len));
    std::vector<int> positions(lay.rows());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = int(i % lay.seq);
    auto tok = ad::embedding(g.parameter("embed.token", model.params.at("embed.token")), std::span<const int>(tokens.ids));
    auto pos = ad::embedding(g.parameter("embed.pos", model.params.at("embed.pos")), std::span<const int>(positions));
    DualVar<Real> h(ad::add(tok, pos));
    for (std::size_t k = 0; k < c.n_prelude_blocks; ++k) h = unit(model, h, "prelude" + std::to_string(k), lay);
    return h.primal;
}

template <std::floating_point Real>
Var<Real> readout(const LoopedModel<Real>& model, const Var<Real>& h, SeqLayout layout) {
    const auto& c = model.config;
    auto& g = h.graph();
    DualVar<Real> x(h);
    for (std::size_t k = 0; k < c.n_coda_blocks; ++k) x = unit(model, x, "coda" + std::to_string(k), layout);
    Var<Real> normed = apply_norm(model, x, "head.norm").primal;
    if (c.tie_embeddings)
        return ad::matmul(normed, ad::transpose(g.parameter("embed.token", model.params.at("embed.token"))));
    return ad::matmul(normed, g.parameter("head.weight", model.params.at("head.weight")));
}

template <std::floating_point Real>
ForwardPass<Real> forward_graph(ad::Graph<Real>& g, const LoopedModel<Real>& model, const TokenBatch& tokens,
                                std::size_t t, bool keep_states) {
    ForwardPass<Real> out;
    Var<Real> h = prelude(g, model, tokens);
    if (keep_states) out.states.push_back(h);
    for (std::size_t k = 0; k < t; ++k) {
        h = recurrent_block(model, DualVar<Real>(h), tokens.layout).primal;
        if (keep_states) out.states.push_back(h);
    }
    out.final_state = h;
    out.logits = readout(model, h, tokens.layout);
    return out;
}

template <std::floating_point Real>
ForwardOutput<Real> forward(const LoopedModel<Real>& model, std::span<const int> tokens, std::size_t t,
                            bool record) {
    ad::Graph<Real> g(false);
    const TokenBatch batch = single_sequence(tokens);
    auto pass = forward_graph(g, model, batch, t, record);
    ForwardOutput<Real> out;
    out.logits = pass.logits.value();
    if (record) {
        Trajectory<Real> traj;
        traj.input_tokens = batch.ids;
        traj.states.reserve(pass.states.size());
        for (const auto& s : pass.states) traj.states.push_back(s.value());
        out.trajectory = std::move(traj);
    }
    return out;
}

template <std::floating_point Real>
Tensor<Real> apply_block(const LoopedModel<Real>& model, const Tensor<Real>& h) {
    ad::Graph<Real> g(false);
    SeqLayout lay{1, h.rows()};
    return recurrent_block(model, DualVar<Real>(g.constant(h)), lay).primal.value();
}

#define LOOPLAB_INSTANTIATE_MODEL(R)                                                                        \
    template struct Parameters<R>;                                                                          \
    template Parameters<R> init_parameters<R>(const ModelConfig&, std::uint64_t);                           \
    template DualVar<R> recurrent_block<R>(const LoopedModel<R>&, const DualVar<R>&, SeqLayout);            \
    template ad::StateMap<R> block_map<R>(const LoopedModel<R>&, SeqLayout);                                \
    template Var<R> prelude<R>(ad::Graph<R>&, const LoopedModel<R>&, const TokenBatch&);                    \
    template Var<R> readout<R>(const LoopedModel<R>&, const Var<R>&, SeqLayout);                            \
    template ForwardPass<R> forward_graph<R>(ad::Graph<R>&, const LoopedModel<R>&, const TokenBatch&,       \
                                             std::size_t, bool);                                            \
    template ForwardOutput<R> forward<R>(const LoopedModel<R>&, std::span<const int>, std::size_t, bool);   \
    template Tensor<R> apply_block<R>(const LoopedModel<R>&, const Tensor<R>&);

LOOPLAB_INSTANTIATE_MODEL(float)
LOOPLAB_INSTANTIATE_MODEL(double)

} // namespace looplab::model
