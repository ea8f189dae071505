#pragma once

#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "looplab/autodiff/dual.hpp"
#include "looplab/model/config.hpp"

namespace looplab::model {

using ad::DualVar;
using ad::Shape;
using ad::Tensor;
using ad::Var;

enum class ParamInit { Normal, ResidualNormal, Ones, Zeros };

struct ParamSpec {
    Shape shape;
    ParamInit init;
};

// Every parameter the config implies, keyed by name.
std::map<std::string, ParamSpec> parameter_specs(const ModelConfig& config);

template <std::floating_point Real>
struct Parameters {
    std::map<std::string, Tensor<Real>> tensors;

    const Tensor<Real>& at(const std::string& name) const;
    Tensor<Real>& at(const std::string& name);
    std::size_t scalar_count() const;
    bool operator==(const Parameters&) const = default;
};

inline constexpr double kInitStd = 0.02;

template <std::floating_point Real>
Parameters<Real> init_parameters(const ModelConfig& config, std::uint64_t seed);

template <std::floating_point Real>
struct LoopedModel {
    ModelConfig config;
    Parameters<Real> params;
};

// `batch` equal-length sequences stacked row-wise: states are [batch*seq, d].
struct SeqLayout {
    std::size_t batch = 1;
    std::size_t seq = 0;
    std::size_t rows() const { return batch * seq; }
};

struct TokenBatch {
    SeqLayout layout;
    std::vector<int> ids; // row-major [batch][seq]
};

TokenBatch single_sequence(std::span<const int> tokens);

// One application of the shared block. Parameters are bound on the graph of
// h, so the same call works on recording, non-recording and throwaway graphs.
template <std::floating_point Real>
DualVar<Real> recurrent_block(const LoopedModel<Real>& model, const DualVar<Real>& h, SeqLayout layout);

// recurrent_block as a StateMap over states of the given layout. Keeps a
// reference to `model`.
template <std::floating_point Real>
ad::StateMap<Real> block_map(const LoopedModel<Real>& model, SeqLayout layout);

// h^(0): token + positional embeddings followed by the prelude blocks.
template <std::floating_point Real>
Var<Real> prelude(ad::Graph<Real>& g, const LoopedModel<Real>& model, const TokenBatch& tokens);

// Coda blocks then the output head; logits [rows, vocab].
template <std::floating_point Real>
Var<Real> readout(const LoopedModel<Real>& model, const Var<Real>& h, SeqLayout layout);

template <std::floating_point Real>
struct ForwardPass {
    Var<Real> logits;
    Var<Real> final_state;
    std::vector<Var<Real>> states; // h^(0)..h^(t) when kept, else empty
};

template <std::floating_point Real>
ForwardPass<Real> forward_graph(ad::Graph<Real>& g, const LoopedModel<Real>& model, const TokenBatch& tokens,
                                std::size_t t, bool keep_states);

template <std::floating_point Real>
struct Trajectory {
    std::vector<Tensor<Real>> states; // each [M, d]
    std::vector<int> input_tokens;
    std::size_t length() const { return states.size(); }
};

template <std::floating_point Real>
struct ForwardOutput {
    Tensor<Real> logits; // [M, vocab]
    std::optional<Trajectory<Real>> trajectory;
};

// Single-sequence evaluation on a non-recording graph.
template <std::floating_point Real>
ForwardOutput<Real> forward(const LoopedModel<Real>& model, std::span<const int> tokens, std::size_t t,
                            bool record);

// Re-applies the block to a recorded state on a fresh graph.
template <std::floating_point Real>
Tensor<Real> apply_block(const LoopedModel<Real>& model, const Tensor<Real>& h);

} // namespace looplab::model
