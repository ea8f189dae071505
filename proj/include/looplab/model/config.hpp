#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include <json.hpp>

namespace looplab::model {

enum class NormOperator { LayerNorm, RMSNorm, SimpleNorm };

// Where normalization sits around each sublayer f:
//   Pre           y = x + f(Norm(x))
//   Post          y = Norm(x + f(x))
//   PreSandwich   y = x + Norm_out(f(Norm_in(x)))
//   PostSandwich  y = Norm_out(x + f(Norm_in(x)))
// Pre/PreSandwich keep the residual stream outside the last normalization
// (internal normalization); Post/PostSandwich put it inside (external).
enum class NormPlacement { Pre, Post, PreSandwich, PostSandwich };

std::string_view to_string(NormOperator op);
std::string_view to_string(NormPlacement p);
NormOperator parse_norm_operator(std::string_view s);
NormPlacement parse_norm_placement(std::string_view s);

bool is_external_normalization(NormPlacement p);

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t n_block_layers = 1;
    NormOperator norm_operator = NormOperator::LayerNorm;
    NormPlacement norm_placement = NormPlacement::PostSandwich;
    std::size_t n_prelude_blocks = 0;
    std::size_t n_coda_blocks = 0;
    std::size_t vocab_size = 15;
    std::size_t max_seq_len = 16;
    bool tie_embeddings = false;

    // Throws ValidationError naming the offending field.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Strict: unknown keys are rejected, missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

} // namespace looplab::model
