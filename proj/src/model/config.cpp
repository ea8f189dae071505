#include "looplab/model/config.hpp"

#include "looplab/errors.hpp"
#include "looplab/json_util.hpp"

namespace looplab::model {

std::string_view to_string(NormOperator op) {
    switch (op) {
    case NormOperator::LayerNorm: return "LayerNorm";
    case NormOperator::RMSNorm: return "RMSNorm";
    case NormOperator::SimpleNorm: return "SimpleNorm";
    }
    return "?";
}

std::string_view to_string(NormPlacement p) {
    switch (p) {
    case NormPlacement::Pre: return "Pre";
    case NormPlacement::Post: return "Post";
    case NormPlacement::PreSandwich: return "PreSandwich";
    case NormPlacement::PostSandwich: return "PostSandwich";
    }
    return "?";
}

NormOperator parse_norm_operator(std::string_view s) {
    for (auto op : {NormOperator::LayerNorm, NormOperator::RMSNorm, NormOperator::SimpleNorm})
        if (to_string(op) == s) return op;
    throw ValidationError("unknown norm_operator '" + std::string(s) +
                          "' (expected LayerNorm, RMSNorm or SimpleNorm)");
}

NormPlacement parse_norm_placement(std::string_view s) {
    for (auto p : {NormPlacement::Pre, NormPlacement::Post, NormPlacement::PreSandwich,
                   NormPlacement::PostSandwich})
        if (to_string(p) == s) return p;
    throw ValidationError("unknown norm_placement '" + std::string(s) +
                          "' (expected Pre, Post, PreSandwich or PostSandwich)");
}

bool is_external_normalization(NormPlacement p) {
    return p == NormPlacement::Post || p == NormPlacement::PostSandwich;
}

void ModelConfig::validate() const {
    if (d_model == 0) throw ValidationError("model.d_model must be positive");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ValidationError("model.d_model (" + std::to_string(d_model) +
                              ") must be divisible by model.n_heads (" + std::to_string(n_heads) + ")");
    if (d_ff == 0) throw ValidationError("model.d_ff must be positive");
    if (n_block_layers < 1) throw ValidationError("model.n_block_layers must be at least 1");
    if (vocab_size == 0) throw ValidationError("model.vocab_size must be positive");
    if (max_seq_len == 0) throw ValidationError("model.max_seq_len must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff},
                       {"n_block_layers", c.n_block_layers},
                       {"norm_operator", to_string(c.norm_operator)},
                       {"norm_placement", to_string(c.norm_placement)},
                       {"n_prelude_blocks", c.n_prelude_blocks},
                       {"n_coda_blocks", c.n_coda_blocks},
                       {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len},
                       {"tie_embeddings", c.tie_embeddings}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    require_known_keys(j, "model",
                       {"d_model", "n_heads", "d_ff", "n_block_layers", "norm_operator", "norm_placement",
                        "n_prelude_blocks", "n_coda_blocks", "vocab_size", "max_seq_len", "tie_embeddings"});
    read_optional(j, "d_model", c.d_model);
    read_optional(j, "n_heads", c.n_heads);
    read_optional(j, "d_ff", c.d_ff);
    read_optional(j, "n_block_layers", c.n_block_layers);
    std::string s;
    if (j.contains("norm_operator")) {
        read_optional(j, "norm_operator", s);
        c.norm_operator = parse_norm_operator(s);
    }
    if (j.contains("norm_placement")) {
        read_optional(j, "norm_placement", s);
        c.norm_placement = parse_norm_placement(s);
    }
    read_optional(j, "n_prelude_blocks", c.n_prelude_blocks);
    read_optional(j, "n_coda_blocks", c.n_coda_blocks);
    read_optional(j, "vocab_size", c.vocab_size);
    read_optional(j, "max_seq_len", c.max_seq_len);
    read_optional(j, "tie_embeddings", c.tie_embeddings);
}

} // namespace looplab::model
