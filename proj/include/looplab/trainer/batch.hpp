#pragma once

#include <vector>

#include "looplab/model/looped_model.hpp"

namespace looplab::trainer {

// Right-padded token sequences with next-token targets. Row r of the stacked
// [batch*seq] layout predicts targets[r] with weight loss_mask[r]; real_rows
// marks positions holding actual tokens (padding is 0).
struct SequenceBatch {
    model::TokenBatch tokens;
    std::vector<int> targets;
    std::vector<double> loss_mask;
    std::vector<double> real_rows;
    std::vector<std::size_t> lengths;

    std::size_t batch() const { return tokens.layout.batch; }
};

} // namespace looplab::trainer
