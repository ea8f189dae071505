#pragma once

#include <cstdint>
#include <random>

namespace looplab {

// Named substreams of the global seed. Every consumer derives its generator
// from (seed, stream, index), so varying one factor leaves the others alone
// and a resumed run replays the same draws.
enum class Stream : std::uint32_t {
    Data = 1,
    Init = 2,
    LoopSampling = 3,
    JsrrDirection = 4,
    BatchOrder = 5,
    EvalData = 6,
    Probe = 7,
};

inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream),
                      std::uint32_t(index), std::uint32_t(index >> 32)};
    return std::mt19937_64(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    auto rng = make_rng(seed, stream, index);
    return rng();
}

} // namespace looplab
