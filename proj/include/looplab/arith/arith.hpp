#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "looplab/model/looped_model.hpp"
#include "looplab/trainer/batch.hpp"

namespace looplab::arith {

// Digits 0-9 map to ids 0-9.
inline constexpr int kPlus = 10;
inline constexpr int kEquals = 11;
inline constexpr int kBos = 12;
inline constexpr int kEos = 13;
inline constexpr int kPad = 14;
inline constexpr std::size_t kVocabSize = 15;

// Special tokens render as <bos>, <eos>, <pad>.
std::string token_text(int id);
std::string decode(std::span<const int> ids);
// Inverse of decode. Throws VocabularyError on anything else.
std::vector<int> encode(std::string_view text);

struct DatasetSpec {
    std::size_t digits_a = 2;
    std::size_t digits_b = 2;
    std::size_t n_samples = 10000;
    std::uint64_t seed = 0;
    bool dedupe = false;

    void validate() const;
    // Distinct (A, B) operand pairs with nonzero leading digits.
    double task_space_size() const;
    // BOS + operands + '+' + '=' + longest sum + EOS
    std::size_t max_sequence_length() const;
    bool operator==(const DatasetSpec&) const = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Sample {
    std::string text; // "A+B=C"
    std::vector<int> token_ids; // <bos> A + B = C <eos>
    std::size_t answer_begin = 0; // [answer_begin, answer_end) covers the digits of C
    std::size_t answer_end = 0;

    std::size_t prompt_length() const { return answer_begin; }
    std::string answer() const;
};

// Parses "A+B=C" and checks that C is the sum.
Sample make_sample(std::string_view text);
Sample make_sample(std::uint64_t a, std::uint64_t b);

std::vector<Sample> generate_dataset(const DatasetSpec& spec);

// One sample per line plus a sidecar "<path>.json" descriptor.
void write_dataset(const std::filesystem::path& path, const DatasetSpec& spec, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& path, DatasetSpec* spec = nullptr);
std::filesystem::path descriptor_path(const std::filesystem::path& dataset);

enum class LossMask { AllNextTokens, AnswerOnly };
std::string_view to_string(LossMask m);
LossMask parse_loss_mask(std::string_view s);

// Right-pads with <pad>. AllNextTokens scores every real position whose next
// token is real; AnswerOnly scores the positions that predict C and <eos>.
trainer::SequenceBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                                  LossMask mask);
trainer::SequenceBatch make_batch(std::span<const Sample> samples, LossMask mask);

enum class DecodeMode { Greedy, TeacherForced };
std::string_view to_string(DecodeMode m);
DecodeMode parse_decode_mode(std::string_view s);

// Literal autoregressive greedy decoding from a prompt; stops after <eos> or
// max_new tokens. Ties go to the lowest id.
template <std::floating_point Real>
std::vector<int> greedy_decode(const model::LoopedModel<Real>& model, std::span<const int> prompt, std::size_t t,
                               std::size_t max_new);

struct EvalOptions {
    DecodeMode mode = DecodeMode::Greedy;
    std::size_t batch_size = 256;
};

// Greedy: fraction of samples whose decoded answer equals C. Because the
// model is causal, greedy decoding reproduces the reference answer exactly
// when the argmax at every answer position of the teacher-forced sequence
// (digits of C, then <eos>) is the reference token, so one forward pass per
// sample decides it. TeacherForced: mean per-token argmax accuracy over the
// same positions.
template <std::floating_point Real>
double exact_match_eval(const model::LoopedModel<Real>& model, std::span<const Sample> samples, std::size_t t,
                        const EvalOptions& opt = {});

// Score of one sample from teacher-forced logits whose rows for that sample
// start at row `base`: 0 or 1 for Greedy, the hit fraction for TeacherForced.
template <std::floating_point Real>
double score_sample(const ad::Tensor<Real>& logits, std::size_t base, const Sample& s, DecodeMode mode);

struct SweepOptions {
    EvalOptions eval;
    bool probe = true;
    std::size_t probe_k = 1;
    std::size_t probe_limit = 64; // samples probed per t
    std::uint64_t seed = 0;
};

struct SweepPoint {
    std::size_t t = 0;
    double exact_match_accuracy = 0;
    double mean_state_norm = 0;       // mean per-token ||h^(t)||
    double mean_successive_delta = 0; // mean per-sample ||h^(t) - h^(t-1)||
    double mean_rho_estimate = 0;     // NaN when probing is off
};

// One pass to max(t_values); results in the order given.
template <std::floating_point Real>
std::vector<SweepPoint> eval_sweep(const model::LoopedModel<Real>& model, std::span<const Sample> samples,
                                   std::span<const std::size_t> t_values, const SweepOptions& opt = {});

inline constexpr const char* kSweepCsvHeader =
    "t,exact_match_accuracy,mean_state_norm,mean_successive_delta,mean_rho_estimate";
std::string sweep_csv(const std::vector<SweepPoint>& points);

} // namespace looplab::arith
