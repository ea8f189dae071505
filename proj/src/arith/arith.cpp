#include "looplab/arith/arith.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "looplab/dynamics/dynamics.hpp"
#include "looplab/errors.hpp"
#include "looplab/json_util.hpp"
#include "looplab/rng.hpp"

namespace looplab::arith {

std::string token_text(int id) {
    if (id >= 0 && id <= 9) return std::string(1, char('0' + id));
    switch (id) {
    case kPlus: return "+";
    case kEquals: return "=";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kPad: return "<pad>";
    }
    throw VocabularyError("token id " + std::to_string(id) + " is outside the vocabulary [0, 15)");
}

std::string decode(std::span<const int> ids) {
    std::string out;
    for (int id : ids) out += token_text(id);
    return out;
}

std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < text.size();) {
        const char c = text[i];
        if (c >= '0' && c <= '9') {
            ids.push_back(c - '0');
            ++i;
        } else if (c == '+') {
            ids.push_back(kPlus);
            ++i;
        } else if (c == '=') {
            ids.push_back(kEquals);
            ++i;
        } else if (text.substr(i, 5) == "<bos>") {
            ids.push_back(kBos);
            i += 5;
        } else if (text.substr(i, 5) == "<eos>") {
            ids.push_back(kEos);
            i += 5;
        } else if (text.substr(i, 5) == "<pad>") {
            ids.push_back(kPad);
            i += 5;
        } else {
            throw VocabularyError("cannot encode '" + std::string(text.substr(i, 5)) + "' at offset " +
                                  std::to_string(i));
        }
    }
    return ids;
}

void DatasetSpec::validate() const {
    if (digits_a < 1 || digits_b < 1) throw ValidationError("data: digit counts must be at least 1");
    if (digits_a > 18 || digits_b > 18) throw ValidationError("data: digit counts above 18 are not supported");
    if (n_samples < 1) throw ValidationError("data.n_samples must be at least 1");
}

double DatasetSpec::task_space_size() const {
    return 9.0 * std::pow(10.0, double(digits_a) - 1) * 9.0 * std::pow(10.0, double(digits_b) - 1);
}

std::size_t DatasetSpec::max_sequence_length() const {
    return 1 + digits_a + 1 + digits_b + 1 + (std::max(digits_a, digits_b) + 1) + 1;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
    j = {{"digits_a", s.digits_a},
         {"digits_b", s.digits_b},
         {"n_samples", s.n_samples},
         {"seed", s.seed},
         {"dedupe", s.dedupe}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
    require_known_keys(j, "data", {"digits_a", "digits_b", "n_samples", "seed", "dedupe"});
    read_optional(j, "digits_a", s.digits_a);
    read_optional(j, "digits_b", s.digits_b);
    read_optional(j, "n_samples", s.n_samples);
    read_optional(j, "seed", s.seed);
    read_optional(j, "dedupe", s.dedupe);
}

std::string Sample::answer() const {
    std::string out;
    for (std::size_t i = answer_begin; i < answer_end; ++i) out += char('0' + token_ids[i]);
    return out;
}

namespace {

std::uint64_t parse_operand(std::string_view s, std::string_view whole) {
    std::uint64_t v = 0;
    const bool digits_only = !s.empty() && s.size() <= 19 &&
                             std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits_only || std::from_chars(s.data(), s.data() + s.size(), v).ec != std::errc())
        throw ValidationError("malformed sample '" + std::string(whole) + "'");
    return v;
}

} // namespace

Sample make_sample(std::string_view text) {
    const auto plus = text.find('+');
    const auto eq = text.find('=');
    if (plus == std::string_view::npos || eq == std::string_view::npos || eq < plus)
        throw ValidationError("malformed sample '" + std::string(text) + "'");
    const auto a = parse_operand(text.substr(0, plus), text);
    const auto b = parse_operand(text.substr(plus + 1, eq - plus - 1), text);
    const auto c = parse_operand(text.substr(eq + 1), text);
    if (a + b != c) throw ValidationError("sample '" + std::string(text) + "' has a wrong sum");
    Sample s = make_sample(a, b);
    if (s.text != text) throw ValidationError("sample '" + std::string(text) + "' is not in canonical form");
    return s;
}

Sample make_sample(std::uint64_t a, std::uint64_t b) {
    Sample s;
    s.text = std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b);
    s.token_ids.push_back(kBos);
    const auto body = encode(s.text);
    s.token_ids.insert(s.token_ids.end(), body.begin(), body.end());
    s.token_ids.push_back(kEos);
    s.answer_begin = std::size_t(std::find(s.token_ids.begin(), s.token_ids.end(), kEquals) - s.token_ids.begin()) + 1;
    s.answer_end = s.token_ids.size() - 1;
    return s;
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    if (spec.dedupe && double(spec.n_samples) > spec.task_space_size()) {
        throw CapacityError("cannot draw " + std::to_string(spec.n_samples) + " distinct pairs from a " +
                            std::to_string(spec.digits_a) + "x" + std::to_string(spec.digits_b) +
                            "-digit task space of " + std::to_string(std::uint64_t(spec.task_space_size())));
    }
    auto pow10 = [](std::size_t k) {
        std::uint64_t p = 1;
        while (k--) p *= 10;
        return p;
    };
    std::uniform_int_distribution<std::uint64_t> da(pow10(spec.digits_a - 1), pow10(spec.digits_a) - 1);
    std::uniform_int_distribution<std::uint64_t> db(pow10(spec.digits_b - 1), pow10(spec.digits_b) - 1);
    auto rng = make_rng(spec.seed, Stream::Data);
    std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
    std::vector<Sample> out;
    out.reserve(spec.n_samples);
    while (out.size() < spec.n_samples) {
        const auto a = da(rng);
        const auto b = db(rng);
        if (spec.dedupe && !seen.emplace(a, b).second) continue;
        out.push_back(make_sample(a, b));
    }
    return out;
}

std::filesystem::path descriptor_path(const std::filesystem::path& dataset) {
    auto p = dataset;
    p += ".json";
    return p;
}

void write_dataset(const std::filesystem::path& path, const DatasetSpec& spec, const std::vector<Sample>& samples) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        for (const auto& s : samples) out << s.text << '\n';
        if (!out) throw IoError("write to '" + path.string() + "' failed");
    }
    std::ofstream desc(descriptor_path(path), std::ios::trunc);
    if (!desc) throw IoError("cannot open '" + descriptor_path(path).string() + "' for writing");
    desc << nlohmann::json{{"spec", spec}, {"n_lines", samples.size()}, {"format", "A+B=C per line"}}.dump(2) << '\n';
    if (!desc) throw IoError("write to '" + descriptor_path(path).string() + "' failed");
}

std::vector<Sample> read_dataset(const std::filesystem::path& path, DatasetSpec* spec) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    std::vector<Sample> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(make_sample(line));
    if (spec) {
        std::ifstream d(descriptor_path(path));
        if (!d) throw IoError("dataset descriptor '" + descriptor_path(path).string() + "' is missing");
        try {
            *spec = nlohmann::json::parse(d).at("spec").get<DatasetSpec>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("bad dataset descriptor '" + descriptor_path(path).string() + "': " + e.what());
        }
    }
    return out;
}

std::string_view to_string(LossMask m) { return m == LossMask::AllNextTokens ? "all" : "answer"; }

LossMask parse_loss_mask(std::string_view s) {
    if (s == "all") return LossMask::AllNextTokens;
    if (s == "answer") return LossMask::AnswerOnly;
    throw ValidationError("unknown loss_mask '" + std::string(s) + "' (expected all or answer)");
}

std::string_view to_string(DecodeMode m) { return m == DecodeMode::Greedy ? "greedy" : "teacher_forced"; }

DecodeMode parse_decode_mode(std::string_view s) {
    if (s == "greedy") return DecodeMode::Greedy;
    if (s == "teacher_forced") return DecodeMode::TeacherForced;
    throw ValidationError("unknown decode mode '" + std::string(s) + "' (expected greedy or teacher_forced)");
}

trainer::SequenceBatch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                                  LossMask mask) {
    if (indices.empty()) throw ContractError("make_batch: empty batch");
    std::size_t seq = 0;
    for (auto i : indices) seq = std::max(seq, samples[i].token_ids.size());
    trainer::SequenceBatch b;
    b.tokens.layout = {indices.size(), seq};
    b.tokens.ids.assign(indices.size() * seq, kPad);
    b.targets.assign(indices.size() * seq, kPad);
    b.loss_mask.assign(indices.size() * seq, 0.0);
    b.real_rows.assign(indices.size() * seq, 0.0);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const Sample& s = samples[indices[r]];
        const std::size_t n = s.token_ids.size();
        b.lengths.push_back(n);
        for (std::size_t k = 0; k < n; ++k) {
            b.tokens.ids[r * seq + k] = s.token_ids[k];
            b.real_rows[r * seq + k] = 1.0;
            if (k + 1 < n) {
                b.targets[r * seq + k] = s.token_ids[k + 1];
                const bool scored = mask == LossMask::AllNextTokens || k + 1 >= s.answer_begin;
                b.loss_mask[r * seq + k] = scored ? 1.0 : 0.0;
            }
        }
    }
    return b;
}

trainer::SequenceBatch make_batch(std::span<const Sample> samples, LossMask mask) {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(samples, idx, mask);
}

namespace {

template <std::floating_point Real>
int argmax_row(const ad::Tensor<Real>& logits, std::size_t row) {
    int best = 0;
    for (std::size_t v = 1; v < logits.cols(); ++v)
        if (logits.at(row, v) > logits.at(row, std::size_t(best))) best = int(v);
    return best;
}

template <std::floating_point Real>
ad::Tensor<Real> real_state(const ad::Tensor<Real>& h, std::size_t base, std::size_t len) {
    const std::size_t d = h.cols();
    ad::Tensor<Real> out({len, d}, std::vector<Real>(h.data.begin() + std::ptrdiff_t(base * d),
                                                      h.data.begin() + std::ptrdiff_t((base + len) * d)));
    return out;
}

} // namespace

template <std::floating_point Real>
double score_sample(const ad::Tensor<Real>& logits, std::size_t base, const Sample& s, DecodeMode mode) {
    std::size_t hits = 0, total = 0;
    for (std::size_t k = s.answer_begin; k <= s.answer_end; ++k) {
        ++total;
        if (argmax_row(logits, base + k - 1) == s.token_ids[k]) ++hits;
        else if (mode == DecodeMode::Greedy) return 0.0;
    }
    return mode == DecodeMode::Greedy ? 1.0 : double(hits) / double(total);
}

template <std::floating_point Real>
std::vector<int> greedy_decode(const model::LoopedModel<Real>& model, std::span<const int> prompt, std::size_t t,
                               std::size_t max_new) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    while (out.size() < max_new && seq.size() < model.config.max_seq_len) {
        const auto logits = model::forward(model, seq, t, false).logits;
        const int next = argmax_row(logits, logits.rows() - 1);
        out.push_back(next);
        seq.push_back(next);
        if (next == kEos) break;
    }
    return out;
}

template <std::floating_point Real>
double exact_match_eval(const model::LoopedModel<Real>& model, std::span<const Sample> samples, std::size_t t,
                        const EvalOptions& opt) {
    SweepOptions so;
    so.eval = opt;
    so.probe = false;
    const std::size_t ts[] = {t};
    return eval_sweep(model, samples, ts, so).front().exact_match_accuracy;
}

template <std::floating_point Real>
std::vector<SweepPoint> eval_sweep(const model::LoopedModel<Real>& model, std::span<const Sample> samples,
                                   std::span<const std::size_t> t_values, const SweepOptions& opt) {
    if (samples.empty()) throw ContractError("eval: no samples");
    if (t_values.empty()) throw ContractError("eval_sweep: no loop counts given");
    std::map<std::size_t, SweepPoint> acc;
    for (auto t : t_values) acc[t].t = t;
    const std::size_t t_max = acc.rbegin()->first;
    const std::size_t bs = std::max<std::size_t>(1, opt.eval.batch_size);

    std::size_t tokens_seen = 0, probes = 0;
    for (std::size_t start = 0; start < samples.size(); start += bs) {
        const auto chunk = samples.subspan(start, std::min(bs, samples.size() - start));
        const auto batch = make_batch(chunk, LossMask::AllNextTokens);
        const std::size_t seq = batch.tokens.layout.seq;
        ad::Graph<Real> g(false);
        ad::Var<Real> h = model::prelude(g, model, batch.tokens);
        ad::Tensor<Real> prev = h.value();
        for (std::size_t k = 1; k <= t_max; ++k) {
            h = model::recurrent_block(model, ad::DualVar<Real>(h), batch.tokens.layout).primal;
            auto it = acc.find(k);
            if (it == acc.end()) {
                if (acc.contains(k + 1)) prev = h.value();
                continue;
            }
            SweepPoint& pt = it->second;
            const auto state = h.value();
            const auto logits = model::readout(model, h, batch.tokens.layout).value();
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                const Sample& s = chunk[i];
                const std::size_t base = i * seq, len = s.token_ids.size();
                pt.exact_match_accuracy += score_sample(logits, base, s, opt.eval.mode);
                double delta2 = 0;
                for (std::size_t r = base; r < base + len; ++r) {
                    double n2 = 0;
                    for (std::size_t c = 0; c < state.cols(); ++c) {
                        const double x = double(state.at(r, c));
                        const double d = x - double(prev.at(r, c));
                        n2 += x * x;
                        delta2 += d * d;
                    }
                    pt.mean_state_norm += std::sqrt(n2);
                }
                pt.mean_successive_delta += std::sqrt(delta2);
                if (opt.probe && start + i < opt.probe_limit) {
                    const auto seed = derive_seed(opt.seed, Stream::Probe, start + i);
                    pt.mean_rho_estimate +=
                        dynamics::estimate_spectral_radius(model, real_state(state, base, len), opt.probe_k, seed, k)
                            .rho_estimate;
                }
            }
            prev = state;
        }
        for (const auto& s : chunk) tokens_seen += s.token_ids.size();
        probes += opt.probe ? std::min(chunk.size(), opt.probe_limit > start ? opt.probe_limit - start : 0) : 0;
    }

    std::vector<SweepPoint> out;
    for (auto t : t_values) {
        SweepPoint p = acc.at(t);
        p.exact_match_accuracy /= double(samples.size());
        p.mean_state_norm /= double(tokens_seen);
        p.mean_successive_delta /= double(samples.size());
        p.mean_rho_estimate = probes ? p.mean_rho_estimate / double(probes) : std::numeric_limits<double>::quiet_NaN();
        out.push_back(p);
    }
    return out;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os.precision(10);
    os << kSweepCsvHeader << '\n';
    for (const auto& p : points)
        os << p.t << ',' << p.exact_match_accuracy << ',' << p.mean_state_norm << ',' << p.mean_successive_delta
           << ',' << p.mean_rho_estimate << '\n';
    return os.str();
}

#define LOOPLAB_INSTANTIATE_ARITH(R)                                                                             \
    template double score_sample<R>(const ad::Tensor<R>&, std::size_t, const Sample&, DecodeMode);              \
    template std::vector<int> greedy_decode<R>(const model::LoopedModel<R>&, std::span<const int>, std::size_t, \
                                               std::size_t);                                                     \
    template double exact_match_eval<R>(const model::LoopedModel<R>&, std::span<const Sample>, std::size_t,     \
                                        const EvalOptions&);                                                     \
    template std::vector<SweepPoint> eval_sweep<R>(const model::LoopedModel<R>&, std::span<const Sample>,       \
                                                   std::span<const std::size_t>, const SweepOptions&);

LOOPLAB_INSTANTIATE_ARITH(float)
LOOPLAB_INSTANTIATE_ARITH(double)

} // namespace looplab::arith
