#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "looplab/arith/arith.hpp"
#include "looplab/errors.hpp"
#include "looplab/trainer/trainer.hpp"

using namespace looplab;
using namespace looplab::arith;

namespace {

// Schoolbook addition on decimal strings.
std::string add_strings(const std::string& a, const std::string& b) {
    std::string out;
    int carry = 0;
    for (std::size_t i = 0; i < std::max(a.size(), b.size()) || carry; ++i) {
        int s = carry;
        if (i < a.size()) s += a[a.size() - 1 - i] - '0';
        if (i < b.size()) s += b[b.size() - 1 - i] - '0';
        out.push_back(char('0' + s % 10));
        carry = s / 10;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

model::ModelConfig small_model(std::size_t max_len) {
    model::ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = max_len;
    return c;
}

} // namespace

TEST_SUITE("arith") {

TEST_CASE("vocabulary") {
    CHECK(kVocabSize == 15);
    std::set<std::string> texts;
    for (int id = 0; id < 15; ++id) texts.insert(token_text(id));
    CHECK(texts.size() == 15);
    CHECK_THROWS_AS(token_text(15), VocabularyError);
    CHECK_THROWS_AS(encode("12*3"), VocabularyError);
    CHECK(encode("<bos>1+2=3<eos><pad>") == std::vector<int>{kBos, 1, kPlus, 2, kEquals, 3, kEos, kPad});
}

TEST_CASE("the canonical 4x4 example") {
    const auto s = make_sample("1234+5678=6912");
    CHECK(s.answer() == "6912");
    CHECK(s.token_ids.front() == kBos);
    CHECK(s.token_ids.back() == kEos);
    CHECK(s.prompt_length() == 11);
    CHECK_THROWS_AS(make_sample("1234+5678=6913"), ValidationError);
    CHECK_THROWS_AS(make_sample("12+34"), ValidationError);
}

TEST_CASE("4x4 task space holds 8.1e7 pairs") {
    DatasetSpec s;
    s.digits_a = s.digits_b = 4;
    CHECK(s.task_space_size() == 81000000.0);
}

TEST_CASE("generated samples are correct, round-trip and have exact answer spans") {
    DatasetSpec spec;
    spec.digits_a = 4;
    spec.digits_b = 3;
    spec.n_samples = 5000;
    spec.seed = 9;
    for (const auto& s : generate_dataset(spec)) {
        const auto plus = s.text.find('+'), eq = s.text.find('=');
        const auto a = s.text.substr(0, plus), b = s.text.substr(plus + 1, eq - plus - 1);
        CHECK(a.size() == 4);
        CHECK(b.size() == 3);
        CHECK(s.text.substr(eq + 1) == add_strings(a, b));
        CHECK(s.answer() == add_strings(a, b));
        CHECK(encode(decode(s.token_ids)) == s.token_ids);
        CHECK(decode(s.token_ids) == "<bos>" + s.text + "<eos>");
        CHECK(s.token_ids[s.answer_end] == kEos);
        CHECK(s.token_ids[s.answer_begin - 1] == kEquals);
    }
}

TEST_CASE("leading digits are uniform over 1-9") {
    DatasetSpec spec;
    spec.digits_a = spec.digits_b = 4;
    spec.n_samples = 100000;
    spec.seed = 3;
    std::array<int, 10> a{}, b{};
    for (const auto& s : generate_dataset(spec)) {
        ++a[std::size_t(s.text[0] - '0')];
        ++b[std::size_t(s.text[s.text.find('+') + 1] - '0')];
    }
    CHECK(a[0] == 0);
    CHECK(b[0] == 0);
    for (int d = 1; d <= 9; ++d) {
        CHECK(std::abs(a[std::size_t(d)] / 1e5 - 1.0 / 9) <= 0.01);
        CHECK(std::abs(b[std::size_t(d)] / 1e5 - 1.0 / 9) <= 0.01);
    }
}

TEST_CASE("generation is deterministic and dedupe respects capacity") {
    DatasetSpec spec;
    spec.n_samples = 300;
    spec.seed = 5;
    const auto x = generate_dataset(spec), y = generate_dataset(spec);
    CHECK(std::equal(x.begin(), x.end(), y.begin(), [](auto& p, auto& q) { return p.text == q.text; }));
    spec.seed = 6;
    const auto z = generate_dataset(spec);
    CHECK_FALSE(std::equal(x.begin(), x.end(), z.begin(), [](auto& p, auto& q) { return p.text == q.text; }));

    DatasetSpec one;
    one.digits_a = one.digits_b = 1;
    one.dedupe = true;
    one.n_samples = 81;
    const auto all = generate_dataset(one);
    std::set<std::string> uniq;
    for (const auto& s : all) uniq.insert(s.text);
    CHECK(uniq.size() == 81);
    one.n_samples = 82;
    CHECK_THROWS_AS(generate_dataset(one), CapacityError);
}

TEST_CASE("dataset files round-trip byte-identically") {
    const auto dir = std::filesystem::temp_directory_path() / "looplab_arith_test";
    std::filesystem::create_directories(dir);
    DatasetSpec spec;
    spec.n_samples = 1000;
    spec.seed = 11;
    write_dataset(dir / "a.txt", spec, generate_dataset(spec));
    write_dataset(dir / "b.txt", spec, generate_dataset(spec));
    CHECK(slurp(dir / "a.txt") == slurp(dir / "b.txt"));
    DatasetSpec back;
    const auto samples = read_dataset(dir / "a.txt", &back);
    CHECK(back == spec);
    CHECK(samples.size() == 1000);
    std::size_t lines = 0;
    for (char c : slurp(dir / "a.txt")) lines += c == '\n';
    CHECK(lines == 1000);
    CHECK_THROWS_AS(read_dataset(dir / "missing.txt"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("batches pad on the right and mask by mode") {
    const std::vector<Sample> s = {make_sample("12+34=46"), make_sample("99+99=198")};
    const auto all = make_batch(s, LossMask::AllNextTokens);
    CHECK(all.tokens.layout.batch == 2);
    CHECK(all.tokens.layout.seq == 11);
    CHECK(all.tokens.ids[10] == kPad);
    CHECK(all.real_rows[10] == 0.0);
    CHECK(all.real_rows[9] == 1.0);
    // Sample 0: 10 real tokens, 9 scored transitions.
    double n0 = 0;
    for (std::size_t k = 0; k < 11; ++k) n0 += all.loss_mask[k];
    CHECK(n0 == 9);
    CHECK(all.targets[0] == 1);
    const auto ans = make_batch(s, LossMask::AnswerOnly);
    // '=' at index 6 predicts 4, then 4->6, 6-><eos>.
    std::vector<std::size_t> scored;
    for (std::size_t k = 0; k < 11; ++k)
        if (ans.loss_mask[k] != 0) scored.push_back(k);
    CHECK(scored == std::vector<std::size_t>{6, 7, 8});
}

TEST_CASE("perfect logits score 1, one wrong answer token scores 0") {
    const auto s = make_sample("57+68=125");
    ad::Tensor<double> logits = ad::Tensor<double>::zeros({s.token_ids.size(), kVocabSize});
    for (std::size_t k = 0; k + 1 < s.token_ids.size(); ++k) logits.at(k, std::size_t(s.token_ids[k + 1])) = 20.0;
    CHECK(score_sample(logits, 0, s, DecodeMode::Greedy) == 1.0);
    CHECK(score_sample(logits, 0, s, DecodeMode::TeacherForced) == 1.0);
    logits.at(s.answer_begin, 3) = 30.0; // predicts the second answer digit wrong
    CHECK(score_sample(logits, 0, s, DecodeMode::Greedy) == 0.0);
    CHECK(score_sample(logits, 0, s, DecodeMode::TeacherForced) == doctest::Approx(3.0 / 4.0));
}

TEST_CASE("an untrained model is at chance on 4x4 addition") {
    DatasetSpec spec;
    spec.digits_a = spec.digits_b = 4;
    spec.n_samples = 1000;
    spec.seed = 1;
    const auto samples = generate_dataset(spec);
    const auto c = small_model(spec.max_sequence_length());
    model::LoopedModel<float> m{c, model::init_parameters<float>(c, 1)};
    CHECK(exact_match_eval(m, std::span(samples), 4) < 0.01);
}

TEST_CASE("single-pass greedy scoring agrees with literal autoregressive decoding") {
    DatasetSpec spec;
    spec.digits_a = spec.digits_b = 1;
    spec.n_samples = 81;
    spec.dedupe = true;
    const auto samples = generate_dataset(spec);
    const auto c = small_model(spec.max_sequence_length());
    model::LoopedModel<double> m{c, model::init_parameters<double>(c, 2)};
    trainer::TrainConfig tc;
    tc.lambda_weight = 0;
    tc.loop_dist = trainer::LoopDistribution::fixed(2);
    tc.learning_rate = 1e-2;
    tc.schedule = trainer::Schedule::Constant;
    tc.batch_size = 27;
    trainer::AdamState<double> opt;
    for (std::size_t step = 0; step < 150; ++step) {
        const auto idx = trainer::batch_indices(samples.size(), tc.batch_size, 0, step);
        trainer::stars_step(m, opt, make_batch(samples, idx, LossMask::AllNextTokens), tc, step);
    }
    std::size_t right = 0;
    for (const auto& s : samples) {
        const std::span<const int> prompt(s.token_ids.data(), s.prompt_length());
        const auto out = greedy_decode(m, prompt, 2, 4);
        std::vector<int> want(s.token_ids.begin() + std::ptrdiff_t(s.answer_begin), s.token_ids.end());
        const bool literal = out == want;
        const std::vector<Sample> one = {s};
        CHECK(literal == (exact_match_eval(m, std::span(one), 2) == 1.0));
        right += literal;
    }
    // Both outcomes occur, so the comparison is not vacuous.
    CHECK(right > 0);
    CHECK(right < samples.size());
}

TEST_CASE("sweep keeps the requested order and matches single evaluations") {
    DatasetSpec spec;
    spec.n_samples = 40;
    const auto samples = generate_dataset(spec);
    const auto c = small_model(spec.max_sequence_length());
    model::LoopedModel<double> m{c, model::init_parameters<double>(c, 4)};
    const std::vector<std::size_t> ts = {8, 1, 4};
    SweepOptions so;
    so.eval.batch_size = 16;
    so.probe_limit = 5;
    const auto pts = eval_sweep(m, std::span(samples), std::span(ts), so);
    REQUIRE(pts.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(pts[i].t == ts[i]);
        CHECK(pts[i].exact_match_accuracy >= 0.0);
        CHECK(pts[i].exact_match_accuracy <= 1.0);
        CHECK(pts[i].mean_rho_estimate >= 0.0);
        CHECK(pts[i].exact_match_accuracy == exact_match_eval(m, std::span(samples), ts[i]));
    }

    // Per-token norms and deltas against a direct trajectory.
    double norm = 0, delta = 0;
    std::size_t tokens = 0;
    for (const auto& s : samples) {
        const auto traj = *model::forward(m, s.token_ids, 4, true).trajectory;
        for (std::size_t r = 0; r < s.token_ids.size(); ++r) {
            double n2 = 0;
            for (std::size_t k = 0; k < c.d_model; ++k) n2 += traj.states[4].at(r, k) * traj.states[4].at(r, k);
            norm += std::sqrt(n2);
        }
        double d2 = 0;
        for (std::size_t i = 0; i < traj.states[4].numel(); ++i) {
            const double d = traj.states[4].data[i] - traj.states[3].data[i];
            d2 += d * d;
        }
        delta += std::sqrt(d2);
        tokens += s.token_ids.size();
    }
    CHECK(pts[2].mean_state_norm == doctest::Approx(norm / double(tokens)).epsilon(1e-9));
    CHECK(pts[2].mean_successive_delta == doctest::Approx(delta / double(samples.size())).epsilon(1e-9));

    const auto csv = sweep_csv(pts);
    CHECK(csv.substr(0, csv.find('\n')) == "t,exact_match_accuracy,mean_state_norm,mean_successive_delta,mean_rho_estimate");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

}
