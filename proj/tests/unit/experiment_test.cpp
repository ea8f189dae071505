#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "looplab/errors.hpp"
#include "looplab/experiment/experiment.hpp"
#include "looplab/model/checkpoint.hpp"

using namespace looplab;
using namespace looplab::experiment;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / "looplab_experiment_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.seed = 5;
    c.run_name = "tiny";
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.max_seq_len = 8;
    c.data.digits_a = c.data.digits_b = 1;
    c.data.n_samples = 100;
    c.train.steps = 12;
    c.train.batch_size = 10;
    c.train.learning_rate = 1e-3;
    c.train.loop_dist = trainer::LoopDistribution::uniform(1, 3);
    c.eval.t_values = {1, 3};
    c.eval.n_samples = 20;
    c.eval.probe_limit = 4;
    c.run.checkpoint_every = 5;
    c.run.accuracy_every = 4;
    c.run.accuracy_samples = 20;
    return c;
}

} // namespace

TEST_SUITE("experiment") {

TEST_CASE("config JSON round-trips and re-serializes to the same document") {
    auto c = tiny();
    c.run.stop_at_accuracy = 0.9;
    c.train.objective_form = trainer::ObjectiveForm::Additive;
    c.eval.mode = arith::DecodeMode::TeacherForced;
    const json j = c;
    CHECK(j.get<ExperimentConfig>() == c);
    CHECK(json(j.get<ExperimentConfig>()).dump() == j.dump());
    CHECK_FALSE(j.at("data").contains("seed"));
    CHECK_FALSE(j.at("train").contains("seed"));

    const auto dir = scratch("roundtrip");
    save_config(dir / "c.json", c);
    CHECK(load_config(dir / "c.json") == c);
    // A hand-written file with reordered keys and extra whitespace.
    std::ofstream(dir / "h.json") << "{ \"run_name\": \"tiny\",\n  \"seed\": 5 }";
    const auto h = load_config(dir / "h.json");
    CHECK(h.seed == 5);
    CHECK(json(h) == json::parse(json(h).dump(4)));
}

TEST_CASE("unknown keys are rejected at every level") {
    const json base = tiny();
    for (const char* section : {"", "model", "train", "data", "eval", "run"}) {
        auto j = base;
        (std::string(section).empty() ? j : j[section])["typo_key"] = 1;
        INFO(section);
        CHECK_THROWS_AS(j.get<ExperimentConfig>(), ValidationError);
    }
    auto lj = base;
    lj["train"]["loop_dist"]["shape"] = 2;
    CHECK_THROWS_AS(lj.get<ExperimentConfig>(), ValidationError);
    auto sj = base;
    sj["data"]["seed"] = 3;
    CHECK_THROWS_AS(sj.get<ExperimentConfig>(), ValidationError);

    const auto dir = scratch("bad");
    std::ofstream(dir / "broken.json") << "{ \"seed\": ";
    CHECK_THROWS_AS(load_config(dir / "broken.json"), ValidationError);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), IoError);
}

TEST_CASE("semantic validation") {
    auto c = tiny();
    c.data.digits_a = 4; // 11 tokens > max_seq_len 8
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny();
    c.eval.t_values.clear();
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny();
    c.run.accuracy_every = 0;
    c.run.stop_at_accuracy = 0.99;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = tiny();
    c.run_name = "a/b";
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("the twelve architecture combinations are plain config values") {
    int built = 0;
    for (const char* place : {"Pre", "Post", "PreSandwich", "PostSandwich"}) {
        for (const char* op : {"LayerNorm", "RMSNorm", "SimpleNorm"}) {
            json j = tiny();
            j["model"]["norm_placement"] = place;
            j["model"]["norm_operator"] = op;
            const auto c = j.get<ExperimentConfig>();
            c.validate();
            CHECK(model::to_string(c.model.norm_placement) == place);
            CHECK(model::to_string(c.model.norm_operator) == op);
            model::LoopedModel<float> m{c.model, model::init_parameters<float>(c.model, c.init_seed())};
            const std::vector<int> ids = {arith::kBos, 3, arith::kPlus, 4, arith::kEquals};
            CHECK(model::forward(m, ids, 2, false).logits.shape == ad::Shape{5, arith::kVocabSize});
            ++built;
        }
    }
    CHECK(built == 12);
}

TEST_CASE("seeds derive from the top-level seed") {
    auto a = tiny(), b = tiny();
    b.seed = 6;
    CHECK(a.train_data().seed == 5);
    CHECK(a.train_config().seed == 5);
    CHECK(a.eval_data().seed != a.train_data().seed);
    CHECK(a.eval_data().n_samples == 20);
    CHECK(a.init_seed() != b.init_seed());
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a) == config_hash(tiny()));
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("gen-data is byte-identical across reruns") {
    auto c = tiny();
    c.data.digits_a = c.data.digits_b = 2;
    c.data.n_samples = 10000;
    c.model.max_seq_len = 11;
    const RunLayout a(scratch("gen_a")), b(scratch("gen_b"));
    gen_data(c, a);
    gen_data(c, b);
    const auto text = slurp(a.train_data());
    CHECK(text == slurp(b.train_data()));
    CHECK(slurp(a.eval_data()) == slurp(b.eval_data()));
    CHECK(std::count(text.begin(), text.end(), '\n') == 10000);
}

TEST_CASE("identical runs produce identical artifacts and manifests") {
    const auto c = tiny();
    const RunLayout a(scratch("run_a")), b(scratch("run_b"));
    for (const auto* l : {&a, &b}) {
        gen_data(c, *l);
        train<float>(c, *l);
        run_eval_sweep<float>(c, *l, l->final_checkpoint());
        write_manifest(c, *l);
    }
    const auto ma = json::parse(slurp(a.manifest()));
    CHECK(ma == json::parse(slurp(b.manifest())));
    CHECK(ma.at("config_hash") == config_hash(c));
    CHECK(ma.at("code_version") == code_version());
    CHECK(ma.at("train_precision") == 32);
    for (const char* f : {"metrics.jsonl", "checkpoints/final.ckpt", "checkpoints/step_0000010.ckpt", "sweep.csv"})
        CHECK(ma.at("artifacts").contains(f));
    // The manifest hash belongs to the config written next to it.
    CHECK(config_hash(load_config(a.config())) == ma.at("config_hash"));

    std::ifstream log(a.metrics());
    std::string line;
    std::size_t n = 0, with_acc = 0;
    while (std::getline(log, line)) {
        const auto rec = json::parse(line);
        CHECK(rec.at("step") == n);
        for (const char* k : {"sampled_t", "sft_loss", "jsrr_loss", "l2_loss", "total_loss", "gradient_norm", "rho_probe"})
            CHECK(rec.contains(k));
        with_acc += rec.contains("train_accuracy");
        ++n;
    }
    CHECK(n == 12);
    CHECK(with_acc == 3);
}

TEST_CASE("resuming reproduces the uninterrupted run") {
    const auto c = tiny();
    const RunLayout full(scratch("full")), part(scratch("part"));
    gen_data(c, full);
    gen_data(c, part);
    train<double>(c, full);
    train<double>(c, part);
    // Roll back to step 5 and continue.
    TrainOptions opt;
    opt.resume_from = part.checkpoint(5);
    const auto s = train<double>(c, part, opt);
    CHECK(s.steps_completed == 12);
    CHECK(slurp(full.final_checkpoint()) == slurp(part.final_checkpoint()));
    CHECK(slurp(full.metrics()) == slurp(part.metrics()));

    // Continuing zero steps leaves the parameters as they were.
    opt.resume_from = latest_checkpoint(part);
    REQUIRE(opt.resume_from);
    CHECK(*opt.resume_from == part.final_checkpoint());
    const auto before = model::load_checkpoint<double>(part.final_checkpoint()).params;
    train<double>(c, part, opt);
    CHECK(model::load_checkpoint<double>(part.final_checkpoint()).params == before);

    auto other = c;
    other.train.learning_rate = 2e-3;
    opt.resume_from = part.checkpoint(5);
    CHECK_THROWS_AS(train<double>(other, part, opt), ValidationError);
}

TEST_CASE("early stop at a target training accuracy") {
    auto c = tiny();
    c.run.stop_at_accuracy = 0.0001;
    c.run.accuracy_every = 1;
    // Any nonzero accuracy stops; with none the run goes the distance.
    const RunLayout l(scratch("early"));
    gen_data(c, l);
    const auto s = train<float>(c, l);
    CHECK(s.steps_completed <= 12);
    CHECK(s.stopped_early == (s.steps_completed < 12 || (s.train_accuracy && *s.train_accuracy >= 0.0001)));
}

TEST_CASE("a numeric failure is logged with its step and propagates") {
    auto c = tiny();
    c.train.learning_rate = 1e30;
    c.train.schedule = trainer::Schedule::Constant;
    const RunLayout l(scratch("blowup"));
    gen_data(c, l);
    CHECK_THROWS_AS(train<float>(c, l), NumericError);
    std::ifstream log(l.metrics());
    std::string line, last;
    while (std::getline(log, line)) last = line;
    const auto rec = json::parse(last);
    REQUIRE(rec.contains("error"));
    CHECK(rec.at("error").get<std::string>().find("step " + std::to_string(rec.at("step").get<int>())) == 0);
}

TEST_CASE("checkpoint and config mismatch is caught before compute") {
    const auto c = tiny();
    const RunLayout l(scratch("mismatch"));
    gen_data(c, l);
    train<float>(c, l);
    auto wider = c;
    wider.model.d_model = 32;
    CHECK_THROWS_AS(run_eval_sweep<float>(wider, l, l.final_checkpoint()), ValidationError);
    CHECK_THROWS_AS(run_eval_sweep<float>(c, l, l.root / "nope.ckpt"), IoError);
    auto moved = c;
    moved.data.n_samples = 50;
    CHECK_THROWS_AS(train<float>(moved, l), ValidationError);
}

TEST_CASE("analyze emits a consistent trajectory document") {
    auto c = tiny();
    c.eval.analyze_depth = 9;
    const RunLayout l(scratch("analyze"));
    gen_data(c, l);
    train<double>(c, l);
    const auto doc = run_analyze<double>(c, l.final_checkpoint(), "7+8=15");
    CHECK(doc.at("trajectory").size() == 10);
    CHECK(doc.at("pca").at("projections").size() == 10);
    CHECK(doc.at("probes").size() == 10);
    CHECK(doc.at("convergence").contains("verdict"));
    CHECK_THROWS_AS(run_analyze<double>(c, l.final_checkpoint(), "7+8=16"), ValidationError);
}

TEST_CASE("lambda sweep: the zero row is a plain run and members share data") {
    auto c = tiny();
    const auto root = scratch("lambda");
    const auto runs = lambda_sweep<double>(c, {0.0, 0.2}, root);
    REQUIRE(runs.size() == 2);
    CHECK(runs[0].ok);
    CHECK(runs[1].ok);
    CHECK(runs[0].sweep.size() == 2);

    c.train.lambda_weight = 0;
    const RunLayout plain(scratch("lambda_plain"));
    gen_data(c, plain);
    train<double>(c, plain);
    CHECK(slurp(plain.final_checkpoint()) == slurp(root / "lambda_0" / "checkpoints" / "final.ckpt"));
    CHECK_FALSE(fs::exists(root / "lambda_0" / "data"));

    const auto csv = slurp(root / "lambda_sweep.csv");
    CHECK(csv.substr(0, csv.find('\n')) == kLambdaCsvHeader);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(json::parse(slurp(root / "lambda_sweep.json")).size() == 2);
    CHECK_THROWS_AS(lambda_sweep<double>(c, {}, root), ValidationError);
}

}
