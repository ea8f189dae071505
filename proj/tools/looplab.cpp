// looplab: data generation, training, depth sweeps and trajectory analysis
// for looped transformers on multi-digit addition.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "looplab/errors.hpp"
#include "looplab/experiment/experiment.hpp"

namespace fs = std::filesystem;
using namespace looplab;
using namespace looplab::experiment;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int precision = 32;
};

void add_common(CLI::App* cmd, Common& c, bool with_precision) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", c.out, "run directory (default: <output_dir>/<run_name>)");
    cmd->add_option("--seed", c.seed, "overrides the config seed");
    if (with_precision)
        cmd->add_option("--precision", c.precision, "floating point width")->check(CLI::IsMember({32, 64}));
}

ExperimentConfig resolve(const Common& c) {
    auto cfg = load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

fs::path run_root(const Common& c, const ExperimentConfig& cfg) {
    return c.out.empty() ? fs::path(cfg.output_dir) / cfg.run_name : fs::path(c.out);
}

template <class F>
auto dispatch(int precision, F&& f) {
    return precision == 64 ? f(double{}) : f(float{});
}

void print_sweep(const std::vector<arith::SweepPoint>& pts) {
    std::cout << arith::sweep_csv(pts);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Looped transformer experiments on multi-digit addition"};
    app.require_subcommand(1);

    Common gen_opts, train_opts, sweep_opts, analyze_opts, lambda_opts;

    auto* gen = app.add_subcommand("gen-data", "write the train and eval datasets");
    add_common(gen, gen_opts, false);

    auto* train_cmd = app.add_subcommand("train", "train a model with the configured objective");
    add_common(train_cmd, train_opts, true);
    std::string resume_ckpt;
    bool resume_latest = false;
    train_cmd->add_option("--checkpoint", resume_ckpt, "resume from this checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_flag("--resume", resume_latest, "resume from the latest checkpoint in the run directory");

    auto* sweep = app.add_subcommand("eval-sweep", "accuracy and state statistics across loop depths");
    add_common(sweep, sweep_opts, true);
    std::string sweep_ckpt;
    sweep->add_option("--checkpoint", sweep_ckpt, "default: <run>/checkpoints/final.ckpt");

    auto* analyze = app.add_subcommand("analyze", "trajectory, PCA and spectral probe for one input");
    add_common(analyze, analyze_opts, true);
    std::string analyze_ckpt, sample;
    std::optional<std::size_t> depth;
    analyze->add_option("--checkpoint", analyze_ckpt, "default: <run>/checkpoints/final.ckpt");
    analyze->add_option("--sample", sample, "input as A+B=C")->required();
    analyze->add_option("--depth", depth, "loop depth T (default: eval.analyze_depth)");

    auto* lsweep = app.add_subcommand("lambda-sweep", "one training run per regularization weight");
    add_common(lsweep, lambda_opts, true);
    std::vector<double> lambdas;
    lsweep->add_option("--lambdas", lambdas, "weights to train, e.g. 0.05,0.1,0.15,0.2")
        ->required()
        ->delimiter(',')
        ->check(CLI::Range(0.0, 1.0));

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const auto cfg = resolve(gen_opts);
            const RunLayout layout(run_root(gen_opts, cfg));
            gen_data(cfg, layout);
            std::cout << layout.train_data().string() << "\n" << layout.eval_data().string() << "\n";
        } else if (train_cmd->parsed()) {
            const auto cfg = resolve(train_opts);
            const RunLayout layout(run_root(train_opts, cfg));
            TrainOptions opt;
            opt.log = &std::cerr;
            opt.precision = train_opts.precision;
            if (!resume_ckpt.empty())
                opt.resume_from = resume_ckpt;
            else if (resume_latest)
                opt.resume_from = latest_checkpoint(layout);
            const auto s = dispatch(train_opts.precision, [&](auto r) { return train<decltype(r)>(cfg, layout, opt); });
            std::cout << nlohmann::json{{"steps_completed", s.steps_completed},
                                        {"final_checkpoint", s.final_checkpoint.string()},
                                        {"stopped_early", s.stopped_early},
                                        {"train_accuracy", s.train_accuracy ? nlohmann::json(*s.train_accuracy)
                                                                            : nlohmann::json()}}
                             .dump()
                      << "\n";
        } else if (sweep->parsed()) {
            const auto cfg = resolve(sweep_opts);
            const RunLayout layout(run_root(sweep_opts, cfg));
            const fs::path ckpt = sweep_ckpt.empty() ? layout.final_checkpoint() : fs::path(sweep_ckpt);
            const auto pts = dispatch(sweep_opts.precision,
                                      [&](auto r) { return run_eval_sweep<decltype(r)>(cfg, layout, ckpt); });
            write_manifest(cfg, layout);
            print_sweep(pts);
        } else if (analyze->parsed()) {
            auto cfg = resolve(analyze_opts);
            if (depth) cfg.eval.analyze_depth = *depth;
            cfg.validate();
            const RunLayout layout(run_root(analyze_opts, cfg));
            const fs::path ckpt = analyze_ckpt.empty() ? layout.final_checkpoint() : fs::path(analyze_ckpt);
            const auto doc = dispatch(analyze_opts.precision,
                                      [&](auto r) { return run_analyze<decltype(r)>(cfg, ckpt, sample); });
            fs::create_directories(layout.root);
            std::ofstream(layout.analysis()) << doc.dump(2) << "\n";
            std::cout << layout.analysis().string() << "\n";
        } else if (lsweep->parsed()) {
            const auto cfg = resolve(lambda_opts);
            TrainOptions opt;
            opt.log = &std::cerr;
            opt.precision = lambda_opts.precision;
            const auto root = run_root(lambda_opts, cfg);
            const auto runs = dispatch(lambda_opts.precision, [&](auto r) {
                return lambda_sweep<decltype(r)>(cfg, lambdas, root, opt);
            });
            std::ifstream csv(root / "lambda_sweep.csv");
            std::cout << csv.rdbuf();
            for (const auto& r : runs)
                if (!r.ok) return 1;
        }
    } catch (const Error& e) {
        std::cerr << nlohmann::json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
