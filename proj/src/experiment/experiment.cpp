#include "looplab/experiment/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "looplab/dynamics/dynamics.hpp"
#include "looplab/errors.hpp"
#include "looplab/io/tensor_file.hpp"
#include "looplab/json_util.hpp"
#include "looplab/model/checkpoint.hpp"
#include "looplab/rng.hpp"

#ifndef LOOPLAB_VERSION
#define LOOPLAB_VERSION "unknown"
#endif

namespace looplab::experiment {

using nlohmann::json;

void to_json(json& j, const EvalConfig& c) {
    j = {{"t_values", c.t_values},       {"n_samples", c.n_samples}, {"mode", arith::to_string(c.mode)},
         {"batch_size", c.batch_size},   {"probe", c.probe},         {"probe_k", c.probe_k},
         {"probe_limit", c.probe_limit}, {"analyze_depth", c.analyze_depth}};
}

void from_json(const json& j, EvalConfig& c) {
    require_known_keys(j, "eval",
                       {"t_values", "n_samples", "mode", "batch_size", "probe", "probe_k", "probe_limit",
                        "analyze_depth"});
    read_optional(j, "t_values", c.t_values);
    read_optional(j, "n_samples", c.n_samples);
    if (j.contains("mode")) {
        std::string s;
        read_optional(j, "mode", s);
        c.mode = arith::parse_decode_mode(s);
    }
    read_optional(j, "batch_size", c.batch_size);
    read_optional(j, "probe", c.probe);
    read_optional(j, "probe_k", c.probe_k);
    read_optional(j, "probe_limit", c.probe_limit);
    read_optional(j, "analyze_depth", c.analyze_depth);
}

void to_json(json& j, const RunConfig& c) {
    j = {{"checkpoint_every", c.checkpoint_every},
         {"accuracy_every", c.accuracy_every},
         {"accuracy_samples", c.accuracy_samples},
         {"accuracy_t", c.accuracy_t}};
    j["stop_at_accuracy"] = c.stop_at_accuracy ? json(*c.stop_at_accuracy) : json();
}

void from_json(const json& j, RunConfig& c) {
    require_known_keys(j, "run",
                       {"checkpoint_every", "accuracy_every", "accuracy_samples", "accuracy_t", "stop_at_accuracy"});
    read_optional(j, "checkpoint_every", c.checkpoint_every);
    read_optional(j, "accuracy_every", c.accuracy_every);
    read_optional(j, "accuracy_samples", c.accuracy_samples);
    read_optional(j, "accuracy_t", c.accuracy_t);
    if (auto it = j.find("stop_at_accuracy"); it != j.end()) {
        if (it->is_null())
            c.stop_at_accuracy.reset();
        else
            c.stop_at_accuracy = it->get<double>();
    }
}

void to_json(json& j, const ExperimentConfig& c) {
    json data = c.data;
    data.erase("seed");
    j = {{"seed", c.seed},   {"run_name", c.run_name}, {"output_dir", c.output_dir}, {"model", c.model},
         {"train", c.train}, {"data", data},           {"eval", c.eval},             {"run", c.run}};
}

void from_json(const json& j, ExperimentConfig& c) {
    require_known_keys(j, "config", {"seed", "run_name", "output_dir", "model", "train", "data", "eval", "run"});
    read_optional(j, "seed", c.seed);
    read_optional(j, "run_name", c.run_name);
    read_optional(j, "output_dir", c.output_dir);
    try {
        if (j.contains("model")) c.model = j.at("model").get<model::ModelConfig>();
        if (j.contains("train")) c.train = j.at("train").get<trainer::TrainConfig>();
        if (j.contains("data")) {
            if (j.at("data").contains("seed"))
                throw ValidationError("data: 'seed' is derived from the top-level seed and cannot be set here");
            c.data = j.at("data").get<arith::DatasetSpec>();
        }
        if (j.contains("eval")) c.eval = j.at("eval").get<EvalConfig>();
        if (j.contains("run")) c.run = j.at("run").get<RunConfig>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.data.seed = 0;
}

void ExperimentConfig::validate() const {
    if (run_name.empty() || run_name.find('/') != std::string::npos)
        throw ValidationError("run_name must be a nonempty name without '/'");
    model.validate();
    train.validate();
    data.validate();
    if (model.vocab_size != arith::kVocabSize)
        throw ValidationError("model.vocab_size must be " + std::to_string(arith::kVocabSize) + " for addition");
    if (data.max_sequence_length() > model.max_seq_len)
        throw ValidationError("data needs sequences of " + std::to_string(data.max_sequence_length()) +
                              " tokens but model.max_seq_len is " + std::to_string(model.max_seq_len));
    if (eval.t_values.empty()) throw ValidationError("eval.t_values is empty");
    for (auto t : eval.t_values)
        if (t < 1) throw ValidationError("eval.t_values must all be at least 1");
    if (eval.n_samples < 1 || eval.batch_size < 1 || eval.probe_k < 1 || eval.analyze_depth < 1)
        throw ValidationError("eval.n_samples, batch_size, probe_k and analyze_depth must be positive");
    if (run.accuracy_t < 1 || run.accuracy_samples < 1)
        throw ValidationError("run.accuracy_t and run.accuracy_samples must be positive");
    if (run.stop_at_accuracy) {
        if (!(*run.stop_at_accuracy > 0 && *run.stop_at_accuracy <= 1))
            throw ValidationError("run.stop_at_accuracy must lie in (0, 1]");
        if (run.accuracy_every == 0) throw ValidationError("run.stop_at_accuracy needs run.accuracy_every > 0");
    }
}

trainer::TrainConfig ExperimentConfig::train_config() const {
    auto t = train;
    t.seed = seed;
    return t;
}

arith::DatasetSpec ExperimentConfig::train_data() const {
    auto d = data;
    d.seed = seed;
    return d;
}

arith::DatasetSpec ExperimentConfig::eval_data() const {
    auto d = data;
    d.seed = derive_seed(seed, Stream::EvalData);
    d.n_samples = eval.n_samples;
    return d;
}

std::uint64_t ExperimentConfig::init_seed() const { return derive_seed(seed, Stream::Init); }

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config '" + path.string() + "': " + e.what());
    }
    auto c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

void save_config(const fs::path& path, const ExperimentConfig& c) { write_text(path, json(c).dump(2) + "\n"); }

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(json(c).dump()); }

std::string code_version() { return LOOPLAB_VERSION; }

fs::path RunLayout::checkpoint(std::size_t step) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%07zu.ckpt", step);
    return checkpoints() / buf;
}

fs::path train_state_path(const fs::path& checkpoint) {
    auto p = checkpoint;
    p.replace_extension(".state");
    return p;
}

std::optional<fs::path> latest_checkpoint(const RunLayout& layout) {
    std::optional<fs::path> best;
    std::size_t best_step = 0;
    if (!fs::exists(layout.checkpoints())) return best;
    for (const auto& e : fs::directory_iterator(layout.checkpoints())) {
        if (e.path().extension() != ".ckpt" || !fs::exists(train_state_path(e.path()))) continue;
        const auto step = io::read_tensor_file_header(train_state_path(e.path())).value("step", std::size_t(0));
        if (!best || step > best_step) {
            best = e.path();
            best_step = step;
        }
    }
    return best;
}

void gen_data(const ExperimentConfig& c, const RunLayout& layout) {
    c.validate();
    fs::create_directories(layout.data_dir);
    const auto train = c.train_data();
    arith::write_dataset(layout.train_data(), train, arith::generate_dataset(train));
    const auto eval = c.eval_data();
    arith::write_dataset(layout.eval_data(), eval, arith::generate_dataset(eval));
}

namespace {

std::vector<arith::Sample> load_samples(const fs::path& path, const arith::DatasetSpec& want) {
    if (!fs::exists(path))
        throw IoError("dataset '" + path.string() + "' does not exist; run gen-data with this config first");
    arith::DatasetSpec got;
    auto samples = arith::read_dataset(path, &got);
    if (!(got == want))
        throw ValidationError("dataset '" + path.string() + "' was generated from " + json(got).dump() +
                              ", the config implies " + json(want).dump());
    return samples;
}

std::vector<arith::Sample> eval_samples(const ExperimentConfig& c, const RunLayout& layout) {
    if (fs::exists(layout.eval_data())) return load_samples(layout.eval_data(), c.eval_data());
    return arith::generate_dataset(c.eval_data());
}

template <std::floating_point Real>
void save_train_state(const fs::path& checkpoint, const ExperimentConfig& c, const trainer::AdamState<Real>& opt,
                      std::size_t step) {
    std::map<std::string, ad::Tensor<Real>> tensors;
    for (const auto& [name, t] : opt.m) tensors["m/" + name] = t;
    for (const auto& [name, t] : opt.v) tensors["v/" + name] = t;
    io::write_tensor_file<Real>(train_state_path(checkpoint),
                                {{"kind", "train_state"}, {"step", step}, {"config_hash", config_hash(c)}}, tensors);
}

template <std::floating_point Real>
std::size_t load_train_state(const fs::path& checkpoint, const ExperimentConfig& c, trainer::AdamState<Real>& opt) {
    const auto path = train_state_path(checkpoint);
    if (!fs::exists(path)) throw IoError("no train state '" + path.string() + "' next to the checkpoint");
    auto file = io::read_tensor_file<Real>(path);
    if (file.header.value("kind", "") != "train_state")
        throw ValidationError("'" + path.string() + "' is not a train state");
    if (file.header.value("config_hash", "") != config_hash(c))
        throw ValidationError("train state '" + path.string() + "' belongs to a different config (hash " +
                              file.header.value("config_hash", "?") + ", this config " + config_hash(c) + ")");
    for (auto& [name, t] : file.tensors) {
        if (name.starts_with("m/"))
            opt.m[name.substr(2)] = std::move(t);
        else if (name.starts_with("v/"))
            opt.v[name.substr(2)] = std::move(t);
        else
            throw ValidationError("train state has unexpected tensor '" + name + "'");
    }
    return file.header.at("step").template get<std::size_t>();
}

// Keeps the records of steps before `step`, so a resumed log matches an
// uninterrupted one.
void truncate_metrics(const fs::path& path, std::size_t step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = json::parse(line, nullptr, false);
        if (rec.is_object() && rec.contains("step") && rec["step"].get<std::size_t>() < step) kept += line + "\n";
    }
    in.close();
    write_text(path, kept);
}

std::string fmt(double x, int prec = 4) {
    std::ostringstream ss;
    ss << std::setprecision(prec) << x;
    return ss.str();
}

} // namespace

template <std::floating_point Real>
double train_accuracy(const model::LoopedModel<Real>& m, const ExperimentConfig& c,
                      const std::vector<arith::Sample>& train_samples) {
    const std::size_t n = std::min(c.run.accuracy_samples, train_samples.size());
    arith::EvalOptions eo;
    eo.batch_size = c.eval.batch_size;
    return arith::exact_match_eval(m, std::span(train_samples.data(), n), c.run.accuracy_t, eo);
}

template <std::floating_point Real>
TrainSummary train(const ExperimentConfig& c, const RunLayout& layout, const TrainOptions& opt) {
    c.validate();
    const auto samples = load_samples(layout.train_data(), c.train_data());
    const auto tc = c.train_config();
    fs::create_directories(layout.checkpoints());
    save_config(layout.config(), c);

    model::LoopedModel<Real> m{c.model, model::init_parameters<Real>(c.model, c.init_seed())};
    trainer::AdamState<Real> adam;
    std::size_t start = 0;
    if (opt.resume_from) {
        m = model::load_checkpoint<Real>(*opt.resume_from, c.model);
        start = load_train_state(*opt.resume_from, c, adam);
        if (start > tc.steps)
            throw ValidationError("checkpoint is at step " + std::to_string(start) + ", past train.steps");
        truncate_metrics(layout.metrics(), start);
        if (opt.log) *opt.log << "resuming from step " << start << "\n";
    } else {
        write_text(layout.metrics(), "");
    }

    std::ofstream metrics(layout.metrics(), std::ios::app);
    if (!metrics) throw IoError("cannot append to '" + layout.metrics().string() + "'");

    TrainSummary out;
    std::size_t step = start;
    const std::size_t end = std::min(tc.steps, opt.stop_after.value_or(tc.steps));
    for (; step < end; ++step) {
        const auto idx = trainer::batch_indices(samples.size(), tc.batch_size, tc.seed, step);
        const auto batch = arith::make_batch(samples, idx, tc.loss_mask);
        trainer::StepMetrics sm;
        try {
            sm = trainer::stars_step(m, adam, batch, tc, step);
        } catch (const NumericError& e) {
            metrics << json{{"step", step}, {"error", e.what()}}.dump() << "\n";
            metrics.flush();
            throw;
        }
        auto rec = trainer::to_json(sm);
        const bool eval_now = c.run.accuracy_every > 0 && (step + 1) % c.run.accuracy_every == 0;
        if (eval_now) {
            out.train_accuracy = train_accuracy(m, c, samples);
            rec["train_accuracy"] = *out.train_accuracy;
        }
        metrics << rec.dump() << "\n";
        if (opt.log && (eval_now || (step + 1) % 100 == 0 || step == start)) {
            *opt.log << "step " << step + 1 << "/" << tc.steps << " t=" << sm.sampled_t << " loss " << fmt(sm.total_loss)
                     << " sft " << fmt(sm.sft_loss);
            if (sm.rho_probe) *opt.log << " rho " << fmt(*sm.rho_probe, 3);
            if (eval_now) *opt.log << " train_acc@" << c.run.accuracy_t << " " << fmt(*out.train_accuracy, 3);
            *opt.log << std::endl;
        }
        if (c.run.checkpoint_every > 0 && (step + 1) % c.run.checkpoint_every == 0 && step + 1 < tc.steps) {
            model::save_checkpoint(layout.checkpoint(step + 1), m);
            save_train_state(layout.checkpoint(step + 1), c, adam, step + 1);
        }
        if (eval_now && c.run.stop_at_accuracy && *out.train_accuracy >= *c.run.stop_at_accuracy) {
            out.stopped_early = true;
            ++step;
            if (opt.log) *opt.log << "reached target training accuracy at step " << step << "\n";
            break;
        }
    }
    metrics.close();

    out.steps_completed = step;
    out.final_checkpoint = layout.final_checkpoint();
    model::save_checkpoint(out.final_checkpoint, m);
    save_train_state(out.final_checkpoint, c, adam, step);
    write_manifest(c, layout, opt.precision);
    return out;
}

template <std::floating_point Real>
std::vector<arith::SweepPoint> run_eval_sweep(const ExperimentConfig& c, const RunLayout& layout,
                                              const fs::path& checkpoint) {
    c.validate();
    const auto m = model::load_checkpoint<Real>(checkpoint, c.model);
    const auto samples = eval_samples(c, layout);
    arith::SweepOptions so;
    so.eval.mode = c.eval.mode;
    so.eval.batch_size = c.eval.batch_size;
    so.probe = c.eval.probe;
    so.probe_k = c.eval.probe_k;
    so.probe_limit = c.eval.probe_limit;
    so.seed = derive_seed(c.seed, Stream::Probe);
    auto points = arith::eval_sweep(m, std::span(samples), std::span(c.eval.t_values), so);
    write_text(layout.sweep(), arith::sweep_csv(points));
    return points;
}

template <std::floating_point Real>
json run_analyze(const ExperimentConfig& c, const fs::path& checkpoint, const std::string& text) {
    c.validate();
    const auto m = model::load_checkpoint<Real>(checkpoint, c.model);
    const auto sample = arith::make_sample(text);
    const std::size_t depth = c.eval.analyze_depth;
    const auto traj = *model::forward(m, sample.token_ids, depth, true).trajectory;
    const auto report = dynamics::trajectory_stats(traj.states);

    json probes = json::array();
    const auto probe_seed = derive_seed(c.seed, Stream::Probe);
    for (std::size_t t = 0; t < traj.states.size(); ++t) {
        const auto p = dynamics::estimate_spectral_radius(m, traj.states[t], c.eval.probe_k, probe_seed, t);
        probes.push_back({{"t", t}, {"rho_estimate", p.rho_estimate}, {"k_steps", p.k_steps}});
    }
    json out{{"sample", sample.text},
             {"depth", depth},
             {"trajectory", dynamics::trajectory_dump(report)},
             {"convergence", dynamics::to_json(report)},
             {"pca", dynamics::to_json(dynamics::pca_project(traj.states))},
             {"probes", probes}};
    return out;
}

template <std::floating_point Real>
std::vector<LambdaRun> lambda_sweep(const ExperimentConfig& c, const std::vector<double>& lambdas, const fs::path& root,
                                    const TrainOptions& opt) {
    if (lambdas.empty()) throw ValidationError("lambda sweep needs at least one value");
    c.validate();
    const RunLayout shared(root);
    gen_data(c, shared);
    const auto train_samples = arith::read_dataset(shared.train_data());

    std::vector<LambdaRun> runs;
    std::string csv = std::string(kLambdaCsvHeader) + "\n";
    json summary = json::array();
    for (double lambda : lambdas) {
        LambdaRun r;
        r.lambda = lambda;
        auto mc = c;
        mc.train.lambda_weight = lambda;
        mc.run_name = "lambda_" + fmt(lambda, 6);
        mc.output_dir = root.string();
        const RunLayout layout(root / mc.run_name, shared.data_dir);
        if (opt.log) *opt.log << "== lambda " << lambda << " -> " << layout.root.string() << "\n";
        try {
            const auto ts = train<Real>(mc, layout, opt);
            const auto m = model::load_checkpoint<Real>(ts.final_checkpoint, mc.model);
            r.train_accuracy = train_accuracy(m, mc, train_samples);
            r.sweep = run_eval_sweep<Real>(mc, layout, ts.final_checkpoint);
            write_manifest(mc, layout);
            r.ok = true;
        } catch (const Error& e) {
            r.error = e.kind() + ": " + e.what();
            if (opt.log) *opt.log << "lambda " << lambda << " failed: " << r.error << "\n";
        }
        json rec{{"lambda", lambda}, {"status", r.ok ? "ok" : "failed"}, {"run_dir", layout.root.string()}};
        rec["train_accuracy"] = r.train_accuracy ? json(*r.train_accuracy) : json();
        if (!r.ok) rec["error"] = r.error;
        summary.push_back(rec);
        const std::string head = fmt(lambda, 6) + "," + (r.ok ? "ok" : "failed") + "," +
                                 (r.train_accuracy ? fmt(*r.train_accuracy, 6) : "") + ",";
        if (r.sweep.empty()) csv += head + ",,,,\n";
        for (const auto& p : r.sweep) {
            const auto line = arith::sweep_csv({p});
            csv += head + line.substr(line.find('\n') + 1);
        }
        runs.push_back(std::move(r));
    }
    write_text(root / "lambda_sweep.csv", csv);
    write_text(root / "lambda_sweep.json", summary.dump(2) + "\n");
    return runs;
}

void write_manifest(const ExperimentConfig& c, const RunLayout& layout, std::optional<int> train_precision) {
    json precision;
    if (train_precision)
        precision = *train_precision;
    else if (fs::exists(layout.manifest()))
        precision = json::parse(slurp(layout.manifest()), nullptr, false).value("train_precision", json());
    json files = json::object();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(layout.root))
        if (e.is_regular_file() && e.path() != layout.manifest()) paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) files[fs::relative(p, layout.root).generic_string()] = fnv1a_hex(slurp(p));
    json m{{"run_name", c.run_name},
           {"config_hash", config_hash(c)},
           {"code_version", code_version()},
           {"train_precision", precision},
           {"artifacts", files}};
    write_text(layout.manifest(), m.dump(2) + "\n");
}

#define LOOPLAB_INSTANTIATE_EXPERIMENT(R)                                                                         \
    template double train_accuracy<R>(const model::LoopedModel<R>&, const ExperimentConfig&,                      \
                                      const std::vector<arith::Sample>&);                                         \
    template TrainSummary train<R>(const ExperimentConfig&, const RunLayout&, const TrainOptions&);                \
    template std::vector<arith::SweepPoint> run_eval_sweep<R>(const ExperimentConfig&, const RunLayout&,          \
                                                              const fs::path&);                                   \
    template json run_analyze<R>(const ExperimentConfig&, const fs::path&, const std::string&);                   \
    template std::vector<LambdaRun> lambda_sweep<R>(const ExperimentConfig&, const std::vector<double>&,          \
                                                    const fs::path&, const TrainOptions&);

LOOPLAB_INSTANTIATE_EXPERIMENT(float)
LOOPLAB_INSTANTIATE_EXPERIMENT(double)

} // namespace looplab::experiment
