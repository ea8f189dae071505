#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "looplab/arith/arith.hpp"
#include "looplab/model/config.hpp"
#include "looplab/trainer/trainer.hpp"

namespace looplab::experiment {

namespace fs = std::filesystem;

struct EvalConfig {
    std::vector<std::size_t> t_values = {1, 2, 4, 8, 16, 32, 64, 128};
    std::size_t n_samples = 1000;
    arith::DecodeMode mode = arith::DecodeMode::Greedy;
    std::size_t batch_size = 256;
    bool probe = true;
    std::size_t probe_k = 1;
    std::size_t probe_limit = 64;
    std::size_t analyze_depth = 128; // T for analyze

    bool operator==(const EvalConfig&) const = default;
};

// Bookkeeping of the training loop.
struct RunConfig {
    std::size_t checkpoint_every = 1000; // 0 writes only the final checkpoint
    std::size_t accuracy_every = 0;      // training-set exact match; 0 disables
    std::size_t accuracy_samples = 512;
    std::size_t accuracy_t = 4;
    std::optional<double> stop_at_accuracy;

    bool operator==(const RunConfig&) const = default;
};

// One experiment. The top-level seed is the only seed: the data, init,
// loop-sampling, JSRR and batch-order streams all derive from it.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string run_name = "run";
    std::string output_dir = "runs";
    model::ModelConfig model;
    trainer::TrainConfig train;
    arith::DatasetSpec data;
    EvalConfig eval;
    RunConfig run;

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;

    trainer::TrainConfig train_config() const;
    arith::DatasetSpec train_data() const;
    arith::DatasetSpec eval_data() const;
    std::uint64_t init_seed() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Parses and validates; malformed JSON and schema violations both raise
// ValidationError, a missing file IoError.
ExperimentConfig load_config(const fs::path& path);
void save_config(const fs::path& path, const ExperimentConfig& c);

// FNV-1a 64 of the canonical (key-sorted, compact) JSON form, as hex.
std::string config_hash(const ExperimentConfig& c);
std::string fnv1a_hex(std::string_view bytes);
std::string code_version();

// Where a run keeps its files. Runs of a lambda sweep share data_dir.
struct RunLayout {
    fs::path root;
    fs::path data_dir;

    explicit RunLayout(fs::path r) : root(r), data_dir(std::move(r) / "data") {}
    RunLayout(fs::path r, fs::path data) : root(std::move(r)), data_dir(std::move(data)) {}

    fs::path train_data() const { return data_dir / "train.txt"; }
    fs::path eval_data() const { return data_dir / "eval.txt"; }
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path checkpoint(std::size_t step) const;
    fs::path final_checkpoint() const { return checkpoints() / "final.ckpt"; }
    fs::path metrics() const { return root / "metrics.jsonl"; }
    fs::path manifest() const { return root / "manifest.json"; }
    fs::path config() const { return root / "config.json"; }
    fs::path sweep() const { return root / "sweep.csv"; }
    fs::path analysis() const { return root / "analysis.json"; }
};

// Optimizer moments and step count next to a checkpoint.
fs::path train_state_path(const fs::path& checkpoint);

// Checkpoint whose train state has the highest step, if any.
std::optional<fs::path> latest_checkpoint(const RunLayout& layout);

// Writes the train and eval datasets with descriptors. Same config, same bytes.
void gen_data(const ExperimentConfig& c, const RunLayout& layout);

struct TrainOptions {
    std::optional<fs::path> resume_from; // checkpoint with a train-state sidecar
    std::ostream* log = nullptr;         // progress lines
    int precision = 32;                  // recorded in the manifest
    std::optional<std::size_t> stop_after; // halt at this step; the schedule still spans train.steps
};

struct TrainSummary {
    std::size_t steps_completed = 0;
    fs::path final_checkpoint;
    std::optional<double> train_accuracy; // last periodic evaluation
    bool stopped_early = false;
};

// Trains from scratch or resumes. Every step appends one StepMetrics record
// to metrics.jsonl; a numeric failure appends {"step", "error"} and rethrows.
template <std::floating_point Real>
TrainSummary train(const ExperimentConfig& c, const RunLayout& layout, const TrainOptions& opt = {});

// Exact match on the first accuracy_samples training samples at accuracy_t.
template <std::floating_point Real>
double train_accuracy(const model::LoopedModel<Real>& m, const ExperimentConfig& c,
                      const std::vector<arith::Sample>& train_samples);

template <std::floating_point Real>
std::vector<arith::SweepPoint> run_eval_sweep(const ExperimentConfig& c, const RunLayout& layout,
                                              const fs::path& checkpoint);

// Trajectory of one "A+B=C" sample to eval.analyze_depth: dump, PCA,
// convergence report and the probe at every depth.
template <std::floating_point Real>
nlohmann::json run_analyze(const ExperimentConfig& c, const fs::path& checkpoint, const std::string& sample);

struct LambdaRun {
    double lambda = 0;
    bool ok = false;
    std::string error;
    std::optional<double> train_accuracy;
    std::vector<arith::SweepPoint> sweep;
};

// One run per lambda under root/lambda_<value>, all on root/data. A failed
// member is recorded and the sweep moves on. Writes lambda_sweep.csv and
// lambda_sweep.json under root.
template <std::floating_point Real>
std::vector<LambdaRun> lambda_sweep(const ExperimentConfig& c, const std::vector<double>& lambdas, const fs::path& root,
                                    const TrainOptions& opt = {});

inline constexpr const char* kLambdaCsvHeader =
    "lambda,status,train_accuracy,t,exact_match_accuracy,mean_state_norm,mean_successive_delta,mean_rho_estimate";

// Hashes every file under the run directory except the manifest itself.
// Without a precision, keeps the one an earlier train recorded.
void write_manifest(const ExperimentConfig& c, const RunLayout& layout, std::optional<int> train_precision = {});

} // namespace looplab::experiment
