#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "nep/embedder.hpp"
#include "nep/nanolm.hpp"
#include "nep/serializer.hpp"
#include "nep/synthgen.hpp"

namespace nep {

// Every pipeline stage reads its settings from one of these sections. Seeds
// are not configured per section: each stage draws stage_seed(seed, k) with
// the k listed in SeedStage.
struct RunConfig {
    std::uint64_t seed = 42;
    std::filesystem::path out = "runs/desk";

    struct Synth {
        CohortSpec cohort;  // seed fields are overwritten from the global seed
        std::int64_t downstream_patients = 2500;
    } synth;

    struct Sampling {
        double alpha = 0.5;
        std::int64_t n_instances = 0;  // 0 = train.total_steps * train.global_batch
        double held_out_fraction = 0.1;
        std::int64_t min_count = 2;  // rarer (type, value) pairs become UNK
    } sampling;

    WindowConfig serializer;

    lm::ModelConfig model;  // vocab_size and max_tokens are filled from the data and serializer
    lm::TrainConfig train;
    lm::MaskMode mode = lm::MaskMode::causal;

    struct Embed {
        Pooling pooling = Pooling::mean;
        int w_embed = 0;
        unsigned threads = 1;
        std::string format = "csv";  // or "binary"
    } embed;

    struct Eval {
        std::vector<std::string> tasks = {"high_risk", "survival"};
        int k = 5;
        int n_bootstrap = 1000;
        double l2 = 1e-2;
        double horizon_days = 365.0;
        std::vector<std::int64_t> sweep_sizes = {100, 500, 2000};
        std::string sweep_task = "survival";
        unsigned threads = 1;
    } eval;
};

enum SeedStage : std::uint64_t {
    kStageStructure = 0,
    kStageCohort = 1,
    kStageDownstream = 2,
    kStageSplit = 3,
    kStageSampling = 4,
    kStageInit = 5,
    kStageTrain = 6,
    kStageEval = 7,
};

// Defaults overlaid with `j`. Unknown keys and ill-typed values raise
// ConfigError naming the dotted field path; every section is validated.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunConfig& config);
std::string config_hash(const RunConfig& config);

// Sets a dotted path ("train.peak_lr") in a raw config document. The value is
// read as JSON when it parses, otherwise as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Stage seeds applied to the cohort spec.
CohortSpec nep_cohort_spec(const RunConfig& config);
CohortSpec downstream_cohort_spec(const RunConfig& config);

namespace artifacts {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kCohort = "cohort.jsonl";
inline constexpr const char* kOracle = "oracle.json";
inline constexpr const char* kDownstream = "downstream.jsonl";
inline constexpr const char* kDownstreamOracle = "downstream_oracle.json";
inline constexpr const char* kVocab = "vocab.json";
inline constexpr const char* kSelections = "selections.jsonl";
inline constexpr const char* kInstances = "instances.jsonl";
inline constexpr const char* kHeldOut = "heldout_instances.jsonl";
inline constexpr const char* kInitCheckpoint = "init_checkpoint.bin";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kLossCurve = "loss_curve.csv";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kSweepCsv = "sweep.csv";
inline constexpr const char* kSweep = "sweep.json";
inline constexpr const char* kReport = "report.md";
}  // namespace artifacts

// Each command reads its inputs from config.out, writes its artifacts plus a
// "<command>.json" manifest (config hash, seed, summary) there, and logs a
// short summary to `log`.
void cmd_synth(const RunConfig& config, std::ostream& log);
void cmd_prep(const RunConfig& config, std::ostream& log);
void cmd_train(const RunConfig& config, std::ostream& log);
// Empty paths select checkpoint.bin and embeddings.<csv|bin>.
void cmd_embed(const RunConfig& config, std::ostream& log, std::filesystem::path checkpoint = {},
               std::filesystem::path output = {});
void cmd_eval(const RunConfig& config, std::ostream& log, std::filesystem::path embeddings = {});
void cmd_sweep(const RunConfig& config, std::ostream& log);
void cmd_report(const std::filesystem::path& run_dir, std::ostream& log);

}  // namespace nep
