#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "due/dataset.hpp"
#include "due/diffusion.hpp"
#include "due/train.hpp"
#include "due/uncertainty.hpp"

// Pipeline plumbing: run-directory convention, strict config files, stage
// manifest with input hashes, and the eight user-facing commands.
namespace due::cli {

using json = nlohmann::ordered_json;

// ---- configuration ----------------------------------------------------

struct DataCfg {
    SyntheticConfig synth;
    SplitRatios ratios;
};

struct InterpCfg {
    DenoiserTrainConfig train;  // includes schedule + unet arch
    int block = 2;              // autoregressive block size B
    int max_gap = 6;            // largest slice gap enumerated for triples
    int max_triples = 400;      // training-set cap
};

struct UncertaintyCfg {
    int t_runs = 8;
    UQTrainConfig train;
};

struct EvalCfg {
    std::string split = "test";
    double threshold = 0.5;
    int max_overlays = 6;
};

struct SweepCfg {
    std::string parameter = "lambda";
    std::vector<double> values;  // empty -> per-parameter defaults
};

// Everything a run needs; every field has a default so "{}" is a valid
// config. Unknown keys anywhere are rejected.
struct RunConfig {
    uint64_t seed = 0;
    std::string run_dir;  // optional; --run-dir and DUE_RUN_DIR take precedence
    DataCfg data;
    InterpCfg interp;
    UncertaintyCfg uncertainty;
    TrainConfig train;
    EvalCfg eval;
    SweepCfg sweep;
};

RunConfig parse_run_config(const json& j);
json dump_run_config(const RunConfig& cfg);  // fully resolved

// Apply "dotted.path=value" overrides onto the raw config json. Values parse
// as json when possible, else as strings.
void apply_overrides(json& config, const std::vector<std::string>& overrides);

// ---- manifest ------------------------------------------------------------

struct StageRecord {
    uint64_t seed = 0;
    std::map<std::string, std::string> inputs;  // label -> content hash
    std::vector<std::string> outputs;           // run-dir-relative
    double wall_seconds = 0.0;
};

struct RunManifest {
    int format_version = 1;
    uint64_t root_seed = 0;
    std::map<std::string, StageRecord> stages;  // one record per stage
};

RunManifest load_run_manifest(const std::string& run_dir);  // absent file -> empty
void save_run_manifest(const std::string& run_dir, const RunManifest& m);

// ---- execution ----------------------------------------------------------

// Exclusive .lock file; a second concurrent command on the same run dir fails.
struct RunLock {
    std::filesystem::path path;
    explicit RunLock(const std::string& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
};

struct RunContext {
    RunConfig cfg;
    std::string run_dir;
};

// Stage commands. Each ensures the run dir + resolved config exist, verifies
// upstream artifacts (dependency error naming the stage to run), and records
// itself in the manifest. Returns false on an up-to-date no-op.
bool cmd_gen_data(const RunContext& ctx);
bool cmd_train_interp(const RunContext& ctx);
bool cmd_mc_variance(const RunContext& ctx);
bool cmd_train_uq(const RunContext& ctx);
bool cmd_build_targets(const RunContext& ctx);
bool cmd_train(const RunContext& ctx);
bool cmd_evaluate(const RunContext& ctx);
bool cmd_sweep(const RunContext& ctx);

// The seven data/train/eval stages in dependency order.
void run_full_pipeline(const RunContext& ctx);

// Dispatch by command name (the eight above); unknown -> validation error.
bool run_command(const std::string& command, const RunContext& ctx);

// Full entry point used by main(): loads the config file, applies overrides
// and flag/env precedence, locks the run dir, runs the command.
int cli_main(const std::string& command, const std::string& config_path,
             const std::optional<uint64_t>& seed_flag,
             const std::optional<std::string>& run_dir_flag,
             const std::vector<std::string>& overrides);

int exit_code_for(ErrorKind kind);  // stable per-category nonzero codes

}  // namespace due::cli
