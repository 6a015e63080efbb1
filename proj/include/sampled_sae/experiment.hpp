#pragma once

// Experiment harness: JSON configuration with desk- and paper-scale presets,
// and the gen-data / train / eval / sweep / compare commands behind the CLI.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sampled_sae/evalsuite.hpp"
#include "sampled_sae/io.hpp"
#include "sampled_sae/sae_core.hpp"
#include "sampled_sae/synthgen.hpp"
#include "sampled_sae/trainer.hpp"

namespace sampled_sae {

struct SweepGrid {
    std::vector<double> ells;   // ell values; anything >= m/k means BatchTopK
    std::vector<ScoringRule> rules;
    std::vector<std::uint64_t> seeds;
    int jobs = 1;
};

struct ExperimentConfig {
    std::string profile = "desk";
    GateConfig gate;
    TrainConfig train;
    SynthConfig data;
    std::filesystem::path dataset;  // SSYN file; defaults to <out_dir>/data.ssyn
    SweepGrid sweep;
    std::filesystem::path out_dir = "runs/desk";
    std::int64_t checkpoint_every = 1000;

    std::filesystem::path dataset_path() const;
    /// Throws ConfigError on invalid settings.
    void validate() const;
};

/// d=64, m=256, k=8 on a 64 x 256 dictionary with 20,000 samples.
ExperimentConfig desk_profile();
/// d=256, k=1024, n=10,000 data and the published training schedule.
ExperimentConfig paper_profile();
ExperimentConfig profile_by_name(const std::string& name);

/// The published ell grid with values above m/k replaced by m/k.
std::vector<double> default_ell_grid(const GateConfig& gate);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Fields absent from `j` keep the values of the profile named by
/// j["profile"] (desk when missing).
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Accepts a number, or "max"/"batchtopk" for m/k.
double parse_ell(const std::string& text, const GateConfig& gate);

// --- evaluation ----------------------------------------------------------

/// Inference-mode (thresholded) pass over every sample in `gt` plus all
/// dictionary-recovery metrics.
EvalReport evaluate(const SaeParams<float>& params, const SynthGroundTruth& gt,
                    std::size_t chunk_rows = 4096);

nlohmann::json report_to_json(const EvalReport& r);

// --- commands --------------------------------------------------------------

struct GenDataResult {
    std::filesystem::path dataset;
    std::filesystem::path sidecar;
    DatasetStats stats;
};
GenDataResult cmd_gen_data(const ExperimentConfig& cfg);

struct TrainRunResult {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics;
    TrainResult result;
};
/// Trains one (rule, ell, seed) cell into `out_dir`. With `resume`, continues
/// from <out_dir>/checkpoint.ssae when it exists.
TrainRunResult cmd_train(const ExperimentConfig& cfg, bool resume = false);

EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                    const std::filesystem::path& out_json);

struct SweepRow {
    ScoringRule rule;
    double ell;
    std::uint64_t seed;
    EvalReport report;
    double mmcs_vs_seed0 = 0;
};
std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& row);

struct SweepResult {
    std::vector<SweepRow> rows;   // sorted by (rule name, ell, seed)
    std::vector<std::string> failures;
    std::filesystem::path csv;
};
SweepResult cmd_sweep(const ExperimentConfig& cfg);

struct CompareResult {
    double mmcs = 0;
    std::vector<BestMatch> matches;
};
CompareResult cmd_compare(const std::filesystem::path& a, const std::filesystem::path& b,
                          const std::filesystem::path& out_csv);

}  // namespace sampled_sae
