#pragma once

// Experiment orchestration: YAML config, seed derivation, the staged
// pipeline, and JSON / CSV report emission.

#include "wqtrust/corrupt.hpp"
#include "wqtrust/dataio.hpp"
#include "wqtrust/error.hpp"
#include "wqtrust/models.hpp"
#include "wqtrust/trust.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wqt::harness {

using Json = nlohmann::ordered_json;

/// Config grammar version; part of the config hash.
inline constexpr int kConfigVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

struct DataConfig {
    std::optional<std::filesystem::path> ingest; // set = read CSVs instead of synthesising
    data::IngestOptions ingest_options;
    data::SynthConfig synth;
    std::size_t variables = 20;  // default recipes used when synthesising
    std::optional<double> p_obs; // overrides every recipe
};

struct SweepConfig {
    corrupt::Kind kind = corrupt::Kind::Outlier;
    corrupt::Side side = corrupt::Side::Targets;
    std::vector<double> levels;
    double sigma = 0.1;
    corrupt::PgdConfig pgd;
    /// "outlier_targets", "noise_features", ...
    std::string label() const;
};

/// Resolves a preset name to its reference levels.
SweepConfig sweep_preset(std::string_view name);

struct TtaConfig {
    bool enabled = false;
    double sigma = 0.1;
    std::size_t runs = 50;
    trust::NoiseScope scope = trust::NoiseScope::RunoffOnly;
};

struct McConfig {
    bool enabled = false;
    double p = 0.3;
    std::size_t runs = 50;
    std::vector<models::Family> families; // empty = every configured model
};

struct AttributionConfig {
    bool ablation = false;
    bool traverse = false;
    bool ig = false;
    std::optional<std::size_t> subset_epochs;
    std::size_t ig_steps = 64;
    std::size_t ig_samples = 16;
    trust::IgBaseline ig_baseline;
};

struct ExperimentConfig {
    std::optional<std::uint64_t> seed;
    std::filesystem::path output = "wqtrust-out";
    std::vector<std::string> formats{"json", "csv"};
    std::size_t jobs = 1;

    DataConfig data;
    data::SplitPlan split;
    std::vector<models::ModelSpec> models; // input and output sizes come from the data
    models::TrainConfig train;
    std::vector<SweepConfig> robustness;
    TtaConfig tta;
    McConfig mc;
    AttributionConfig attribution;
    bool statistics = true;
};

/// Parses the YAML grammar documented in docs/config.md. Unknown keys,
/// unknown presets and malformed values raise ConfigError.
ExperimentConfig parse_config(const std::string& yaml);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Semantic checks (seed present, positive sizes, resolvable references).
void validate(const ExperimentConfig& cfg);

/// Canonical form of every experiment-defining field. Output directory,
/// formats and job count are execution details and are left out.
Json config_json(const ExperimentConfig& cfg);

/// Hex SHA-256 of the canonical config dump.
std::string config_hash(const ExperimentConfig& cfg);

/// SHA-256 over "wqtrust.seed.v1", the master seed as 8 little-endian bytes,
/// then for each label its byte length as 4 little-endian bytes followed by
/// the bytes. The seed is the first 8 digest bytes read little-endian.
std::uint64_t seed_stream(std::uint64_t master, const std::vector<std::string>& path);

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::filesystem::path> output;
    std::optional<std::vector<std::string>> formats;
};

/// Precedence: flag > WQTRUST_OUT environment variable (output only) > file
/// > default. `env_out` is the environment value, if any.
void apply_overrides(ExperimentConfig& cfg, const Overrides& flags, const char* env_out);

/// Runs `n` independent jobs on up to `threads` workers. Every job runs; the
/// error of the lowest failing index is rethrown as a StageError.
void run_jobs(std::size_t n, std::size_t threads, const std::string& stage,
              const std::function<std::string(std::size_t)>& job_name,
              const std::function<void(std::size_t)>& job);

struct RunOutcome {
    Json report;
    std::optional<StageError> failure;
    bool ok() const { return !failure.has_value(); }
};

/// The staged pipeline: data, split, baselines, evaluate, sweeps,
/// uncertainty, attribution, stats. A failing stage stops the run; the
/// report keeps what finished and carries a failure marker.
RunOutcome run(const ExperimentConfig& cfg);

/// The dataset a config describes (synthesised or ingested).
data::BasinDataset load_dataset(const ExperimentConfig& cfg);

inline const std::vector<std::string> kTables{"baseline", "robustness", "uncertainty", "attribution", "stats"};

/// Flat CSV files (tables and figure data) rendered from a report, keyed by
/// file name. Numbers use 17 significant digits.
std::map<std::string, std::string> render_csv(const Json& report);

/// Canonical JSON text of a report.
std::string render_json(const Json& report);

/// Writes report.json and/or the CSV files into `dir`, plus a FAILED marker
/// for failed reports. Throws IoError when the directory is unwritable.
void emit(const Json& report, const std::filesystem::path& dir, const std::vector<std::string>& formats);

Json read_report(const std::filesystem::path& path);

} // namespace wqt::harness
