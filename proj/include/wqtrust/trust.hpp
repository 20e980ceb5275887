#pragma once

// Trust protocols: per-pair evaluation, robustness sweeps, TTA / MC-dropout
// uncertainty, and group attribution (ablation, traverse, integrated
// gradients).

#include "wqtrust/corrupt.hpp"
#include "wqtrust/metrics.hpp"
#include "wqtrust/models.hpp"

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace wqt::trust {

using data::RowIndex;
using models::Model;
using models::NormalizedData;

/// Pairs whose baseline KGE is below this are left out of percent changes.
inline constexpr double kMinBaselineKge = 0.1;

// ------------------------------------------------------------------ evaluation

struct PairScore {
    std::size_t basin = 0;
    std::size_t variable = 0;
    std::size_t n_obs = 0;
    bool defined = false; // false when KGE is undefined for the pair
    metrics::KgeBreakdown kge{kNaN, kNaN, kNaN, kNaN};
    double pbias = kNaN;
};

/// Scores for every (basin, variable), basin-major.
struct Evaluation {
    std::size_t n_basins = 0;
    std::size_t n_variables = 0;
    std::vector<PairScore> pairs;

    const PairScore& at(std::size_t basin, std::size_t variable) const {
        return pairs[basin * n_variables + variable];
    }
};

/// Rows among `rows` with at least one observed target.
std::vector<RowIndex> observed_rows(const data::BasinDataset& ds, std::span<const RowIndex> rows);

/// KGE and PBIAS of raw-unit predictions [rows x variables] against the
/// observed raw targets of `ds`.
Evaluation evaluate(const data::BasinDataset& ds, std::span<const RowIndex> rows, const Matrix& predicted);

/// Percent change of each pair's KGE; NaN where the baseline is undefined,
/// below kMinBaselineKge, or the changed score is undefined.
std::vector<double> percent_changes(const Evaluation& base, const Evaluation& changed);

/// Everything needed to train and score one model family on one split.
struct Experiment {
    const data::BasinDataset* ds = nullptr;
    const data::Split* split = nullptr;
    const data::DatasetNormalizer* norm = nullptr;
    const NormalizedData* data = nullptr;
    models::ModelSpec spec;
    models::TrainConfig train;
};

/// Scoring rows: test rows with at least one observed target.
std::vector<RowIndex> scoring_rows(const Experiment& ex);

/// Predictions in raw units for the given inputs.
using Predictor =
    std::function<Matrix(const NormalizedData& inputs, std::span<const RowIndex> rows, const models::ForwardOptions&)>;
Predictor model_predictor(Model& model, const data::DatasetNormalizer& norm);

Evaluation evaluate_model(const Experiment& ex, Model& model, const NormalizedData& inputs,
                          const models::ForwardOptions& opts = {});

// ------------------------------------------------------------------ robustness

struct RobustnessCurve {
    corrupt::Kind kind = corrupt::Kind::Outlier;
    corrupt::Side side = corrupt::Side::Targets;
    std::vector<double> levels;        // starts at 0
    std::vector<double> median_change; // percent, 0 at level 0
    std::vector<std::size_t> n_pairs;  // valid pairs per level
    double beta = 0.0;                 // Theil-Sen slope, percent per 0.1 corruption
};

/// Builds the curve from a baseline evaluation and one evaluation per level.
/// Throws SweepError when a level has no valid pair.
RobustnessCurve robustness_curve(const Evaluation& base, const std::vector<std::pair<double, Evaluation>>& levels,
                                 corrupt::Kind kind = corrupt::Kind::Outlier,
                                 corrupt::Side side = corrupt::Side::Targets);

struct SweepResult {
    RobustnessCurve curve;
    std::vector<Evaluation> evaluations; // one per spec
    std::vector<corrupt::Manifest> manifests;
};

/// Retrains on each corrupted training set (same training seed as the
/// baseline) and scores on clean test inputs. Adversarial deltas come from
/// `baseline`.
SweepResult robustness_sweep(const Experiment& ex, Model& baseline, const Evaluation& base_eval,
                             const std::vector<corrupt::CorruptionSpec>& specs, std::uint64_t train_seed);

/// One level of a sweep: corrupt, retrain, score on clean inputs.
Evaluation sweep_level(const Experiment& ex, Model& baseline, const corrupt::CorruptionSpec& spec,
                       std::uint64_t train_seed, corrupt::Manifest* manifest = nullptr);

// ------------------------------------------------------------------ uncertainty

enum class UncertaintyMethod { TTA, MCDropout };
enum class NoiseScope { RunoffOnly, AllDynamic };
std::string_view to_string(UncertaintyMethod m);
std::string_view to_string(NoiseScope s);

struct PairUncertainty {
    std::size_t basin = 0;
    std::size_t variable = 0;
    std::size_t runs = 0;    // runs where KGE was defined
    double kge_sd = kNaN;    // sample SD (n - 1)
    double kge_mean = kNaN;
};

struct UncertaintyResult {
    UncertaintyMethod method = UncertaintyMethod::TTA;
    std::size_t runs = 0;
    double parameter = 0.0; // noise sigma or dropout probability
    std::vector<PairUncertainty> pairs;
    double median_sd() const;
};

/// Sample SD by Welford's update, so identical values give exactly 0.
double sample_sd(std::span<const double> v);

/// Gaussian noise N(0, sigma) on the normalised dynamic inputs in scope,
/// fresh per run.
UncertaintyResult tta_uncertainty(const Experiment& ex, const Predictor& predict, double sigma, std::size_t runs,
                                  NoiseScope scope, std::uint64_t seed);

/// Dropout with probability p at every dropout site, independent masks
/// per run.
UncertaintyResult mc_dropout_uncertainty(const Experiment& ex, const Predictor& predict, double p,
                                         std::size_t runs, std::uint64_t seed);

/// Single replicates; run r draws from mix_seed(seed, r).
Evaluation tta_run(const Experiment& ex, const Predictor& predict, double sigma, NoiseScope scope,
                   std::uint64_t seed, std::size_t run);
Evaluation mc_dropout_run(const Experiment& ex, const Predictor& predict, double p, std::uint64_t seed,
                          std::size_t run);

UncertaintyResult uncertainty_from_runs(UncertaintyMethod method, double parameter,
                                        const std::vector<Evaluation>& runs);

// ------------------------------------------------------------------ attribution

enum class AttributionMethod { Ablation, Traverse, IG };
std::string_view to_string(AttributionMethod m);

inline constexpr std::size_t kGroups = std::size(data::kAttributionGroups);
using GroupMask = unsigned; // bit i set = kAttributionGroups[i] present
inline constexpr GroupMask kAllGroups = (1u << kGroups) - 1;

/// "M+Q+RC" style label, "none" for the empty set.
std::string mask_label(GroupMask mask);

/// Copy with every attribution group outside `mask` zeroed; calendar and
/// coordinate covariates always stay.
NormalizedData with_groups(const NormalizedData& data, GroupMask mask);

struct AttributionResult {
    AttributionMethod method = AttributionMethod::Ablation;
    std::vector<std::string> variables;
    std::vector<std::array<double, kGroups>> raw;   // per variable
    std::vector<std::array<double, kGroups>> share; // per variable, sums to 1
};

/// Shares from raw scores: negatives and NaN count as 0; an all-zero row
/// falls back to equal shares.
std::array<double, kGroups> normalized_shares(const std::array<double, kGroups>& raw);

/// importance(g) = median over basins of the percent KGE drop when g is
/// removed from the full model. `without[i]` is the model without group i.
AttributionResult ablation_importance(const Evaluation& full, const std::array<const Evaluation*, kGroups>& without,
                                      const std::vector<std::string>& variables);

/// importance(g) = median over basins of the mean over the 16 subsets S
/// without g of 100 (KGE(S+g) - KGE(S)) / |KGE(S+g)|. The design is the union
/// of the given masks; every subset of it must be present.
AttributionResult traverse_importance(const std::map<GroupMask, Evaluation>& subsets,
                                      const std::vector<std::string>& variables);

/// Trains on `with_groups(data, mask)` and scores on the test rows.
Evaluation subset_evaluation(const Experiment& ex, GroupMask mask, std::uint64_t seed);

/// Integrated gradients by the midpoint rule for a batched function:
/// f maps [S x n] to per-row outputs [S]; returns IG for every coordinate.
std::vector<double> integrated_gradients(const std::function<nd::Tensor(const nd::Tensor&)>& f,
                                         std::span<const double> x, std::span<const double> baseline,
                                         std::size_t steps);

struct SampleAttribution {
    std::vector<double> dynamic; // window_rows x F_d
    std::vector<double> statics; // F_s
    double output = 0.0;         // F(x)
    double baseline_output = 0.0;
    double completeness_gap() const; // |sum IG - (F(x) - F(x'))|
};

struct IgBaseline {
    double dynamic = models::kFillValue;
    double statics = 0.0;
};

/// IG of one model output for one sample (batch of size 1) with respect to
/// the dynamic window and the statics; coordinates stay at their values.
SampleAttribution integrated_gradients(Model& model, const models::ModelInput& sample, std::size_t output,
                                       std::size_t steps, const IgBaseline& baseline = {});

/// Group scores: per sample, feature-level IG (summed over the window for
/// dynamic features), then mean |IG| over samples, then mean over the
/// group's features; normalised per variable.
AttributionResult ig_attribution(Model& model, const NormalizedData& data, std::span<const RowIndex> samples,
                                 const std::vector<std::string>& variables, std::size_t steps,
                                 const IgBaseline& baseline = {});

} // namespace wqt::trust
