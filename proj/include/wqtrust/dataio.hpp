#pragma once

// Basin datasets: schema, CSV ingestion, normalisation, train/test splits,
// land-use classes, coverage, and the synthetic basin generator.

#include "wqtrust/matrix.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace wqt::data {

// ------------------------------------------------------------------ schema

enum class FeatureGroup { M, Q, RC, V, Time, BA, Coord };
std::string_view to_string(FeatureGroup g);
FeatureGroup parse_feature_group(std::string_view s);

/// The five attribution groups, in report order. Time and Coord are always-on
/// spatiotemporal covariates and never attributed.
inline constexpr FeatureGroup kAttributionGroups[] = {FeatureGroup::M, FeatureGroup::Q,
                                                       FeatureGroup::RC, FeatureGroup::V,
                                                       FeatureGroup::BA};

enum class NormMethod { MinMax, LogMinMax };
std::string_view to_string(NormMethod m);
NormMethod parse_norm_method(std::string_view s);

enum class LandUse { AG, UR, UD, MX };
std::string_view to_string(LandUse l);
LandUse parse_land_use(std::string_view s);

struct ColumnInfo {
    std::string name;
    FeatureGroup group = FeatureGroup::BA;
    NormMethod method = NormMethod::LogMinMax;
};

using Date = std::chrono::year_month_day;
std::string format_date(const Date& d);
Date parse_date(std::string_view iso);
/// Days relative to 2000-01-01, negative before.
long datenum(const Date& d);

struct BasinRecord {
    std::string id;
    double longitude = 0.0;
    double latitude = 0.0;
    std::vector<double> statics;         // one per static column
    Matrix dynamics;                     // days x dynamic columns, NaN = missing after fill
    Matrix targets;                      // days x targets, NaN where unobserved
    std::vector<std::uint8_t> target_mask; // days x targets, 1 = observed
    LandUse land_use = LandUse::MX;
    double urban_pct = 0.0;
    double ag_pct = 0.0;
    /// Generator ground truth: variance share of the runoff + seasonal part,
    /// per target. Empty for ingested data.
    std::vector<double> true_simplicity;

    bool observed(std::size_t day, std::size_t target) const {
        return target_mask[day * targets.cols() + target] != 0;
    }
};

struct BasinDataset {
    std::vector<Date> calendar;
    std::vector<ColumnInfo> dynamic_columns;
    std::vector<ColumnInfo> static_columns;
    std::vector<ColumnInfo> target_columns;
    std::vector<BasinRecord> basins;

    std::size_t n_days() const { return calendar.size(); }
    std::size_t n_dynamic() const { return dynamic_columns.size(); }
    std::size_t n_static() const { return static_columns.size(); }
    std::size_t n_targets() const { return target_columns.size(); }

    std::optional<std::size_t> dynamic_index(std::string_view name) const;
    std::optional<std::size_t> static_index(std::string_view name) const;
    std::optional<std::size_t> target_index(std::string_view name) const;
    std::vector<std::size_t> dynamic_indices(FeatureGroup g) const;
    std::vector<std::size_t> static_indices(FeatureGroup g) const;

    /// Checks the structural invariants (shapes, daily calendar, group
    /// coverage, land-use consistency). Throws IngestionError.
    void validate(bool relaxed_land_use) const;
};

/// Default normalisation per column: min-max for vegetation, coordinates,
/// time covariates and the Temp/DO/pH targets, log-min-max otherwise.
NormMethod default_norm_method(std::string_view name, FeatureGroup group, bool is_target);

/// Column groups for the known dynamic feature names.
std::optional<FeatureGroup> known_dynamic_group(std::string_view name);

/// Name of the 20 water-quality variables (USGS parameter abbreviations).
const std::vector<std::string>& water_quality_variables();
/// The 49 static basin attributes, including LAT_GAGE / LNG_GAGE.
const std::vector<std::string>& static_attribute_names();

// ------------------------------------------------------------------ land use

/// AG if ag > 50 and urban <= 5 (7 when relaxed); UD if urban <= 5 and
/// ag <= 25; UR if urban > 25 and ag <= 25; MX otherwise, checked in that order.
LandUse classify_land_use(double urban_pct, double ag_pct, bool relaxed);

// ------------------------------------------------------------------ coverage

/// 100 * observed days / calendar days for one target of one basin.
double coverage(const BasinRecord& record, std::size_t target);

// ------------------------------------------------------------------ ingestion

struct IngestOptions {
    bool relaxed_land_use = true;
    /// Basins whose best-covered variable has fewer observations are dropped.
    std::size_t min_observations = 0;
};

/// Reads <dir>/statics.csv, <dir>/dynamics/<id>.csv, <dir>/targets/<id>.csv and
/// the optional <dir>/schema.csv (column,kind,group,method).
BasinDataset ingest_csv(const std::filesystem::path& dir, const IngestOptions& opts = {});

/// Writes the layout read by ingest_csv, including schema.csv.
void write_csv(const BasinDataset& ds, const std::filesystem::path& dir);

/// Hold-forward of weekly values for up to six following missing days.
void hold_weekly(std::span<double> series);
/// Natural cubic spline through the observed points; gaps outside the
/// observed span stay missing.
void spline_fill(std::span<double> series);

// ------------------------------------------------------------------ normalisation

struct ColumnStats {
    std::string name;
    NormMethod method = NormMethod::MinMax;
    double offset = 0.0; // added before log for LogMinMax
    double lo = 0.0;     // min of the (transformed) training values
    double hi = 1.0;     // max of the (transformed) training values
    bool constant = false;

    double apply(double x) const;
    double invert(double z) const;
};

struct NormStats {
    std::vector<ColumnStats> columns;
    double apply(std::size_t col, double x) const { return columns[col].apply(x); }
    double invert(std::size_t col, double z) const { return columns[col].invert(z); }
    bool operator==(const NormStats&) const = default;
};

inline bool operator==(const ColumnStats& a, const ColumnStats& b) {
    return a.name == b.name && a.method == b.method && a.offset == b.offset && a.lo == b.lo &&
           a.hi == b.hi && a.constant == b.constant;
}

/// Fits one column from its training values (NaN skipped). A constant column
/// raises NormalizationError naming it unless allow_constant, in which case
/// the column normalises to 0.
ColumnStats fit_column(std::string name, NormMethod method, std::span<const double> train_values,
                       bool allow_constant = false);

// ------------------------------------------------------------------ splits

struct RowIndex {
    std::uint32_t basin = 0;
    std::uint32_t day = 0;
    bool operator==(const RowIndex&) const = default;
    auto operator<=>(const RowIndex&) const = default;
};

enum class SplitKind { TemporalHeldOut, SpatialStratified };

struct SplitPlan {
    SplitKind kind = SplitKind::TemporalHeldOut;
    std::vector<int> test_years{1985, 1990, 1995, 2000, 2005, 2010, 2015};
    double test_fraction = 0.2;
    bool stratify_by_land_use = true;
    std::uint64_t seed = 0;
};

struct Split {
    std::vector<RowIndex> train;
    std::vector<RowIndex> test;
    std::vector<std::size_t> train_basins;
    std::vector<std::size_t> test_basins;
};

Split split(const BasinDataset& ds, const SplitPlan& plan);

/// Normalisation statistics for every input and target column, derived from
/// training rows (and training basins for statics) only.
struct DatasetNormalizer {
    NormStats dynamic;
    NormStats statics;
    NormStats targets;
    NormStats coords; // longitude, latitude
    bool operator==(const DatasetNormalizer&) const = default;
};

struct NormalizerOptions {
    bool allow_constant_features = true;
};

DatasetNormalizer fit_normalizer(const BasinDataset& ds, std::span<const RowIndex> training_rows,
                                 const NormalizerOptions& opts = {});

// ------------------------------------------------------------------ synthesis

enum class RunoffMode { Reservoir, Independent, DuplicateMeteo };
enum class FeatureSet { Full, Compact };

/// target = level + scale * (alpha * q + beta_sin * sin(2 pi t / 365.25)
///          + beta_cos * cos(2 pi t / 365.25) + gamma * AR(1) noise)
/// where q is the basin-standardised runoff and the AR(1) noise has unit
/// variance. When `simplicity` is set, gamma is solved so the realised
/// variance share of the deterministic part equals it (0 drops the signal).
struct TargetRecipe {
    std::string name;
    double alpha = 1.0;
    double beta_sin = 1.0;
    double beta_cos = 0.5;
    double gamma = 0.5;
    double ar_phi = 0.5;
    double level = 10.0;
    double scale = 1.0;
    double p_obs = 0.3;
    std::optional<double> simplicity;
};

struct SynthConfig {
    std::size_t n_basins = 8;
    int start_year = 1982;
    int n_years = 5;
    FeatureSet features = FeatureSet::Full;
    RunoffMode runoff = RunoffMode::Reservoir;
    std::vector<TargetRecipe> targets; // empty = default_recipes(20)
    bool relaxed_land_use = true;
    /// Relative per-basin jitter of alpha / beta coefficients.
    double basin_jitter = 0.2;
    /// Makes every column of this group constant (value 1), e.g. to check
    /// that removing an information-free group changes nothing.
    std::optional<FeatureGroup> constant_group;
};

std::vector<TargetRecipe> default_recipes(std::size_t n);

BasinDataset synthesize(const SynthConfig& cfg, std::uint64_t seed);

} // namespace wqt::data
