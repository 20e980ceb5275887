#pragma once

// Training-data corruption: extreme-value outliers, measurement noise and
// PGD adversarial perturbations of input windows.

#include "wqtrust/models.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace wqt::corrupt {

using data::RowIndex;
using nd::Tensor;

enum class Kind { Outlier, Noise, Adversarial };
enum class Side { Features, Targets };
std::string_view to_string(Kind k);
std::string_view to_string(Side s);
Kind parse_kind(std::string_view s);
Side parse_side(std::string_view s);

struct PgdConfig {
    double epsilon = 0.1;
    double step = 0.025;
    std::size_t iterations = 10;
    bool operator==(const PgdConfig&) const = default;
};

struct CorruptionSpec {
    Kind kind = Kind::Outlier;
    Side side = Side::Targets;
    double fraction = 0.1;
    /// Feature noise: multiple of the column std. Target noise: relative sd.
    double noise_sigma = 0.1;
    PgdConfig pgd;
    std::uint64_t seed = 0;
    bool operator==(const CorruptionSpec&) const = default;
};

/// Throws ConfigError (bad fraction, negative sigma, adversarial targets).
void validate(const CorruptionSpec& spec);

/// The reference presets: outliers and adversarial at 10/20/30 %, noise at
/// 30/40/50 %, on the given side (adversarial is always features).
std::vector<CorruptionSpec> reference_presets(Kind kind, Side side, std::uint64_t seed);

/// Exactly round(fraction * n) distinct indices, ascending. Throws
/// CorruptionError when fraction * n < 1.
std::vector<std::size_t> select_indices(std::size_t n, double fraction, std::mt19937_64& rng);

/// Linear-interpolation quartiles (Q1, Q3) of a non-empty sample.
std::pair<double, double> quartiles(std::vector<double> values);

struct Manifest {
    CorruptionSpec spec;
    std::size_t candidates = 0;
    std::vector<RowIndex> rows; // ascending
    std::size_t values_changed = 0;
    std::size_t upper = 0; // outliers sent to the upper fence
};

/// Audit record: spec, candidate count and the corrupted rows.
std::string manifest_json(const Manifest& m);

struct Corrupted {
    models::NormalizedData data;
    models::WindowDeltas deltas; // adversarial only
    Manifest manifest;
};

/// Dynamic columns that corruption may touch: everything except the
/// calendar covariates.
std::vector<std::uint8_t> corruptible_columns(const models::NormalizedData& data);

/// Candidates are the training rows (features) or the training rows with at
/// least one observed target (targets). Each selected value moves to
/// Q3 + 3 IQR or Q1 - 3 IQR of its column's training values (normalised
/// space) by a fair coin. Missing values and masks are left alone.
Corrupted inject_outliers(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                          const CorruptionSpec& spec);

/// Features: x + N(0, sigma * column sd) in normalised space. Targets:
/// y * (1 + N(0, sigma)) in raw units, renormalised.
Corrupted inject_noise(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                       const CorruptionSpec& spec, const data::DatasetNormalizer& norm);

struct PgdResult {
    std::vector<double> delta;      // B x window_rows x F_d
    std::vector<double> loss_trace; // loss at delta 0, then after every iteration
};

/// Projected sign-gradient ascent on an arbitrary differentiable scalar
/// loss of x, starting from delta = 0. Coordinates with allowed[k] == 0 stay
/// at zero. The trace holds the loss at every iterate including the last.
PgdResult pgd_ascent(const std::function<Tensor(const Tensor&)>& loss, const nd::Shape& shape,
                     std::span<const double> x0, std::span<const std::uint8_t> allowed, const PgdConfig& cfg);

/// Sign-gradient ascent on the masked loss of the batch, projected onto the
/// L-infinity ball. Positions that are missing or not in `columns` (per
/// feature, may be empty for all) stay at zero. Evaluates in inference mode.
PgdResult pgd_attack(models::Model& model, const models::Batch& batch, const PgdConfig& cfg,
                     std::span<const std::uint8_t> columns = {});

/// Attacks round(fraction * N) of the training samples with observed
/// targets using `model` and returns their window deltas.
Corrupted adversarial(models::Model& model, const models::NormalizedData& data,
                      std::span<const RowIndex> train_rows, const CorruptionSpec& spec);

/// Dispatches on spec.kind; `model` is only used for adversarial corruption.
Corrupted apply(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                const CorruptionSpec& spec, const data::DatasetNormalizer& norm, models::Model* model);

} // namespace wqt::corrupt
