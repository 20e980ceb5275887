#pragma once

// Performance metrics and descriptive indices: KGE, PBIAS, the simplicity
// index, Theil-Sen slopes and LOWESS smoothing.

#include <cstddef>
#include <span>
#include <vector>

namespace wqt::metrics {

struct KgeBreakdown {
    double kge = 0.0;
    double r = 0.0;     // Pearson correlation, 0 when predictions are constant
    double beta = 0.0;  // mean ratio predicted / observed
    double gamma = 0.0; // standard-deviation ratio predicted / observed
};

/// Kling-Gupta efficiency on pairs where both values are present (NaN pairs
/// are dropped). Population moments throughout.
KgeBreakdown kge(std::span<const double> observed, std::span<const double> predicted);

/// 100 * sum(O - P) / sum(O); negative values mean over-prediction.
double pbias(std::span<const double> observed, std::span<const double> predicted);

/// Percent change of a score relative to a baseline, 100 * (c - b) / |b|.
double percent_change(double baseline, double changed);

struct SimplicityScore {
    double simplicity = 0.0; // R^2 on runoff + annual harmonics
    double linearity = 0.0;  // R^2 on runoff alone
    std::size_t n_obs = 0;
};

/// OLS variance share of a concentration series explained by runoff and the
/// annual cycle (period 365.25 days of `day`). R^2 is unchanged by affine
/// rescaling, so raw and min-max normalised inputs give the same score.
SimplicityScore simplicity(std::span<const double> concentration, std::span<const double> runoff,
                           std::span<const double> day);

/// Median of the pairwise slopes over pairs with distinct x.
double theil_sen(std::span<const double> x, std::span<const double> y);

struct LowessFit {
    std::vector<double> fitted;  // in input order
    double endpoint_slope = 0.0; // local slope at the largest x
};

inline constexpr double kLowessFrac = 2.0 / 3.0;

/// Local linear regression with tricube weights over the floor(frac * n)
/// nearest neighbours of each point. No robustness iterations.
LowessFit lowess(std::span<const double> x, std::span<const double> y, double frac = kLowessFrac);

/// y - lowess(x, y).fitted
std::vector<double> lowess_residuals(std::span<const double> x, std::span<const double> y,
                                     double frac = kLowessFrac);

double median(std::vector<double> v);

} // namespace wqt::metrics
