#pragma once

// Hypothesis tests and effect sizes for figure annotations.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace wqt::stats {

enum class Alternative { TwoSided, Greater, Less };

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
    std::size_t n_effective = 0;
    std::string method; // "exact" or "normal"
};

enum class WilcoxonMethod { Auto, Exact, Normal };

/// Largest number of non-zero differences handled by exact enumeration
/// under WilcoxonMethod::Auto.
inline constexpr std::size_t kWilcoxonExactMax = 25;

/// Signed-rank test on paired differences; zero differences are dropped and
/// tied magnitudes receive average ranks. The statistic is W+, the rank sum
/// of positive differences.
TestResult wilcoxon_signed_rank(std::span<const double> diffs, Alternative alt = Alternative::TwoSided,
                                WilcoxonMethod method = WilcoxonMethod::Auto);
TestResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                Alternative alt = Alternative::TwoSided,
                                WilcoxonMethod method = WilcoxonMethod::Auto);

/// Rank-sum test with tie-corrected normal approximation and continuity
/// correction. The statistic is U for sample a; U for b is n_a * n_b - U.
TestResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                          Alternative alt = Alternative::TwoSided);

/// Probability that a draw from a exceeds a draw from b, ties counted half.
double cles(std::span<const double> a, std::span<const double> b);

/// Benjamini-Hochberg adjusted p-values in input order.
std::vector<double> bh_fdr(std::span<const double> p_values);

struct Correlation {
    double coefficient = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

/// Two-sided p-values from t = r * sqrt((n - 2) / (1 - r^2)) with n - 2
/// degrees of freedom. NaN pairs are dropped.
Correlation pearson(std::span<const double> x, std::span<const double> y);
Correlation spearman(std::span<const double> x, std::span<const double> y);

/// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

/// "***" < 0.001, "**" < 0.01, "*" < 0.05, "ns" otherwise.
std::string significance_stars(double p);

} // namespace wqt::stats
