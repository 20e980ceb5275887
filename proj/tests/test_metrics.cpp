#include "wqtrust/error.hpp"
#include "wqtrust/matrix.hpp"
#include "wqtrust/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace wqt;
using namespace wqt::metrics;

namespace {

/// Three-term KGE written from scratch in long double, sample moments via
/// sums of squares instead of centred passes.
long double kge_oracle(const std::vector<double>& o, const std::vector<double>& p) {
    const long double n = o.size();
    long double so = 0, sp = 0, soo = 0, spp = 0, sop = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        so += o[i];
        sp += p[i];
        soo += (long double)o[i] * o[i];
        spp += (long double)p[i] * p[i];
        sop += (long double)o[i] * p[i];
    }
    const long double mo = so / n, mp = sp / n;
    const long double vo = soo / n - mo * mo, vp = spp / n - mp * mp, c = sop / n - mo * mp;
    const long double r = c / std::sqrt(vo * vp);
    const long double beta = mp / mo, gamma = std::sqrt(vp / vo);
    return 1 - std::sqrt((r - 1) * (r - 1) + (beta - 1) * (beta - 1) + (gamma - 1) * (gamma - 1));
}

/// R^2 through normal equations and Gauss-Jordan elimination.
double r2_oracle(const std::vector<std::vector<double>>& cols, const std::vector<double>& y) {
    const std::size_t k = cols.size() + 1, n = y.size();
    std::vector<std::vector<double>> a(k, std::vector<double>(k + 1, 0.0));
    auto x = [&](std::size_t i, std::size_t j) { return j < cols.size() ? cols[j][i] : 1.0; };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < k; ++c) a[r][c] += x(i, r) * x(i, c);
            a[r][k] += x(i, r) * y[i];
        }
    for (std::size_t p = 0; p < k; ++p) {
        std::size_t piv = p;
        for (std::size_t r = p + 1; r < k; ++r)
            if (std::abs(a[r][p]) > std::abs(a[piv][p])) piv = r;
        std::swap(a[p], a[piv]);
        for (std::size_t r = 0; r < k; ++r) {
            if (r == p) continue;
            const double f = a[r][p] / a[p][p];
            for (std::size_t c = p; c <= k; ++c) a[r][c] -= f * a[p][c];
        }
    }
    double my = 0.0;
    for (double v : y) my += v;
    my /= n;
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double fit = 0.0;
        for (std::size_t j = 0; j < k; ++j) fit += a[j][k] / a[j][j] * x(i, j);
        ss_res += (y[i] - fit) * (y[i] - fit);
        ss_tot += (y[i] - my) * (y[i] - my);
    }
    return 1.0 - ss_res / ss_tot;
}

} // namespace

TEST(Kge, PerfectAgreement) {
    const std::vector<double> o{1, 3, 2, 5, 4};
    const auto k = kge(o, o);
    EXPECT_DOUBLE_EQ(k.kge, 1.0);
    EXPECT_DOUBLE_EQ(k.r, 1.0);
    EXPECT_DOUBLE_EQ(k.beta, 1.0);
    EXPECT_DOUBLE_EQ(k.gamma, 1.0);
}

TEST(Kge, MeanPredictorIsTheBenchmark) {
    const std::vector<double> o{1, 3, 2, 5, 4};
    const std::vector<double> p(5, 3.0);
    const auto k = kge(o, p);
    EXPECT_EQ(k.r, 0.0);
    EXPECT_NEAR(k.kge, 1.0 - std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(k.kge, -0.414, 5e-4);
}

TEST(Kge, MatchesOracleOnRandomPairs) {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> z(5.0, 2.0);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> o(50), p(50);
        for (int i = 0; i < 50; ++i) {
            o[i] = z(rng);
            p[i] = 0.7 * o[i] + 0.5 * z(rng);
        }
        EXPECT_NEAR(kge(o, p).kge, static_cast<double>(kge_oracle(o, p)), 1e-12);
    }
}

TEST(Kge, TranslationRecomputesConsistently) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z(2.0, 1.0);
    std::vector<double> o(40), p(40);
    for (int i = 0; i < 40; ++i) {
        o[i] = z(rng);
        p[i] = o[i] + 0.3 * z(rng);
    }
    for (double shift : {-1.0, 3.0, 10.0}) {
        auto o2 = o, p2 = p;
        for (auto& v : o2) v += shift;
        for (auto& v : p2) v += shift;
        const auto a = kge(o, p), b = kge(o2, p2);
        EXPECT_NEAR(a.r, b.r, 1e-12);
        EXPECT_NEAR(a.gamma, b.gamma, 1e-12);
        EXPECT_NEAR(b.kge, static_cast<double>(kge_oracle(o2, p2)), 1e-12);
    }
}

TEST(Kge, BoundedAboveAndPerturbationHurts) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> o(60);
    for (auto& v : o) v = 3.0 + z(rng);
    double worse = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 r2(seed);
        auto p = o;
        for (auto& v : p) v += 0.2 * z(r2);
        const double k = kge(o, p).kge;
        EXPECT_LE(k, 1.0);
        worse += k;
    }
    EXPECT_LT(worse / 100.0, 1.0);
}

TEST(Kge, DropsMissingPairsAndRejectsDegenerate) {
    const std::vector<double> o{1, kNaN, 3, 4};
    const std::vector<double> p{1, 2, kNaN, 4};
    EXPECT_DOUBLE_EQ(kge(o, p).kge, 1.0);
    EXPECT_THROW(kge(std::vector<double>{1}, std::vector<double>{1}), InsufficientDataError);
    EXPECT_THROW(kge(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), MetricUndefinedError);
    EXPECT_THROW(kge(std::vector<double>{-1, 1}, std::vector<double>{1, 2}), MetricUndefinedError);
}

TEST(Pbias, Examples) {
    EXPECT_EQ(pbias(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
    EXPECT_DOUBLE_EQ(pbias(std::vector<double>{10, 10}, std::vector<double>{11, 11}), -10.0);
    EXPECT_THROW(pbias(std::vector<double>{1, -1}, std::vector<double>{0, 0}), MetricUndefinedError);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.5, 3.0);
    std::vector<double> o(30), p(30);
    double num = 0, den = 0;
    for (int i = 0; i < 30; ++i) {
        o[i] = u(rng);
        p[i] = u(rng);
        num += o[i] - p[i];
        den += o[i];
    }
    EXPECT_NEAR(pbias(o, p), 100.0 * num / den, 1e-12);
}

TEST(Simplicity, ExactLinearModel) {
    std::mt19937_64 rng(1);
    std::lognormal_distribution<double> q(0.0, 0.7);
    std::vector<double> runoff(300), day(300), conc(300);
    for (int i = 0; i < 300; ++i) {
        runoff[i] = q(rng);
        day[i] = 3.0 * i;
        conc[i] = 2.0 * runoff[i] + std::sin(2 * std::numbers::pi * day[i] / 365.25);
    }
    const auto s = simplicity(conc, runoff, day);
    EXPECT_GE(s.simplicity, 0.999);
    EXPECT_EQ(s.n_obs, 300u);
}

TEST(Simplicity, WhiteNoiseScoresNearZero) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z(0.0, 1.0);
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> runoff(1000), day(1000), conc(1000);
        for (int i = 0; i < 1000; ++i) {
            runoff[i] = std::exp(z(rng));
            day[i] = i;
            conc[i] = z(rng);
        }
        worst = std::max(worst, simplicity(conc, runoff, day).simplicity);
    }
    EXPECT_LE(worst, 0.02);
}

TEST(Simplicity, MatchesNormalEquationsAndNests) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> z(0.0, 1.0);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> runoff(200), day(200), conc(200), s(200), c(200);
        for (int i = 0; i < 200; ++i) {
            runoff[i] = std::exp(0.5 * z(rng));
            day[i] = 1.7 * i + rep;
            s[i] = std::sin(2 * std::numbers::pi * day[i] / 365.25);
            c[i] = std::cos(2 * std::numbers::pi * day[i] / 365.25);
            conc[i] = 0.5 * runoff[i] + 0.8 * s[i] + z(rng);
        }
        const auto got = simplicity(conc, runoff, day);
        EXPECT_NEAR(got.simplicity, r2_oracle({runoff, s, c}, conc), 1e-10);
        EXPECT_NEAR(got.linearity, r2_oracle({runoff}, conc), 1e-10);
        EXPECT_LE(got.linearity, got.simplicity + 1e-12);

        // Affine rescaling of both series leaves the score unchanged.
        auto conc2 = conc, runoff2 = runoff;
        for (auto& v : conc2) v = 0.1 * v + 4.0;
        for (auto& v : runoff2) v = 7.0 * v - 1.0;
        EXPECT_NEAR(simplicity(conc2, runoff2, day).simplicity, got.simplicity, 1e-10);
    }
}

TEST(Simplicity, RejectsRankDeficientAndShortSeries) {
    std::vector<double> runoff(50, 1.0), day(50), conc(50);
    for (int i = 0; i < 50; ++i) {
        day[i] = i * 10.0;
        conc[i] = i;
    }
    EXPECT_THROW(simplicity(conc, runoff, day), MetricUndefinedError);
    std::vector<double> few(9, 1.0);
    EXPECT_THROW(simplicity(few, few, few), InsufficientDataError);
}

TEST(TheilSen, Examples) {
    std::vector<double> x{0, 1, 2, 3, 4}, y;
    for (double v : x) y.push_back(2 * v + 1);
    EXPECT_DOUBLE_EQ(theil_sen(x, y), 2.0);
    // pairwise slopes 1, 5, 9
    EXPECT_DOUBLE_EQ(theil_sen(std::vector<double>{0, 1, 2}, std::vector<double>{0, 1, 10}), 5.0);
    EXPECT_THROW(theil_sen(std::vector<double>{1, 1}, std::vector<double>{0, 3}), MetricUndefinedError);
}

TEST(TheilSen, MatchesBruteForce) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-5, 5);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x(20), y(20);
        for (int i = 0; i < 20; ++i) {
            x[i] = std::round(u(rng));
            y[i] = u(rng);
        }
        std::vector<double> slopes;
        for (int i = 0; i < 20; ++i)
            for (int j = 0; j < 20; ++j)
                if (i < j && x[i] != x[j]) slopes.push_back((y[j] - y[i]) / (x[j] - x[i]));
        std::sort(slopes.begin(), slopes.end());
        const std::size_t m = slopes.size();
        const double med = m % 2 ? slopes[m / 2] : 0.5 * (slopes[m / 2 - 1] + slopes[m / 2]);
        EXPECT_EQ(theil_sen(x, y), med);
    }
}

TEST(TheilSen, ResistsQuarterOutliers) {
    std::mt19937_64 rng(6);
    std::vector<double> x(40), y(40);
    for (int i = 0; i < 40; ++i) {
        x[i] = i;
        y[i] = -1.5 * i + 2.0;
    }
    for (int i = 0; i < 10; ++i) y[(i * 7) % 40] += 1e4 * (i % 2 ? 1 : -1) * (1 + i);
    EXPECT_NEAR(theil_sen(x, y), -1.5, 1e-9);
}

TEST(Lowess, LinearDataIsReproduced) {
    std::vector<double> x(30), y(30);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 10);
    for (int i = 0; i < 30; ++i) {
        x[i] = u(rng);
        y[i] = 0.4 * x[i] - 2.0;
    }
    for (double frac : {0.2, 0.5, 2.0 / 3.0, 1.0}) {
        const auto fit = lowess(x, y, frac);
        for (int i = 0; i < 30; ++i) EXPECT_NEAR(fit.fitted[i], y[i], 1e-9);
        EXPECT_NEAR(fit.endpoint_slope, 0.4, 1e-9);
        double mean = 0.0;
        for (double r : lowess_residuals(x, y, frac)) mean += r;
        EXPECT_NEAR(mean / 30.0, 0.0, 1e-9);
    }
}

TEST(Lowess, ConstantResponseHasZeroResiduals) {
    const std::vector<double> x{1, 2, 3, 4, 5, 6}, y(6, 2.5);
    for (double r : lowess_residuals(x, y)) EXPECT_NEAR(r, 0.0, 1e-12);
}

TEST(Lowess, TracksSineBetterThanGlobalLine) {
    const int n = 200;
    std::vector<double> x(n), y(n), truth(n);
    std::mt19937_64 rng(12);
    std::normal_distribution<double> z(0.0, 0.2);
    for (int i = 0; i < n; ++i) {
        x[i] = 2.0 * std::numbers::pi * i / n;
        truth[i] = std::sin(x[i]);
        y[i] = truth[i] + z(rng);
    }
    const auto fit = lowess(x, y, 0.3);
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) mx += x[i] / n, my += y[i] / n;
    double sxy = 0, sxx = 0;
    for (int i = 0; i < n; ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
    const double b = sxy / sxx;
    double rmse_local = 0, rmse_line = 0;
    for (int i = 0; i < n; ++i) {
        rmse_local += std::pow(fit.fitted[i] - truth[i], 2);
        rmse_line += std::pow(my + b * (x[i] - mx) - truth[i], 2);
    }
    EXPECT_LT(rmse_local, rmse_line);
}

TEST(Lowess, Preconditions) {
    const std::vector<double> x{1, 2, 3, 4, 5}, y{1, 2, 3, 4, 5};
    EXPECT_THROW(lowess(x, y, 0.3), ConfigError);
    EXPECT_THROW(lowess(std::vector<double>{1, 2}, std::vector<double>{1, 2}), InsufficientDataError);
}

TEST(PercentChange, Examples) {
    EXPECT_DOUBLE_EQ(percent_change(0.5, 0.4), -20.0);
    EXPECT_DOUBLE_EQ(percent_change(-0.5, -0.4), 20.0);
    EXPECT_THROW(percent_change(0.0, 1.0), MetricUndefinedError);
}
