#include "wqtrust/metrics.hpp"

#include "wqtrust/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace wqt::metrics {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("paired series differ in length (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
}

/// R^2 of y on the given regressors plus an intercept.
double ols_r2(const Eigen::MatrixXd& design, const Eigen::VectorXd& y) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < design.cols()) throw MetricUndefinedError("rank-deficient regression design");
    const Eigen::VectorXd coef = qr.solve(y);
    const double ss_res = (y - design * coef).squaredNorm();
    const double ss_tot = (y.array() - y.mean()).square().sum();
    if (!(ss_tot > 0.0)) throw MetricUndefinedError("constant response in regression");
    return std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
}

} // namespace

KgeBreakdown kge(std::span<const double> observed, std::span<const double> predicted) {
    require_same_length(observed, predicted);
    std::vector<double> o, p;
    for (std::size_t i = 0; i < observed.size(); ++i)
        if (!std::isnan(observed[i]) && !std::isnan(predicted[i])) {
            o.push_back(observed[i]);
            p.push_back(predicted[i]);
        }
    const std::size_t n = o.size();
    if (n < 2) throw InsufficientDataError("KGE needs at least 2 paired values, got " + std::to_string(n));
    const double dn = static_cast<double>(n);
    const double mo = std::accumulate(o.begin(), o.end(), 0.0) / dn;
    const double mp = std::accumulate(p.begin(), p.end(), 0.0) / dn;
    double so = 0.0, sp = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        so += (o[i] - mo) * (o[i] - mo);
        sp += (p[i] - mp) * (p[i] - mp);
        cov += (o[i] - mo) * (p[i] - mp);
    }
    so = std::sqrt(so / dn);
    sp = std::sqrt(sp / dn);
    cov /= dn;
    if (!(so > 0.0)) throw MetricUndefinedError("observed series has zero variance");
    if (mo == 0.0) throw MetricUndefinedError("observed series has zero mean");
    KgeBreakdown k;
    k.r = sp > 0.0 ? cov / (so * sp) : 0.0;
    k.beta = mp / mo;
    k.gamma = sp / so;
    k.kge = 1.0 - std::sqrt((k.r - 1.0) * (k.r - 1.0) + (k.beta - 1.0) * (k.beta - 1.0) +
                            (k.gamma - 1.0) * (k.gamma - 1.0));
    return k;
}

double pbias(std::span<const double> observed, std::span<const double> predicted) {
    require_same_length(observed, predicted);
    double diff = 0.0, total = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        if (std::isnan(observed[i]) || std::isnan(predicted[i])) continue;
        diff += observed[i] - predicted[i];
        total += observed[i];
    }
    if (total == 0.0) throw MetricUndefinedError("PBIAS undefined when observations sum to zero");
    return 100.0 * diff / total;
}

double percent_change(double baseline, double changed) {
    if (baseline == 0.0) throw MetricUndefinedError("percent change against a zero baseline");
    return 100.0 * (changed - baseline) / std::abs(baseline);
}

SimplicityScore simplicity(std::span<const double> concentration, std::span<const double> runoff,
                           std::span<const double> day) {
    require_same_length(concentration, runoff);
    require_same_length(concentration, day);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < concentration.size(); ++i)
        if (!std::isnan(concentration[i]) && !std::isnan(runoff[i]) && !std::isnan(day[i])) rows.push_back(i);
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (n < 10) throw InsufficientDataError("simplicity needs at least 10 paired observations");

    Eigen::MatrixXd full(n, 4);
    Eigen::VectorXd y(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const std::size_t i = rows[static_cast<std::size_t>(k)];
        const double angle = 2.0 * std::numbers::pi * day[i] / 365.25;
        full(k, 0) = runoff[i];
        full(k, 1) = std::sin(angle);
        full(k, 2) = std::cos(angle);
        full(k, 3) = 1.0;
        y(k) = concentration[i];
    }
    Eigen::MatrixXd runoff_only(n, 2);
    runoff_only.col(0) = full.col(0);
    runoff_only.col(1) = full.col(3);

    SimplicityScore s;
    s.n_obs = rows.size();
    s.simplicity = ols_r2(full, y);
    s.linearity = std::min(ols_r2(runoff_only, y), s.simplicity);
    return s;
}

double median(std::vector<double> v) {
    if (v.empty()) throw InsufficientDataError("median of an empty sample");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

double theil_sen(std::span<const double> x, std::span<const double> y) {
    require_same_length(x, y);
    std::vector<double> slopes;
    slopes.reserve(x.size() * (x.size() - (x.empty() ? 0 : 1)) / 2);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j)
            if (x[j] != x[i]) slopes.push_back((y[j] - y[i]) / (x[j] - x[i]));
    if (slopes.empty()) throw MetricUndefinedError("Theil-Sen slope needs two distinct x values");
    return median(std::move(slopes));
}

LowessFit lowess(std::span<const double> x, std::span<const double> y, double frac) {
    require_same_length(x, y);
    const std::size_t n = x.size();
    if (n < 5) throw InsufficientDataError("LOWESS needs at least 5 points");
    if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("LOWESS frac must lie in (0, 1]");
    const auto k = static_cast<std::size_t>(std::floor(frac * static_cast<double>(n)));
    if (k < 2) throw ConfigError("LOWESS window frac * n must be at least 2");

    LowessFit out;
    out.fitted.resize(n);
    const std::size_t argmax = static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
    std::vector<double> dist(n), sorted(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) dist[j] = std::abs(x[j] - x[i]);
        sorted = dist;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
        const double h = sorted[k - 1];
        double sw = 0.0, sx = 0.0, sy = 0.0;
        std::vector<double> w(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (h > 0.0) {
                const double u = dist[j] / h;
                if (u < 1.0) w[j] = std::pow(1.0 - u * u * u, 3);
            } else if (dist[j] == 0.0) {
                w[j] = 1.0;
            }
            sw += w[j];
            sx += w[j] * x[j];
            sy += w[j] * y[j];
        }
        const double mx = sx / sw, my = sy / sw;
        double sxx = 0.0, sxy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            sxx += w[j] * (x[j] - mx) * (x[j] - mx);
            sxy += w[j] * (x[j] - mx) * (y[j] - my);
        }
        const double scale = std::max(1.0, std::abs(mx));
        const double slope = sxx > 1e-12 * scale * scale * sw ? sxy / sxx : 0.0;
        out.fitted[i] = my + slope * (x[i] - mx);
        if (i == argmax) out.endpoint_slope = slope;
    }
    return out;
}

std::vector<double> lowess_residuals(std::span<const double> x, std::span<const double> y, double frac) {
    const auto fit = lowess(x, y, frac);
    std::vector<double> r(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] - fit.fitted[i];
    return r;
}

} // namespace wqt::metrics
