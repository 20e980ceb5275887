#include "wqtrust/stats.hpp"

#include "wqtrust/error.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wqt::stats {

namespace {

double normal_sf(double z) {
    static const boost::math::normal unit;
    return boost::math::cdf(boost::math::complement(unit, z));
}

double clamp_p(double p) { return std::clamp(p, 0.0, 1.0); }

/// Sum of t^3 - t over tie groups of the sorted values.
double tie_term(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double term = 0.0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j] == v[i]) ++j;
        const double t = static_cast<double>(j - i);
        term += t * t * t - t;
        i = j;
    }
    return term;
}

} // namespace

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
        i = j;
    }
    return ranks;
}

TestResult wilcoxon_signed_rank(std::span<const double> diffs, Alternative alt, WilcoxonMethod method) {
    std::vector<double> d;
    for (double x : diffs)
        if (!std::isnan(x) && x != 0.0) d.push_back(x);
    if (d.empty()) throw DegenerateTestError("all paired differences are zero");
    const std::size_t n = d.size();
    std::vector<double> mags(n);
    for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(d[i]);
    const auto ranks = average_ranks(mags);

    TestResult res;
    res.n_effective = n;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0.0) res.statistic += ranks[i];

    const bool exact = method == WilcoxonMethod::Exact ||
                       (method == WilcoxonMethod::Auto && n <= kWilcoxonExactMax);
    if (exact) {
        // Average ranks are multiples of 1/2; count sign assignments over
        // doubled integer ranks.
        std::vector<long> r2(n);
        long total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = std::lround(2.0 * ranks[i]);
            total += r2[i];
        }
        std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
        count[0] = 1.0;
        long reach = 0;
        for (long r : r2) {
            for (long s = reach; s >= 0; --s)
                if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + r)] += count[static_cast<std::size_t>(s)];
            reach += r;
        }
        const double all = std::ldexp(1.0, static_cast<int>(n));
        const long w2 = std::lround(2.0 * res.statistic);
        double upper = 0.0, lower = 0.0;
        for (long s = 0; s <= total; ++s) {
            if (s >= w2) upper += count[static_cast<std::size_t>(s)];
            if (s <= w2) lower += count[static_cast<std::size_t>(s)];
        }
        upper /= all;
        lower /= all;
        res.method = "exact";
        switch (alt) {
        case Alternative::Greater: res.p_value = clamp_p(upper); break;
        case Alternative::Less: res.p_value = clamp_p(lower); break;
        case Alternative::TwoSided: res.p_value = clamp_p(2.0 * std::min(upper, lower)); break;
        }
        return res;
    }

    const double dn = static_cast<double>(n);
    const double mean = dn * (dn + 1.0) / 4.0;
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term(mags) / 48.0;
    res.method = "normal";
    if (!(var > 0.0)) {
        res.p_value = 1.0;
        return res;
    }
    const double sd = std::sqrt(var);
    const double dev = res.statistic - mean;
    switch (alt) {
    case Alternative::Greater: res.p_value = normal_sf((dev - 0.5) / sd); break;
    case Alternative::Less: res.p_value = normal_sf((-dev - 0.5) / sd); break;
    case Alternative::TwoSided:
        res.p_value = clamp_p(2.0 * normal_sf(std::max(0.0, std::abs(dev) - 0.5) / sd));
        break;
    }
    return res;
}

TestResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, Alternative alt,
                                WilcoxonMethod method) {
    if (a.size() != b.size()) throw DimensionError("signed-rank test needs paired samples of equal length");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return wilcoxon_signed_rank(d, alt, method);
}

TestResult mann_whitney_u(std::span<const double> a, std::span<const double> b, Alternative alt) {
    if (a.empty() || b.empty()) throw ContractError("Mann-Whitney U needs two non-empty samples");
    std::vector<double> all(a.begin(), a.end());
    all.insert(all.end(), b.begin(), b.end());
    const auto ranks = average_ranks(all);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double ra = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);

    TestResult res;
    res.statistic = ra - na * (na + 1.0) / 2.0;
    res.n_effective = a.size() + b.size();
    res.method = "normal";
    const double n = na + nb;
    const double mean = na * nb / 2.0;
    const double var = na * nb / 12.0 * ((n + 1.0) - tie_term(all) / (n * (n - 1.0)));
    if (!(var > 0.0)) {
        res.p_value = 1.0;
        return res;
    }
    const double sd = std::sqrt(var);
    const double dev = res.statistic - mean;
    switch (alt) {
    case Alternative::Greater: res.p_value = normal_sf((dev - 0.5) / sd); break;
    case Alternative::Less: res.p_value = normal_sf((-dev - 0.5) / sd); break;
    case Alternative::TwoSided:
        res.p_value = clamp_p(2.0 * normal_sf(std::max(0.0, std::abs(dev) - 0.5) / sd));
        break;
    }
    return res;
}

double cles(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw ContractError("CLES needs two non-empty samples");
    // Sort b once and count with binary search.
    std::vector<double> sb(b.begin(), b.end());
    std::sort(sb.begin(), sb.end());
    double wins = 0.0;
    for (double x : a) {
        const auto lo = std::lower_bound(sb.begin(), sb.end(), x);
        const auto hi = std::upper_bound(lo, sb.end(), x);
        wins += static_cast<double>(lo - sb.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

std::vector<double> bh_fdr(std::span<const double> p_values) {
    const std::size_t m = p_values.size();
    for (double p : p_values)
        if (!(p >= 0.0 && p <= 1.0)) throw DomainError("p-values must lie in [0, 1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
    std::vector<double> out(m);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const std::size_t i = order[k];
        running = std::min(running, p_values[i] * static_cast<double>(m) / static_cast<double>(k + 1));
        out[i] = std::min(1.0, running);
    }
    return out;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("correlation needs paired samples of equal length");
    std::vector<double> a, b;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isnan(x[i]) && !std::isnan(y[i])) {
            a.push_back(x[i]);
            b.push_back(y[i]);
        }
    const std::size_t n = a.size();
    if (n < 3) throw InsufficientDataError("correlation needs at least 3 pairs");
    const double dn = static_cast<double>(n);
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / dn;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / dn;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) throw MetricUndefinedError("correlation undefined for a constant sample");
    Correlation c;
    c.n = n;
    c.coefficient = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
    const double denom = 1.0 - c.coefficient * c.coefficient;
    if (denom <= 0.0 || n == 2) {
        c.p_value = denom <= 0.0 ? 0.0 : 1.0;
        return c;
    }
    const double t = c.coefficient * std::sqrt((dn - 2.0) / denom);
    const boost::math::students_t dist(dn - 2.0);
    c.p_value = clamp_p(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
    return c;
}

Correlation spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DimensionError("correlation needs paired samples of equal length");
    std::vector<double> a, b;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isnan(x[i]) && !std::isnan(y[i])) {
            a.push_back(x[i]);
            b.push_back(y[i]);
        }
    const auto ra = average_ranks(a), rb = average_ranks(b);
    return pearson(ra, rb);
}

std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "ns";
}

} // namespace wqt::stats
