#include "wqtrust/corrupt.hpp"

#include "wqtrust/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace wqt::corrupt {

namespace {

constexpr std::size_t kAttackBatch = 64;

std::vector<RowIndex> rows_with_targets(const models::NormalizedData& data, std::span<const RowIndex> rows) {
    std::vector<RowIndex> out;
    for (const auto& r : rows) {
        const auto t = data.targets[r.basin].row(r.day);
        if (std::any_of(t.begin(), t.end(), [](double v) { return !std::isnan(v); })) out.push_back(r);
    }
    return out;
}

std::vector<RowIndex> candidates_for(const CorruptionSpec& spec, const models::NormalizedData& data,
                                     std::span<const RowIndex> train_rows) {
    if (spec.side == Side::Targets) return rows_with_targets(data, train_rows);
    return {train_rows.begin(), train_rows.end()};
}

/// Selects rows and fills the manifest's bookkeeping.
std::vector<RowIndex> choose(const CorruptionSpec& spec, std::vector<RowIndex> candidates, std::mt19937_64& rng,
                             Manifest& m) {
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    m.spec = spec;
    m.candidates = candidates.size();
    for (auto i : select_indices(candidates.size(), spec.fraction, rng)) m.rows.push_back(candidates[i]);
    return m.rows;
}

bool present(const models::NormalizedData& data, const RowIndex& r, std::size_t c) {
    return data.dyn_present[r.basin][r.day * data.n_dynamic + c] != 0;
}

} // namespace

std::string_view to_string(Kind k) {
    switch (k) {
    case Kind::Outlier: return "outlier";
    case Kind::Noise: return "noise";
    case Kind::Adversarial: return "adversarial";
    }
    return "?";
}

std::string_view to_string(Side s) { return s == Side::Features ? "features" : "targets"; }

Kind parse_kind(std::string_view s) {
    if (s == "outlier") return Kind::Outlier;
    if (s == "noise") return Kind::Noise;
    if (s == "adversarial") return Kind::Adversarial;
    throw ConfigError("unknown corruption kind '" + std::string(s) + "'");
}

Side parse_side(std::string_view s) {
    if (s == "features") return Side::Features;
    if (s == "targets") return Side::Targets;
    throw ConfigError("unknown corruption side '" + std::string(s) + "'");
}

void validate(const CorruptionSpec& spec) {
    if (!(spec.fraction > 0.0 && spec.fraction < 1.0)) throw ConfigError("corruption fraction must lie in (0, 1)");
    if (spec.kind == Kind::Noise && !(spec.noise_sigma >= 0.0))
        throw ConfigError("noise sigma must be non-negative");
    if (spec.kind == Kind::Adversarial) {
        if (spec.side != Side::Features) throw ConfigError("adversarial corruption applies to features only");
        if (!(spec.pgd.epsilon >= 0.0) || !(spec.pgd.step >= 0.0))
            throw ConfigError("attack budget and step must be non-negative");
    }
}

std::vector<CorruptionSpec> reference_presets(Kind kind, Side side, std::uint64_t seed) {
    const std::vector<double> levels =
        kind == Kind::Noise ? std::vector<double>{0.3, 0.4, 0.5} : std::vector<double>{0.1, 0.2, 0.3};
    std::vector<CorruptionSpec> out;
    for (double f : levels) {
        CorruptionSpec s;
        s.kind = kind;
        s.side = kind == Kind::Adversarial ? Side::Features : side;
        s.fraction = f;
        s.seed = seed;
        out.push_back(s);
    }
    return out;
}

std::vector<std::size_t> select_indices(std::size_t n, double fraction, std::mt19937_64& rng) {
    if (!(fraction * static_cast<double>(n) >= 1.0))
        throw CorruptionError("fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                              " rows selects nothing");
    const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::pair<double, double> quartiles(std::vector<double> v) {
    if (v.empty()) throw CorruptionError("quartiles of an empty column");
    std::sort(v.begin(), v.end());
    const auto at = [&](double q) {
        const double pos = q * static_cast<double>(v.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    return {at(0.25), at(0.75)};
}

std::string manifest_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["kind"] = std::string(to_string(m.spec.kind));
    j["side"] = std::string(to_string(m.spec.side));
    j["fraction"] = m.spec.fraction;
    j["seed"] = m.spec.seed;
    if (m.spec.kind == Kind::Noise) j["noise_sigma"] = m.spec.noise_sigma;
    if (m.spec.kind == Kind::Adversarial)
        j["pgd"] = {{"epsilon", m.spec.pgd.epsilon}, {"step", m.spec.pgd.step}, {"iterations", m.spec.pgd.iterations}};
    j["candidates"] = m.candidates;
    j["selected"] = m.rows.size();
    j["values_changed"] = m.values_changed;
    if (m.spec.kind == Kind::Outlier) j["upper"] = m.upper;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : m.rows) rows.push_back({r.basin, r.day});
    j["rows"] = std::move(rows);
    return j.dump(1);
}

std::vector<std::uint8_t> corruptible_columns(const models::NormalizedData& data) {
    std::vector<std::uint8_t> out(data.n_dynamic);
    for (std::size_t c = 0; c < data.n_dynamic; ++c) out[c] = data.dynamic_groups[c] != data::FeatureGroup::Time;
    return out;
}

Corrupted inject_outliers(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                          const CorruptionSpec& spec) {
    validate(spec);
    if (spec.kind != Kind::Outlier) throw ConfigError("inject_outliers needs an outlier spec");
    std::mt19937_64 rng(spec.seed);
    std::bernoulli_distribution coin(0.5);
    Corrupted out{data, {}, {}};
    const auto rows = choose(spec, candidates_for(spec, data, train_rows), rng, out.manifest);

    const bool features = spec.side == Side::Features;
    const std::size_t ncols = features ? data.n_dynamic : data.n_targets;
    const auto cols = corruptible_columns(data);
    std::vector<std::pair<double, double>> fences(ncols, {kNaN, kNaN});
    for (std::size_t c = 0; c < ncols; ++c) {
        if (features && !cols[c]) continue;
        std::vector<double> vals;
        for (const auto& r : train_rows) {
            if (features) {
                if (present(data, r, c)) vals.push_back(data.dynamic[r.basin](r.day, c));
            } else if (const double y = data.targets[r.basin](r.day, c); !std::isnan(y)) {
                vals.push_back(y);
            }
        }
        if (vals.empty()) continue;
        const auto [q1, q3] = quartiles(std::move(vals));
        fences[c] = {q1 - 3.0 * (q3 - q1), q3 + 3.0 * (q3 - q1)};
    }

    for (const auto& r : rows)
        for (std::size_t c = 0; c < ncols; ++c) {
            if (std::isnan(fences[c].first)) continue;
            double* v = features ? &out.data.dynamic[r.basin](r.day, c) : &out.data.targets[r.basin](r.day, c);
            if (features ? !present(data, r, c) : std::isnan(*v)) continue;
            const bool up = coin(rng);
            *v = up ? fences[c].second : fences[c].first;
            ++out.manifest.values_changed;
            out.manifest.upper += up;
        }
    return out;
}

Corrupted inject_noise(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                       const CorruptionSpec& spec, const data::DatasetNormalizer& norm) {
    validate(spec);
    if (spec.kind != Kind::Noise) throw ConfigError("inject_noise needs a noise spec");
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> z(0.0, 1.0);
    Corrupted out{data, {}, {}};
    const auto rows = choose(spec, candidates_for(spec, data, train_rows), rng, out.manifest);

    if (spec.side == Side::Features) {
        const auto cols = corruptible_columns(data);
        std::vector<double> sd(data.n_dynamic, 0.0);
        for (std::size_t c = 0; c < data.n_dynamic; ++c) {
            if (!cols[c]) continue;
            double n = 0, mean = 0, m2 = 0;
            for (const auto& r : train_rows) {
                if (!present(data, r, c)) continue;
                const double x = data.dynamic[r.basin](r.day, c);
                n += 1;
                const double d = x - mean;
                mean += d / n;
                m2 += d * (x - mean);
            }
            sd[c] = n > 0 ? std::sqrt(m2 / n) : 0.0;
        }
        for (const auto& r : rows)
            for (std::size_t c = 0; c < data.n_dynamic; ++c) {
                if (!cols[c] || !present(data, r, c)) continue;
                const double eta = spec.noise_sigma * sd[c] * z(rng);
                out.data.dynamic[r.basin](r.day, c) += eta;
                out.manifest.values_changed += eta != 0.0;
            }
    } else {
        for (const auto& r : rows)
            for (std::size_t t = 0; t < data.n_targets; ++t) {
                double& y = out.data.targets[r.basin](r.day, t);
                if (std::isnan(y)) continue;
                const double eta = spec.noise_sigma * z(rng);
                if (eta == 0.0) continue;
                y = norm.targets.apply(t, norm.targets.invert(t, y) * (1.0 + eta));
                ++out.manifest.values_changed;
            }
    }
    return out;
}

PgdResult pgd_ascent(const std::function<Tensor(const Tensor&)>& loss, const nd::Shape& shape,
                     std::span<const double> x0, std::span<const std::uint8_t> allowed, const PgdConfig& cfg) {
    const std::size_t n = x0.size();
    if (nd::numel_of(shape) != n || allowed.size() != n) throw DimensionError("attack input sizes disagree");
    PgdResult res;
    res.delta.assign(n, 0.0);
    const auto perturbed = [&](bool grad) {
        std::vector<double> x(x0.begin(), x0.end());
        for (std::size_t k = 0; k < n; ++k) x[k] += res.delta[k];
        return Tensor(shape, std::move(x), grad);
    };
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const Tensor x = perturbed(true);
        const Tensor l = loss(x);
        nd::backward(l);
        res.loss_trace.push_back(l.item());
        if (!x.has_grad()) throw ContractError("loss does not depend on the attacked input");
        const auto g = x.grad();
        for (std::size_t k = 0; k < n; ++k) {
            if (!allowed[k]) continue;
            const double s = g[k] > 0.0 ? 1.0 : g[k] < 0.0 ? -1.0 : 0.0;
            res.delta[k] = std::clamp(res.delta[k] + cfg.step * s, -cfg.epsilon, cfg.epsilon);
        }
    }
    nd::NoGradGuard guard;
    res.loss_trace.push_back(loss(perturbed(false)).item());
    return res;
}

PgdResult pgd_attack(models::Model& model, const models::Batch& batch, const PgdConfig& cfg,
                     std::span<const std::uint8_t> columns) {
    const nd::Shape shape = batch.input.dynamic.shape();
    const std::size_t F = shape.back(), n = batch.input.dynamic.numel();
    if (!columns.empty() && columns.size() != F) throw DimensionError("attack column mask has the wrong width");
    std::vector<std::uint8_t> allowed(n);
    for (std::size_t k = 0; k < n; ++k)
        allowed[k] = batch.dyn_present[k] != 0 && (columns.empty() || columns[k % F] != 0);
    models::ModelInput in = batch.input;
    const auto res = pgd_ascent(
        [&](const Tensor& x) {
            in.dynamic = x;
            return models::masked_mse(model.forward(in), batch);
        },
        shape, batch.input.dynamic.data(), allowed, cfg);
    for (auto& [name, p] : model.parameters()) p.zero_grad();
    return res;
}

Corrupted adversarial(models::Model& model, const models::NormalizedData& data,
                      std::span<const RowIndex> train_rows, const CorruptionSpec& spec) {
    validate(spec);
    if (spec.kind != Kind::Adversarial) throw ConfigError("adversarial() needs an adversarial spec");
    std::mt19937_64 rng(spec.seed);
    Corrupted out{data, {}, {}};
    const auto rows = choose(spec, rows_with_targets(data, train_rows), rng, out.manifest);
    const auto cols = corruptible_columns(data);
    const std::size_t W = models::window_rows(model.spec()), F = data.n_dynamic;
    for (std::size_t start = 0; start < rows.size(); start += kAttackBatch) {
        const std::size_t end = std::min(rows.size(), start + kAttackBatch);
        const auto chunk = std::span(rows).subspan(start, end - start);
        const auto batch = models::make_batch(data, chunk, model.spec());
        const auto res = pgd_attack(model, batch, spec.pgd, cols);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            std::vector<double> d(res.delta.begin() + static_cast<std::ptrdiff_t>(i * W * F),
                                  res.delta.begin() + static_cast<std::ptrdiff_t>((i + 1) * W * F));
            out.manifest.values_changed += static_cast<std::size_t>(
                std::count_if(d.begin(), d.end(), [](double v) { return v != 0.0; }));
            out.deltas.emplace(chunk[i], std::move(d));
        }
    }
    return out;
}

Corrupted apply(const models::NormalizedData& data, std::span<const RowIndex> train_rows,
                const CorruptionSpec& spec, const data::DatasetNormalizer& norm, models::Model* model) {
    switch (spec.kind) {
    case Kind::Outlier: return inject_outliers(data, train_rows, spec);
    case Kind::Noise: return inject_noise(data, train_rows, spec, norm);
    case Kind::Adversarial:
        if (!model) throw ContractError("adversarial corruption needs a trained model");
        return adversarial(*model, data, train_rows, spec);
    }
    throw ConfigError("unknown corruption kind");
}

} // namespace wqt::corrupt
