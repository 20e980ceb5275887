#include "wqtrust/trust.hpp"

#include "wqtrust/error.hpp"
#include "wqtrust/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wqt::trust {

namespace {

constexpr std::size_t kIgChunk = 64;

std::vector<RowIndex> test_rows_of(const Experiment& ex) {
    if (!ex.ds || !ex.split || !ex.norm || !ex.data) throw ContractError("experiment is missing inputs");
    return observed_rows(*ex.ds, ex.split->test);
}

bool usable_base(const PairScore& p) { return p.defined && p.kge.kge >= kMinBaselineKge; }

double median_or_nan(std::vector<double> v) {
    std::erase_if(v, [](double x) { return std::isnan(x); });
    return v.empty() ? kNaN : metrics::median(std::move(v));
}

void check_shapes(const Evaluation& a, const Evaluation& b) {
    if (a.n_basins != b.n_basins || a.n_variables != b.n_variables)
        throw DimensionError("evaluations cover different basins or variables");
}

/// IG for several outputs of a batched function sharing the forward pass.
std::vector<std::vector<double>> ig_multi(const std::function<nd::Tensor(const nd::Tensor&)>& f,
                                          std::span<const double> x, std::span<const double> base,
                                          std::size_t steps) {
    if (x.size() != base.size()) throw DimensionError("baseline shape does not match the input");
    if (steps == 0) throw ConfigError("integrated gradients need at least one step");
    const std::size_t n = x.size();
    std::vector<std::vector<double>> sums;
    for (std::size_t start = 0; start < steps; start += kIgChunk) {
        const std::size_t S = std::min(steps, start + kIgChunk) - start;
        std::vector<double> pts(S * n);
        for (std::size_t k = 0; k < S; ++k) {
            const double alpha = (static_cast<double>(start + k) + 0.5) / static_cast<double>(steps);
            for (std::size_t i = 0; i < n; ++i) pts[k * n + i] = base[i] + alpha * (x[i] - base[i]);
        }
        nd::Tensor X({S, n}, std::move(pts), true);
        nd::Tensor y = f(X);
        if (y.rank() == 1) y = nd::reshape(y, {S, 1});
        const std::size_t V = y.dim(1);
        if (sums.empty()) sums.assign(V, std::vector<double>(n, 0.0));
        for (std::size_t v = 0; v < V; ++v) {
            X.zero_grad();
            nd::backward(nd::sum(nd::slice(y, 1, v, v + 1)));
            if (!X.has_grad()) continue;
            const auto g = X.grad();
            for (std::size_t k = 0; k < S; ++k)
                for (std::size_t i = 0; i < n; ++i) sums[v][i] += g[k * n + i];
        }
    }
    for (auto& s : sums)
        for (std::size_t i = 0; i < n; ++i) s[i] *= (x[i] - base[i]) / static_cast<double>(steps);
    return sums;
}

/// Batched model evaluation on flattened [dynamic window | statics] rows.
std::function<nd::Tensor(const nd::Tensor&)> flat_model(Model& model, const models::ModelInput& sample) {
    const auto& sp = model.spec();
    const std::size_t W = models::window_rows(sp), F = sp.n_dynamic, FS = sp.n_static;
    return [&model, &sample, W, F, FS](const nd::Tensor& X) {
        const std::size_t S = X.dim(0);
        models::ModelInput in;
        in.dynamic = nd::reshape(nd::slice(X, 1, 0, W * F), {S, W, F});
        in.statics = FS > 0 ? nd::slice(X, 1, W * F, W * F + FS) : nd::Tensor::zeros({S, 0});
        in.coords = nd::gather(sample.coords, 0, std::vector<std::int64_t>(S, 0));
        return model.forward(in);
    };
}

std::vector<double> flatten(const models::ModelInput& in) {
    std::vector<double> x(in.dynamic.data().begin(), in.dynamic.data().end());
    x.insert(x.end(), in.statics.data().begin(), in.statics.data().end());
    return x;
}

} // namespace

// ------------------------------------------------------------------ evaluation

std::vector<RowIndex> observed_rows(const data::BasinDataset& ds, std::span<const RowIndex> rows) {
    std::vector<RowIndex> out;
    for (const auto& r : rows) {
        const auto& b = ds.basins[r.basin];
        for (std::size_t t = 0; t < ds.n_targets(); ++t)
            if (b.observed(r.day, t)) {
                out.push_back(r);
                break;
            }
    }
    return out;
}

Evaluation evaluate(const data::BasinDataset& ds, std::span<const RowIndex> rows, const Matrix& predicted) {
    if (predicted.rows() != rows.size() || predicted.cols() != ds.n_targets())
        throw DimensionError("prediction matrix does not match the rows and variables");
    Evaluation ev;
    ev.n_basins = ds.basins.size();
    ev.n_variables = ds.n_targets();
    std::vector<std::vector<double>> obs(ev.n_basins * ev.n_variables), pred(ev.n_basins * ev.n_variables);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const auto& b = ds.basins[r.basin];
        for (std::size_t t = 0; t < ev.n_variables; ++t) {
            if (!b.observed(r.day, t)) continue;
            obs[r.basin * ev.n_variables + t].push_back(b.targets(r.day, t));
            pred[r.basin * ev.n_variables + t].push_back(predicted(i, t));
        }
    }
    for (std::size_t b = 0; b < ev.n_basins; ++b)
        for (std::size_t t = 0; t < ev.n_variables; ++t) {
            const std::size_t k = b * ev.n_variables + t;
            PairScore p;
            p.basin = b;
            p.variable = t;
            p.n_obs = obs[k].size();
            try {
                p.kge = metrics::kge(obs[k], pred[k]);
                p.defined = std::isfinite(p.kge.kge);
            } catch (const MetricUndefinedError&) {
            } catch (const InsufficientDataError&) {
            }
            if (!p.defined) p.kge = {kNaN, kNaN, kNaN, kNaN};
            try {
                p.pbias = metrics::pbias(obs[k], pred[k]);
            } catch (const Error&) {
                p.pbias = kNaN;
            }
            ev.pairs.push_back(p);
        }
    return ev;
}

std::vector<double> percent_changes(const Evaluation& base, const Evaluation& changed) {
    check_shapes(base, changed);
    std::vector<double> out(base.pairs.size(), kNaN);
    for (std::size_t i = 0; i < base.pairs.size(); ++i) {
        const auto &b = base.pairs[i], &c = changed.pairs[i];
        if (usable_base(b) && c.defined) out[i] = metrics::percent_change(b.kge.kge, c.kge.kge);
    }
    return out;
}

std::vector<RowIndex> scoring_rows(const Experiment& ex) { return test_rows_of(ex); }

Predictor model_predictor(Model& model, const data::DatasetNormalizer& norm) {
    return [&model, &norm](const NormalizedData& inputs, std::span<const RowIndex> rows,
                           const models::ForwardOptions& opts) {
        return models::denormalize(models::predict(model, inputs, rows, opts), norm);
    };
}

Evaluation evaluate_model(const Experiment& ex, Model& model, const NormalizedData& inputs,
                          const models::ForwardOptions& opts) {
    const auto rows = test_rows_of(ex);
    return evaluate(*ex.ds, rows, model_predictor(model, *ex.norm)(inputs, rows, opts));
}

// ------------------------------------------------------------------ robustness

RobustnessCurve robustness_curve(const Evaluation& base, const std::vector<std::pair<double, Evaluation>>& levels,
                                 corrupt::Kind kind, corrupt::Side side) {
    RobustnessCurve c;
    c.kind = kind;
    c.side = side;
    std::size_t base_pairs = 0;
    for (const auto& p : base.pairs) base_pairs += usable_base(p);
    if (base_pairs == 0) throw SweepError("no (basin, variable) pair has a baseline KGE of at least 0.1");
    c.levels.push_back(0.0);
    c.median_change.push_back(0.0);
    c.n_pairs.push_back(base_pairs);

    std::vector<std::size_t> order(levels.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return levels[a].first < levels[b].first; });
    for (auto i : order) {
        const auto& [level, ev] = levels[i];
        auto pc = percent_changes(base, ev);
        std::erase_if(pc, [](double x) { return std::isnan(x); });
        if (pc.empty()) throw SweepError("no valid (basin, variable) pair at corruption level " + std::to_string(level));
        c.levels.push_back(level);
        c.n_pairs.push_back(pc.size());
        c.median_change.push_back(metrics::median(std::move(pc)));
    }
    c.beta = c.levels.size() >= 2 ? 0.1 * metrics::theil_sen(c.levels, c.median_change) : 0.0;
    return c;
}

Evaluation sweep_level(const Experiment& ex, Model& baseline, const corrupt::CorruptionSpec& spec,
                       std::uint64_t train_seed, corrupt::Manifest* manifest) {
    test_rows_of(ex);
    auto corrupted = corrupt::apply(*ex.data, ex.split->train, spec, *ex.norm, &baseline);
    auto tm = models::fit(ex.spec, ex.train, *ex.norm, corrupted.data, ex.split->train, train_seed,
                          corrupted.deltas.empty() ? nullptr : &corrupted.deltas);
    if (manifest) *manifest = std::move(corrupted.manifest);
    return evaluate_model(ex, tm.model, *ex.data);
}

SweepResult robustness_sweep(const Experiment& ex, Model& baseline, const Evaluation& base_eval,
                             const std::vector<corrupt::CorruptionSpec>& specs, std::uint64_t train_seed) {
    if (specs.empty()) throw ConfigError("robustness sweep without corruption levels");
    for (const auto& spec : specs)
        if (spec.kind != specs.front().kind || spec.side != specs.front().side)
            throw ConfigError("a robustness sweep mixes corruption kinds or sides");
    SweepResult res;
    std::vector<std::pair<double, Evaluation>> levels;
    for (const auto& spec : specs) {
        corrupt::Manifest m;
        Evaluation ev = sweep_level(ex, baseline, spec, train_seed, &m);
        levels.emplace_back(spec.fraction, ev);
        res.evaluations.push_back(std::move(ev));
        res.manifests.push_back(std::move(m));
    }
    res.curve = robustness_curve(base_eval, levels, specs.front().kind, specs.front().side);
    return res;
}

// ------------------------------------------------------------------ uncertainty

std::string_view to_string(UncertaintyMethod m) { return m == UncertaintyMethod::TTA ? "tta" : "mc_dropout"; }
std::string_view to_string(NoiseScope s) { return s == NoiseScope::RunoffOnly ? "runoff" : "all_dynamic"; }

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) return kNaN;
    double mean = 0.0, m2 = 0.0, n = 0.0;
    for (double x : v) {
        n += 1.0;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    return std::sqrt(m2 / (n - 1.0));
}

double UncertaintyResult::median_sd() const {
    std::vector<double> v;
    for (const auto& p : pairs) v.push_back(p.kge_sd);
    return median_or_nan(std::move(v));
}

UncertaintyResult uncertainty_from_runs(UncertaintyMethod method, double parameter,
                                        const std::vector<Evaluation>& runs) {
    if (runs.size() < 2) throw ConfigError("uncertainty needs at least 2 runs");
    UncertaintyResult res;
    res.method = method;
    res.runs = runs.size();
    res.parameter = parameter;
    for (std::size_t i = 0; i < runs.front().pairs.size(); ++i) {
        PairUncertainty u;
        u.basin = runs.front().pairs[i].basin;
        u.variable = runs.front().pairs[i].variable;
        std::vector<double> k;
        for (const auto& r : runs) {
            check_shapes(runs.front(), r);
            if (r.pairs[i].defined) k.push_back(r.pairs[i].kge.kge);
        }
        u.runs = k.size();
        if (k.size() >= 2) {
            u.kge_sd = sample_sd(k);
            u.kge_mean = std::accumulate(k.begin(), k.end(), 0.0) / static_cast<double>(k.size());
        }
        res.pairs.push_back(u);
    }
    return res;
}

Evaluation tta_run(const Experiment& ex, const Predictor& predict, double sigma, NoiseScope scope,
                   std::uint64_t seed, std::size_t run) {
    if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
    const auto rows = test_rows_of(ex);
    const NormalizedData& clean = *ex.data;
    std::vector<std::uint8_t> cols(clean.n_dynamic, 0);
    for (std::size_t c = 0; c < clean.n_dynamic; ++c) {
        const auto g = clean.dynamic_groups[c];
        cols[c] = scope == NoiseScope::RunoffOnly ? g == data::FeatureGroup::Q : g != data::FeatureGroup::Time;
    }
    std::mt19937_64 rng(mix_seed(seed, run));
    std::normal_distribution<double> z(0.0, 1.0);
    NormalizedData noisy = clean;
    if (sigma > 0.0)
        for (std::size_t b = 0; b < noisy.dynamic.size(); ++b)
            for (std::size_t d = 0; d < noisy.n_days; ++d)
                for (std::size_t c = 0; c < noisy.n_dynamic; ++c)
                    if (cols[c] && noisy.dyn_present[b][d * noisy.n_dynamic + c])
                        noisy.dynamic[b](d, c) += sigma * z(rng);
    return evaluate(*ex.ds, rows, predict(noisy, rows, {}));
}

Evaluation mc_dropout_run(const Experiment& ex, const Predictor& predict, double p, std::uint64_t seed,
                          std::size_t run) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
    const auto rows = test_rows_of(ex);
    std::mt19937_64 rng(mix_seed(seed, run));
    models::ForwardOptions fo;
    fo.dropout = p;
    fo.rng = &rng;
    return evaluate(*ex.ds, rows, predict(*ex.data, rows, fo));
}

UncertaintyResult tta_uncertainty(const Experiment& ex, const Predictor& predict, double sigma, std::size_t runs,
                                  NoiseScope scope, std::uint64_t seed) {
    if (runs < 2) throw ConfigError("uncertainty needs at least 2 runs");
    std::vector<Evaluation> evs;
    for (std::size_t run = 0; run < runs; ++run) evs.push_back(tta_run(ex, predict, sigma, scope, seed, run));
    return uncertainty_from_runs(UncertaintyMethod::TTA, sigma, evs);
}

UncertaintyResult mc_dropout_uncertainty(const Experiment& ex, const Predictor& predict, double p,
                                         std::size_t runs, std::uint64_t seed) {
    if (runs < 2) throw ConfigError("uncertainty needs at least 2 runs");
    std::vector<Evaluation> evs;
    for (std::size_t run = 0; run < runs; ++run) evs.push_back(mc_dropout_run(ex, predict, p, seed, run));
    return uncertainty_from_runs(UncertaintyMethod::MCDropout, p, evs);
}

// ------------------------------------------------------------------ attribution

std::string_view to_string(AttributionMethod m) {
    switch (m) {
    case AttributionMethod::Ablation: return "ablation";
    case AttributionMethod::Traverse: return "traverse";
    case AttributionMethod::IG: return "ig";
    }
    return "?";
}

std::string mask_label(GroupMask mask) {
    std::string out;
    for (std::size_t i = 0; i < kGroups; ++i)
        if (mask & (1u << i)) {
            if (!out.empty()) out += '+';
            out += data::to_string(data::kAttributionGroups[i]);
        }
    return out.empty() ? "none" : out;
}

NormalizedData with_groups(const NormalizedData& data, GroupMask mask) {
    std::set<data::FeatureGroup> removed;
    for (std::size_t i = 0; i < kGroups; ++i)
        if (!(mask & (1u << i))) removed.insert(data::kAttributionGroups[i]);
    return models::without_groups(data, removed);
}

std::array<double, kGroups> normalized_shares(const std::array<double, kGroups>& raw) {
    std::array<double, kGroups> s{};
    double total = 0.0;
    for (std::size_t i = 0; i < kGroups; ++i) {
        s[i] = std::isnan(raw[i]) ? 0.0 : std::max(0.0, raw[i]);
        total += s[i];
    }
    for (auto& v : s) v = total > 0.0 ? v / total : 1.0 / static_cast<double>(kGroups);
    return s;
}

AttributionResult ablation_importance(const Evaluation& full, const std::array<const Evaluation*, kGroups>& without,
                                      const std::vector<std::string>& variables) {
    if (variables.size() != full.n_variables) throw DimensionError("variable names do not match the evaluation");
    AttributionResult res;
    res.method = AttributionMethod::Ablation;
    res.variables = variables;
    for (std::size_t v = 0; v < full.n_variables; ++v) {
        std::array<double, kGroups> raw;
        raw.fill(kNaN);
        for (std::size_t g = 0; g < kGroups; ++g) {
            if (!without[g]) continue;
            check_shapes(full, *without[g]);
            std::vector<double> drops;
            for (std::size_t b = 0; b < full.n_basins; ++b) {
                const auto &f = full.at(b, v), &w = without[g]->at(b, v);
                if (usable_base(f) && w.defined) drops.push_back(-metrics::percent_change(f.kge.kge, w.kge.kge));
            }
            raw[g] = median_or_nan(std::move(drops));
        }
        res.raw.push_back(raw);
        res.share.push_back(normalized_shares(raw));
    }
    return res;
}

AttributionResult traverse_importance(const std::map<GroupMask, Evaluation>& subsets,
                                      const std::vector<std::string>& variables) {
    // The design is the union of groups seen in the subsets.
    GroupMask design = 0;
    for (const auto& [m, ev] : subsets) design |= m;
    for (GroupMask m = 0; m <= kAllGroups; ++m) {
        if ((m & ~design) != 0) continue;
        if (!subsets.count(m)) throw AttributionError("missing subset model " + mask_label(m));
    }
    const Evaluation& any = subsets.begin()->second;
    if (variables.size() != any.n_variables) throw DimensionError("variable names do not match the evaluation");
    AttributionResult res;
    res.method = AttributionMethod::Traverse;
    res.variables = variables;
    for (std::size_t v = 0; v < any.n_variables; ++v) {
        std::array<double, kGroups> raw;
        raw.fill(kNaN);
        for (std::size_t g = 0; g < kGroups; ++g) {
            const GroupMask bit = 1u << g;
            if (!(design & bit)) continue;
            std::vector<double> per_basin;
            for (std::size_t b = 0; b < any.n_basins; ++b) {
                double sum = 0.0;
                std::size_t n = 0;
                for (const auto& [m, ev] : subsets) {
                    if (m & bit) continue;
                    const auto& with = subsets.at(m | bit).at(b, v);
                    const auto& wo = ev.at(b, v);
                    if (!usable_base(with) || !wo.defined) continue;
                    sum += -metrics::percent_change(with.kge.kge, wo.kge.kge);
                    ++n;
                }
                if (n > 0) per_basin.push_back(sum / static_cast<double>(n));
            }
            raw[g] = median_or_nan(std::move(per_basin));
        }
        res.raw.push_back(raw);
        res.share.push_back(normalized_shares(raw));
    }
    return res;
}

Evaluation subset_evaluation(const Experiment& ex, GroupMask mask, std::uint64_t seed) {
    test_rows_of(ex);
    const NormalizedData data = with_groups(*ex.data, mask);
    try {
        auto tm = models::fit(ex.spec, ex.train, *ex.norm, data, ex.split->train, seed);
        return evaluate_model(ex, tm.model, data);
    } catch (const Error& e) {
        throw AttributionError("subset " + mask_label(mask) + ": " + e.what());
    }
}

std::vector<double> integrated_gradients(const std::function<nd::Tensor(const nd::Tensor&)>& f,
                                         std::span<const double> x, std::span<const double> baseline,
                                         std::size_t steps) {
    auto all = ig_multi(f, x, baseline, steps);
    if (all.size() != 1) throw DimensionError("integrated gradients need a single output per row");
    return std::move(all.front());
}

double SampleAttribution::completeness_gap() const {
    const double total = std::accumulate(dynamic.begin(), dynamic.end(), 0.0) +
                         std::accumulate(statics.begin(), statics.end(), 0.0);
    return std::abs(total - (output - baseline_output));
}

SampleAttribution integrated_gradients(Model& model, const models::ModelInput& sample, std::size_t output,
                                       std::size_t steps, const IgBaseline& baseline) {
    if (sample.dynamic.dim(0) != 1) throw DimensionError("integrated gradients take one sample at a time");
    if (output >= model.spec().n_targets) throw DimensionError("output index out of range");
    const auto x = flatten(sample);
    const std::size_t nd_ = sample.dynamic.numel();
    std::vector<double> base(x.size(), baseline.statics);
    std::fill(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(nd_), baseline.dynamic);
    const auto f = flat_model(model, sample);
    const auto one = [&](const nd::Tensor& X) { return nd::slice(f(X), 1, output, output + 1); };
    const auto ig = integrated_gradients(one, x, base, steps);
    for (auto& [n, p] : model.parameters()) p.zero_grad();

    SampleAttribution res;
    res.dynamic.assign(ig.begin(), ig.begin() + static_cast<std::ptrdiff_t>(nd_));
    res.statics.assign(ig.begin() + static_cast<std::ptrdiff_t>(nd_), ig.end());
    nd::NoGradGuard guard;
    std::vector<double> both = x;
    both.insert(both.end(), base.begin(), base.end());
    const nd::Tensor y = f(nd::Tensor({2, x.size()}, std::move(both)));
    const std::size_t V = model.spec().n_targets;
    res.output = y[output];
    res.baseline_output = y[V + output];
    return res;
}

AttributionResult ig_attribution(Model& model, const NormalizedData& data, std::span<const RowIndex> samples,
                                 const std::vector<std::string>& variables, std::size_t steps,
                                 const IgBaseline& baseline) {
    const auto& sp = model.spec();
    if (variables.size() != sp.n_targets) throw DimensionError("variable names do not match the model outputs");
    if (samples.empty()) throw AttributionError("integrated gradients need at least one sample");
    const std::size_t W = models::window_rows(sp), F = sp.n_dynamic, FS = sp.n_static, V = sp.n_targets;
    // mean |feature IG| per variable, over samples
    std::vector<std::vector<double>> dyn_abs(V, std::vector<double>(F, 0.0)), st_abs(V, std::vector<double>(FS, 0.0));
    for (const auto& row : samples) {
        const auto batch = models::make_batch(data, std::span(&row, 1), sp);
        const auto x = flatten(batch.input);
        std::vector<double> base(x.size(), baseline.statics);
        std::fill(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(W * F), baseline.dynamic);
        const auto ig = ig_multi(flat_model(model, batch.input), x, base, steps);
        for (std::size_t v = 0; v < V; ++v) {
            for (std::size_t c = 0; c < F; ++c) {
                double s = 0.0;
                for (std::size_t w = 0; w < W; ++w) s += ig[v][w * F + c];
                dyn_abs[v][c] += std::abs(s);
            }
            for (std::size_t c = 0; c < FS; ++c) st_abs[v][c] += std::abs(ig[v][W * F + c]);
        }
    }
    for (auto& [n, p] : model.parameters()) p.zero_grad();

    AttributionResult res;
    res.method = AttributionMethod::IG;
    res.variables = variables;
    const double ns = static_cast<double>(samples.size());
    for (std::size_t v = 0; v < V; ++v) {
        std::array<double, kGroups> raw;
        for (std::size_t g = 0; g < kGroups; ++g) {
            const auto group = data::kAttributionGroups[g];
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t c = 0; c < F; ++c)
                if (data.dynamic_groups[c] == group) sum += dyn_abs[v][c] / ns, ++n;
            for (std::size_t c = 0; c < FS; ++c)
                if (data.static_groups[c] == group) sum += st_abs[v][c] / ns, ++n;
            raw[g] = n > 0 ? sum / static_cast<double>(n) : kNaN;
        }
        res.raw.push_back(raw);
        res.share.push_back(normalized_shares(raw));
    }
    return res;
}

} // namespace wqt::trust
