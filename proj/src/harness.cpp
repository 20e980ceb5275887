#include "wqtrust/harness.hpp"

#include "wqtrust/metrics.hpp"
#include "wqtrust/stats.hpp"

#include <Eigen/Core>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace wqt::harness {

namespace fs = std::filesystem;
using models::Family;

namespace {

// ------------------------------------------------------------------ yaml access

std::string where_of(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void check_keys(const YAML::Node& n, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!n.IsMap()) throw ConfigError((path.empty() ? "config" : path) + ": expected a mapping");
    for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown key '" + where_of(path, key) + "'");
    }
}

std::string scalar(const YAML::Node& n, const std::string& where) {
    if (!n.IsScalar()) throw ConfigError(where + ": expected a scalar");
    return n.Scalar();
}

std::uint64_t as_u64(const YAML::Node& n, const std::string& where) {
    const auto s = scalar(n, where);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ConfigError(where + ": expected a non-negative integer, got '" + s + "'");
    return v;
}

std::size_t as_size(const YAML::Node& n, const std::string& where) { return static_cast<std::size_t>(as_u64(n, where)); }

int as_int(const YAML::Node& n, const std::string& where) {
    const auto s = scalar(n, where);
    int v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(where + ": expected an integer, got '" + s + "'");
    return v;
}

double as_double(const YAML::Node& n, const std::string& where) {
    try {
        return n.as<double>();
    } catch (const YAML::Exception&) {
        throw ConfigError(where + ": expected a number");
    }
}

bool as_bool(const YAML::Node& n, const std::string& where) {
    try {
        return n.as<bool>();
    } catch (const YAML::Exception&) {
        throw ConfigError(where + ": expected true or false");
    }
}

std::vector<std::string> as_strings(const YAML::Node& n, const std::string& where) {
    if (!n.IsSequence()) throw ConfigError(where + ": expected a list");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar(n[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

template <class F>
void if_key(const YAML::Node& n, const std::string& path, const char* key, F&& f) {
    if (const auto v = n[key]) f(v, where_of(path, key));
}

// ------------------------------------------------------------------ enum names

std::string_view to_string(data::FeatureSet f) { return f == data::FeatureSet::Full ? "full" : "compact"; }
data::FeatureSet parse_feature_set(const std::string& s) {
    if (s == "full") return data::FeatureSet::Full;
    if (s == "compact") return data::FeatureSet::Compact;
    throw ConfigError("unknown feature set '" + s + "'");
}

std::string_view to_string(data::RunoffMode m) {
    switch (m) {
    case data::RunoffMode::Reservoir: return "reservoir";
    case data::RunoffMode::Independent: return "independent";
    case data::RunoffMode::DuplicateMeteo: return "duplicate_meteo";
    }
    return "?";
}
data::RunoffMode parse_runoff(const std::string& s) {
    if (s == "reservoir") return data::RunoffMode::Reservoir;
    if (s == "independent") return data::RunoffMode::Independent;
    if (s == "duplicate_meteo") return data::RunoffMode::DuplicateMeteo;
    throw ConfigError("unknown runoff mode '" + s + "'");
}

std::string_view to_string(data::SplitKind k) { return k == data::SplitKind::TemporalHeldOut ? "temporal" : "spatial"; }
data::SplitKind parse_split(const std::string& s) {
    if (s == "temporal") return data::SplitKind::TemporalHeldOut;
    if (s == "spatial") return data::SplitKind::SpatialStratified;
    throw ConfigError("unknown split kind '" + s + "'");
}

std::string_view to_string(models::Optimizer o) { return o == models::Optimizer::AdamW ? "adamw" : "adam"; }
models::Optimizer parse_optimizer(const std::string& s) {
    if (s == "adamw") return models::Optimizer::AdamW;
    if (s == "adam") return models::Optimizer::Adam;
    throw ConfigError("unknown optimizer '" + s + "'");
}

std::string_view to_string(models::Schedule s) { return s == models::Schedule::Step ? "step" : "cosine"; }
models::Schedule parse_schedule(const std::string& s) {
    if (s == "step") return models::Schedule::Step;
    if (s == "cosine") return models::Schedule::Cosine;
    throw ConfigError("unknown learning-rate schedule '" + s + "'");
}

trust::NoiseScope parse_scope(const std::string& s) {
    if (s == "runoff") return trust::NoiseScope::RunoffOnly;
    if (s == "all_dynamic") return trust::NoiseScope::AllDynamic;
    throw ConfigError("unknown noise scope '" + s + "'");
}

// ------------------------------------------------------------------ sections

void parse_data(const YAML::Node& n, DataConfig& d) {
    check_keys(n, "data", {"synth", "ingest"});
    if (n["synth"] && n["ingest"]) throw ConfigError("data: give either synth or ingest, not both");
    if (const auto s = n["synth"]) {
        const std::string p = "data.synth";
        if (s.IsNull()) return;
        check_keys(s, p, {"basins", "years", "start_year", "features", "runoff", "variables", "p_obs", "jitter",
                          "constant_group", "relaxed_land_use"});
        auto& c = d.synth;
        if_key(s, p, "basins", [&](auto v, auto w) { c.n_basins = as_size(v, w); });
        if_key(s, p, "years", [&](auto v, auto w) { c.n_years = as_int(v, w); });
        if_key(s, p, "start_year", [&](auto v, auto w) { c.start_year = as_int(v, w); });
        if_key(s, p, "features", [&](auto v, auto w) { c.features = parse_feature_set(scalar(v, w)); });
        if_key(s, p, "runoff", [&](auto v, auto w) { c.runoff = parse_runoff(scalar(v, w)); });
        if_key(s, p, "variables", [&](auto v, auto w) { d.variables = as_size(v, w); });
        if_key(s, p, "p_obs", [&](auto v, auto w) { d.p_obs = as_double(v, w); });
        if_key(s, p, "jitter", [&](auto v, auto w) { c.basin_jitter = as_double(v, w); });
        if_key(s, p, "constant_group",
               [&](auto v, auto w) { c.constant_group = data::parse_feature_group(scalar(v, w)); });
        if_key(s, p, "relaxed_land_use", [&](auto v, auto w) { c.relaxed_land_use = as_bool(v, w); });
    }
    if (const auto s = n["ingest"]) {
        const std::string p = "data.ingest";
        check_keys(s, p, {"path", "min_observations", "relaxed_land_use"});
        if (!s["path"]) throw ConfigError("data.ingest.path is required");
        d.ingest = fs::path(scalar(s["path"], p + ".path"));
        if_key(s, p, "min_observations", [&](auto v, auto w) { d.ingest_options.min_observations = as_size(v, w); });
        if_key(s, p, "relaxed_land_use", [&](auto v, auto w) { d.ingest_options.relaxed_land_use = as_bool(v, w); });
    }
}

void parse_split_section(const YAML::Node& n, data::SplitPlan& s) {
    const std::string p = "split";
    check_keys(n, p, {"kind", "test_years", "test_fraction", "stratify"});
    if_key(n, p, "kind", [&](auto v, auto w) { s.kind = parse_split(scalar(v, w)); });
    if_key(n, p, "test_years", [&](auto v, auto w) {
        if (!v.IsSequence()) throw ConfigError(w + ": expected a list");
        s.test_years.clear();
        for (std::size_t i = 0; i < v.size(); ++i) s.test_years.push_back(as_int(v[i], w));
    });
    if_key(n, p, "test_fraction", [&](auto v, auto w) { s.test_fraction = as_double(v, w); });
    if_key(n, p, "stratify", [&](auto v, auto w) { s.stratify_by_land_use = as_bool(v, w); });
}

models::ModelSpec parse_model(const YAML::Node& n, const std::string& p) {
    if (n.IsScalar()) return models::default_spec(models::parse_family(n.Scalar()), 0, 0, 0);
    check_keys(n, p, {"family", "seq_len", "decoder_window", "hidden", "layers", "dropout", "heads", "ff_dim",
                      "head_widths"});
    if (!n["family"]) throw ConfigError(p + ".family is required");
    auto s = models::default_spec(models::parse_family(scalar(n["family"], p + ".family")), 0, 0, 0);
    if_key(n, p, "seq_len", [&](auto v, auto w) { s.seq_len = as_size(v, w); });
    if_key(n, p, "decoder_window", [&](auto v, auto w) { s.decoder_window = as_size(v, w); });
    if_key(n, p, "hidden", [&](auto v, auto w) { s.hidden = as_size(v, w); });
    if_key(n, p, "layers", [&](auto v, auto w) { s.layers = as_size(v, w); });
    if_key(n, p, "dropout", [&](auto v, auto w) { s.dropout = as_double(v, w); });
    if_key(n, p, "heads", [&](auto v, auto w) { s.heads = as_size(v, w); });
    if_key(n, p, "ff_dim", [&](auto v, auto w) { s.ff_dim = as_size(v, w); });
    if_key(n, p, "head_widths", [&](auto v, auto w) {
        if (!v.IsSequence()) throw ConfigError(w + ": expected a list");
        s.head_widths.clear();
        for (std::size_t i = 0; i < v.size(); ++i) s.head_widths.push_back(as_size(v[i], w));
    });
    return s;
}

void parse_train(const YAML::Node& n, models::TrainConfig& t) {
    const std::string p = "train";
    check_keys(n, p, {"epochs", "batch_size", "optimizer", "lr", "schedule", "decay", "decay_every", "min_lr",
                      "weight_decay", "samples_per_epoch"});
    if_key(n, p, "epochs", [&](auto v, auto w) { t.epochs = as_size(v, w); });
    if_key(n, p, "batch_size", [&](auto v, auto w) { t.batch_size = as_size(v, w); });
    if_key(n, p, "optimizer", [&](auto v, auto w) { t.optimizer = parse_optimizer(scalar(v, w)); });
    if_key(n, p, "lr", [&](auto v, auto w) { t.lr = as_double(v, w); });
    if_key(n, p, "schedule", [&](auto v, auto w) { t.schedule = parse_schedule(scalar(v, w)); });
    if_key(n, p, "decay", [&](auto v, auto w) { t.decay = as_double(v, w); });
    if_key(n, p, "decay_every", [&](auto v, auto w) { t.decay_every = as_size(v, w); });
    if_key(n, p, "min_lr", [&](auto v, auto w) { t.min_lr = as_double(v, w); });
    if_key(n, p, "weight_decay", [&](auto v, auto w) { t.weight_decay = as_double(v, w); });
    if_key(n, p, "samples_per_epoch", [&](auto v, auto w) { t.samples_per_epoch = as_size(v, w); });
}

SweepConfig parse_sweep(const YAML::Node& n, const std::string& p) {
    if (n.IsScalar()) return sweep_preset(n.Scalar());
    check_keys(n, p, {"preset", "levels", "sigma", "epsilon", "step", "iterations"});
    if (!n["preset"]) throw ConfigError(p + ".preset is required");
    auto s = sweep_preset(scalar(n["preset"], p + ".preset"));
    if_key(n, p, "levels", [&](auto v, auto w) {
        if (!v.IsSequence()) throw ConfigError(w + ": expected a list");
        s.levels.clear();
        for (std::size_t i = 0; i < v.size(); ++i) s.levels.push_back(as_double(v[i], w));
    });
    if_key(n, p, "sigma", [&](auto v, auto w) { s.sigma = as_double(v, w); });
    if_key(n, p, "epsilon", [&](auto v, auto w) { s.pgd.epsilon = as_double(v, w); });
    if_key(n, p, "step", [&](auto v, auto w) { s.pgd.step = as_double(v, w); });
    if_key(n, p, "iterations", [&](auto v, auto w) { s.pgd.iterations = as_size(v, w); });
    return s;
}

void parse_uncertainty(const YAML::Node& n, ExperimentConfig& cfg) {
    check_keys(n, "uncertainty", {"tta", "mc_dropout"});
    if (const auto t = n["tta"]) {
        const std::string p = "uncertainty.tta";
        cfg.tta.enabled = true;
        if (!t.IsNull()) {
            check_keys(t, p, {"sigma", "runs", "scope"});
            if_key(t, p, "sigma", [&](auto v, auto w) { cfg.tta.sigma = as_double(v, w); });
            if_key(t, p, "runs", [&](auto v, auto w) { cfg.tta.runs = as_size(v, w); });
            if_key(t, p, "scope", [&](auto v, auto w) { cfg.tta.scope = parse_scope(scalar(v, w)); });
        }
    }
    if (const auto m = n["mc_dropout"]) {
        const std::string p = "uncertainty.mc_dropout";
        cfg.mc.enabled = true;
        if (!m.IsNull()) {
            check_keys(m, p, {"p", "runs", "models"});
            if_key(m, p, "p", [&](auto v, auto w) { cfg.mc.p = as_double(v, w); });
            if_key(m, p, "runs", [&](auto v, auto w) { cfg.mc.runs = as_size(v, w); });
            if_key(m, p, "models", [&](auto v, auto w) {
                for (const auto& f : as_strings(v, w)) cfg.mc.families.push_back(models::parse_family(f));
            });
        }
    }
}

void parse_attribution(const YAML::Node& n, AttributionConfig& a) {
    const std::string p = "attribution";
    check_keys(n, p, {"methods", "subset_epochs", "ig"});
    if_key(n, p, "methods", [&](auto v, auto w) {
        for (const auto& m : as_strings(v, w)) {
            if (m == "ablation") a.ablation = true;
            else if (m == "traverse") a.traverse = true;
            else if (m == "ig") a.ig = true;
            else throw ConfigError(w + ": unknown attribution method '" + m + "'");
        }
    });
    if_key(n, p, "subset_epochs", [&](auto v, auto w) { a.subset_epochs = as_size(v, w); });
    if (const auto ig = n["ig"]) {
        const std::string q = p + ".ig";
        check_keys(ig, q, {"steps", "samples", "baseline_dynamic", "baseline_static"});
        if_key(ig, q, "steps", [&](auto v, auto w) { a.ig_steps = as_size(v, w); });
        if_key(ig, q, "samples", [&](auto v, auto w) { a.ig_samples = as_size(v, w); });
        if_key(ig, q, "baseline_dynamic", [&](auto v, auto w) { a.ig_baseline.dynamic = as_double(v, w); });
        if_key(ig, q, "baseline_static", [&](auto v, auto w) { a.ig_baseline.statics = as_double(v, w); });
    }
}

// ------------------------------------------------------------------ hashing

std::array<unsigned char, 32> sha256(std::string_view bytes) {
    std::array<unsigned char, 32> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1 || len != md.size())
        throw ContractError("SHA-256 digest failed");
    return md;
}

void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string full_digits(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Short form for labels and seed paths.
std::string level_text(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.15g", v);
    return buf;
}

Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

// ------------------------------------------------------------------ csv

std::string csv_cell(const Json& v) {
    if (v.is_null()) return "nan";
    if (v.is_number_float()) return full_digits(v.get<double>());
    if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

std::string csv_table(const std::vector<std::string>& columns, const std::vector<std::vector<Json>>& rows) {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
    out += '\n';
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + csv_cell(r[i]);
        out += '\n';
    }
    return out;
}

std::string csv_from_records(const Json& records, const std::vector<std::string>& columns) {
    std::vector<std::vector<Json>> rows;
    for (const auto& rec : records) {
        std::vector<Json> r;
        for (const auto& c : columns) r.push_back(rec.contains(c) ? rec[c] : Json(nullptr));
        rows.push_back(std::move(r));
    }
    return csv_table(columns, rows);
}

const std::map<std::string, std::vector<std::string>>& table_columns() {
    static const std::map<std::string, std::vector<std::string>> cols{
        {"baseline", {"model", "basin", "variable", "condition", "kge", "r", "beta", "gamma", "pbias"}},
        {"robustness",
         {"model", "kind", "side", "level", "median_change", "n_pairs", "beta", "rows_corrupted", "candidates"}},
        {"uncertainty",
         {"model", "method", "parameter", "scope", "basin", "variable", "runs", "kge_sd", "kge_mean"}},
        {"attribution", {"model", "method", "variable", "group", "raw", "share"}},
        {"stats", {"analysis", "model", "subject", "method", "statistic", "n", "p_value", "p_adjusted", "stars"}},
    };
    return cols;
}

// ------------------------------------------------------------------ pipeline helpers

std::vector<std::string> model_labels(const std::vector<models::ModelSpec>& specs) {
    std::map<Family, std::size_t> count, seen;
    for (const auto& s : specs) ++count[s.family];
    std::vector<std::string> out;
    for (const auto& s : specs) {
        std::string l(models::to_string(s.family));
        if (count[s.family] > 1) l += "-" + std::to_string(++seen[s.family]);
        out.push_back(l);
    }
    return out;
}

struct Plan {
    Json& items;
    void add(const std::string& stage, const std::string& job) {
        items.push_back({{"stage", stage}, {"job", job}, {"status", "pending"}});
    }
    void done(const std::string& stage, const std::string& job) {
        for (auto& it : items)
            if (it["stage"] == stage && it["job"] == job) it["status"] = "done";
    }
};

struct StatRow {
    std::string analysis, model, subject, method;
    double statistic = kNaN;
    std::size_t n = 0;
    double p = kNaN;
};

StatRow test_row(std::string analysis, std::string model, std::string subject,
                 const std::function<stats::TestResult()>& f) {
    StatRow r{std::move(analysis), std::move(model), std::move(subject), "", kNaN, 0, kNaN};
    try {
        const auto t = f();
        r.method = t.method;
        r.statistic = t.statistic;
        r.n = t.n_effective;
        r.p = t.p_value;
    } catch (const Error& e) {
        r.method = "undefined";
    }
    return r;
}

StatRow corr_row(std::string analysis, std::string model, std::string subject, const char* method,
                 const std::function<stats::Correlation()>& f) {
    StatRow r{std::move(analysis), std::move(model), std::move(subject), method, kNaN, 0, kNaN};
    try {
        const auto c = f();
        r.statistic = c.coefficient;
        r.n = c.n;
        r.p = c.p_value;
    } catch (const Error&) {
        r.method = "undefined";
    }
    return r;
}

} // namespace

// ------------------------------------------------------------------ config

std::string SweepConfig::label() const {
    return std::string(corrupt::to_string(kind)) + "_" + std::string(corrupt::to_string(side));
}

SweepConfig sweep_preset(std::string_view name) {
    for (auto kind : {corrupt::Kind::Outlier, corrupt::Kind::Noise, corrupt::Kind::Adversarial})
        for (auto side : {corrupt::Side::Targets, corrupt::Side::Features}) {
            if (kind == corrupt::Kind::Adversarial && side == corrupt::Side::Targets) continue;
            SweepConfig s;
            s.kind = kind;
            s.side = side;
            if (s.label() != name) continue;
            for (const auto& p : corrupt::reference_presets(kind, side, 0)) s.levels.push_back(p.fraction);
            return s;
        }
    throw ConfigError("unknown corruption preset '" + std::string(name) + "'");
}

ExperimentConfig parse_config(const std::string& yaml) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("malformed YAML: ") + e.what());
    }
    ExperimentConfig cfg;
    if (root.IsNull()) throw ConfigError("empty config");
    check_keys(root, "", {"version", "seed", "output", "jobs", "formats", "data", "split", "models", "train",
                          "robustness", "uncertainty", "attribution", "statistics"});
    if_key(root, "", "version", [&](auto v, auto w) {
        if (as_int(v, w) != kConfigVersion)
            throw ConfigError("unsupported config version " + scalar(v, w) + " (expected " +
                              std::to_string(kConfigVersion) + ")");
    });
    if_key(root, "", "seed", [&](auto v, auto w) { cfg.seed = as_u64(v, w); });
    if_key(root, "", "output", [&](auto v, auto w) { cfg.output = scalar(v, w); });
    if_key(root, "", "jobs", [&](auto v, auto w) { cfg.jobs = as_size(v, w); });
    if_key(root, "", "formats", [&](auto v, auto w) { cfg.formats = as_strings(v, w); });
    if (const auto d = root["data"]) parse_data(d, cfg.data);
    if (const auto s = root["split"]) parse_split_section(s, cfg.split);
    if (const auto m = root["models"]) {
        if (!m.IsSequence()) throw ConfigError("models: expected a list");
        for (std::size_t i = 0; i < m.size(); ++i) cfg.models.push_back(parse_model(m[i], "models[" + std::to_string(i) + "]"));
    }
    if (const auto t = root["train"]) parse_train(t, cfg.train);
    if (const auto r = root["robustness"]) {
        if (!r.IsSequence()) throw ConfigError("robustness: expected a list");
        for (std::size_t i = 0; i < r.size(); ++i)
            cfg.robustness.push_back(parse_sweep(r[i], "robustness[" + std::to_string(i) + "]"));
    }
    if (const auto u = root["uncertainty"]) parse_uncertainty(u, cfg);
    if (const auto a = root["attribution"]) parse_attribution(a, cfg.attribution);
    if_key(root, "", "statistics", [&](auto v, auto w) { cfg.statistics = as_bool(v, w); });
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void validate(const ExperimentConfig& cfg) {
    if (!cfg.seed) throw ConfigError("a master seed is required (config 'seed' or --seed)");
    if (cfg.jobs < 1) throw ConfigError("jobs must be at least 1");
    if (cfg.formats.empty()) throw ConfigError("at least one output format is required");
    for (const auto& f : cfg.formats)
        if (f != "json" && f != "csv") throw ConfigError("unknown output format '" + f + "'");
    if (!cfg.data.ingest) {
        const auto& s = cfg.data.synth;
        if (s.n_basins < 1 || s.n_years < 1) throw ConfigError("synthetic corpus needs at least one basin and year");
        if (cfg.data.variables < 1 || cfg.data.variables > 20)
            throw ConfigError("synthetic variable count must lie in 1..20");
        if (cfg.data.p_obs && !(*cfg.data.p_obs > 0.0 && *cfg.data.p_obs <= 1.0))
            throw ConfigError("p_obs must lie in (0, 1]");
    }
    if (cfg.split.kind == data::SplitKind::TemporalHeldOut && cfg.split.test_years.empty())
        throw ConfigError("temporal split needs test years");
    if (cfg.models.empty()) throw ConfigError("at least one model is required");
    for (auto s : cfg.models) {
        s.n_dynamic = s.n_targets = 1;
        models::validate(s);
    }
    models::validate(cfg.train);
    for (const auto& sw : cfg.robustness) {
        if (sw.levels.empty()) throw ConfigError("sweep " + sw.label() + " has no levels");
        for (double f : sw.levels) {
            corrupt::CorruptionSpec c;
            c.kind = sw.kind;
            c.side = sw.side;
            c.fraction = f;
            c.noise_sigma = sw.sigma;
            c.pgd = sw.pgd;
            corrupt::validate(c);
        }
    }
    if (cfg.tta.enabled && (cfg.tta.runs < 2 || !(cfg.tta.sigma >= 0.0)))
        throw ConfigError("TTA needs at least 2 runs and a non-negative sigma");
    if (cfg.mc.enabled) {
        if (cfg.mc.runs < 2 || !(cfg.mc.p >= 0.0 && cfg.mc.p < 1.0))
            throw ConfigError("MC dropout needs at least 2 runs and p in [0, 1)");
        for (auto f : cfg.mc.families)
            if (std::none_of(cfg.models.begin(), cfg.models.end(), [&](const auto& m) { return m.family == f; }))
                throw ConfigError("MC dropout names model '" + std::string(models::to_string(f)) +
                                  "' which is not configured");
    }
    const auto& a = cfg.attribution;
    if (a.subset_epochs && *a.subset_epochs < 1) throw ConfigError("subset_epochs must be at least 1");
    if (a.ig && (a.ig_steps < 1 || a.ig_samples < 1)) throw ConfigError("IG needs at least one step and sample");
}

Json config_json(const ExperimentConfig& cfg) {
    Json j;
    j["version"] = kConfigVersion;
    j["seed"] = cfg.seed ? Json(*cfg.seed) : Json(nullptr);
    Json d;
    if (cfg.data.ingest) {
        d["source"] = "ingest";
        d["path"] = cfg.data.ingest->generic_string();
        d["min_observations"] = cfg.data.ingest_options.min_observations;
        d["relaxed_land_use"] = cfg.data.ingest_options.relaxed_land_use;
    } else {
        const auto& s = cfg.data.synth;
        d["source"] = "synth";
        d["basins"] = s.n_basins;
        d["years"] = s.n_years;
        d["start_year"] = s.start_year;
        d["features"] = to_string(s.features);
        d["runoff"] = to_string(s.runoff);
        d["variables"] = cfg.data.variables;
        d["p_obs"] = cfg.data.p_obs ? Json(*cfg.data.p_obs) : Json(nullptr);
        d["jitter"] = s.basin_jitter;
        d["constant_group"] = s.constant_group ? Json(data::to_string(*s.constant_group)) : Json(nullptr);
        d["relaxed_land_use"] = s.relaxed_land_use;
    }
    j["data"] = d;
    j["split"] = {{"kind", to_string(cfg.split.kind)},
                  {"test_years", cfg.split.test_years},
                  {"test_fraction", cfg.split.test_fraction},
                  {"stratify", cfg.split.stratify_by_land_use}};
    j["models"] = Json::array();
    for (const auto& m : cfg.models)
        j["models"].push_back({{"family", models::to_string(m.family)},
                               {"seq_len", m.seq_len},
                               {"decoder_window", m.decoder_window},
                               {"hidden", m.hidden},
                               {"layers", m.layers},
                               {"dropout", m.dropout},
                               {"heads", m.heads},
                               {"ff_dim", m.ff_dim},
                               {"head_widths", m.head_widths}});
    const auto& t = cfg.train;
    j["train"] = {{"epochs", t.epochs},         {"batch_size", t.batch_size},
                  {"optimizer", to_string(t.optimizer)}, {"lr", t.lr},
                  {"schedule", to_string(t.schedule)},   {"decay", t.decay},
                  {"decay_every", t.decay_every},        {"min_lr", t.min_lr},
                  {"weight_decay", t.weight_decay},      {"samples_per_epoch", t.samples_per_epoch}};
    j["robustness"] = Json::array();
    for (const auto& s : cfg.robustness)
        j["robustness"].push_back({{"preset", s.label()},
                                   {"levels", s.levels},
                                   {"sigma", s.sigma},
                                   {"epsilon", s.pgd.epsilon},
                                   {"step", s.pgd.step},
                                   {"iterations", s.pgd.iterations}});
    Json u;
    u["tta"] = cfg.tta.enabled ? Json{{"sigma", cfg.tta.sigma},
                                      {"runs", cfg.tta.runs},
                                      {"scope", trust::to_string(cfg.tta.scope)}}
                               : Json(nullptr);
    if (cfg.mc.enabled) {
        Json fams = Json::array();
        for (auto f : cfg.mc.families) fams.push_back(models::to_string(f));
        u["mc_dropout"] = {{"p", cfg.mc.p}, {"runs", cfg.mc.runs}, {"models", fams}};
    } else {
        u["mc_dropout"] = nullptr;
    }
    j["uncertainty"] = u;
    const auto& a = cfg.attribution;
    Json methods = Json::array();
    if (a.ablation) methods.push_back("ablation");
    if (a.traverse) methods.push_back("traverse");
    if (a.ig) methods.push_back("ig");
    j["attribution"] = {{"methods", methods},
                        {"subset_epochs", a.subset_epochs ? Json(*a.subset_epochs) : Json(nullptr)},
                        {"ig",
                         {{"steps", a.ig_steps},
                          {"samples", a.ig_samples},
                          {"baseline_dynamic", a.ig_baseline.dynamic},
                          {"baseline_static", a.ig_baseline.statics}}}};
    j["statistics"] = cfg.statistics;
    return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
    const auto md = sha256(config_json(cfg).dump());
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char c : md) {
        out += hex[c >> 4];
        out += hex[c & 15];
    }
    return out;
}

std::uint64_t seed_stream(std::uint64_t master, const std::vector<std::string>& path) {
    if (path.empty()) throw ContractError("seed path needs at least one label");
    std::string bytes = "wqtrust.seed.v1";
    put_le(bytes, master, 8);
    for (const auto& l : path) {
        put_le(bytes, l.size(), 4);
        bytes += l;
    }
    const auto md = sha256(bytes);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | md[static_cast<std::size_t>(i)];
    return v;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& flags, const char* env_out) {
    if (env_out && *env_out) cfg.output = env_out;
    if (flags.output) cfg.output = *flags.output;
    if (flags.seed) cfg.seed = flags.seed;
    if (flags.jobs) cfg.jobs = *flags.jobs;
    if (flags.formats) cfg.formats = *flags.formats;
}

// ------------------------------------------------------------------ jobs

void run_jobs(std::size_t n, std::size_t threads, const std::string& stage,
              const std::function<std::string(std::size_t)>& job_name, const std::function<void(std::size_t)>& job) {
    std::vector<std::string> errors(n);
    std::vector<std::uint8_t> failed(n, 0);
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                job(i);
            } catch (const std::exception& e) {
                errors[i] = e.what();
                failed[i] = 1;
            }
        }
    };
    const std::size_t t = std::min(std::max<std::size_t>(threads, 1), n);
    if (t <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t k = 0; k < t; ++k) pool.emplace_back(worker);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (failed[i]) throw StageError(stage, job_name(i), errors[i]);
}

// ------------------------------------------------------------------ pipeline

data::BasinDataset load_dataset(const ExperimentConfig& cfg) {
    if (cfg.data.ingest) return data::ingest_csv(*cfg.data.ingest, cfg.data.ingest_options);
    auto sc = cfg.data.synth;
    sc.targets = data::default_recipes(cfg.data.variables);
    if (cfg.data.p_obs)
        for (auto& r : sc.targets) r.p_obs = *cfg.data.p_obs;
    return data::synthesize(sc, seed_stream(*cfg.seed, {"data", "synth"}));
}

RunOutcome run(const ExperimentConfig& cfg) {
    validate(cfg);
    const std::uint64_t master = *cfg.seed;
    RunOutcome out;
    Json& rep = out.report;
    rep["meta"] = {{"tool", "wqtrust"},
                   {"version", kToolVersion},
                   {"config_version", kConfigVersion},
                   {"config_hash", config_hash(cfg)},
                   {"seed", master},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
    rep["config"] = config_json(cfg);
    rep["status"] = "running";
    rep["failure"] = nullptr;
    rep["plan"] = Json::array();
    for (const auto& t : {"baseline", "simplicity", "robustness", "uncertainty", "attribution", "stats"})
        rep[t] = Json::array();

    const auto labels = model_labels(cfg.models);
    const std::size_t M = cfg.models.size();
    const auto& A = cfg.attribution;
    Plan plan{rep["plan"]};
    plan.add("data", cfg.data.ingest ? "ingest" : "synth");
    plan.add("split", std::string(to_string(cfg.split.kind)));
    for (const auto& l : labels) plan.add("baselines", l);
    for (const auto& l : labels) plan.add("evaluate", l);
    for (const auto& l : labels)
        for (const auto& s : cfg.robustness) plan.add("sweeps", l + "/" + s.label());
    const auto mc_on = [&](std::size_t m) {
        return cfg.mc.enabled && (cfg.mc.families.empty() ||
                                  std::count(cfg.mc.families.begin(), cfg.mc.families.end(), cfg.models[m].family));
    };
    for (std::size_t m = 0; m < M; ++m) {
        if (cfg.tta.enabled) plan.add("uncertainty", labels[m] + "/tta");
        if (mc_on(m)) plan.add("uncertainty", labels[m] + "/mc_dropout");
    }
    for (const auto& l : labels) {
        if (A.ablation) plan.add("attribution", l + "/ablation");
        if (A.traverse) plan.add("attribution", l + "/traverse");
        if (A.ig) plan.add("attribution", l + "/ig");
    }
    if (cfg.statistics) plan.add("stats", "all");

    std::string stage = "data";
    try {
        // data
        const data::BasinDataset ds = load_dataset(cfg);
        plan.done("data", cfg.data.ingest ? "ingest" : "synth");
        std::vector<std::string> var_names, basin_ids;
        for (const auto& c : ds.target_columns) var_names.push_back(c.name);
        for (const auto& b : ds.basins) basin_ids.push_back(b.id);

        // split
        stage = "split";
        auto sp = cfg.split;
        sp.seed = seed_stream(master, {"split"});
        const data::Split split = data::split(ds, sp);
        const data::DatasetNormalizer norm = data::fit_normalizer(ds, split.train);
        const models::NormalizedData nd = models::normalize(ds, norm);
        plan.done("split", std::string(to_string(cfg.split.kind)));

        std::vector<trust::Experiment> ex(M);
        for (std::size_t m = 0; m < M; ++m) {
            ex[m].ds = &ds;
            ex[m].split = &split;
            ex[m].norm = &norm;
            ex[m].data = &nd;
            ex[m].spec = cfg.models[m];
            ex[m].spec.n_dynamic = nd.n_dynamic;
            ex[m].spec.n_static = nd.n_static;
            ex[m].spec.n_targets = nd.n_targets;
            ex[m].train = cfg.train;
        }
        const auto train_seed = [&](std::size_t m) { return seed_stream(master, {"train", labels[m]}); };

        // baselines
        stage = "baselines";
        std::vector<std::optional<models::TrainedModel>> base(M);
        run_jobs(
            M, cfg.jobs, stage, [&](std::size_t m) { return labels[m]; },
            [&](std::size_t m) {
                base[m] = models::fit(ex[m].spec, ex[m].train, norm, nd, split.train, train_seed(m));
            });
        for (const auto& l : labels) plan.done("baselines", l);

        // evaluate
        stage = "evaluate";
        std::vector<trust::Evaluation> base_eval(M);
        const auto add_eval = [&](const std::string& model, const std::string& condition, const trust::Evaluation& ev) {
            for (const auto& p : ev.pairs)
                rep["baseline"].push_back({{"model", model},
                                           {"basin", basin_ids[p.basin]},
                                           {"variable", var_names[p.variable]},
                                           {"condition", condition},
                                           {"kge", num(p.kge.kge)},
                                           {"r", num(p.kge.r)},
                                           {"beta", num(p.kge.beta)},
                                           {"gamma", num(p.kge.gamma)},
                                           {"pbias", num(p.pbias)},
                                           {"n_obs", p.n_obs}});
        };
        run_jobs(
            M, cfg.jobs, stage, [&](std::size_t m) { return labels[m]; },
            [&](std::size_t m) {
                auto model = base[m]->model.clone();
                base_eval[m] = trust::evaluate_model(ex[m], model, nd);
            });
        for (std::size_t m = 0; m < M; ++m) {
            add_eval(labels[m], "clean", base_eval[m]);
            plan.done("evaluate", labels[m]);
        }
        if (const auto q = ds.dynamic_index("runoff")) {
            for (std::size_t b = 0; b < ds.basins.size(); ++b)
                for (std::size_t v = 0; v < ds.n_targets(); ++v) {
                    const auto& rec = ds.basins[b];
                    std::vector<double> c, r, day;
                    for (std::size_t d = 0; d < ds.n_days(); ++d)
                        if (rec.observed(d, v) && !std::isnan(rec.dynamics(d, *q))) {
                            c.push_back(rec.targets(d, v));
                            r.push_back(rec.dynamics(d, *q));
                            day.push_back(static_cast<double>(d));
                        }
                    Json row{{"basin", basin_ids[b]}, {"variable", var_names[v]}};
                    try {
                        const auto s = metrics::simplicity(c, r, day);
                        row["simplicity"] = num(s.simplicity);
                        row["linearity"] = num(s.linearity);
                    } catch (const Error&) {
                        row["simplicity"] = nullptr;
                        row["linearity"] = nullptr;
                    }
                    row["n_obs"] = c.size();
                    rep["simplicity"].push_back(row);
                }
        }

        // sweeps
        stage = "sweeps";
        struct SweepJob {
            std::size_t m, s, l;
        };
        std::vector<SweepJob> sj;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t s = 0; s < cfg.robustness.size(); ++s)
                for (std::size_t l = 0; l < cfg.robustness[s].levels.size(); ++l) sj.push_back({m, s, l});
        std::vector<trust::Evaluation> sweep_eval(sj.size());
        std::vector<corrupt::Manifest> manifests(sj.size());
        const auto sweep_name = [&](std::size_t i) {
            const auto& j = sj[i];
            return labels[j.m] + "/" + cfg.robustness[j.s].label() + "@" +
                   level_text(cfg.robustness[j.s].levels[j.l]);
        };
        run_jobs(sj.size(), cfg.jobs, stage, sweep_name, [&](std::size_t i) {
            const auto& j = sj[i];
            const auto& sw = cfg.robustness[j.s];
            corrupt::CorruptionSpec c;
            c.kind = sw.kind;
            c.side = sw.side;
            c.fraction = sw.levels[j.l];
            c.noise_sigma = sw.sigma;
            c.pgd = sw.pgd;
            c.seed = seed_stream(master, {"corrupt", labels[j.m], sw.label(), level_text(c.fraction)});
            auto model = base[j.m]->model.clone();
            sweep_eval[i] = trust::sweep_level(ex[j.m], model, c, train_seed(j.m), &manifests[i]);
        });
        for (std::size_t m = 0, i = 0; m < M; ++m)
            for (std::size_t s = 0; s < cfg.robustness.size(); ++s) {
                const auto& sw = cfg.robustness[s];
                std::vector<std::pair<double, trust::Evaluation>> levels;
                std::map<double, const corrupt::Manifest*> man;
                for (std::size_t l = 0; l < sw.levels.size(); ++l, ++i) {
                    add_eval(labels[m], sw.label() + "@" + level_text(sw.levels[l]), sweep_eval[i]);
                    levels.emplace_back(sw.levels[l], sweep_eval[i]);
                    man[sw.levels[l]] = &manifests[i];
                }
                trust::RobustnessCurve curve;
                try {
                    curve = trust::robustness_curve(base_eval[m], levels, sw.kind, sw.side);
                } catch (const Error& e) {
                    throw StageError(stage, labels[m] + "/" + sw.label(), e.what());
                }
                for (std::size_t k = 0; k < curve.levels.size(); ++k) {
                    const auto it = man.find(curve.levels[k]);
                    rep["robustness"].push_back(
                        {{"model", labels[m]},
                         {"kind", corrupt::to_string(sw.kind)},
                         {"side", corrupt::to_string(sw.side)},
                         {"level", curve.levels[k]},
                         {"median_change", num(curve.median_change[k])},
                         {"n_pairs", curve.n_pairs[k]},
                         {"beta", num(curve.beta)},
                         {"rows_corrupted", it == man.end() ? 0 : it->second->rows.size()},
                         {"candidates", man.empty() ? 0 : man.begin()->second->candidates}});
                }
                plan.done("sweeps", labels[m] + "/" + sw.label());
            }

        // uncertainty
        stage = "uncertainty";
        struct UJob {
            std::size_t m;
            bool tta;
            std::size_t run;
        };
        std::vector<UJob> uj;
        for (std::size_t m = 0; m < M; ++m) {
            if (cfg.tta.enabled)
                for (std::size_t r = 0; r < cfg.tta.runs; ++r) uj.push_back({m, true, r});
            if (mc_on(m))
                for (std::size_t r = 0; r < cfg.mc.runs; ++r) uj.push_back({m, false, r});
        }
        std::vector<trust::Evaluation> u_eval(uj.size());
        run_jobs(
            uj.size(), cfg.jobs, stage,
            [&](std::size_t i) {
                return labels[uj[i].m] + (uj[i].tta ? "/tta#" : "/mc_dropout#") + std::to_string(uj[i].run);
            },
            [&](std::size_t i) {
                const auto& j = uj[i];
                auto model = base[j.m]->model.clone();
                const auto predict = trust::model_predictor(model, norm);
                u_eval[i] = j.tta ? trust::tta_run(ex[j.m], predict, cfg.tta.sigma, cfg.tta.scope,
                                                   seed_stream(master, {"tta", labels[j.m]}), j.run)
                                  : trust::mc_dropout_run(ex[j.m], predict, cfg.mc.p,
                                                          seed_stream(master, {"mc_dropout", labels[j.m]}), j.run);
            });
        std::vector<std::map<std::string, trust::UncertaintyResult>> unc(M);
        for (std::size_t i = 0; i < uj.size();) {
            const auto& j = uj[i];
            const std::size_t runs = j.tta ? cfg.tta.runs : cfg.mc.runs;
            const std::vector<trust::Evaluation> evs(u_eval.begin() + static_cast<std::ptrdiff_t>(i),
                                                     u_eval.begin() + static_cast<std::ptrdiff_t>(i + runs));
            const auto method = j.tta ? trust::UncertaintyMethod::TTA : trust::UncertaintyMethod::MCDropout;
            const auto res = trust::uncertainty_from_runs(method, j.tta ? cfg.tta.sigma : cfg.mc.p, evs);
            for (const auto& p : res.pairs)
                rep["uncertainty"].push_back(
                    {{"model", labels[j.m]},
                     {"method", trust::to_string(method)},
                     {"parameter", res.parameter},
                     {"scope", j.tta ? Json(trust::to_string(cfg.tta.scope)) : Json(nullptr)},
                     {"basin", basin_ids[p.basin]},
                     {"variable", var_names[p.variable]},
                     {"runs", p.runs},
                     {"kge_sd", num(p.kge_sd)},
                     {"kge_mean", num(p.kge_mean)}});
            unc[j.m][std::string(trust::to_string(method))] = res;
            plan.done("uncertainty", labels[j.m] + "/" + std::string(trust::to_string(method)));
            i += runs;
        }

        // attribution
        stage = "attribution";
        std::vector<trust::GroupMask> masks;
        if (A.traverse)
            for (trust::GroupMask g = 0; g <= trust::kAllGroups; ++g) masks.push_back(g);
        else if (A.ablation) {
            masks.push_back(trust::kAllGroups);
            for (std::size_t g = 0; g < trust::kGroups; ++g) masks.push_back(trust::kAllGroups & ~(1u << g));
        }
        std::vector<trust::Evaluation> sub_eval(M * masks.size());
        run_jobs(
            sub_eval.size(), cfg.jobs, stage,
            [&](std::size_t i) { return labels[i / masks.size()] + "/subset " + trust::mask_label(masks[i % masks.size()]); },
            [&](std::size_t i) {
                const std::size_t m = i / masks.size();
                auto e = ex[m];
                if (A.subset_epochs) e.train.epochs = *A.subset_epochs;
                sub_eval[i] = trust::subset_evaluation(e, masks[i % masks.size()], seed_stream(master, {"subset", labels[m]}));
            });
        std::vector<std::optional<trust::AttributionResult>> ig_res(M);
        if (A.ig)
            run_jobs(
                M, cfg.jobs, stage, [&](std::size_t m) { return labels[m] + "/ig"; },
                [&](std::size_t m) {
                    auto model = base[m]->model.clone();
                    const auto rows = trust::scoring_rows(ex[m]);
                    if (rows.empty()) throw AttributionError("no test rows to attribute");
                    const std::size_t k = std::min(A.ig_samples, rows.size());
                    std::vector<data::RowIndex> pick;
                    for (std::size_t s = 0; s < k; ++s) pick.push_back(rows[s * rows.size() / k]);
                    ig_res[m] = trust::ig_attribution(model, nd, pick, var_names, A.ig_steps, A.ig_baseline);
                });
        std::vector<std::map<trust::GroupMask, trust::Evaluation>> subsets(M);
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t k = 0; k < masks.size(); ++k) subsets[m][masks[k]] = sub_eval[m * masks.size() + k];
            const auto push = [&](const trust::AttributionResult& r) {
                for (std::size_t v = 0; v < r.variables.size(); ++v)
                    for (std::size_t g = 0; g < trust::kGroups; ++g)
                        rep["attribution"].push_back({{"model", labels[m]},
                                                      {"method", trust::to_string(r.method)},
                                                      {"variable", r.variables[v]},
                                                      {"group", data::to_string(data::kAttributionGroups[g])},
                                                      {"raw", num(r.raw[v][g])},
                                                      {"share", r.share[v][g]}});
                plan.done("attribution", labels[m] + "/" + std::string(trust::to_string(r.method)));
            };
            try {
                if (A.ablation) {
                    std::array<const trust::Evaluation*, trust::kGroups> wo{};
                    for (std::size_t g = 0; g < trust::kGroups; ++g)
                        wo[g] = &subsets[m].at(trust::kAllGroups & ~(1u << g));
                    push(trust::ablation_importance(subsets[m].at(trust::kAllGroups), wo, var_names));
                }
                if (A.traverse) push(trust::traverse_importance(subsets[m], var_names));
            } catch (const Error& e) {
                throw StageError(stage, labels[m], e.what());
            }
            if (ig_res[m]) push(*ig_res[m]);
        }

        // stats
        if (cfg.statistics) {
            stage = "stats";
            std::vector<StatRow> rows;
            const std::size_t V = var_names.size(), B = basin_ids.size();
            // Paired model comparison per variable.
            for (std::size_t a = 0; a < M; ++a)
                for (std::size_t b = a + 1; b < M; ++b)
                    for (std::size_t v = 0; v < V; ++v) {
                        std::vector<double> d;
                        for (std::size_t k = 0; k < B; ++k) {
                            const auto &pa = base_eval[a].at(k, v), &pb = base_eval[b].at(k, v);
                            if (pa.defined && pb.defined) d.push_back(pa.kge.kge - pb.kge.kge);
                        }
                        rows.push_back(test_row("model_comparison", labels[a] + "_vs_" + labels[b], var_names[v],
                                                [&] { return stats::wilcoxon_signed_rank(d); }));
                    }
            std::map<std::pair<std::string, std::string>, double> simp;
            for (const auto& s : rep["simplicity"])
                simp[{s["basin"].get<std::string>(), s["variable"].get<std::string>()}] =
                    s["simplicity"].is_null() ? kNaN : s["simplicity"].get<double>();
            for (std::size_t m = 0; m < M; ++m) {
                std::vector<double> kg, sv, kall;
                for (const auto& p : base_eval[m].pairs) {
                    kall.push_back(p.defined ? p.kge.kge : kNaN);
                    if (!p.defined || simp.empty()) continue;
                    const double s = simp[{basin_ids[p.basin], var_names[p.variable]}];
                    if (std::isnan(s)) continue;
                    kg.push_back(p.kge.kge);
                    sv.push_back(s);
                }
                if (!simp.empty())
                    rows.push_back(corr_row("kge_vs_simplicity", labels[m], "all", "spearman",
                                            [&] { return stats::spearman(sv, kg); }));
                for (std::size_t s = 0; s < cfg.robustness.size(); ++s) {
                    const auto& sw = cfg.robustness[s];
                    const trust::Evaluation* worst = nullptr;
                    std::size_t i = 0;
                    for (std::size_t j = 0; j < sj.size(); ++j)
                        if (sj[j].m == m && sj[j].s == s && (!worst || sw.levels[sj[j].l] >= sw.levels[sj[i].l])) {
                            worst = &sweep_eval[j];
                            i = j;
                        }
                    if (!worst) continue;
                    const auto pc = trust::percent_changes(base_eval[m], *worst);
                    rows.push_back(corr_row("vulnerability_vs_kge", labels[m],
                                            sw.label() + "@" + level_text(sw.levels[sj[i].l]), "pearson",
                                            [&] { return stats::pearson(kall, pc); }));
                }
                for (const auto& [method, res] : unc[m]) {
                    std::vector<double> sd;
                    for (const auto& p : res.pairs) sd.push_back(p.kge_sd);
                    rows.push_back(corr_row("uncertainty_vs_kge", labels[m], method, "pearson",
                                            [&] { return stats::pearson(kall, sd); }));
                }
                if (A.ablation)
                    for (std::size_t g = 0; g < trust::kGroups; ++g) {
                        const auto pc = trust::percent_changes(subsets[m].at(trust::kAllGroups),
                                                               subsets[m].at(trust::kAllGroups & ~(1u << g)));
                        std::vector<double> drop;
                        for (double x : pc)
                            if (!std::isnan(x)) drop.push_back(-x);
                        rows.push_back(test_row(
                            "ablation_drop", labels[m], std::string(data::to_string(data::kAttributionGroups[g])),
                            [&] { return stats::wilcoxon_signed_rank(drop, stats::Alternative::Greater); }));
                    }
            }
            std::vector<double> ps;
            for (const auto& r : rows)
                if (std::isfinite(r.p)) ps.push_back(r.p);
            const auto adj = ps.empty() ? std::vector<double>{} : stats::bh_fdr(ps);
            std::size_t k = 0;
            for (const auto& r : rows) {
                const double pa = std::isfinite(r.p) ? adj[k++] : kNaN;
                rep["stats"].push_back({{"analysis", r.analysis},
                                        {"model", r.model},
                                        {"subject", r.subject},
                                        {"method", r.method},
                                        {"statistic", num(r.statistic)},
                                        {"n", r.n},
                                        {"p_value", num(r.p)},
                                        {"p_adjusted", num(pa)},
                                        {"stars", std::isfinite(pa) ? stats::significance_stars(pa) : ""}});
            }
            plan.done("stats", "all");
        }
        rep["status"] = "complete";
    } catch (const StageError& e) {
        out.failure = e;
    } catch (const std::exception& e) {
        out.failure = StageError(stage, "-", e.what());
    }
    if (out.failure) {
        rep["status"] = "failed";
        Json pending = Json::array();
        for (const auto& it : rep["plan"])
            if (it["status"] != "done") pending.push_back(it["stage"].get<std::string>() + ":" + it["job"].get<std::string>());
        rep["failure"] = {{"stage", out.failure->stage()},
                          {"job", out.failure->job()},
                          {"message", out.failure->what()},
                          {"not_completed", pending}};
    }
    return out;
}

// ------------------------------------------------------------------ emission

std::string render_json(const Json& report) { return report.dump(1) + "\n"; }

std::map<std::string, std::string> render_csv(const Json& report) {
    std::map<std::string, std::string> files;
    const auto table = [&](const std::string& name) -> const Json& {
        static const Json empty = Json::array();
        return report.contains(name) ? report[name] : empty;
    };
    for (const auto& t : kTables) files[t + ".csv"] = csv_from_records(table(t), table_columns().at(t));

    std::map<std::tuple<std::string, std::string, std::string>, Json> clean_kge;
    std::vector<std::vector<Json>> f1;
    for (const auto& r : table("baseline")) {
        if (r["condition"] != "clean") continue;
        clean_kge[{r["model"], r["basin"], r["variable"]}] = r["kge"];
        f1.push_back({r["model"], r["variable"], r["basin"], r["kge"]});
    }
    files["fig1_kge_boxplot.csv"] = csv_table({"model", "variable", "basin", "kge"}, f1);

    std::vector<std::vector<Json>> f2;
    std::set<std::string> model_names;
    for (const auto& [k, v] : clean_kge) model_names.insert(std::get<0>(k));
    for (const auto& m : model_names)
        for (const auto& s : table("simplicity")) {
            const auto it = clean_kge.find({m, s["basin"], s["variable"]});
            f2.push_back({m, s["basin"], s["variable"], s["simplicity"], s["linearity"],
                          it == clean_kge.end() ? Json(nullptr) : it->second, s["n_obs"]});
        }
    files["fig2_simplicity_scatter.csv"] =
        csv_table({"model", "basin", "variable", "simplicity", "linearity", "kge", "n_obs"}, f2);

    files["fig3_robustness_curves.csv"] =
        csv_from_records(table("robustness"), {"model", "kind", "side", "level", "median_change", "beta"});

    std::vector<std::vector<Json>> f4;
    for (const auto& u : table("uncertainty")) {
        const auto it = clean_kge.find({u["model"], u["basin"], u["variable"]});
        f4.push_back({u["model"], u["method"], u["basin"], u["variable"],
                      it == clean_kge.end() ? Json(nullptr) : it->second, u["kge_sd"]});
    }
    files["fig4_uncertainty.csv"] =
        csv_table({"model", "method", "basin", "variable", "baseline_kge", "kge_sd"}, f4);

    files["fig5_attribution_ribbons.csv"] =
        csv_from_records(table("attribution"), {"model", "method", "variable", "group", "share"});
    return files;
}

namespace {

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write failed for " + p.string());
}

} // namespace

void emit(const Json& report, const fs::path& dir, const std::vector<std::string>& formats) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
    const auto has = [&](const char* f) { return std::find(formats.begin(), formats.end(), f) != formats.end(); };
    if (has("json")) write_file(dir / "report.json", render_json(report));
    if (has("csv"))
        for (const auto& [name, text] : render_csv(report)) write_file(dir / name, text);
    const auto marker = dir / "FAILED";
    if (report.value("status", "") == "failed")
        write_file(marker, report["failure"].dump(1) + "\n");
    else
        fs::remove(marker, ec);
}

Json read_report(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read report " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed report " + path.string() + ": " + e.what());
    }
}

} // namespace wqt::harness
