#include "wqtrust/dataio.hpp"

#include "wqtrust/error.hpp"
#include "wqtrust/rng.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace wqt::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kYearDays = 365.25;

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table,
             const char* what) {
    for (const auto& [name, value] : table)
        if (name == s) return value;
    throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<std::string_view, FeatureGroup>, 7> kGroupNames{{
    {"M", FeatureGroup::M},
    {"Q", FeatureGroup::Q},
    {"RC", FeatureGroup::RC},
    {"V", FeatureGroup::V},
    {"Time", FeatureGroup::Time},
    {"BA", FeatureGroup::BA},
    {"Coord", FeatureGroup::Coord},
}};

constexpr std::array<std::pair<std::string_view, NormMethod>, 2> kMethodNames{{
    {"minmax", NormMethod::MinMax},
    {"logminmax", NormMethod::LogMinMax},
}};

constexpr std::array<std::pair<std::string_view, LandUse>, 4> kLandUseNames{{
    {"AG", LandUse::AG},
    {"UR", LandUse::UR},
    {"UD", LandUse::UD},
    {"MX", LandUse::MX},
}};

const std::vector<std::pair<std::string, FeatureGroup>>& dynamic_table() {
    static const std::vector<std::pair<std::string, FeatureGroup>> t = {
        {"runoff", FeatureGroup::Q},     {"pr", FeatureGroup::M},
        {"sph", FeatureGroup::M},        {"srad", FeatureGroup::M},
        {"tmmn", FeatureGroup::M},       {"tmmx", FeatureGroup::M},
        {"pet", FeatureGroup::M},        {"etr", FeatureGroup::M},
        {"rc_pH", FeatureGroup::RC},     {"rc_Cond", FeatureGroup::RC},
        {"rc_Ca", FeatureGroup::RC},     {"rc_Mg", FeatureGroup::RC},
        {"rc_K", FeatureGroup::RC},      {"rc_Na", FeatureGroup::RC},
        {"rc_NH4", FeatureGroup::RC},    {"rc_NO3", FeatureGroup::RC},
        {"rc_Cl", FeatureGroup::RC},     {"rc_SO4", FeatureGroup::RC},
        {"distNTN", FeatureGroup::RC},   {"LAI", FeatureGroup::V},
        {"FAPAR", FeatureGroup::V},      {"NPP", FeatureGroup::V},
        {"datenum", FeatureGroup::Time}, {"sinT", FeatureGroup::Time},
        {"cosT", FeatureGroup::Time},
    };
    return t;
}

bool is_coordinate(std::string_view name) { return name == "LAT_GAGE" || name == "LNG_GAGE"; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

/// Empty or unparseable cells read as missing.
double parse_number(std::string_view s) {
    if (s.empty()) return kNaN;
    double v = 0.0;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return kNaN;
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (first) {
            t.header = std::move(cells);
            first = false;
            continue;
        }
        if (cells.size() != t.header.size())
            throw IngestionError(path.string() + ": row with " + std::to_string(cells.size()) +
                                 " cells, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    if (first) throw IngestionError(path.string() + ": empty file");
    return t;
}

std::string format_number(double v) {
    if (std::isnan(v)) return {};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_lines(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

/// Reads a dated per-basin table and returns (dates, values by header column).
std::pair<std::vector<Date>, Matrix> read_dated(const std::filesystem::path& path,
                                               const std::vector<std::string>& columns) {
    const CsvTable t = read_csv(path);
    std::vector<std::size_t> where(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const auto it = std::find(t.header.begin() + 1, t.header.end(), columns[c]);
        if (it == t.header.end())
            throw IngestionError(path.string() + ": missing column '" + columns[c] + "'");
        where[c] = static_cast<std::size_t>(it - t.header.begin());
    }
    std::vector<Date> dates;
    Matrix m(t.rows.size(), columns.size(), kNaN);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        Date d;
        try {
            d = parse_date(t.rows[r][0]);
        } catch (const Error& e) {
            throw IngestionError(path.string() + ": " + e.what());
        }
        if (!dates.empty() && std::chrono::sys_days(d) <= std::chrono::sys_days(dates.back()))
            throw IngestionError(path.string() + ": dates not strictly increasing at " +
                                 t.rows[r][0]);
        dates.push_back(d);
        for (std::size_t c = 0; c < columns.size(); ++c) m(r, c) = parse_number(t.rows[r][where[c]]);
    }
    return {std::move(dates), std::move(m)};
}

std::vector<std::string> names_of(const std::vector<ColumnInfo>& cols) {
    std::vector<std::string> out;
    for (const auto& c : cols) out.push_back(c.name);
    return out;
}

} // namespace

// ------------------------------------------------------------------ schema

std::string_view to_string(FeatureGroup g) {
    for (const auto& [name, value] : kGroupNames)
        if (value == g) return name;
    return "?";
}
FeatureGroup parse_feature_group(std::string_view s) { return parse_enum(s, kGroupNames, "feature group"); }

std::string_view to_string(NormMethod m) {
    for (const auto& [name, value] : kMethodNames)
        if (value == m) return name;
    return "?";
}
NormMethod parse_norm_method(std::string_view s) { return parse_enum(s, kMethodNames, "normalisation method"); }

std::string_view to_string(LandUse l) {
    for (const auto& [name, value] : kLandUseNames)
        if (value == l) return name;
    return "?";
}
LandUse parse_land_use(std::string_view s) { return parse_enum(s, kLandUseNames, "land use"); }

std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()),
                  static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()));
    return buf;
}

Date parse_date(std::string_view iso) {
    int y = 0;
    unsigned m = 0, d = 0;
    const std::string s(iso);
    char tail = 0;
    if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3)
        throw IngestionError("bad date '" + s + "'");
    const Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!date.ok()) throw IngestionError("bad date '" + s + "'");
    return date;
}

long datenum(const Date& d) {
    using namespace std::chrono;
    const sys_days epoch = year{2000} / January / 1;
    return static_cast<long>((sys_days(d) - epoch).count());
}

std::optional<std::size_t> BasinDataset::dynamic_index(std::string_view name) const {
    for (std::size_t i = 0; i < dynamic_columns.size(); ++i)
        if (dynamic_columns[i].name == name) return i;
    return std::nullopt;
}
std::optional<std::size_t> BasinDataset::static_index(std::string_view name) const {
    for (std::size_t i = 0; i < static_columns.size(); ++i)
        if (static_columns[i].name == name) return i;
    return std::nullopt;
}
std::optional<std::size_t> BasinDataset::target_index(std::string_view name) const {
    for (std::size_t i = 0; i < target_columns.size(); ++i)
        if (target_columns[i].name == name) return i;
    return std::nullopt;
}
std::vector<std::size_t> BasinDataset::dynamic_indices(FeatureGroup g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dynamic_columns.size(); ++i)
        if (dynamic_columns[i].group == g) out.push_back(i);
    return out;
}
std::vector<std::size_t> BasinDataset::static_indices(FeatureGroup g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < static_columns.size(); ++i)
        if (static_columns[i].group == g) out.push_back(i);
    return out;
}

void BasinDataset::validate(bool relaxed_land_use) const {
    for (std::size_t i = 1; i < calendar.size(); ++i)
        if (std::chrono::sys_days(calendar[i]) - std::chrono::sys_days(calendar[i - 1]) !=
            std::chrono::days{1})
            throw IngestionError("calendar is not daily at " + format_date(calendar[i]));
    for (const auto& c : dynamic_columns)
        if (c.group == FeatureGroup::BA || c.group == FeatureGroup::Coord)
            throw IngestionError("dynamic column '" + c.name + "' has a static group");
    std::set<std::string> ids;
    for (const auto& b : basins) {
        if (!ids.insert(b.id).second) throw IngestionError("duplicate basin id '" + b.id + "'");
        if (b.dynamics.rows() != n_days() || b.dynamics.cols() != n_dynamic())
            throw IngestionError("basin " + b.id + ": dynamics shape mismatch");
        if (b.targets.rows() != n_days() || b.targets.cols() != n_targets() ||
            b.target_mask.size() != n_days() * n_targets())
            throw IngestionError("basin " + b.id + ": targets shape mismatch");
        if (b.statics.size() != n_static())
            throw IngestionError("basin " + b.id + ": statics size mismatch");
        for (std::size_t i = 0; i < b.target_mask.size(); ++i)
            if ((b.target_mask[i] != 0) == std::isnan(b.targets.values()[i]))
                throw IngestionError("basin " + b.id + ": target mask disagrees with values");
        if (classify_land_use(b.urban_pct, b.ag_pct, relaxed_land_use) != b.land_use)
            throw IngestionError("basin " + b.id + ": land use inconsistent with percentages");
    }
}

NormMethod default_norm_method(std::string_view name, FeatureGroup group, bool is_target) {
    if (is_target)
        return (name == "Temp" || name == "DO" || name == "pH") ? NormMethod::MinMax
                                                                : NormMethod::LogMinMax;
    switch (group) {
    case FeatureGroup::V:
    case FeatureGroup::Time:
    case FeatureGroup::Coord:
        return NormMethod::MinMax;
    default:
        return NormMethod::LogMinMax;
    }
}

std::optional<FeatureGroup> known_dynamic_group(std::string_view name) {
    for (const auto& [n, g] : dynamic_table())
        if (n == name) return g;
    return std::nullopt;
}

const std::vector<std::string>& water_quality_variables() {
    static const std::vector<std::string> v = {"Temp", "Cond", "DO",  "pH",   "CO2", "TN",  "OrgN",
                                               "NO3",  "PO4",  "TP",  "NPOC", "Ca",  "Mg",  "Na",
                                               "K",    "Cl",   "SO4", "SiO2", "NHx", "TSS"};
    return v;
}

const std::vector<std::string>& static_attribute_names() {
    static const std::vector<std::string> v = {
        "HYDRO_DISTURB_INDX", "BAS_COMPACTNESS", "DRAIN_SQKM",        "GEOL_REEDBUSH_DOM",
        "GEOL_REEDBUSH_DOM_PCT", "STREAMS_K_S_KM", "STRAHLER_MAX",    "MAINSTEM_SINUOUSITY",
        "BFI_AVE",            "CONTACT",         "PCT_1ST_ORDER",     "PCT_2ND_ORDER",
        "PCT_3RD_ORDER",      "PCT_4TH_ORDER",   "PCT_5TH_ORDER",     "PCT_6TH_ORDER_OR_MORE",
        "DDENS_2009",         "STOR_NOR_2009",   "NPDES_MAJ_DENS",    "DEVNLCD06",
        "FORESTNLCD06",       "PLANTNLCD06",     "WATERNLCD06",       "WOODYWETNLCD06",
        "EMERGWETNLCD06",     "NITR_APP_KG_SQKM", "PHOS_APP_KG_SQKM", "PESTAPP_KG_SQKM",
        "ECO2_BAS_DOM",       "ECO3_BAS_DOM",    "NUTR_BAS_DOM",      "HLR_BAS_DOM_100M",
        "PNV_BAS_DOM",        "AWCAVE",          "PERMAVE",           "BDAVE",
        "OMAVE",              "WTDEPAVE",        "ROCKDEPAVE",        "CLAYAVE",
        "SILTAVE",            "KFACT_UP",        "RFACT",             "ELEV_MEAN_M_BASIN",
        "SLOPE_PCT",          "ASPECT_DEGREES",  "LAT_GAGE",          "LNG_GAGE",
        "SNOW_PCT_PRECIP"};
    return v;
}

// ------------------------------------------------------------------ land use

LandUse classify_land_use(double urban_pct, double ag_pct, bool relaxed) {
    if (!(urban_pct >= 0.0 && urban_pct <= 100.0 && ag_pct >= 0.0 && ag_pct <= 100.0))
        throw DomainError("land-use percentages must lie in [0, 100]");
    if (ag_pct > 50.0 && urban_pct <= (relaxed ? 7.0 : 5.0)) return LandUse::AG;
    if (urban_pct <= 5.0 && ag_pct <= 25.0) return LandUse::UD;
    if (urban_pct > 25.0 && ag_pct <= 25.0) return LandUse::UR;
    return LandUse::MX;
}

double coverage(const BasinRecord& record, std::size_t target) {
    const std::size_t days = record.targets.rows();
    if (days == 0) return 0.0;
    std::size_t seen = 0;
    for (std::size_t d = 0; d < days; ++d) seen += record.observed(d, target) ? 1 : 0;
    return 100.0 * static_cast<double>(seen) / static_cast<double>(days);
}

// ------------------------------------------------------------------ fill

void hold_weekly(std::span<double> series) {
    double last = kNaN;
    int age = 0;
    for (double& v : series) {
        if (!std::isnan(v)) {
            last = v;
            age = 0;
        } else if (!std::isnan(last) && age < 6) {
            v = last;
            ++age;
        } else {
            last = kNaN;
        }
    }
}

void spline_fill(std::span<double> series) {
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < series.size(); ++i)
        if (!std::isnan(series[i])) {
            xs.push_back(static_cast<double>(i));
            ys.push_back(series[i]);
        }
    const std::size_t n = xs.size();
    if (n < 2) return;
    // Natural spline second derivatives via the tridiagonal system.
    std::vector<double> m(n, 0.0);
    if (n > 2) {
        std::vector<double> a(n), b(n), c(n), r(n);
        for (std::size_t i = 1; i + 1 < n; ++i) {
            const double h0 = xs[i] - xs[i - 1], h1 = xs[i + 1] - xs[i];
            a[i] = h0;
            b[i] = 2.0 * (h0 + h1);
            c[i] = h1;
            r[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        }
        for (std::size_t i = 2; i + 1 < n; ++i) {
            const double w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            r[i] -= w * r[i - 1];
        }
        for (std::size_t i = n - 2; i >= 1; --i) {
            m[i] = (r[i] - (i + 2 < n ? c[i] * m[i + 1] : 0.0)) / b[i];
            if (i == 1) break;
        }
    }
    std::size_t k = 0;
    for (std::size_t i = static_cast<std::size_t>(xs.front()); i <= static_cast<std::size_t>(xs.back()); ++i) {
        if (!std::isnan(series[i])) continue;
        const double x = static_cast<double>(i);
        while (xs[k + 1] < x) ++k;
        const double h = xs[k + 1] - xs[k];
        const double t0 = xs[k + 1] - x, t1 = x - xs[k];
        series[i] = m[k] * t0 * t0 * t0 / (6.0 * h) + m[k + 1] * t1 * t1 * t1 / (6.0 * h) +
                    (ys[k] / h - m[k] * h / 6.0) * t0 + (ys[k + 1] / h - m[k + 1] * h / 6.0) * t1;
    }
}

// ------------------------------------------------------------------ ingestion

BasinDataset ingest_csv(const std::filesystem::path& dir, const IngestOptions& opts) {
    namespace fs = std::filesystem;
    BasinDataset ds;

    const CsvTable statics = read_csv(dir / "statics.csv");
    if (statics.header.empty() || statics.header[0] != "id")
        throw IngestionError("statics.csv: first column must be 'id'");

    std::map<std::string, std::pair<std::string, std::string>> schema; // name -> group, method
    if (fs::exists(dir / "schema.csv")) {
        const CsvTable s = read_csv(dir / "schema.csv");
        for (const auto& row : s.rows) {
            if (row.size() < 4) throw IngestionError("schema.csv: expected column,kind,group,method");
            schema[row[1] + ":" + row[0]] = {row[2], row[3]};
        }
    }
    const auto column_info = [&](const std::string& name, const std::string& kind,
                                 FeatureGroup fallback, bool is_target) {
        ColumnInfo c{name, fallback, NormMethod::LogMinMax};
        const auto it = schema.find(kind + ":" + name);
        if (it != schema.end()) {
            try {
                c.group = parse_feature_group(it->second.first);
                c.method = parse_norm_method(it->second.second);
            } catch (const ConfigError& e) {
                throw IngestionError("schema.csv: " + std::string(e.what()));
            }
            return c;
        }
        c.method = default_norm_method(name, c.group, is_target);
        return c;
    };

    static const std::set<std::string> reserved = {"id", "land_use", "urban_pct", "ag_pct"};
    std::vector<std::size_t> static_cols;
    for (std::size_t c = 1; c < statics.header.size(); ++c) {
        const auto& name = statics.header[c];
        if (reserved.count(name)) continue;
        static_cols.push_back(c);
        ds.static_columns.push_back(
            column_info(name, "static", is_coordinate(name) ? FeatureGroup::Coord : FeatureGroup::BA, false));
    }
    const auto header_pos = [&](std::string_view name) -> std::optional<std::size_t> {
        for (std::size_t c = 0; c < statics.header.size(); ++c)
            if (statics.header[c] == name) return c;
        return std::nullopt;
    };
    const auto lat = header_pos("LAT_GAGE"), lng = header_pos("LNG_GAGE");
    const auto urban = header_pos("urban_pct") ? header_pos("urban_pct") : header_pos("DEVNLCD06");
    const auto ag = header_pos("ag_pct") ? header_pos("ag_pct") : header_pos("PLANTNLCD06");
    if (!lat || !lng) throw IngestionError("statics.csv: LAT_GAGE and LNG_GAGE are required");
    if (!urban || !ag) throw IngestionError("statics.csv: urban and agricultural percentages are required");

    std::map<std::string, std::size_t> static_row;
    for (std::size_t r = 0; r < statics.rows.size(); ++r) static_row[statics.rows[r][0]] = r;

    // Basin ids come from the dynamics directory, sorted for determinism.
    std::vector<std::string> ids;
    if (!fs::is_directory(dir / "dynamics")) throw IngestionError("missing dynamics/ directory");
    for (const auto& entry : fs::directory_iterator(dir / "dynamics"))
        if (entry.path().extension() == ".csv") ids.push_back(entry.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw IngestionError("no basin files in dynamics/");

    const CsvTable first_dyn = read_csv(dir / "dynamics" / (ids[0] + ".csv"));
    for (std::size_t c = 1; c < first_dyn.header.size(); ++c) {
        const auto& name = first_dyn.header[c];
        const auto g = known_dynamic_group(name);
        ColumnInfo info = column_info(name, "dynamic", g.value_or(FeatureGroup::M), false);
        if (!g && !schema.count("dynamic:" + name))
            throw IngestionError("dynamic column '" + name + "' has no group (add it to schema.csv)");
        ds.dynamic_columns.push_back(info);
    }
    const CsvTable first_tgt = read_csv(dir / "targets" / (ids[0] + ".csv"));
    for (std::size_t c = 1; c < first_tgt.header.size(); ++c)
        ds.target_columns.push_back(column_info(first_tgt.header[c], "target", FeatureGroup::BA, true));

    const auto dyn_names = names_of(ds.dynamic_columns);
    const auto tgt_names = names_of(ds.target_columns);
    for (const auto& id : ids) {
        const auto srow = static_row.find(id);
        if (srow == static_row.end()) throw IngestionError("missing static row for basin '" + id + "'");
        const auto& cells = statics.rows[srow->second];

        BasinRecord rec;
        rec.id = id;
        for (std::size_t c : static_cols) rec.statics.push_back(parse_number(cells[c]));
        rec.latitude = parse_number(cells[*lat]);
        rec.longitude = parse_number(cells[*lng]);
        rec.urban_pct = parse_number(cells[*urban]);
        rec.ag_pct = parse_number(cells[*ag]);
        if (std::isnan(rec.urban_pct) || std::isnan(rec.ag_pct))
            throw IngestionError("basin " + id + ": missing land-use percentages");
        try {
            rec.land_use = classify_land_use(rec.urban_pct, rec.ag_pct, opts.relaxed_land_use);
        } catch (const DomainError& e) {
            throw IngestionError("basin " + id + ": " + e.what());
        }

        auto [ddates, dyn] = read_dated(dir / "dynamics" / (id + ".csv"), dyn_names);
        auto [tdates, tgt] = read_dated(dir / "targets" / (id + ".csv"), tgt_names);
        if (ddates != tdates) throw IngestionError("basin " + id + ": dynamics and targets dates differ");
        if (ds.calendar.empty()) {
            ds.calendar = ddates;
        } else if (ddates != ds.calendar) {
            throw IngestionError("basin " + id + ": calendar differs from the first basin");
        }
        for (std::size_t c = 0; c < ds.dynamic_columns.size(); ++c) {
            const auto group = ds.dynamic_columns[c].group;
            if (group != FeatureGroup::RC && group != FeatureGroup::V) continue;
            auto col = dyn.column(c);
            if (group == FeatureGroup::RC) hold_weekly(col);
            else spline_fill(col);
            for (std::size_t r = 0; r < col.size(); ++r) dyn(r, c) = col[r];
        }
        rec.dynamics = std::move(dyn);
        rec.target_mask.resize(tgt.values().size());
        for (std::size_t i = 0; i < tgt.values().size(); ++i)
            rec.target_mask[i] = std::isnan(tgt.values()[i]) ? 0 : 1;
        rec.targets = std::move(tgt);

        if (opts.min_observations > 0) {
            std::size_t best = 0;
            for (std::size_t t = 0; t < ds.n_targets(); ++t) {
                std::size_t n = 0;
                for (std::size_t d = 0; d < rec.targets.rows(); ++d) n += rec.observed(d, t);
                best = std::max(best, n);
            }
            if (best < opts.min_observations) continue;
        }
        ds.basins.push_back(std::move(rec));
    }
    if (ds.basins.empty())
        throw IngestionError("no basin reaches " + std::to_string(opts.min_observations) + " observations");
    ds.validate(opts.relaxed_land_use);
    return ds;
}

void write_csv(const BasinDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "dynamics");
    fs::create_directories(dir / "targets");

    std::ostringstream schema;
    schema << "column,kind,group,method\n";
    for (const auto& c : ds.dynamic_columns)
        schema << c.name << ",dynamic," << to_string(c.group) << ',' << to_string(c.method) << '\n';
    for (const auto& c : ds.static_columns)
        schema << c.name << ",static," << to_string(c.group) << ',' << to_string(c.method) << '\n';
    for (const auto& c : ds.target_columns)
        schema << c.name << ",target," << to_string(c.group) << ',' << to_string(c.method) << '\n';
    write_lines(dir / "schema.csv", schema.str());

    std::ostringstream st;
    st << "id,urban_pct,ag_pct";
    for (const auto& c : ds.static_columns) st << ',' << c.name;
    st << '\n';
    for (const auto& b : ds.basins) {
        st << b.id << ',' << format_number(b.urban_pct) << ',' << format_number(b.ag_pct);
        for (double v : b.statics) st << ',' << format_number(v);
        st << '\n';
    }
    write_lines(dir / "statics.csv", st.str());

    const auto dated = [&](const Matrix& m, const std::vector<ColumnInfo>& cols) {
        std::ostringstream os;
        os << "date";
        for (const auto& c : cols) os << ',' << c.name;
        os << '\n';
        for (std::size_t r = 0; r < m.rows(); ++r) {
            os << format_date(ds.calendar[r]);
            for (std::size_t c = 0; c < m.cols(); ++c) os << ',' << format_number(m(r, c));
            os << '\n';
        }
        return os.str();
    };
    for (const auto& b : ds.basins) {
        write_lines(dir / "dynamics" / (b.id + ".csv"), dated(b.dynamics, ds.dynamic_columns));
        write_lines(dir / "targets" / (b.id + ".csv"), dated(b.targets, ds.target_columns));
    }
}

// ------------------------------------------------------------------ normalisation

double ColumnStats::apply(double x) const {
    if (std::isnan(x)) return kNaN;
    if (constant) return 0.0;
    double v = x;
    if (method == NormMethod::LogMinMax) {
        // Values below the training offset (unseen negatives) are floored.
        v = std::log(std::max(x + offset, 1e-12));
    }
    return (v - lo) / (hi - lo);
}

double ColumnStats::invert(double z) const {
    if (std::isnan(z)) return kNaN;
    const double v = constant ? lo : z * (hi - lo) + lo;
    return method == NormMethod::LogMinMax ? std::exp(v) - offset : v;
}

ColumnStats fit_column(std::string name, NormMethod method, std::span<const double> train_values,
                       bool allow_constant) {
    ColumnStats s;
    s.name = std::move(name);
    s.method = method;
    double raw_min = std::numeric_limits<double>::infinity();
    double raw_max = -raw_min;
    std::size_t n = 0;
    for (double v : train_values) {
        if (std::isnan(v)) continue;
        raw_min = std::min(raw_min, v);
        raw_max = std::max(raw_max, v);
        ++n;
    }
    if (n == 0) throw NormalizationError("column '" + s.name + "' has no training values");
    if (method == NormMethod::LogMinMax) {
        s.offset = std::max(0.0, -raw_min) + 1e-6;
        s.lo = std::log(raw_min + s.offset);
        s.hi = std::log(raw_max + s.offset);
    } else {
        s.lo = raw_min;
        s.hi = raw_max;
    }
    if (!(s.hi > s.lo)) {
        if (!allow_constant) throw NormalizationError("column '" + s.name + "' is constant in training data");
        s.constant = true;
    }
    return s;
}

DatasetNormalizer fit_normalizer(const BasinDataset& ds, std::span<const RowIndex> training_rows,
                                 const NormalizerOptions& opts) {
    if (training_rows.empty()) throw NormalizationError("no training rows");
    std::set<std::uint32_t> train_basins;
    for (const auto& r : training_rows) train_basins.insert(r.basin);

    DatasetNormalizer out;
    std::vector<double> buf;
    buf.reserve(training_rows.size());
    for (std::size_t c = 0; c < ds.n_dynamic(); ++c) {
        buf.clear();
        for (const auto& r : training_rows) buf.push_back(ds.basins[r.basin].dynamics(r.day, c));
        const auto& info = ds.dynamic_columns[c];
        out.dynamic.columns.push_back(fit_column(info.name, info.method, buf, opts.allow_constant_features));
    }
    for (std::size_t t = 0; t < ds.n_targets(); ++t) {
        buf.clear();
        for (const auto& r : training_rows)
            if (ds.basins[r.basin].observed(r.day, t)) buf.push_back(ds.basins[r.basin].targets(r.day, t));
        const auto& info = ds.target_columns[t];
        if (buf.empty()) throw NormalizationError("target '" + info.name + "' has no training observations");
        out.targets.columns.push_back(fit_column(info.name, info.method, buf, false));
    }
    for (std::size_t c = 0; c < ds.n_static(); ++c) {
        buf.clear();
        for (auto b : train_basins) buf.push_back(ds.basins[b].statics[c]);
        const auto& info = ds.static_columns[c];
        out.statics.columns.push_back(fit_column(info.name, info.method, buf, opts.allow_constant_features));
    }
    std::vector<double> lon, lat;
    for (auto b : train_basins) {
        lon.push_back(ds.basins[b].longitude);
        lat.push_back(ds.basins[b].latitude);
    }
    out.coords.columns.push_back(fit_column("longitude", NormMethod::MinMax, lon, true));
    out.coords.columns.push_back(fit_column("latitude", NormMethod::MinMax, lat, true));
    return out;
}

// ------------------------------------------------------------------ splits

Split split(const BasinDataset& ds, const SplitPlan& plan) {
    Split out;
    const auto n_basins = static_cast<std::uint32_t>(ds.basins.size());
    const auto n_days = static_cast<std::uint32_t>(ds.n_days());
    if (plan.kind == SplitKind::TemporalHeldOut) {
        const std::set<int> years(plan.test_years.begin(), plan.test_years.end());
        std::vector<bool> test_day(n_days);
        bool any = false;
        for (std::uint32_t d = 0; d < n_days; ++d) {
            test_day[d] = years.count(static_cast<int>(ds.calendar[d].year())) > 0;
            any = any || test_day[d];
        }
        if (!any) throw SplitError("none of the test years fall inside the calendar");
        for (std::uint32_t b = 0; b < n_basins; ++b)
            for (std::uint32_t d = 0; d < n_days; ++d)
                (test_day[d] ? out.test : out.train).push_back({b, d});
        for (std::size_t b = 0; b < n_basins; ++b) {
            out.train_basins.push_back(b);
            out.test_basins.push_back(b);
        }
        return out;
    }

    if (!(plan.test_fraction > 0.0 && plan.test_fraction < 1.0))
        throw SplitError("test fraction must lie in (0, 1)");
    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t b = 0; b < n_basins; ++b)
        strata[plan.stratify_by_land_use ? static_cast<int>(ds.basins[b].land_use) : 0].push_back(b);
    std::mt19937_64 rng(plan.seed);
    std::vector<bool> is_test(n_basins, false);
    for (auto& [key, members] : strata) {
        if (members.size() < 2)
            throw SplitError("land-use stratum " +
                             std::string(plan.stratify_by_land_use ? to_string(static_cast<LandUse>(key)) : "all") +
                             " has a single basin");
        const auto n_test = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(plan.test_fraction * static_cast<double>(members.size()))));
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t i = 0; i < n_test; ++i) is_test[members[i]] = true;
    }
    for (std::uint32_t b = 0; b < n_basins; ++b) {
        (is_test[b] ? out.test_basins : out.train_basins).push_back(b);
        for (std::uint32_t d = 0; d < n_days; ++d) (is_test[b] ? out.test : out.train).push_back({b, d});
    }
    return out;
}

// ------------------------------------------------------------------ synthesis

std::vector<TargetRecipe> default_recipes(std::size_t n) {
    struct Row {
        const char* name;
        double alpha, bsin, bcos, simplicity, p_obs, level;
    };
    // Weathering solutes dilute with flow, sediment and phosphorus rise with it.
    static const Row rows[] = {
        {"Temp", 0.2, 0.3, -1.0, 0.95, 0.50, 12.0}, {"Cond", -1.0, 0.3, 0.2, 0.75, 0.40, 300.0},
        {"DO", -0.2, -0.3, 1.0, 0.85, 0.35, 9.0},   {"pH", -0.5, 0.4, 0.2, 0.45, 0.35, 7.5},
        {"CO2", 0.4, 0.6, 0.2, 0.35, 0.25, 5.0},    {"TN", 0.8, 0.2, 0.5, 0.50, 0.30, 1.5},
        {"OrgN", 0.7, 0.5, 0.1, 0.30, 0.30, 0.5},   {"NO3", 0.3, 0.2, 0.8, 0.45, 0.25, 1.0},
        {"PO4", 0.5, 0.3, 0.1, 0.22, 0.30, 0.05},   {"TP", 0.9, 0.2, 0.1, 0.30, 0.40, 0.15},
        {"NPOC", 0.8, 0.4, 0.2, 0.38, 0.15, 4.0},   {"Ca", -1.0, 0.2, 0.2, 0.72, 0.25, 40.0},
        {"Mg", -1.0, 0.2, 0.1, 0.70, 0.25, 12.0},   {"Na", -0.9, 0.1, 0.3, 0.62, 0.25, 20.0},
        {"K", -0.6, 0.3, 0.2, 0.55, 0.25, 3.0},     {"Cl", -0.8, 0.1, 0.4, 0.60, 0.30, 25.0},
        {"SO4", -0.9, 0.2, 0.2, 0.60, 0.30, 30.0},  {"SiO2", -0.7, 0.4, 0.3, 0.58, 0.25, 10.0},
        {"NHx", 0.3, 0.2, 0.3, 0.20, 0.30, 0.06},   {"TSS", 1.2, 0.2, 0.1, 0.32, 0.45, 40.0},
    };
    std::vector<TargetRecipe> out;
    for (std::size_t i = 0; i < n; ++i) {
        const Row& r = rows[i % std::size(rows)];
        TargetRecipe t;
        t.name = i < std::size(rows) ? r.name : std::string(r.name) + "_" + std::to_string(i / std::size(rows));
        t.alpha = r.alpha;
        t.beta_sin = r.bsin;
        t.beta_cos = r.bcos;
        t.simplicity = r.simplicity;
        t.p_obs = r.p_obs;
        t.level = r.level;
        // Keep the series positive so log-min-max stays well conditioned.
        t.scale = 0.08 * r.level;
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

/// Unit-variance stationary AR(1) series.
std::vector<double> ar1(std::size_t n, double phi, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    const double innov = std::sqrt(1.0 - phi * phi);
    std::vector<double> out(n);
    double x = z(rng);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = x;
        x = phi * x + innov * z(rng);
    }
    return out;
}

double sample_var(const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

struct StaticRange {
    double lo, hi;
};

StaticRange static_range(std::string_view name) {
    if (name.find("PCT") != std::string_view::npos || name.find("NLCD06") != std::string_view::npos ||
        name == "BFI_AVE")
        return {1.0, 60.0};
    if (name.find("_DOM") != std::string_view::npos) return {1.0, 20.0};
    if (name == "DRAIN_SQKM") return {50.0, 20000.0};
    if (name == "ELEV_MEAN_M_BASIN") return {50.0, 2500.0};
    if (name == "ASPECT_DEGREES") return {1.0, 359.0};
    if (name == "STRAHLER_MAX") return {1.0, 8.0};
    return {0.1, 10.0};
}

std::vector<std::string> compact_dynamic_names() {
    return {"runoff", "pr", "tmmx", "rc_Ca", "rc_NO3", "LAI", "datenum", "sinT", "cosT"};
}

std::vector<std::string> compact_static_names() {
    return {"DRAIN_SQKM", "DEVNLCD06", "PLANTNLCD06", "ELEV_MEAN_M_BASIN", "BFI_AVE", "LAT_GAGE", "LNG_GAGE"};
}

} // namespace

BasinDataset synthesize(const SynthConfig& cfg, std::uint64_t seed) {
    if (cfg.n_basins == 0) throw ConfigError("synthetic corpus needs at least one basin");
    if (cfg.n_years < 1) throw ConfigError("synthetic corpus needs at least one year");
    const auto recipes = cfg.targets.empty() ? default_recipes(20) : cfg.targets;
    for (const auto& r : recipes) {
        if (!(r.p_obs > 0.0 && r.p_obs <= 1.0))
            throw ConfigError("recipe '" + r.name + "': p_obs must lie in (0, 1]");
        if (r.simplicity && !(*r.simplicity >= 0.0 && *r.simplicity <= 1.0))
            throw ConfigError("recipe '" + r.name + "': simplicity must lie in [0, 1]");
        if (!(r.ar_phi > -1.0 && r.ar_phi < 1.0))
            throw ConfigError("recipe '" + r.name + "': ar_phi must lie in (-1, 1)");
    }

    BasinDataset ds;
    using namespace std::chrono;
    const sys_days first = year{cfg.start_year} / January / 1;
    const sys_days last = year{cfg.start_year + cfg.n_years} / January / 1;
    for (sys_days d = first; d < last; d += days{1}) ds.calendar.emplace_back(d);
    const std::size_t T = ds.calendar.size();

    const auto dyn_names = cfg.features == FeatureSet::Full ? [] {
        std::vector<std::string> v;
        for (const auto& [n, g] : dynamic_table()) v.push_back(n);
        return v;
    }() : compact_dynamic_names();
    for (const auto& n : dyn_names) {
        const auto g = *known_dynamic_group(n);
        ds.dynamic_columns.push_back({n, g, default_norm_method(n, g, false)});
    }
    const auto st_names = cfg.features == FeatureSet::Full ? static_attribute_names() : compact_static_names();
    for (const auto& n : st_names) {
        const auto g = is_coordinate(n) ? FeatureGroup::Coord : FeatureGroup::BA;
        ds.static_columns.push_back({n, g, default_norm_method(n, g, false)});
    }
    for (const auto& r : recipes)
        ds.target_columns.push_back({r.name, FeatureGroup::BA, default_norm_method(r.name, FeatureGroup::BA, true)});

    std::vector<double> tday(T), season_sin(T), season_cos(T);
    for (std::size_t i = 0; i < T; ++i) {
        tday[i] = static_cast<double>(datenum(ds.calendar[i]));
        season_sin[i] = std::sin(kTwoPi * tday[i] / kYearDays);
        season_cos[i] = std::cos(kTwoPi * tday[i] / kYearDays);
    }

    static constexpr LandUse kCycle[] = {LandUse::UD, LandUse::AG, LandUse::UR, LandUse::MX};
    for (std::size_t b = 0; b < cfg.n_basins; ++b) {
        std::mt19937_64 rng(mix_seed(seed, b));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const auto U = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };

        BasinRecord rec;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "B%04zu", b);
        rec.id = idbuf;
        rec.longitude = U(-120.0, -70.0);
        rec.latitude = U(30.0, 48.0);
        rec.land_use = kCycle[b % 4];
        switch (rec.land_use) {
        case LandUse::AG: rec.urban_pct = U(0.5, 4.5); rec.ag_pct = U(55.0, 90.0); break;
        case LandUse::UD: rec.urban_pct = U(0.5, 4.5); rec.ag_pct = U(0.5, 24.0); break;
        case LandUse::UR: rec.urban_pct = U(30.0, 60.0); rec.ag_pct = U(0.5, 24.0); break;
        case LandUse::MX: rec.urban_pct = U(8.0, 24.0); rec.ag_pct = U(26.0, 49.0); break;
        }
        for (const auto& c : ds.static_columns) {
            double v;
            if (c.name == "LAT_GAGE") v = rec.latitude;
            else if (c.name == "LNG_GAGE") v = rec.longitude;
            else if (c.name == "DEVNLCD06") v = rec.urban_pct;
            else if (c.name == "PLANTNLCD06") v = rec.ag_pct;
            else {
                const auto r = static_range(c.name);
                v = std::exp(U(std::log(r.lo), std::log(r.hi)));
            }
            if (cfg.constant_group && c.group == *cfg.constant_group) v = 1.0;
            rec.statics.push_back(v);
        }

        // Meteorology: seasonal signal plus persistent noise, kept positive.
        const double wet = U(1.0, 5.0);
        const auto pr = [&] {
            auto noise = ar1(T, 0.6, rng);
            std::vector<double> v(T);
            for (std::size_t i = 0; i < T; ++i) v[i] = wet * std::exp(0.3 * season_sin[i] + 0.5 * noise[i]);
            return v;
        }();
        const double warm = U(45.0, 70.0);
        const auto seasonal = [&](double level, double amp, double noise_sd, double phi) {
            auto noise = ar1(T, phi, rng);
            std::vector<double> v(T);
            for (std::size_t i = 0; i < T; ++i)
                v[i] = std::max(0.05 * level, level * (1.0 - amp * season_cos[i]) + noise_sd * level * noise[i]);
            return v;
        };
        const auto tmmx = seasonal(warm + 15.0, 0.3, 0.04, 0.7);
        std::vector<double> tmmn(T);
        {
            auto noise = ar1(T, 0.7, rng);
            for (std::size_t i = 0; i < T; ++i) tmmn[i] = std::max(1.0, tmmx[i] - 18.0 + 2.0 * noise[i]);
        }
        const auto sph = seasonal(0.008, 0.4, 0.05, 0.6);
        const auto srad = seasonal(200.0, 0.4, 0.1, 0.3);
        const auto pet = seasonal(3.0, 0.5, 0.1, 0.5);
        std::vector<double> etr(T);
        for (std::size_t i = 0; i < T; ++i) etr[i] = 1.3 * pet[i];

        std::vector<double> runoff(T);
        switch (cfg.runoff) {
        case RunoffMode::Reservoir: {
            const double tau = U(5.0, 20.0);
            double storage = wet * tau;
            for (std::size_t i = 0; i < T; ++i) {
                runoff[i] = storage / tau;
                storage += 0.6 * pr[i] - runoff[i];
            }
            break;
        }
        case RunoffMode::Independent: {
            auto noise = ar1(T, 0.9, rng);
            for (std::size_t i = 0; i < T; ++i) runoff[i] = std::exp(0.3 * season_sin[i] + 0.6 * noise[i]);
            break;
        }
        case RunoffMode::DuplicateMeteo:
            runoff = pr;
            break;
        }

        rec.dynamics = Matrix(T, ds.n_dynamic(), kNaN);
        for (std::size_t c = 0; c < ds.n_dynamic(); ++c) {
            const auto& info = ds.dynamic_columns[c];
            const auto& n = info.name;
            std::vector<double> col(T, kNaN);
            if (n == "runoff") col = runoff;
            else if (n == "pr") col = pr;
            else if (n == "sph") col = sph;
            else if (n == "srad") col = srad;
            else if (n == "tmmn") col = tmmn;
            else if (n == "tmmx") col = tmmx;
            else if (n == "pet") col = pet;
            else if (n == "etr") col = etr;
            else if (n == "datenum") col = tday;
            else if (n == "sinT") col = season_sin;
            else if (n == "cosT") col = season_cos;
            else if (n == "distNTN") col.assign(T, U(5.0, 150.0));
            else if (info.group == FeatureGroup::RC) {
                const double level = U(0.05, 2.0);
                for (std::size_t i = 0; i < T; i += 7) col[i] = level * std::exp(0.4 * (unif(rng) - 0.5));
                hold_weekly(col);
            } else if (info.group == FeatureGroup::V) {
                const double level = U(1.0, 4.0);
                for (std::size_t i = 0; i < T; i += 8)
                    col[i] = level * (1.0 - 0.5 * season_cos[i]) * (1.0 + 0.1 * (unif(rng) - 0.5));
                col[T - 1] = level * (1.0 - 0.5 * season_cos[T - 1]);
                spline_fill(col);
            }
            if (cfg.constant_group && info.group == *cfg.constant_group) col.assign(T, 1.0);
            for (std::size_t i = 0; i < T; ++i) rec.dynamics(i, c) = col[i];
        }

        // Targets from basin-standardised runoff and the annual cycle.
        const double q_mean = std::accumulate(runoff.begin(), runoff.end(), 0.0) / static_cast<double>(T);
        const double q_sd = std::sqrt(sample_var(runoff));
        rec.targets = Matrix(T, recipes.size(), kNaN);
        rec.target_mask.assign(T * recipes.size(), 0);
        for (std::size_t t = 0; t < recipes.size(); ++t) {
            const auto& r = recipes[t];
            const double jitter = cfg.basin_jitter;
            const double a = r.alpha * (1.0 + jitter * (2.0 * unif(rng) - 1.0));
            const double bs = r.beta_sin * (1.0 + jitter * (2.0 * unif(rng) - 1.0));
            const double bc = r.beta_cos * (1.0 + jitter * (2.0 * unif(rng) - 1.0));
            std::vector<double> signal(T);
            for (std::size_t i = 0; i < T; ++i) {
                const double q = q_sd > 0.0 ? (runoff[i] - q_mean) / q_sd : 0.0;
                signal[i] = a * q + bs * season_sin[i] + bc * season_cos[i];
            }
            const auto noise = ar1(T, r.ar_phi, rng);
            const double vs = sample_var(signal), ve = sample_var(noise);
            double gamma = r.gamma;
            std::vector<double> part = signal;
            if (r.simplicity) {
                const double s = *r.simplicity;
                if (s <= 0.0) {
                    part.assign(T, 0.0);
                    gamma = 1.0;
                } else {
                    gamma = s >= 1.0 ? 0.0 : std::sqrt(vs * (1.0 - s) / (s * ve));
                }
            }
            std::vector<double> y(T);
            for (std::size_t i = 0; i < T; ++i) y[i] = part[i] + gamma * noise[i];
            const double vp = sample_var(part);
            const double total = vp + gamma * gamma * ve;
            const double truth = total > 0.0 ? vp / total : 0.0;
            rec.true_simplicity.push_back(truth);
            for (std::size_t i = 0; i < T; ++i) {
                if (unif(rng) >= r.p_obs) continue;
                rec.targets(i, t) = r.level + r.scale * y[i];
                rec.target_mask[i * recipes.size() + t] = 1;
            }
        }
        ds.basins.push_back(std::move(rec));
    }
    ds.validate(cfg.relaxed_land_use);
    return ds;
}

} // namespace wqt::data
