#include "wqtrust/dataio.hpp"
#include "wqtrust/error.hpp"
#include "wqtrust/metrics.hpp"

#include "support/tempdir.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

using namespace wqt;
using namespace wqt::data;
using wqt::testing::TempDir;

namespace {

/// Two basins, ten days, runoff/pr dynamics and two targets with a handful
/// of observations written by hand.
void write_fixture(const TempDir& dir, bool duplicate_date = false) {
    dir.write("statics.csv",
              "id,DRAIN_SQKM,DEVNLCD06,PLANTNLCD06,LAT_GAGE,LNG_GAGE\n"
              "A,120,3,10,40.5,-100.25\n"
              "B,900,30,30,35.0,-90.0\n");
    for (const char* id : {"A", "B"}) {
        std::ostringstream dyn;
        dyn << "date,runoff,pr\n";
        for (int d = 1; d <= 10; ++d) {
            char date[16];
            std::snprintf(date, sizeof date, "2001-03-%02d", d);
            dyn << date << ',' << 0.5 * d << ',' << (d % 3 == 0 ? "" : std::to_string(d)) << '\n';
            if (duplicate_date && d == 4 && std::string(id) == "B") dyn << date << ",1,1\n";
        }
        dir.write(std::string("dynamics/") + id + ".csv", dyn.str());
        std::ostringstream tgt;
        tgt << "date,Temp,TSS\n";
        for (int d = 1; d <= 10; ++d) {
            char date[16];
            std::snprintf(date, sizeof date, "2001-03-%02d", d);
            tgt << date << ',' << (d % 2 == 0 ? std::to_string(10 + d) : "") << ','
                << (d == 7 ? "bad" : "") << '\n';
            if (duplicate_date && d == 4 && std::string(id) == "B") tgt << date << ",1,\n";
        }
        dir.write(std::string("targets/") + id + ".csv", tgt.str());
    }
}

} // namespace

TEST(Ingest, TwoBasinFixture) {
    TempDir dir;
    write_fixture(dir);
    const auto ds = ingest_csv(dir.path());
    ASSERT_EQ(ds.basins.size(), 2u);
    EXPECT_EQ(ds.n_days(), 10u);
    EXPECT_EQ(format_date(ds.calendar.front()), "2001-03-01");
    ASSERT_EQ(ds.n_targets(), 2u);
    EXPECT_EQ(ds.target_columns[0].method, NormMethod::MinMax);
    EXPECT_EQ(ds.target_columns[1].method, NormMethod::LogMinMax);
    ASSERT_EQ(ds.n_static(), 5u);
    EXPECT_EQ(ds.static_columns[3].group, FeatureGroup::Coord);
    EXPECT_EQ(ds.dynamic_columns[0].group, FeatureGroup::Q);
    EXPECT_EQ(ds.dynamic_columns[1].group, FeatureGroup::M);

    const auto& a = ds.basins[0];
    EXPECT_EQ(a.id, "A");
    EXPECT_DOUBLE_EQ(a.latitude, 40.5);
    EXPECT_DOUBLE_EQ(a.longitude, -100.25);
    EXPECT_EQ(a.land_use, LandUse::UD);
    EXPECT_EQ(ds.basins[1].land_use, LandUse::MX);
    for (std::size_t d = 0; d < 10; ++d) {
        const bool even = (d + 1) % 2 == 0;
        EXPECT_EQ(a.observed(d, 0), even) << d;
        if (even) EXPECT_DOUBLE_EQ(a.targets(d, 0), 10.0 + static_cast<double>(d + 1));
        // "bad" cell on day 7 is recorded as missing, like empty ones.
        EXPECT_FALSE(a.observed(d, 1));
    }
    EXPECT_TRUE(std::isnan(a.dynamics(2, 1)));
    EXPECT_DOUBLE_EQ(a.dynamics(3, 1), 4.0);
    EXPECT_DOUBLE_EQ(coverage(a, 0), 50.0);
    EXPECT_DOUBLE_EQ(coverage(a, 1), 0.0);
}

TEST(Ingest, DuplicatedDateIsRejected) {
    TempDir dir;
    write_fixture(dir, true);
    EXPECT_THROW(ingest_csv(dir.path()), IngestionError);
}

TEST(Ingest, MissingStaticRowIsRejected) {
    TempDir dir;
    write_fixture(dir);
    dir.write("statics.csv", "id,DRAIN_SQKM,DEVNLCD06,PLANTNLCD06,LAT_GAGE,LNG_GAGE\nA,120,3,10,40.5,-100.25\n");
    EXPECT_THROW(ingest_csv(dir.path()), IngestionError);
}

TEST(Ingest, ScreensBasinsBelowObservationThreshold) {
    TempDir dir;
    write_fixture(dir);
    IngestOptions opts;
    opts.min_observations = 6;
    EXPECT_THROW(ingest_csv(dir.path(), opts), IngestionError); // no basin left
    opts.min_observations = 5;
    EXPECT_EQ(ingest_csv(dir.path(), opts).basins.size(), 2u);
}

TEST(Ingest, WriteThenReadRoundTrips) {
    SynthConfig cfg;
    cfg.n_basins = 3;
    cfg.n_years = 1;
    cfg.features = FeatureSet::Compact;
    cfg.targets = default_recipes(4);
    const auto ds = synthesize(cfg, 11);
    TempDir dir;
    write_csv(ds, dir.path());
    const auto back = ingest_csv(dir.path());
    ASSERT_EQ(back.basins.size(), ds.basins.size());
    EXPECT_EQ(back.calendar, ds.calendar);
    for (std::size_t b = 0; b < ds.basins.size(); ++b) {
        EXPECT_EQ(back.basins[b].dynamics, ds.basins[b].dynamics);
        EXPECT_EQ(back.basins[b].targets, ds.basins[b].targets);
        EXPECT_EQ(back.basins[b].target_mask, ds.basins[b].target_mask);
        EXPECT_EQ(back.basins[b].statics, ds.basins[b].statics);
        EXPECT_EQ(back.basins[b].land_use, ds.basins[b].land_use);
    }
    for (std::size_t c = 0; c < ds.n_dynamic(); ++c) {
        EXPECT_EQ(back.dynamic_columns[c].group, ds.dynamic_columns[c].group);
        EXPECT_EQ(back.dynamic_columns[c].method, ds.dynamic_columns[c].method);
    }
}

TEST(Dates, DatenumIsRelativeToY2K) {
    EXPECT_EQ(datenum(parse_date("2000-01-01")), 0);
    EXPECT_EQ(datenum(parse_date("2000-12-31")), 365);
    EXPECT_EQ(datenum(parse_date("1999-12-31")), -1);
    EXPECT_THROW(parse_date("2001-02-30"), IngestionError);
    EXPECT_THROW(parse_date("20010201"), IngestionError);
}

TEST(Fill, HoldWeeklyCoversSixDays) {
    std::vector<double> v(16, kNaN);
    v[0] = 1.0;
    v[9] = 2.0;
    hold_weekly(v);
    for (int i = 0; i <= 6; ++i) EXPECT_EQ(v[i], 1.0);
    EXPECT_TRUE(std::isnan(v[7]));
    EXPECT_TRUE(std::isnan(v[8]));
    for (int i = 9; i <= 15; ++i) EXPECT_EQ(v[i], 2.0);
}

TEST(Fill, SplineReproducesCubicInterior) {
    // A natural spline through samples of a straight line is that line.
    std::vector<double> v(33, kNaN);
    for (int i = 0; i <= 32; i += 8) v[i] = 3.0 - 0.25 * i;
    v.push_back(kNaN);
    spline_fill(v);
    for (int i = 0; i <= 32; ++i) EXPECT_NEAR(v[i], 3.0 - 0.25 * i, 1e-12);
    EXPECT_TRUE(std::isnan(v.back()));
}

TEST(Fill, SplinePassesThroughKnotsAndIsSmooth) {
    std::vector<double> v(41, kNaN);
    for (int i = 0; i <= 40; i += 8) v[i] = std::sin(i / 6.0);
    const auto knots = v;
    spline_fill(v);
    for (int i = 0; i <= 40; i += 8) EXPECT_EQ(v[i], knots[i]);
    for (int i = 0; i <= 40; ++i) EXPECT_NEAR(v[i], std::sin(i / 6.0), 0.08);
}

TEST(Normalize, MinMaxExample) {
    const std::vector<double> x{0, 5, 10};
    const auto s = fit_column("x", NormMethod::MinMax, x);
    EXPECT_DOUBLE_EQ(s.apply(0), 0.0);
    EXPECT_DOUBLE_EQ(s.apply(5), 0.5);
    EXPECT_DOUBLE_EQ(s.apply(10), 1.0);
}

TEST(Normalize, LogMinMaxExample) {
    const std::vector<double> x{1, 10, 100};
    const auto s = fit_column("x", NormMethod::LogMinMax, x);
    // The 1e-6 log offset shifts the midpoint by O(1e-7).
    EXPECT_NEAR(s.apply(1), 0.0, 1e-12);
    EXPECT_NEAR(s.apply(10), 0.5, 1e-6);
    EXPECT_NEAR(s.apply(100), 1.0, 1e-12);
    const double brute = (std::log(10 + 1e-6) - std::log(1 + 1e-6)) / (std::log(100 + 1e-6) - std::log(1 + 1e-6));
    EXPECT_NEAR(s.apply(10), brute, 1e-15);
}

TEST(Normalize, LogMinMaxHandlesNonPositiveTraining) {
    const std::vector<double> x{-2, 0, 3};
    const auto s = fit_column("x", NormMethod::LogMinMax, x);
    EXPECT_NEAR(s.offset, 2.0 + 1e-6, 1e-15);
    EXPECT_NEAR(s.apply(-2), 0.0, 1e-12);
    EXPECT_NEAR(s.invert(s.apply(0)), 0.0, 1e-9);
}

TEST(Normalize, RoundTripRandomPositive) {
    std::mt19937_64 rng(3);
    std::lognormal_distribution<double> d(0.0, 2.0);
    std::vector<double> x(500);
    for (auto& v : x) v = d(rng);
    for (auto method : {NormMethod::MinMax, NormMethod::LogMinMax}) {
        const auto s = fit_column("x", method, x);
        for (double v : x) EXPECT_NEAR(s.invert(s.apply(v)), v, 1e-9 * std::max(1.0, v));
    }
}

TEST(Normalize, ConstantColumnNamesIt) {
    const std::vector<double> x{4, 4, 4};
    try {
        fit_column("distNTN", NormMethod::MinMax, x);
        FAIL() << "expected NormalizationError";
    } catch (const NormalizationError& e) {
        EXPECT_NE(std::string(e.what()).find("distNTN"), std::string::npos);
    }
    const auto s = fit_column("distNTN", NormMethod::MinMax, x, true);
    EXPECT_TRUE(s.constant);
    EXPECT_EQ(s.apply(4), 0.0);
    EXPECT_EQ(s.invert(0.0), 4.0);
}

TEST(Normalize, StatsComeFromTrainingRowsOnly) {
    SynthConfig cfg;
    cfg.n_basins = 4;
    cfg.n_years = 2;
    cfg.features = FeatureSet::Compact;
    cfg.targets = default_recipes(3);
    const auto ds = synthesize(cfg, 5);
    SplitPlan plan;
    plan.test_years = {1983};
    const auto sp = split(ds, plan);
    const auto train_only = fit_normalizer(ds, sp.train);

    std::vector<RowIndex> all = sp.train;
    all.insert(all.end(), sp.test.begin(), sp.test.end());
    const auto everything = fit_normalizer(ds, all);
    EXPECT_FALSE(train_only == everything);

    // Independent recomputation of one dynamic column and one target.
    const auto runoff = *ds.dynamic_index("runoff");
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& r : sp.train) {
        lo = std::min(lo, ds.basins[r.basin].dynamics(r.day, runoff));
        hi = std::max(hi, ds.basins[r.basin].dynamics(r.day, runoff));
    }
    EXPECT_EQ(train_only.dynamic.columns[runoff].lo, std::log(lo + 1e-6));
    EXPECT_EQ(train_only.dynamic.columns[runoff].hi, std::log(hi + 1e-6));
    double tlo = INFINITY;
    for (const auto& r : sp.train)
        if (ds.basins[r.basin].observed(r.day, 0)) tlo = std::min(tlo, ds.basins[r.basin].targets(r.day, 0));
    EXPECT_EQ(train_only.targets.columns[0].lo, tlo); // Temp is min-max
}

TEST(Split, TemporalHoldsOutWholeYear) {
    SynthConfig cfg;
    cfg.n_basins = 2;
    cfg.start_year = 1982;
    cfg.n_years = 10;
    cfg.features = FeatureSet::Compact;
    cfg.targets = default_recipes(1);
    const auto ds = synthesize(cfg, 1);
    SplitPlan plan;
    plan.test_years = {1985};
    const auto sp = split(ds, plan);
    std::size_t basin0 = 0;
    for (const auto& r : sp.test) {
        EXPECT_EQ(static_cast<int>(ds.calendar[r.day].year()), 1985);
        basin0 += r.basin == 0;
    }
    EXPECT_EQ(basin0, 365u);
    EXPECT_EQ(sp.test.size() + sp.train.size(), 2 * ds.n_days());

    plan.test_years = {1970};
    EXPECT_THROW(split(ds, plan), SplitError);
}

TEST(Split, SpatialStratifiedTakesOnePerClass) {
    SynthConfig cfg;
    cfg.n_basins = 20;
    cfg.n_years = 1;
    cfg.features = FeatureSet::Compact;
    cfg.targets = default_recipes(1);
    const auto ds = synthesize(cfg, 2);
    SplitPlan plan;
    plan.kind = SplitKind::SpatialStratified;
    plan.seed = 99;
    const auto sp = split(ds, plan);
    ASSERT_EQ(sp.test_basins.size(), 4u);
    std::set<LandUse> classes;
    for (auto b : sp.test_basins) classes.insert(ds.basins[b].land_use);
    EXPECT_EQ(classes.size(), 4u);

    const auto again = split(ds, plan);
    EXPECT_EQ(again.test_basins, sp.test_basins);

    std::set<std::size_t> train(sp.train_basins.begin(), sp.train_basins.end());
    for (auto b : sp.test_basins) EXPECT_FALSE(train.count(b));
    std::set<RowIndex> rows(sp.train.begin(), sp.train.end());
    for (const auto& r : sp.test) EXPECT_FALSE(rows.count(r));
}

TEST(Split, SingleBasinStratumFails) {
    SynthConfig cfg;
    cfg.n_basins = 5; // UD, AG, UR, MX, UD
    cfg.n_years = 1;
    cfg.features = FeatureSet::Compact;
    cfg.targets = default_recipes(1);
    const auto ds = synthesize(cfg, 2);
    SplitPlan plan;
    plan.kind = SplitKind::SpatialStratified;
    EXPECT_THROW(split(ds, plan), SplitError);
    plan.stratify_by_land_use = false;
    EXPECT_EQ(split(ds, plan).test_basins.size(), 1u);
}

TEST(LandUse, Examples) {
    EXPECT_EQ(classify_land_use(6, 60, true), LandUse::AG);
    EXPECT_EQ(classify_land_use(6, 60, false), LandUse::MX);
    EXPECT_EQ(classify_land_use(3, 10, false), LandUse::UD);
    EXPECT_EQ(classify_land_use(30, 30, false), LandUse::MX);
    EXPECT_EQ(classify_land_use(30, 20, false), LandUse::UR);
    EXPECT_THROW(classify_land_use(-1, 10, false), DomainError);
    EXPECT_THROW(classify_land_use(10, 101, false), DomainError);
}

TEST(LandUse, TotalOverGrid) {
    // Reference: the rule table evaluated independently per class.
    for (int relaxed = 0; relaxed < 2; ++relaxed)
        for (double u = 0; u <= 100; u += 0.5)
            for (double a = 0; a <= 100; a += 0.5) {
                const bool ag = a > 50 && u <= (relaxed ? 7 : 5);
                const bool ud = !ag && u <= 5 && a <= 25;
                const bool ur = !ag && !ud && u > 25 && a <= 25;
                const LandUse expect = ag ? LandUse::AG : ud ? LandUse::UD : ur ? LandUse::UR : LandUse::MX;
                ASSERT_EQ(classify_land_use(u, a, relaxed), expect) << u << "," << a;
            }
}

TEST(Coverage, Examples) {
    BasinRecord rec;
    rec.targets = Matrix(370, 1, kNaN);
    rec.target_mask.assign(370, 0);
    EXPECT_EQ(coverage(rec, 0), 0.0);
    for (int i = 0; i < 74; ++i) rec.target_mask[i * 5] = 1;
    EXPECT_DOUBLE_EQ(coverage(rec, 0), 20.0);
    rec.target_mask.assign(370, 1);
    EXPECT_EQ(coverage(rec, 0), 100.0);
}

TEST(Synth, SameSeedSameCorpus) {
    SynthConfig cfg;
    cfg.n_basins = 3;
    cfg.n_years = 1;
    const auto a = synthesize(cfg, 42);
    const auto b = synthesize(cfg, 42);
    const auto c = synthesize(cfg, 43);
    ASSERT_EQ(a.basins.size(), b.basins.size());
    for (std::size_t i = 0; i < a.basins.size(); ++i) {
        EXPECT_EQ(a.basins[i].dynamics, b.basins[i].dynamics);
        EXPECT_EQ(a.basins[i].targets, b.basins[i].targets);
        EXPECT_EQ(a.basins[i].statics, b.basins[i].statics);
    }
    EXPECT_FALSE(a.basins[0].dynamics == c.basins[0].dynamics);
}

TEST(Synth, FullSchemaMatchesInputTables) {
    SynthConfig cfg;
    cfg.n_basins = 1;
    cfg.n_years = 1;
    const auto ds = synthesize(cfg, 1);
    EXPECT_EQ(ds.n_dynamic(), 25u);
    EXPECT_EQ(ds.n_static(), 49u);
    EXPECT_EQ(ds.n_targets(), 20u);
    EXPECT_EQ(ds.dynamic_indices(FeatureGroup::M).size(), 7u);
    EXPECT_EQ(ds.dynamic_indices(FeatureGroup::Q).size(), 1u);
    EXPECT_EQ(ds.dynamic_indices(FeatureGroup::RC).size(), 11u);
    EXPECT_EQ(ds.dynamic_indices(FeatureGroup::V).size(), 3u);
    EXPECT_EQ(ds.dynamic_indices(FeatureGroup::Time).size(), 3u);
    EXPECT_EQ(ds.static_indices(FeatureGroup::Coord).size(), 2u);
    for (const auto& b : ds.basins)
        for (double v : b.dynamics.values()) EXPECT_FALSE(std::isnan(v));
}

TEST(Synth, RainfallChemistryIsWeeklyConstant) {
    SynthConfig cfg;
    cfg.n_basins = 1;
    cfg.n_years = 1;
    const auto ds = synthesize(cfg, 8);
    const auto c = *ds.dynamic_index("rc_Ca");
    const auto& dyn = ds.basins[0].dynamics;
    for (std::size_t d = 0; d + 1 < ds.n_days(); ++d)
        if ((d + 1) % 7 != 0) EXPECT_EQ(dyn(d, c), dyn(d + 1, c));
}

TEST(Synth, InvalidObservationProbability) {
    SynthConfig cfg;
    cfg.targets = default_recipes(1);
    cfg.targets[0].p_obs = 0.0;
    EXPECT_THROW(synthesize(cfg, 1), ConfigError);
    cfg.targets[0].p_obs = 1.5;
    EXPECT_THROW(synthesize(cfg, 1), ConfigError);
}

namespace {

SynthConfig single_recipe(TargetRecipe r) {
    SynthConfig cfg;
    cfg.n_basins = 4;
    cfg.n_years = 4;
    cfg.features = FeatureSet::Compact;
    cfg.targets = {std::move(r)};
    return cfg;
}

metrics::SimplicityScore score(const BasinDataset& ds, std::size_t b) {
    const auto runoff = ds.basins[b].dynamics.column(*ds.dynamic_index("runoff"));
    const auto day = ds.basins[b].dynamics.column(*ds.dynamic_index("datenum"));
    return metrics::simplicity(ds.basins[b].targets.column(0), runoff, day);
}

} // namespace

TEST(Synth, NoiselessTargetIsSimple) {
    TargetRecipe r;
    r.name = "Cond";
    r.gamma = 0.0;
    r.p_obs = 1.0;
    const auto ds = synthesize(single_recipe(r), 3);
    for (std::size_t b = 0; b < ds.basins.size(); ++b) {
        EXPECT_GE(score(ds, b).simplicity, 0.99);
        EXPECT_DOUBLE_EQ(ds.basins[b].true_simplicity[0], 1.0);
    }
}

TEST(Synth, PureNoiseTargetIsNotSimple) {
    TargetRecipe r;
    r.name = "TSS";
    r.alpha = r.beta_sin = r.beta_cos = 0.0;
    r.gamma = 1.0;
    r.p_obs = 1.0;
    const auto ds = synthesize(single_recipe(r), 4);
    for (std::size_t b = 0; b < ds.basins.size(); ++b) EXPECT_LE(score(ds, b).simplicity, 0.1);
}

TEST(Synth, GroundTruthMatchesEstimatedSimplicity) {
    for (double s : {0.2, 0.5, 0.8}) {
        TargetRecipe r;
        r.name = "NO3";
        r.simplicity = s;
        r.p_obs = 1.0;
        const auto ds = synthesize(single_recipe(r), 17);
        for (std::size_t b = 0; b < ds.basins.size(); ++b) {
            EXPECT_NEAR(ds.basins[b].true_simplicity[0], s, 1e-12);
            EXPECT_NEAR(score(ds, b).simplicity, s, 0.05) << "basin " << b;
        }
    }
}

TEST(Synth, ConstantGroupOption) {
    SynthConfig cfg;
    cfg.n_basins = 2;
    cfg.n_years = 1;
    cfg.constant_group = FeatureGroup::RC;
    const auto ds = synthesize(cfg, 1);
    for (auto c : ds.dynamic_indices(FeatureGroup::RC))
        for (const auto& b : ds.basins)
            for (std::size_t d = 0; d < ds.n_days(); ++d) ASSERT_EQ(b.dynamics(d, c), 1.0);
}

TEST(Synth, DuplicateRunoffCopiesPrecipitation) {
    SynthConfig cfg;
    cfg.n_basins = 1;
    cfg.n_years = 1;
    cfg.runoff = RunoffMode::DuplicateMeteo;
    const auto ds = synthesize(cfg, 1);
    EXPECT_EQ(ds.basins[0].dynamics.column(*ds.dynamic_index("runoff")),
              ds.basins[0].dynamics.column(*ds.dynamic_index("pr")));
}
