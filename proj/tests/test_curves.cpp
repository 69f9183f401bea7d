#include <gtest/gtest.h>

#include <cmath>

#include "icl_lab/curves.hpp"

using namespace icl;

namespace {

// Chance 0.5 until 1e3, linear in log10(step) up to 1.0 at 1e4, then linear
// down to 0.6 at 1e6.
double triangle_value(long long step) {
    const double x = std::log10(static_cast<double>(std::max(step, 1LL)));
    if (x <= 3.0) {
        return 0.5;
    }
    if (x <= 4.0) {
        return 0.5 + 0.5 * (x - 3.0);
    }
    return 1.0 - 0.2 * (x - 4.0);
}

// Sampled at `per_decade` log-spaced points per decade from 10.
Series triangle(int per_decade = 10) {
    Series s;
    for (int i = 0; i <= 5 * per_decade; ++i) {
        const auto step = std::llround(std::pow(10.0, 1.0 + static_cast<double>(i) / per_decade));
        s.push_back({step, triangle_value(step)});
    }
    return s;
}

// Sampled every `every` steps, like a training log.
Series triangle_linear(long long every) {
    Series s;
    for (long long step = 0; step <= 1000000; step += every) {
        s.push_back({step, triangle_value(step)});
    }
    return s;
}

CurveOptions no_smoothing() {
    CurveOptions o;
    o.halflife = 1e-9;
    return o;
}

}  // namespace

TEST(Smooth, ConstantImpulseAndRange) {
    Series flat;
    for (int i = 0; i < 20; ++i) {
        flat.push_back({i * 10LL, 0.37});
    }
    for (const auto& p : smooth(flat, 3.0)) {
        EXPECT_NEAR(p.value, 0.37, 1e-15);
    }
    Series impulse(30, CurvePoint{});
    for (int i = 0; i < 30; ++i) {
        impulse[static_cast<std::size_t>(i)].step = i;
    }
    impulse[0].value = 1.0;
    const auto out = smooth(impulse, 4.0);
    EXPECT_EQ(out[0].value, 1.0);
    EXPECT_NEAR(out[4].value, 0.5, 1e-12);
    EXPECT_NEAR(out[8].value, 0.25, 1e-12);

    Series wiggly;
    for (int i = 0; i < 50; ++i) {
        wiggly.push_back({i, std::sin(i * 0.7) * 0.3 + 0.5});
    }
    for (const auto& p : smooth(wiggly, 2.5)) {
        EXPECT_GE(p.value, 0.2 - 1e-12);
        EXPECT_LE(p.value, 0.8 + 1e-12);
    }
    EXPECT_THROW(smooth(flat, 0.0), ConfigError);
    EXPECT_THROW(smooth(flat, -1.0), ConfigError);
}

TEST(Summarize, FlatChance) {
    Series s;
    for (int i = 0; i < 10; ++i) {
        s.push_back({i * 100LL, 0.5});
    }
    const auto sum = summarize(s, 0.5);
    EXPECT_EQ(sum.peak_height, 0.5);
    EXPECT_FALSE(sum.onset_step.has_value());
    EXPECT_NEAR(sum.decay_slope, 0.0, 1e-15);
    EXPECT_FALSE(sum.transient);
    EXPECT_THROW(summarize(Series{{0, 0.5}, {1, 0.5}}, 0.5), ConfigError);
}

TEST(Summarize, TriangleClosedForm) {
    const auto sum = summarize(triangle(), 0.5, no_smoothing());
    EXPECT_NEAR(sum.peak_height, 1.0, 1e-12);
    EXPECT_EQ(sum.peak_step, 10000);
    EXPECT_NEAR(sum.decay_slope, -0.2, 1e-9);
    EXPECT_NEAR(sum.final_height, 0.6, 1e-12);
    ASSERT_TRUE(sum.onset_step.has_value());
    // Half rise (0.75) sits at log10(step) = 3.5; the sample there (3162) falls
    // just short after rounding, so the onset is the next sample.
    EXPECT_LT(triangle_value(3162), 0.75);
    EXPECT_EQ(*sum.onset_step, std::llround(std::pow(10.0, 3.6)));
    EXPECT_TRUE(sum.transient);
}

TEST(Summarize, TriangleWithDefaultSmoothing) {
    // On an evenly spaced log the EMA lag (5 points) is small on a log axis,
    // so the closed-form values hold approximately.
    const auto sum = summarize(triangle_linear(100), 0.5);
    EXPECT_NEAR(sum.decay_slope, -0.2, 0.01);
    EXPECT_NEAR(sum.peak_height, 1.0, 0.05);
    EXPECT_NEAR(std::log10(static_cast<double>(sum.peak_step)), 4.0, 0.15);
    EXPECT_NEAR(sum.final_height, 0.6, 0.01);
    EXPECT_TRUE(sum.transient);
    // Log-spaced samples make the same EMA lag span whole decades.
    EXPECT_GT(summarize(triangle(), 0.5).decay_slope, -0.2);
}

TEST(Summarize, ReturnToChanceWindow) {
    // Falls back to chance at 1e5 and stays there: the end-of-series fit is
    // diluted by the flat tail, the return-to-chance fit is not.
    Series s;
    for (int i = 0; i <= 50; ++i) {
        const double x = 1.0 + i / 10.0;
        double v = 0.5;
        if (x > 3.0 && x <= 4.0) {
            v = 0.5 + 0.5 * (x - 3.0);
        } else if (x > 4.0 && x <= 5.0) {
            v = 1.0 - 0.5 * (x - 4.0);
        }
        s.push_back({std::llround(std::pow(10.0, x)), v});
    }
    CurveOptions end = no_smoothing();
    CurveOptions chance = no_smoothing();
    chance.window_end = DecayWindowEnd::ReturnToChance;
    const double slope_end = summarize(s, 0.5, end).decay_slope;
    const double slope_chance = summarize(s, 0.5, chance).decay_slope;
    EXPECT_LT(slope_chance, slope_end);
    EXPECT_NEAR(slope_chance, -0.5, 0.06);
}

TEST(Summarize, MonotoneRiseIsNotTransient) {
    Series s;
    for (int i = 1; i <= 40; ++i) {
        s.push_back({i * 250LL, 0.5 + 0.45 * (1.0 - std::exp(-i / 8.0))});
    }
    const auto sum = summarize(s, 0.5);
    EXPECT_GE(sum.decay_slope, 0.0);
    EXPECT_FALSE(sum.transient);
    EXPECT_EQ(sum.peak_step, 10000);
}

TEST(Summarize, NonIncreasingTailHasNonPositiveSlope) {
    for (int seed = 0; seed < 20; ++seed) {
        Series s{{0, 0.5}, {10, 0.7}, {100, 0.95}};
        double v = 0.95;
        for (int i = 1; i <= 30; ++i) {
            v -= 0.01 * ((seed * 7 + i * 3) % 5);
            s.push_back({100LL + i * 1000LL, v});
        }
        EXPECT_LE(summarize(s, 0.5, no_smoothing()).decay_slope, 1e-12) << seed;
        EXPECT_LE(summarize(s, 0.5).decay_slope, 1e-12) << seed;
    }
}

TEST(Summarize, TransientFlagMonotoneInTau) {
    const auto s = triangle();
    bool was_true = true;
    for (double tau = 0.0; tau <= 0.6; tau += 0.05) {
        CurveOptions o;
        o.transience_drop = tau;
        const bool t = summarize(s, 0.5, o).transient;
        EXPECT_FALSE(t && !was_true) << tau;
        was_true = t;
    }
    EXPECT_FALSE(was_true);
}

TEST(Summarize, ChancePrefixPaddingIsBounded) {
    const auto base = triangle();
    Series padded;
    for (long long st = 1; st < 10; ++st) {
        padded.push_back({st, 0.5});
    }
    padded.insert(padded.end(), base.begin(), base.end());
    const auto a = summarize(base, 0.5);
    const auto b = summarize(padded, 0.5);
    // The series already starts at chance, so the EMA state entering the
    // original points is identical.
    EXPECT_EQ(a.peak_step, b.peak_step);
    EXPECT_NEAR(a.peak_height, b.peak_height, 1e-12);
    EXPECT_NEAR(a.decay_slope, b.decay_slope, 1e-12);
    EXPECT_EQ(a.onset_step, b.onset_step);
}

TEST(Summarize, PeakClampedToChance) {
    Series s{{0, 0.2}, {10, 0.3}, {100, 0.25}};
    const auto sum = summarize(s, 0.5, no_smoothing());
    EXPECT_EQ(sum.peak_height, 0.5);
    EXPECT_FALSE(sum.onset_step.has_value());
    EXPECT_FALSE(sum.transient);
}

TEST(Compare, DeltasOrderingAndVerdicts) {
    const auto base = summarize(triangle(), 0.5, no_smoothing());
    auto report = compare({base, base}, CompareKey::PeakHeight, {"a", "b"});
    ASSERT_EQ(report.rows.size(), 2u);
    for (const auto& r : report.rows) {
        EXPECT_EQ(r.delta_peak, 0.0);
        EXPECT_EQ(r.delta_slope, 0.0);
        EXPECT_EQ(r.delta_onset, 0);
        EXPECT_TRUE(r.verdicts.empty());
    }

    CurveSummary steep = base, gentle = base;
    steep.decay_slope = -0.2;
    gentle.decay_slope = -0.05;
    report = compare({steep, gentle}, CompareKey::DecaySlope, {"steep", "gentle"});
    EXPECT_EQ(report.rows[0].label, "gentle");
    EXPECT_EQ(report.rows[0].verdicts, std::vector<std::string>{"gentler decay"});
    EXPECT_NEAR(report.rows[0].delta_slope, 0.15, 1e-12);

    CurveSummary none = base;
    none.onset_step.reset();
    CurveSummary early = base;
    early.onset_step = 10;
    report = compare({base, none, early}, CompareKey::OnsetStep, {"base", "none", "early"});
    EXPECT_EQ(report.rows[0].label, "early");
    EXPECT_EQ(report.rows[1].label, "base");
    EXPECT_EQ(report.rows[2].label, "none");
    EXPECT_NE(std::find(report.rows[2].verdicts.begin(), report.rows[2].verdicts.end(), "no emergence"),
              report.rows[2].verdicts.end());
    const std::string table = report.table();
    EXPECT_NE(table.find("absent"), std::string::npos);
    EXPECT_NE(table.find("earlier onset"), std::string::npos);
    EXPECT_THROW(compare({}, CompareKey::PeakHeight), ConfigError);
}

TEST(Aggregate, MeanAndSampleStd) {
    CurveSummary a, b;
    a.peak_height = 0.8;
    b.peak_height = 0.9;
    a.decay_slope = -0.1;
    b.decay_slope = -0.3;
    a.onset_step = 1000;
    a.transient = true;
    const auto agg = aggregate({a, b});
    EXPECT_NEAR(agg.peak_height.mean, 0.85, 1e-12);
    EXPECT_NEAR(agg.peak_height.stddev, std::sqrt(0.005), 1e-12);
    EXPECT_NEAR(agg.decay_slope.mean, -0.2, 1e-12);
    EXPECT_EQ(agg.onset_step.count, 1);
    EXPECT_EQ(agg.transient_fraction.mean, 0.5);
    const auto j = to_json(agg);
    EXPECT_EQ(j["peak_height"]["n"], 2);
    EXPECT_THROW(aggregate({}), ConfigError);
}

TEST(Json, SummaryRecordCarriesThresholds) {
    const auto sum = summarize(triangle(), 0.5);
    const auto j = to_json(sum);
    for (const char* key : {"peak_height", "peak_step", "onset_step", "decay_slope", "final_height", "transient", "chance"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["thresholds"]["halflife"], 5.0);
    EXPECT_EQ(j["thresholds"]["emergence_margin"], 0.10);
    EXPECT_EQ(j["thresholds"]["transience_drop"], 0.10);
    EXPECT_EQ(j["thresholds"]["decay_window_end"], "end-of-series");
    CurveSummary flat;
    EXPECT_TRUE(to_json(flat)["onset_step"].is_null());
}
