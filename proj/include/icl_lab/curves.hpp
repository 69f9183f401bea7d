#pragma once

// Curve analytics for logged accuracy series: peak height, half-rise onset,
// decay slope per decade of training steps, and a transience verdict.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icl_lab/errors.hpp"

namespace icl {

struct CurvePoint {
    long long step = 0;
    double value = 0.0;
};

using Series = std::vector<CurvePoint>;

// End of the decay-slope window: the last point, or the first post-peak point
// whose smoothed value is back within the emergence margin of chance.
enum class DecayWindowEnd { EndOfSeries, ReturnToChance };

struct CurveOptions {
    double halflife = 5.0;           // in eval points
    double emergence_margin = 0.10;  // delta above chance for a peak to count
    double transience_drop = 0.10;   // tau below peak for a transient verdict
    DecayWindowEnd window_end = DecayWindowEnd::EndOfSeries;
};

struct CurveSummary {
    double peak_height = 0.0;
    long long peak_step = 0;
    std::optional<long long> onset_step;
    double decay_slope = 0.0;  // accuracy per decade of steps
    double final_height = 0.0;
    bool transient = false;
    double chance = 0.0;
    CurveOptions options;
};

// Exponential moving average over successive points; y0 = x0 and an impulse
// decays to one half after `halflife` points.
inline Series smooth(const Series& series, double halflife) {
    require(halflife > 0.0 && std::isfinite(halflife), "smoothing halflife must be positive");
    Series out = series;
    if (series.empty()) {
        return out;
    }
    const double keep = std::pow(0.5, 1.0 / halflife);
    for (std::size_t i = 1; i < series.size(); ++i) {
        out[i].value = keep * out[i - 1].value + (1.0 - keep) * series[i].value;
    }
    return out;
}

// Least-squares slope of value against log10(step) over points with step > 0.
inline double log_step_slope(const Series& points) {
    double n = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const auto& p : points) {
        if (p.step <= 0) {
            continue;
        }
        const double x = std::log10(static_cast<double>(p.step));
        n += 1.0;
        sx += x;
        sy += p.value;
        sxx += x * x;
        sxy += x * p.value;
    }
    if (n < 2.0) {
        return 0.0;
    }
    const double denom = n * sxx - sx * sx;
    if (denom <= 0.0) {
        return 0.0;
    }
    return (n * sxy - sx * sy) / denom;
}

inline CurveSummary summarize(const Series& series, double chance, const CurveOptions& opts = {}) {
    require(series.size() >= 3, "curve summary needs at least 3 evaluation points");
    require(opts.emergence_margin >= 0.0 && opts.transience_drop >= 0.0, "curve thresholds must be >= 0");
    const Series s = smooth(series, opts.halflife);

    CurveSummary out;
    out.chance = chance;
    out.options = opts;
    std::size_t peak = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i].value > s[peak].value) {
            peak = i;
        }
    }
    out.peak_step = s[peak].step;
    out.peak_height = std::max(s[peak].value, chance);
    out.final_height = s.back().value;

    if (out.peak_height >= chance + opts.emergence_margin) {
        const double half_rise = chance + 0.5 * (out.peak_height - chance);
        for (const auto& p : s) {
            if (p.value >= half_rise) {
                out.onset_step = p.step;
                break;
            }
        }
    }
    std::size_t end = s.size();
    if (opts.window_end == DecayWindowEnd::ReturnToChance) {
        for (std::size_t i = peak + 1; i < s.size(); ++i) {
            if (s[i].value <= chance + opts.emergence_margin) {
                end = i + 1;
                break;
            }
        }
    }
    out.decay_slope = log_step_slope(Series(s.begin() + static_cast<std::ptrdiff_t>(peak),
                                            s.begin() + static_cast<std::ptrdiff_t>(end)));
    out.transient = out.onset_step.has_value() && out.final_height <= out.peak_height - opts.transience_drop;
    return out;
}

// ---------------------------------------------------------------------------
// Cross-run comparison

enum class CompareKey { PeakHeight, OnsetStep, DecaySlope };

struct ComparisonRow {
    std::string label;
    CurveSummary summary;
    // Differences against the first (reference) summary passed to compare().
    double delta_peak = 0.0;
    std::optional<long long> delta_onset;
    double delta_slope = 0.0;
    std::vector<std::string> verdicts;
};

struct ComparisonReport {
    CompareKey key = CompareKey::PeakHeight;
    std::vector<ComparisonRow> rows;  // sorted by key

    [[nodiscard]] std::string table() const {
        std::ostringstream os;
        os << "label\tpeak_height\tonset_step\tdecay_slope\tdelta_peak\tdelta_onset\tdelta_slope\tverdict\n";
        for (const auto& r : rows) {
            os << r.label << '\t' << r.summary.peak_height << '\t'
               << (r.summary.onset_step ? std::to_string(*r.summary.onset_step) : std::string("absent")) << '\t'
               << r.summary.decay_slope << '\t' << r.delta_peak << '\t'
               << (r.delta_onset ? std::to_string(*r.delta_onset) : std::string("n/a")) << '\t' << r.delta_slope
               << '\t';
            for (std::size_t i = 0; i < r.verdicts.size(); ++i) {
                os << (i ? ", " : "") << r.verdicts[i];
            }
            os << '\n';
        }
        return os.str();
    }
};

// Orders runs by `key` (peak: highest first; onset: earliest first, absent
// onsets last; slope: gentlest first) and reports deltas against the first
// summary in `summaries`.
inline ComparisonReport compare(const std::vector<CurveSummary>& summaries, CompareKey key,
                                std::vector<std::string> labels = {}) {
    require(!summaries.empty(), "compare needs at least one summary");
    if (labels.empty()) {
        for (std::size_t i = 0; i < summaries.size(); ++i) {
            labels.push_back("run" + std::to_string(i));
        }
    }
    require(labels.size() == summaries.size(), "one label per summary required");
    const CurveSummary& ref = summaries.front();
    ComparisonReport report;
    report.key = key;
    constexpr double kTie = 1e-12;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        ComparisonRow row;
        row.label = labels[i];
        row.summary = summaries[i];
        row.delta_peak = summaries[i].peak_height - ref.peak_height;
        row.delta_slope = summaries[i].decay_slope - ref.decay_slope;
        if (summaries[i].onset_step && ref.onset_step) {
            row.delta_onset = *summaries[i].onset_step - *ref.onset_step;
        }
        if (i > 0) {
            if (row.delta_peak > kTie) {
                row.verdicts.emplace_back("higher peak");
            } else if (row.delta_peak < -kTie) {
                row.verdicts.emplace_back("lower peak");
            }
            if (row.delta_slope > kTie) {
                row.verdicts.emplace_back("gentler decay");
            } else if (row.delta_slope < -kTie) {
                row.verdicts.emplace_back("steeper decay");
            }
            if (row.delta_onset) {
                if (*row.delta_onset < 0) {
                    row.verdicts.emplace_back("earlier onset");
                } else if (*row.delta_onset > 0) {
                    row.verdicts.emplace_back("later onset");
                }
            } else if (summaries[i].onset_step.has_value() != ref.onset_step.has_value()) {
                row.verdicts.emplace_back(summaries[i].onset_step ? "emerges (reference does not)"
                                                                  : "no emergence");
            }
        }
        report.rows.push_back(std::move(row));
    }
    auto less = [key](const ComparisonRow& a, const ComparisonRow& b) {
        switch (key) {
            case CompareKey::PeakHeight: return a.summary.peak_height > b.summary.peak_height;
            case CompareKey::DecaySlope: return a.summary.decay_slope > b.summary.decay_slope;
            case CompareKey::OnsetStep:
                if (a.summary.onset_step.has_value() != b.summary.onset_step.has_value()) {
                    return a.summary.onset_step.has_value();
                }
                return a.summary.onset_step.value_or(0) < b.summary.onset_step.value_or(0);
        }
        return false;
    };
    std::stable_sort(report.rows.begin(), report.rows.end(), less);
    return report;
}

// ---------------------------------------------------------------------------
// Seed aggregation and JSON-lines output

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation (0 for a single run)
    int count = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd out;
    out.count = static_cast<int>(xs.size());
    if (xs.empty()) {
        return out;
    }
    for (double x : xs) {
        out.mean += x;
    }
    out.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) {
            ss += (x - out.mean) * (x - out.mean);
        }
        out.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return out;
}

struct SummaryAggregate {
    MeanStd peak_height, peak_step, onset_step, decay_slope, final_height, transient_fraction;
};

inline SummaryAggregate aggregate(const std::vector<CurveSummary>& runs) {
    require(!runs.empty(), "aggregate needs at least one summary");
    std::vector<double> peak, peak_step, onset, slope, final_h, transient;
    for (const auto& r : runs) {
        peak.push_back(r.peak_height);
        peak_step.push_back(static_cast<double>(r.peak_step));
        if (r.onset_step) {
            onset.push_back(static_cast<double>(*r.onset_step));
        }
        slope.push_back(r.decay_slope);
        final_h.push_back(r.final_height);
        transient.push_back(r.transient ? 1.0 : 0.0);
    }
    return {mean_std(peak), mean_std(peak_step), mean_std(onset), mean_std(slope), mean_std(final_h),
            mean_std(transient)};
}

inline nlohmann::json to_json(const CurveSummary& s) {
    nlohmann::json j;
    j["peak_height"] = s.peak_height;
    j["peak_step"] = s.peak_step;
    j["onset_step"] = s.onset_step ? nlohmann::json(*s.onset_step) : nlohmann::json(nullptr);
    j["decay_slope"] = s.decay_slope;
    j["final_height"] = s.final_height;
    j["transient"] = s.transient;
    j["chance"] = s.chance;
    j["thresholds"] = {{"halflife", s.options.halflife},
                       {"emergence_margin", s.options.emergence_margin},
                       {"transience_drop", s.options.transience_drop},
                       {"decay_window_end", s.options.window_end == DecayWindowEnd::EndOfSeries ? "end-of-series"
                                                                                                : "return-to-chance"}};
    return j;
}

inline nlohmann::json to_json(const MeanStd& m) {
    return {{"mean", m.mean}, {"std", m.stddev}, {"n", m.count}};
}

inline nlohmann::json to_json(const SummaryAggregate& a) {
    return {{"peak_height", to_json(a.peak_height)},   {"peak_step", to_json(a.peak_step)},
            {"onset_step", to_json(a.onset_step)},     {"decay_slope", to_json(a.decay_slope)},
            {"final_height", to_json(a.final_height)}, {"transient", to_json(a.transient_fraction)}};
}

}  // namespace icl
