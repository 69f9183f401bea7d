#pragma once

// Standalone SVG line charts of metric logs against log10(step).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "icl_lab/errors.hpp"
#include "icl_lab/trainer.hpp"

namespace icl {

struct PlotSeries {
    std::string name;
    std::string color;
    std::vector<std::pair<double, double>> points;  // (step, value)
};

struct PlotPanel {
    std::string title;
    std::string y_label;
    std::vector<PlotSeries> series;
    std::optional<double> y_min, y_max;
    std::optional<double> chance;  // dashed horizontal rule
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Steps are plotted at log10(max(step, 1)) so the step-0 record sits at x = 0.
inline double log_x(double step) { return std::log10(std::max(step, 1.0)); }

}  // namespace detail

// Panels stacked vertically, each with log-x axis, y axis, legend and an
// optional chance rule. Every series becomes exactly one <polyline>.
inline std::string render_svg(const std::vector<PlotPanel>& panels, double width = 720, double panel_height = 300) {
    require(!panels.empty(), "plot needs at least one panel");
    const double left = 70, right = 170, top = 40, bottom = 50;
    const double plot_w = width - left - right;
    const double plot_h = panel_height - top - bottom;
    const double height = panel_height * static_cast<double>(panels.size());
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (std::size_t p = 0; p < panels.size(); ++p) {
        const PlotPanel& panel = panels[p];
        const double oy = panel_height * static_cast<double>(p);
        double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
        double y_lo = x_lo, y_hi = -x_lo;
        for (const auto& s : panel.series) {
            for (const auto& [step, v] : s.points) {
                x_lo = std::min(x_lo, detail::log_x(step));
                x_hi = std::max(x_hi, detail::log_x(step));
                if (std::isfinite(v)) {
                    y_lo = std::min(y_lo, v);
                    y_hi = std::max(y_hi, v);
                }
            }
        }
        if (!std::isfinite(x_lo)) {
            x_lo = 0;
            x_hi = 1;
        }
        if (!std::isfinite(y_lo)) {
            y_lo = 0;
            y_hi = 1;
        }
        x_lo = std::floor(x_lo);
        x_hi = std::max(std::ceil(x_hi), x_lo + 1);
        y_lo = panel.y_min.value_or(y_lo);
        y_hi = panel.y_max.value_or(y_hi);
        if (y_hi <= y_lo) {
            y_hi = y_lo + 1;
        }
        auto sx = [&](double step) { return left + (detail::log_x(step) - x_lo) / (x_hi - x_lo) * plot_w; };
        auto sy = [&](double v) { return oy + top + (1.0 - (v - y_lo) / (y_hi - y_lo)) * plot_h; };

        os << "<g class=\"panel\">\n";
        os << "<text x=\"" << detail::fmt(left + plot_w / 2) << "\" y=\"" << detail::fmt(oy + top - 15)
           << "\" text-anchor=\"middle\" font-size=\"14\">" << detail::escape_xml(panel.title) << "</text>\n";
        os << "<rect x=\"" << left << "\" y=\"" << detail::fmt(oy + top) << "\" width=\"" << detail::fmt(plot_w)
           << "\" height=\"" << detail::fmt(plot_h) << "\" fill=\"none\" stroke=\"black\"/>\n";
        // x ticks at powers of ten
        for (double e = x_lo; e <= x_hi + 1e-9; e += 1.0) {
            const double x = left + (e - x_lo) / (x_hi - x_lo) * plot_w;
            os << "<line x1=\"" << detail::fmt(x) << "\" y1=\"" << detail::fmt(oy + top + plot_h) << "\" x2=\""
               << detail::fmt(x) << "\" y2=\"" << detail::fmt(oy + top + plot_h + 5) << "\" stroke=\"black\"/>\n";
            os << "<text x=\"" << detail::fmt(x) << "\" y=\"" << detail::fmt(oy + top + plot_h + 18)
               << "\" text-anchor=\"middle\">1e" << static_cast<int>(e) << "</text>\n";
        }
        for (int i = 0; i <= 4; ++i) {
            const double v = y_lo + (y_hi - y_lo) * i / 4.0;
            os << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(sy(v) + 4)
               << "\" text-anchor=\"end\">" << format_g6(v) << "</text>\n";
        }
        os << "<text x=\"" << detail::fmt(left + plot_w / 2) << "\" y=\"" << detail::fmt(oy + panel_height - 12)
           << "\" text-anchor=\"middle\">training step (log scale)</text>\n";
        os << "<text x=\"15\" y=\"" << detail::fmt(oy + top + plot_h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 15 "
           << detail::fmt(oy + top + plot_h / 2) << ")\">" << detail::escape_xml(panel.y_label) << "</text>\n";
        if (panel.chance && *panel.chance >= y_lo && *panel.chance <= y_hi) {
            os << "<line class=\"chance\" x1=\"" << left << "\" y1=\"" << detail::fmt(sy(*panel.chance)) << "\" x2=\""
               << detail::fmt(left + plot_w) << "\" y2=\"" << detail::fmt(sy(*panel.chance))
               << "\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n";
        }
        for (std::size_t i = 0; i < panel.series.size(); ++i) {
            const auto& s = panel.series[i];
            os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& [step, v] : s.points) {
                if (std::isfinite(v)) {
                    os << detail::fmt(sx(step)) << ',' << detail::fmt(sy(std::clamp(v, y_lo, y_hi))) << ' ';
                }
            }
            os << "\"/>\n";
            const double ly = oy + top + 10 + 18.0 * static_cast<double>(i);
            os << "<line x1=\"" << detail::fmt(left + plot_w + 12) << "\" y1=\"" << detail::fmt(ly) << "\" x2=\""
               << detail::fmt(left + plot_w + 32) << "\" y2=\"" << detail::fmt(ly) << "\" stroke=\"" << s.color
               << "\" stroke-width=\"2\"/>\n";
            os << "<text x=\"" << detail::fmt(left + plot_w + 36) << "\" y=\"" << detail::fmt(ly + 4) << "\">"
               << detail::escape_xml(s.name) << "</text>\n";
        }
        if (panel.chance) {
            const double ly = oy + top + 10 + 18.0 * static_cast<double>(panel.series.size());
            os << "<line x1=\"" << detail::fmt(left + plot_w + 12) << "\" y1=\"" << detail::fmt(ly) << "\" x2=\""
               << detail::fmt(left + plot_w + 32) << "\" y2=\"" << detail::fmt(ly)
               << "\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n";
            os << "<text x=\"" << detail::fmt(left + plot_w + 36) << "\" y=\"" << detail::fmt(ly + 4) << "\">chance "
               << format_g6(*panel.chance) << "</text>\n";
        }
        os << "</g>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// Accuracy panel (six accuracy-like columns, chance rule) above a loss panel
// (train_loss, train_loss_total). With several runs every series name is
// prefixed by the run label.
inline std::string plot_metrics(const std::vector<std::pair<std::string, std::vector<MetricRecord>>>& runs,
                                double chance = 0.5) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
                                    "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"};
    struct Column {
        const char* name;
        double MetricRecord::*field;
    };
    static const Column acc_cols[] = {{"train_acc", &MetricRecord::train_acc},
                                      {"icl_acc", &MetricRecord::icl_acc},
                                      {"iwl_acc", &MetricRecord::iwl_acc},
                                      {"flipped_icl_acc", &MetricRecord::flipped_icl_acc},
                                      {"flipped_iwl_rate", &MetricRecord::flipped_iwl_rate},
                                      {"iwl_copy_acc", &MetricRecord::iwl_copy_acc}};
    static const Column loss_cols[] = {{"train_loss", &MetricRecord::train_loss},
                                       {"train_loss_total", &MetricRecord::train_loss_total}};
    PlotPanel acc{"Accuracy", "accuracy", {}, 0.0, 1.0, chance};
    PlotPanel loss{"Training loss", "cross-entropy", {}, std::nullopt, std::nullopt, std::nullopt};
    std::size_t color = 0;
    for (const auto& [label, records] : runs) {
        const std::string prefix = runs.size() > 1 ? label + ": " : "";
        auto add = [&](PlotPanel& panel, const Column& col) {
            PlotSeries s{prefix + col.name, palette[color++ % std::size(palette)], {}};
            for (const auto& r : records) {
                s.points.emplace_back(static_cast<double>(r.step), r.*(col.field));
            }
            panel.series.push_back(std::move(s));
        };
        for (const auto& c : acc_cols) {
            add(acc, c);
        }
        for (const auto& c : loss_cols) {
            add(loss, c);
        }
    }
    return render_svg({acc, loss});
}

}  // namespace icl
