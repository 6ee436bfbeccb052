#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "peterrec/error.hpp"

namespace peterrec {

struct Series {
    std::string label;
    std::vector<double> values;  // one per epoch, epochs start at 1
};

/// Reads JSONL reports and extracts `metric` per epoch, one series per plan.
/// Series are labelled with the plan's mode (and hash when modes repeat).
inline std::vector<Series> read_report_series(std::istream& in, const std::string& metric, const std::string& name = "report") {
    std::map<std::string, Series> by_plan;
    std::vector<std::string> order;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::kParse, name + ":" + std::to_string(number) + ": " + e.what());
        }
        const std::string plan = j.value("plan", "");
        if (!by_plan.count(plan)) order.push_back(plan);
        auto& s = by_plan[plan];
        if (j.value("record", "") == "summary") {
            s.label = j.value("mode", plan);
            continue;
        }
        require(j.contains(metric), ErrorKind::kParse, name + ":" + std::to_string(number) + ": no field '" + metric + "'");
        s.values.push_back(j.at(metric).get<double>());
    }
    std::map<std::string, int> seen;
    for (const auto& plan : order) seen[by_plan[plan].label]++;
    std::vector<Series> out;
    for (const auto& plan : order) {
        Series s = by_plan[plan];
        if (s.label.empty() || seen[s.label] > 1) s.label += (s.label.empty() ? "" : " ") + plan.substr(0, 8);
        out.push_back(std::move(s));
    }
    return out;
}

/// Metric-vs-epoch line chart.
inline std::string render_svg(const std::vector<Series>& series, const std::string& title, const std::string& y_label) {
    require(!series.empty(), ErrorKind::kEmptyBatch, "plot: nothing to draw");
    constexpr double W = 640, H = 400, left = 60, right = 150, top = 40, bottom = 50;
    std::size_t epochs = 1;
    double lo = 1e300, hi = -1e300;
    for (const auto& s : series) {
        epochs = std::max(epochs, s.values.size());
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (lo > hi) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pw = W - left - right, ph = H - top - bottom;
    auto x = [&](std::size_t e) { return left + (epochs == 1 ? pw / 2 : pw * double(e) / double(epochs - 1)); };
    auto y = [&](double v) { return top + ph * (1.0 - (v - lo) / (hi - lo)); };
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4g", v);
        return std::string(buf);
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = lo + (hi - lo) * i / 4.0;
        svg << "<text x=\"" << left - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
        svg << "<line x1=\"" << left << "\" y1=\"" << y(v) << "\" x2=\"" << left + pw << "\" y2=\"" << y(v) << "\" stroke=\"#ddd\"/>\n";
    }
    const std::size_t step = std::max<std::size_t>(1, epochs / 10);
    for (std::size_t e = 0; e < epochs; e += step) {
        svg << "<text x=\"" << x(e) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << e + 1 << "</text>\n";
    }
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
    svg << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << y_label << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = colors[i % std::size(colors)];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t e = 0; e < series[i].values.size(); ++e) svg << (e ? " " : "") << x(e) << "," << y(series[i].values[e]);
        svg << "\"/>\n";
        const double ly = top + 14 + 18 * double(i);
        svg << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly - 4
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << series[i].label << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

} // namespace peterrec
