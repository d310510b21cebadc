#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "af/csv.hpp"

namespace af {

// Minimal self-contained SVG charts. Every plot is produced from a CSV file
// alone, so plots can be regenerated offline from run artifacts.
namespace svg_detail {

constexpr double kW = 640, kH = 440;
constexpr double kLeft = 64, kRight = 608, kTop = 36, kBottom = 396;

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct Series {
    std::string name;
    std::string color;
    std::vector<double> x, y;
};

inline void finite_minmax(const std::vector<double>& v, double& lo, double& hi) {
    for (double q : v) {
        if (!std::isfinite(q)) continue;
        lo = std::min(lo, q);
        hi = std::max(hi, q);
    }
}

inline void render_chart(const std::filesystem::path& path, const std::string& title,
                         const std::vector<Series>& series, bool bars = false) {
    double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
    for (const auto& s : series) {
        finite_minmax(s.x, xlo, xhi);
        finite_minmax(s.y, ylo, yhi);
    }
    if (!std::isfinite(xlo) || xlo == xhi) {
        xlo -= 0.5;
        xhi += 0.5;
    }
    if (!std::isfinite(ylo) || ylo == yhi) {
        ylo -= 0.5;
        yhi += 0.5;
    }
    if (bars) ylo = std::min(ylo, 0.0);
    const double xpad = 0.03 * (xhi - xlo), ypad = 0.06 * (yhi - ylo);
    xlo -= xpad;
    xhi += xpad;
    ylo -= ypad;
    yhi += ypad;

    auto X = [&](double v) { return kLeft + (v - xlo) / (xhi - xlo) * (kRight - kLeft); };
    auto Y = [&](double v) { return kBottom - (v - ylo) / (yhi - ylo) * (kBottom - kTop); };

    std::ofstream os(path);
    if (!os) throw std::runtime_error("svg: cannot write " + path.string());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"14\">"
       << title << "</text>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kRight << "\" y2=\"" << kBottom
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kBottom
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = xlo + (xhi - xlo) * i / 4.0;
        const double fy = ylo + (yhi - ylo) * i / 4.0;
        os << "<text x=\"" << num(X(fx)) << "\" y=\"" << kBottom + 16
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << num(fx) << "</text>\n";
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(Y(fy) + 3)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << num(fy) << "</text>\n";
    }
    double legend_y = kTop + 6;
    for (const auto& s : series) {
        if (bars) {
            // x holds bin centers; draw thin vertical bars
            const double bw = s.x.size() > 1 ? (X(s.x[1]) - X(s.x[0])) * 0.42 : 4.0;
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if (!std::isfinite(s.y[i])) continue;
                os << "<rect x=\"" << num(X(s.x[i]) - bw / 2) << "\" y=\"" << num(Y(s.y[i])) << "\" width=\""
                   << num(bw) << "\" height=\"" << num(Y(0.0) - Y(s.y[i])) << "\" fill=\"" << s.color
                   << "\" fill-opacity=\"0.55\"/>\n";
            }
        } else {
            os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if (!std::isfinite(s.y[i])) continue;
                os << num(X(s.x[i])) << "," << num(Y(s.y[i])) << " ";
            }
            os << "\"/>\n";
        }
        os << "<text x=\"" << kRight - 4 << "\" y=\"" << num(legend_y)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << s.color << "\">"
           << s.name << "</text>\n";
        legend_y += 14;
    }
    os << "</svg>\n";
}

}  // namespace svg_detail

// Renders the SVG that matches the CSV schema; returns the SVG path.
// map.csv:     z,g_z,t_star            -> learned map against the oracle
// hist.csv:    bin_center,data_frac,gen_frac -> sample histograms
// metrics.csv: step,...                -> loss / metric curves
inline std::filesystem::path render_svg_for_csv(const std::filesystem::path& csv_path) {
    using namespace svg_detail;
    const CsvTable t = read_csv(csv_path);
    std::filesystem::path out = csv_path;
    out.replace_extension(".svg");

    if (t.column_index("g_z") >= 0) {
        std::vector<Series> series;
        series.push_back({"G(z)", "#d62728", t.column("z"), t.column("g_z")});
        series.push_back({"T*(z)", "#1f77b4", t.column("z"), t.column("t_star")});
        render_chart(out, "learned map vs exact transport", series);
    } else if (t.column_index("bin_center") >= 0) {
        std::vector<Series> series;
        series.push_back({"data", "#1f77b4", t.column("bin_center"), t.column("data_frac")});
        series.push_back({"generated", "#d62728", t.column("bin_center"), t.column("gen_frac")});
        render_chart(out, "generated vs data histogram", series, /*bars=*/true);
    } else if (t.column_index("step") >= 0) {
        std::vector<Series> series;
        const std::vector<double> xs = t.column("step");
        const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
        std::size_t ci = 0;
        for (const std::string name : {"loss_d", "loss_g", "w1", "transport_cost", "lambda_ot"}) {
            if (t.column_index(name) < 0) continue;
            series.push_back({name, colors[ci++ % 5], xs, t.column(name)});
        }
        render_chart(out, "training curves", series);
    } else {
        throw std::runtime_error("svg: unrecognized CSV schema in " + csv_path.string());
    }
    return out;
}

}  // namespace af
