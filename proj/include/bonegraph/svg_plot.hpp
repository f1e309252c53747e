#pragma once

// Self-contained SVG emission for the score-consistency report: one small
// panel per ROI overlaying the normalized true and predicted score series
// across the evaluated samples.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bonegraph {

struct ScoreSeries {
    std::string label;              // ROI name
    std::vector<double> truth;      // per sample
    std::vector<double> predicted;  // per sample
    double spearman = 0.0;
};

namespace svg_detail {

inline std::vector<double> normalize(const std::vector<double>& v) {
    double lo = 1e300, hi = -1e300;
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    std::vector<double> out(v.size(), 0.5);
    if (hi > lo)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
    return out;
}

inline void polyline(std::ostringstream& os, const std::vector<double>& ys, double x0, double y0, double w,
                     double h, const char* color) {
    if (ys.size() < 2) return;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const double x = x0 + w * static_cast<double>(i) / static_cast<double>(ys.size() - 1);
        const double y = y0 + h * (1.0 - ys[i]);
        os << x << "," << y << " ";
    }
    os << "\"/>\n";
}

}  // namespace svg_detail

// Grid of per-ROI panels; the x axis indexes samples, both series are
// min-max normalized inside each panel (the raw scales differ by design).
inline void write_score_consistency_svg(const std::string& path, const std::vector<ScoreSeries>& series) {
    if (series.empty()) throw std::invalid_argument("svg: no score series to plot");
    const int cols = 4;
    const int rows = static_cast<int>((series.size() + cols - 1) / cols);
    const double pw = 180.0, ph = 110.0, margin = 14.0, header = 26.0;
    const double width = cols * (pw + margin) + margin;
    const double height = rows * (ph + margin + header) + margin;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const int r = static_cast<int>(k) / cols;
        const int c = static_cast<int>(k) % cols;
        const double x0 = margin + c * (pw + margin);
        const double y0 = margin + r * (ph + margin + header) + header;
        os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << ph
           << "\" fill=\"#fafafa\" stroke=\"#cccccc\"/>\n";
        std::ostringstream title;
        title.precision(3);
        title << series[k].label << "  (rank corr " << series[k].spearman << ")";
        os << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\" font-family=\"sans-serif\" font-size=\"11\">"
           << title.str() << "</text>\n";
        svg_detail::polyline(os, svg_detail::normalize(series[k].truth), x0, y0, pw, ph, "#e0a800");
        svg_detail::polyline(os, svg_detail::normalize(series[k].predicted), x0, y0, pw, ph, "#1f6fd0");
    }
    os << "<text x=\"" << margin << "\" y=\"" << height - 4
       << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#e0a800\">true scores</text>\n";
    os << "<text x=\"" << margin + 90 << "\" y=\"" << height - 4
       << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f6fd0\">predicted scores</text>\n";
    os << "</svg>\n";

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("svg: cannot write '" + path + "'");
    out << os.str();
}

}  // namespace bonegraph
