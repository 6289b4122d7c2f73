#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lab.hpp"

namespace npad::lab {

namespace {

std::string escape_xml(const std::string& s) {
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

std::string fmt(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<std::optional<double>>& values, const std::string& unit) {
    const double bar = 48, gap = 24, left = 56, top = 40, plot_h = 220, bottom = 60;
    const double width = left + static_cast<double>(labels.size()) * (bar + gap) + gap;
    const double height = top + plot_h + bottom;
    double vmax = 0.0;
    for (const auto& v : values) {
        if (v) vmax = std::max(vmax, *v);
    }
    if (vmax <= 0.0) vmax = 1.0;
    // Round the axis up to 1, 2 or 5 times a power of ten.
    const double mag = std::pow(10.0, std::floor(std::log10(vmax)));
    double axis = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (m * mag >= vmax) {
            axis = m * mag;
            break;
        }
    }

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << fmt(width / 2, 0) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
      << escape_xml(title) << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = axis * t / 4.0;
        const double y = top + plot_h - plot_h * t / 4.0;
        s << "<line x1=\"" << left << "\" x2=\"" << fmt(width - gap / 2, 0) << "\" y1=\"" << fmt(y) << "\" y2=\""
          << fmt(y) << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << fmt(v, axis < 1 ? 3 : 1)
          << "</text>\n";
    }
    s << "<text transform=\"translate(14," << fmt(top + plot_h / 2, 0) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape_xml(unit) << "</text>\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double x = left + gap + static_cast<double>(i) * (bar + gap);
        const double cx = x + bar / 2;
        if (values[i]) {
            const double h = plot_h * std::clamp(*values[i] / axis, 0.0, 1.0);
            s << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(top + plot_h - h) << "\" width=\"" << bar << "\" height=\""
              << fmt(h) << "\" fill=\"#4c72b0\"/>\n";
            s << "<text x=\"" << fmt(cx) << "\" y=\"" << fmt(top + plot_h - h - 4) << "\" text-anchor=\"middle\">"
              << fmt(*values[i]) << "</text>\n";
        } else {
            s << "<text x=\"" << fmt(cx) << "\" y=\"" << fmt(top + plot_h - 4) << "\" text-anchor=\"middle\">n/a</text>\n";
        }
        s << "<text x=\"" << fmt(cx) << "\" y=\"" << fmt(top + plot_h + 16) << "\" text-anchor=\"middle\">"
          << escape_xml(labels[i]) << "</text>\n";
    }
    s << "<line x1=\"" << left << "\" x2=\"" << fmt(width - gap / 2, 0) << "\" y1=\"" << top + plot_h << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
    s << "</svg>\n";
    return s.str();
}

}  // namespace npad::lab
