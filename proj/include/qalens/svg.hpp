#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "qalens/errors.hpp"
#include "qalens/headlens.hpp"

namespace qalens {

namespace detail {

// Two-sided linear ramp clipped at +-max|delta|: negative deltas toward blue,
// positive toward red, zero is white.
inline std::string diverging_color(double delta, double maxabs) {
    double t = maxabs > 0.0 ? std::clamp(delta / maxabs, -1.0, 1.0) : 0.0;
    int r = 255, g = 255, b = 255;
    if (t < 0.0) {
        r = static_cast<int>(std::lround(255.0 * (1.0 + t)));
        g = static_cast<int>(std::lround(255.0 * (1.0 + 0.6 * t)));
    } else if (t > 0.0) {
        g = static_cast<int>(std::lround(255.0 * (1.0 - 0.6 * t)));
        b = static_cast<int>(std::lround(255.0 * (1.0 - t)));
    }
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace detail

// Standalone SVG heatmap of an importance matrix: layers on the y axis,
// heads on the x axis, one colored cell per head.
inline std::string importance_heatmap_svg(const ImportanceMatrix& m) {
    constexpr int cell = 42;
    constexpr int margin_left = 70;
    constexpr int margin_top = 50;
    constexpr int legend_h = 40;
    const int width = margin_left + static_cast<int>(m.heads) * cell + 20;
    const int height = margin_top + static_cast<int>(m.layers) * cell + legend_h + 20;

    double maxabs = 0.0;
    for (double d : m.deltas) maxabs = std::max(maxabs, std::abs(d));

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" font-family=\"monospace\" font-size=\"11\">\n";
    svg << "<text x=\"" << margin_left << "\" y=\"18\">masked-head change in dev "
        << m.metric << " (baseline " << m.baseline << ")</text>\n";
    for (std::size_t h = 0; h < m.heads; ++h) {
        svg << "<text x=\"" << margin_left + static_cast<int>(h) * cell + cell / 2 - 8
            << "\" y=\"" << margin_top - 8 << "\">h" << h << "</text>\n";
    }
    for (std::size_t l = 0; l < m.layers; ++l) {
        svg << "<text x=\"10\" y=\"" << margin_top + static_cast<int>(l) * cell + cell / 2 + 4
            << "\">layer " << l << "</text>\n";
        for (std::size_t h = 0; h < m.heads; ++h) {
            const double d = m.delta(l, h);
            svg << "<rect x=\"" << margin_left + static_cast<int>(h) * cell << "\" y=\""
                << margin_top + static_cast<int>(l) * cell << "\" width=\"" << cell
                << "\" height=\"" << cell << "\" fill=\"" << detail::diverging_color(d, maxabs)
                << "\" stroke=\"#888\"/>\n";
            char label[16];
            std::snprintf(label, sizeof(label), "%.2f", d);
            svg << "<text x=\"" << margin_left + static_cast<int>(h) * cell + 4 << "\" y=\""
                << margin_top + static_cast<int>(l) * cell + cell / 2 + 4 << "\">" << label
                << "</text>\n";
        }
    }
    const int ly = margin_top + static_cast<int>(m.layers) * cell + 24;
    svg << "<text x=\"" << margin_left << "\" y=\"" << ly << "\">scale: -" << maxabs
        << " (blue) .. 0 (white) .. +" << maxabs << " (red)</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

inline void save_heatmap_svg(const ImportanceMatrix& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    out << importance_heatmap_svg(m);
}

}  // namespace qalens
