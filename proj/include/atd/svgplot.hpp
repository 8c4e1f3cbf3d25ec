#pragma once

// Dependency-free SVG charts. Every file embeds its numeric payload in an
// "atd-data" XML comment so downstream checks can read back exactly what was
// plotted instead of scraping coordinates.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atd/common.hpp"

namespace atd::plot {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

namespace detail {

inline const char* kPalette[] = {"#3466a5", "#c23b22", "#2e8b57", "#8860b8",
                                 "#b8860b", "#3aa6b9", "#aa3377", "#556b2f"};
inline constexpr int kPaletteSize = 8;

inline std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
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

inline std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct Range {
    double lo = 0.0, hi = 1.0;
    double span() const { return hi - lo; }
};

inline Range padded_range(double lo, double hi) {
    if (!(hi > lo)) {  // flat data still gets a visible band
        const double pad = std::abs(lo) > 1e-12 ? std::abs(lo) * 0.1 : 0.5;
        return {lo - pad, hi + pad};
    }
    const double pad = (hi - lo) * 0.06;
    return {lo - pad, hi + pad};
}

/// Linear two-stop color ramp over [0, 1].
inline std::string ramp(double u) {
    u = std::clamp(u, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(26 + u * (253 - 26)));
    const int g = static_cast<int>(std::lround(36 + u * (231 - 36)));
    const int b = static_cast<int>(std::lround(100 + u * (37 - 100)));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace detail

/// Multi-series line chart. Series may have different x grids; all values
/// must be finite and every series non-empty.
inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& x_label, const std::string& y_label,
                             const std::vector<Series>& series) {
    require(!series.empty(), "plot: no series for ", path);
    double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
    bool first = true;
    for (const auto& s : series) {
        require(!s.x.empty() && s.x.size() == s.y.size(), "plot: series '", s.name,
                "' is empty or ragged");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            require(std::isfinite(s.x[i]) && std::isfinite(s.y[i]), "plot: series '", s.name,
                    "' has a non-finite point");
            if (first) {
                xlo = xhi = s.x[i];
                ylo = yhi = s.y[i];
                first = false;
            }
            xlo = std::min(xlo, s.x[i]);
            xhi = std::max(xhi, s.x[i]);
            ylo = std::min(ylo, s.y[i]);
            yhi = std::max(yhi, s.y[i]);
        }
    }
    const detail::Range rx = detail::padded_range(xlo, xhi);
    const detail::Range ry = detail::padded_range(ylo, yhi);

    const double W = 720, H = 440, L = 66, R = 18, T = 42, B = 50;
    const double pw = W - L - R, ph = H - T - B;
    auto px = [&](double x) { return L + (x - rx.lo) / rx.span() * pw; };
    auto py = [&](double y) { return T + ph - (y - ry.lo) / ry.span() * ph; };

    nlohmann::json payload{{"title", title}, {"series", nlohmann::json::array()}};
    for (const auto& s : series)
        payload["series"].push_back({{"name", s.name}, {"x", s.x}, {"y", s.y}});

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("plot: cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    out << "<!-- atd-data " << payload.dump() << " -->\n";
    out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\" "
           "font-family=\"sans-serif\">"
        << detail::xml_escape(title) << "</text>\n";

    // gridlines + tick labels, 5 divisions each axis
    for (int i = 0; i <= 5; ++i) {
        const double gx = rx.lo + rx.span() * i / 5.0;
        const double gy = ry.lo + ry.span() * i / 5.0;
        out << "<line x1=\"" << px(gx) << "\" y1=\"" << T << "\" x2=\"" << px(gx) << "\" y2=\""
            << T + ph << "\" stroke=\"#dddddd\"/>\n";
        out << "<line x1=\"" << L << "\" y1=\"" << py(gy) << "\" x2=\"" << L + pw << "\" y2=\""
            << py(gy) << "\" stroke=\"#dddddd\"/>\n";
        out << "<text x=\"" << px(gx) << "\" y=\"" << T + ph + 18
            << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
            << detail::num(gx) << "</text>\n";
        out << "<text x=\"" << L - 8 << "\" y=\"" << py(gy) + 4
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
            << detail::num(gy) << "</text>\n";
    }
    out << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"#444444\"/>\n";
    out << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12
        << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
        << detail::xml_escape(x_label) << "</text>\n";
    out << "<text x=\"16\" y=\"" << T + ph / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 16 "
        << T + ph / 2 << ")\">" << detail::xml_escape(y_label) << "</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = detail::kPalette[k % detail::kPaletteSize];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            out << detail::num(px(s.x[i])) << "," << detail::num(py(s.y[i])) << " ";
        out << "\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            out << "<circle cx=\"" << detail::num(px(s.x[i])) << "\" cy=\""
                << detail::num(py(s.y[i])) << "\" r=\"2.4\" fill=\"" << color << "\"/>\n";
        // legend row
        const double ly = T + 14 + 16 * static_cast<double>(k);
        out << "<line x1=\"" << L + pw - 130 << "\" y1=\"" << ly << "\" x2=\"" << L + pw - 110
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << L + pw - 104 << "\" y=\"" << ly + 4
            << "\" font-size=\"11\" font-family=\"sans-serif\">" << detail::xml_escape(s.name)
            << "</text>\n";
    }
    out << "</svg>\n";
    require(out.good(), "plot: short write to ", path);
}

/// Heatmap of a dense matrix, rows top-to-bottom. Cell colors span the data
/// range; the payload comment carries the exact values.
inline void write_heatmap(const std::string& path, const std::string& title, const Mat& m,
                          const std::string& x_label, const std::string& y_label) {
    require(m.rows() >= 1 && m.cols() >= 1, "plot: empty heatmap for ", path);
    require(m.allFinite(), "plot: non-finite heatmap values for ", path);
    const double lo = m.minCoeff(), hi = m.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;

    const double cell = std::min(48.0, std::max(14.0, 420.0 / static_cast<double>(
                                                          std::max(m.rows(), m.cols()))));
    const double L = 70, T = 46;
    const double W = L + cell * static_cast<double>(m.cols()) + 90;
    const double H = T + cell * static_cast<double>(m.rows()) + 56;

    std::vector<std::vector<double>> values(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            values[static_cast<std::size_t>(r)].push_back(m(r, c));
    nlohmann::json payload{{"title", title}, {"values", values}};

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("plot: cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    out << "<!-- atd-data " << payload.dump() << " -->\n";
    out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\" "
           "font-family=\"sans-serif\">"
        << detail::xml_escape(title) << "</text>\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double u = (m(r, c) - lo) / span;
            out << "<rect x=\"" << L + cell * static_cast<double>(c) << "\" y=\""
                << T + cell * static_cast<double>(r) << "\" width=\"" << cell << "\" height=\""
                << cell << "\" fill=\"" << detail::ramp(u) << "\" stroke=\"#ffffff\" "
                << "stroke-width=\"0.5\"/>\n";
        }
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        out << "<text x=\"" << L - 8 << "\" y=\"" << T + cell * (static_cast<double>(r) + 0.5) + 4
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << r
            << "</text>\n";
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        out << "<text x=\"" << L + cell * (static_cast<double>(c) + 0.5) << "\" y=\""
            << T + cell * static_cast<double>(m.rows()) + 16
            << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << c
            << "</text>\n";
    out << "<text x=\"" << L + cell * static_cast<double>(m.cols()) / 2 << "\" y=\"" << H - 10
        << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
        << detail::xml_escape(x_label) << "</text>\n";
    out << "<text x=\"18\" y=\"" << T + cell * static_cast<double>(m.rows()) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 18 "
        << T + cell * static_cast<double>(m.rows()) / 2 << ")\">" << detail::xml_escape(y_label)
        << "</text>\n";
    // color ramp legend, min at the bottom
    const double bx = L + cell * static_cast<double>(m.cols()) + 22;
    for (int i = 0; i < 64; ++i) {
        const double u = 1.0 - static_cast<double>(i) / 63.0;
        out << "<rect x=\"" << bx << "\" y=\"" << T + 3.0 * i << "\" width=\"14\" height=\"3.2\" "
            << "fill=\"" << detail::ramp(u) << "\"/>\n";
    }
    out << "<text x=\"" << bx + 18 << "\" y=\"" << T + 8
        << "\" font-size=\"10\" font-family=\"sans-serif\">" << detail::num(hi) << "</text>\n";
    out << "<text x=\"" << bx + 18 << "\" y=\"" << T + 194
        << "\" font-size=\"10\" font-family=\"sans-serif\">" << detail::num(lo) << "</text>\n";
    out << "</svg>\n";
    require(out.good(), "plot: short write to ", path);
}

/// Reads back the payload comment written by the writers above.
inline nlohmann::json read_chart_data(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("plot: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string open = "<!-- atd-data ";
    const std::size_t a = text.find(open);
    require(a != std::string::npos, "plot: ", path, " has no embedded data");
    const std::size_t b = text.find(" -->", a);
    require(b != std::string::npos, "plot: ", path, " has an unterminated data comment");
    try {
        return nlohmann::json::parse(text.substr(a + open.size(), b - a - open.size()));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("plot: " + path + ": " + e.what());
    }
}

}  // namespace atd::plot
