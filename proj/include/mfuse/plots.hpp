#pragma once

// Minimal SVG rendering of PR curves and confusion-matrix heatmaps.

#include <algorithm>
#include <sstream>
#include <string>

#include "mfuse/evaluation.hpp"

namespace mfuse::plots {

namespace detail {

inline std::string escape(const std::string& s) {
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

}  // namespace detail

// Step-wise precision against recall for one class.
inline std::string pr_curve_svg(const PRCurve& c, const std::string& title, double ap) {
  const double w = 360, h = 320, left = 50, top = 30, pw = 280, ph = 240;
  auto x = [&](double r) { return left + r * pw; };
  auto y = [&](double p) { return top + (1.0 - p) * ph; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << detail::escape(title)
     << " (AP " << fixed(ap, 3) << ")</text>\n"
     << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    os << "<text x=\"" << x(v) - 8 << "\" y=\"" << top + ph + 16 << "\" font-size=\"10\">" << fixed(v, 2)
       << "</text>\n"
       << "<text x=\"" << left - 34 << "\" y=\"" << y(v) + 4 << "\" font-size=\"10\">" << fixed(v, 2) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 - 18 << "\" y=\"" << h - 8 << "\" font-size=\"11\">recall</text>\n"
     << "<text x=\"12\" y=\"" << top + ph / 2 << "\" font-size=\"11\" transform=\"rotate(-90 12 " << top + ph / 2
     << ")\">precision</text>\n";
  os << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\" points=\"";
  double prev_r = 0.0;
  for (const auto& p : c.points) {
    os << x(prev_r) << ',' << y(p.precision) << ' ' << x(p.recall) << ',' << y(p.precision) << ' ';
    prev_r = p.recall;
  }
  os << "\"/>\n</svg>\n";
  return os.str();
}

// Row-normalised heatmap with raw counts printed in each cell.
inline std::string confusion_svg(const EvaluationReport& r) {
  const std::size_t k = r.class_names.size();
  const double cell = std::max(24.0, 360.0 / static_cast<double>(k)), left = 150, top = 40;
  const double w = left + cell * static_cast<double>(k) + 20, h = top + cell * static_cast<double>(k) + 150;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">confusion matrix: " << r.modality
     << " (rows true, columns predicted)</text>\n";
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t row = 0;
    for (std::size_t v : r.metrics.confusion[i]) row += v;
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * (static_cast<double>(i) + 0.6)
       << "\" font-size=\"10\" text-anchor=\"end\">" << detail::escape(r.class_names[i]) << "</text>\n";
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t v = r.metrics.confusion[i][j];
      const double frac = row ? static_cast<double>(v) / static_cast<double>(row) : 0.0;
      const int shade = static_cast<int>(255.0 * (1.0 - frac));
      const double cx = left + cell * static_cast<double>(j), cy = top + cell * static_cast<double>(i);
      os << "<rect x=\"" << cx << "\" y=\"" << cy << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#999\"/>\n"
         << "<text x=\"" << cx + cell / 2 << "\" y=\"" << cy + cell * 0.6
         << "\" font-size=\"10\" text-anchor=\"middle\" fill=\"" << (frac > 0.5 ? "white" : "black") << "\">" << v
         << "</text>\n";
    }
  }
  for (std::size_t j = 0; j < k; ++j) {
    const double cx = left + cell * (static_cast<double>(j) + 0.5), cy = top + cell * static_cast<double>(k) + 8;
    os << "<text x=\"" << cx << "\" y=\"" << cy << "\" font-size=\"10\" transform=\"rotate(60 " << cx << ' ' << cy
       << ")\">" << detail::escape(r.class_names[j]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace mfuse::plots
