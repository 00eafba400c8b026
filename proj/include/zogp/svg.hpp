#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace zogp::bench {

struct SvgSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

namespace svg_detail {

inline const char* palette(std::size_t k) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[k % 8];
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace svg_detail

/// Minimal log-log line chart; enough for the scaling figures.
inline void write_loglog_svg(const std::string& path, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel,
                             const std::vector<SvgSeries>& series) {
  const double width = 640, height = 480;
  const double ml = 70, mr = 160, mt = 40, mb = 55;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (x <= 0 || y <= 0) continue;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin > xmax) {
    xmin = ymin = 0.1;
    xmax = ymax = 10.0;
  }
  const double lx0 = std::log10(xmin) - 0.05, lx1 = std::log10(xmax) + 0.05;
  const double ly0 = std::log10(ymin) - 0.1, ly1 = std::log10(ymax) + 0.1;
  auto px = [&](double x) {
    return ml + (std::log10(x) - lx0) / (lx1 - lx0) * (width - ml - mr);
  };
  auto py = [&](double y) {
    return height - mb - (std::log10(y) - ly0) / (ly1 - ly0) * (height - mt - mb);
  };

  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open svg for writing: " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width
     << "' height='" << height << "'>\n"
     << "<rect width='100%' height='100%' fill='white'/>\n"
     << "<text x='" << width / 2 << "' y='22' text-anchor='middle' "
     << "font-size='15' font-family='sans-serif'>" << title << "</text>\n";
  // frame and decade grid
  os << "<rect x='" << ml << "' y='" << mt << "' width='" << width - ml - mr
     << "' height='" << height - mt - mb << "' fill='none' stroke='#444'/>\n";
  for (int d = static_cast<int>(std::ceil(lx0)); d <= std::floor(lx1); ++d) {
    const double x = px(std::pow(10.0, d));
    os << "<line x1='" << x << "' y1='" << mt << "' x2='" << x << "' y2='"
       << height - mb << "' stroke='#ddd'/>\n"
       << "<text x='" << x << "' y='" << height - mb + 18
       << "' text-anchor='middle' font-size='11' font-family='sans-serif'>1e" << d
       << "</text>\n";
  }
  for (int d = static_cast<int>(std::ceil(ly0)); d <= std::floor(ly1); ++d) {
    const double y = py(std::pow(10.0, d));
    os << "<line x1='" << ml << "' y1='" << y << "' x2='" << width - mr
       << "' y2='" << y << "' stroke='#ddd'/>\n"
       << "<text x='" << ml - 8 << "' y='" << y + 4
       << "' text-anchor='end' font-size='11' font-family='sans-serif'>1e" << d
       << "</text>\n";
  }
  os << "<text x='" << (ml + width - mr) / 2 << "' y='" << height - 12
     << "' text-anchor='middle' font-size='13' font-family='sans-serif'>"
     << xlabel << "</text>\n"
     << "<text x='18' y='" << (mt + height - mb) / 2
     << "' text-anchor='middle' font-size='13' font-family='sans-serif' "
     << "transform='rotate(-90 18 " << (mt + height - mb) / 2 << ")'>" << ylabel
     << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = svg_detail::palette(k);
    std::ostringstream poly;
    for (const auto& [x, y] : series[k].points) {
      if (x <= 0 || y <= 0) continue;
      poly << px(x) << "," << py(y) << " ";
      os << "<circle cx='" << px(x) << "' cy='" << py(y)
         << "' r='3.5' fill='" << color << "'/>\n";
    }
    os << "<polyline points='" << poly.str() << "' fill='none' stroke='" << color
       << "' stroke-width='1.8'/>\n";
    const double ly = mt + 18 + 18 * static_cast<double>(k);
    os << "<line x1='" << width - mr + 12 << "' y1='" << ly << "' x2='"
       << width - mr + 36 << "' y2='" << ly << "' stroke='" << color
       << "' stroke-width='2'/>\n"
       << "<text x='" << width - mr + 42 << "' y='" << ly + 4
       << "' font-size='11' font-family='sans-serif'>" << series[k].label
       << "</text>\n";
  }
  os << "</svg>\n";
}

/// Stacked horizontal bars: one bar per group, one color per category.
inline void write_stacked_bars_svg(const std::string& path,
                                   const std::string& title,
                                   const std::vector<std::string>& categories,
                                   const std::vector<std::string>& groups,
                                   const std::vector<std::vector<double>>& values) {
  const double width = 720, height = 120 + 40 * static_cast<double>(groups.size());
  const double ml = 190, mr = 30, mt = 50;
  double vmax = 0.0;
  for (const auto& row : values) {
    double sum = 0.0;
    for (double v : row) sum += v;
    vmax = std::max(vmax, sum);
  }
  if (vmax <= 0.0) vmax = 1.0;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open svg for writing: " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width
     << "' height='" << height << "'>\n"
     << "<rect width='100%' height='100%' fill='white'/>\n"
     << "<text x='" << width / 2 << "' y='24' text-anchor='middle' "
     << "font-size='15' font-family='sans-serif'>" << title << "</text>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double y = mt + 40 * static_cast<double>(g);
    os << "<text x='" << ml - 10 << "' y='" << y + 18
       << "' text-anchor='end' font-size='12' font-family='sans-serif'>"
       << groups[g] << "</text>\n";
    double x = ml;
    for (std::size_t c = 0; c < categories.size(); ++c) {
      const double w = values[g][c] / vmax * (width - ml - mr);
      os << "<rect x='" << x << "' y='" << y << "' width='" << w
         << "' height='26' fill='" << svg_detail::palette(c) << "'/>\n";
      x += w;
    }
    os << "<text x='" << x + 6 << "' y='" << y + 18
       << "' font-size='11' font-family='sans-serif'>"
       << svg_detail::fmt(std::accumulate(values[g].begin(), values[g].end(), 0.0))
       << " s</text>\n";
  }
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double x = ml + 110 * static_cast<double>(c % 5);
    const double y = height - 40 + 16 * static_cast<double>(c / 5);
    os << "<rect x='" << x << "' y='" << y << "' width='12' height='12' fill='"
       << svg_detail::palette(c) << "'/>\n"
       << "<text x='" << x + 16 << "' y='" << y + 10
       << "' font-size='11' font-family='sans-serif'>" << categories[c]
       << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace zogp::bench
