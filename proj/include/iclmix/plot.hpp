#pragma once

// Self-contained SVG line charts of sweep results: one line per series,
// error bars from a std column, optional log axes.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iclmix/errors.hpp"
#include "iclmix/ingest.hpp"
#include "iclmix/io.hpp"

namespace iclmix {

enum class AxisScale { linear, log };

inline AxisScale axis_scale_from_name(std::string_view s) {
  if (s == "linear") return AxisScale::linear;
  if (s == "log") return AxisScale::log;
  throw ArgumentError("axis scale must be linear or log, got '" + std::string(s) + "'");
}

struct PlotSpec {
  std::string x = "sweep_value";
  std::string y = "mean_error";
  std::string series = "model";
  std::string error = "std";       // empty: no error bars
  std::string source = "overall";  // rows kept when a source column exists; empty keeps all
  AxisScale x_scale = AxisScale::linear;
  AxisScale y_scale = AxisScale::linear;
  std::string title;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::ptrdiff_t column(std::string_view name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  }
};

inline CsvTable read_table(std::istream& in) {
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line, line_no);
    for (auto& f : fields) f = std::string(detail::trim(f));
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw ParseError("expected " + std::to_string(t.header.size()) + " fields", line_no);
    t.rows.push_back(std::move(fields));
  }
  return t;
}

inline CsvTable load_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open '" + path.string() + "'");
  return read_table(in);
}

namespace detail {

struct Point {
  double x, y, err;
};

inline std::string xml_escape(std::string_view s) {
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

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

/// Tick positions in data units.
inline std::vector<double> ticks(double lo, double hi, AxisScale scale) {
  std::vector<double> t;
  if (scale == AxisScale::log) {
    for (double e = std::floor(std::log10(lo)); e <= std::ceil(std::log10(hi)); e += 1.0) {
      const double v = std::pow(10.0, e);
      if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) t.push_back(v);
    }
    if (t.size() < 2) {
      for (double e = std::floor(std::log2(lo)); e <= std::ceil(std::log2(hi)); e += 1.0) {
        const double v = std::pow(2.0, e);
        if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) t.push_back(v);
      }
    }
    return t;
  }
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

}  // namespace detail

/// Renders `table` to an SVG document. Warnings (dropped points) are
/// appended to `warnings`.
inline std::string render_svg(const CsvTable& table, const PlotSpec& spec, std::vector<std::string>* warnings = nullptr) {
  if (table.rows.empty()) throw ArgumentError("no rows");
  auto col = [&](const std::string& name) {
    const auto c = table.column(name);
    if (c < 0) throw ArgumentError("unknown column '" + name + "'");
    return static_cast<std::size_t>(c);
  };
  const std::size_t cx = col(spec.x), cy = col(spec.y), cs = col(spec.series);
  const std::ptrdiff_t ce = spec.error.empty() ? -1 : static_cast<std::ptrdiff_t>(col(spec.error));
  const std::ptrdiff_t csrc = spec.source.empty() ? -1 : table.column("source");

  std::vector<std::string> order;
  std::map<std::string, std::vector<detail::Point>> series;
  std::size_t dropped = 0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (csrc >= 0 && row[csrc] != spec.source) continue;
    const double x = detail::parse_double(row[cx], r + 2, spec.x);
    const double y = detail::parse_double(row[cy], r + 2, spec.y);
    const double e = ce >= 0 ? detail::parse_double(row[ce], r + 2, spec.error) : 0.0;
    if ((spec.x_scale == AxisScale::log && x <= 0.0) || (spec.y_scale == AxisScale::log && y <= 0.0)) {
      ++dropped;
      continue;
    }
    if (!series.count(row[cs])) order.push_back(row[cs]);
    series[row[cs]].push_back({x, y, e});
  }
  if (dropped > 0 && warnings)
    warnings->push_back(std::to_string(dropped) + " point(s) with non-positive values dropped on a log axis");
  if (series.empty()) throw ArgumentError("no rows to plot");
  for (auto& [_, pts] : series) std::sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.x < b.x; });

  double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
  for (const auto& [_, pts] : series) {
    for (const auto& p : pts) {
      xlo = std::min(xlo, p.x);
      xhi = std::max(xhi, p.x);
      const double lo = spec.y_scale == AxisScale::log && p.y - p.err <= 0.0 ? p.y : p.y - p.err;
      ylo = std::min(ylo, lo);
      yhi = std::max(yhi, p.y + p.err);
    }
  }
  auto widen = [](double& lo, double& hi, AxisScale s) {
    if (s == AxisScale::log) {
      if (hi / lo < 1.0 + 1e-9) {
        lo /= 2.0;
        hi *= 2.0;
      }
    } else if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
      lo -= 0.5;
      hi += 0.5;
    } else {
      const double pad = 0.05 * (hi - lo);
      lo -= pad;
      hi += pad;
    }
  };
  widen(xlo, xhi, spec.x_scale);
  widen(ylo, yhi, spec.y_scale);

  constexpr double W = 760, H = 500, L = 80, R = 200, T = 50, B = 60;
  auto tx = [&](double v) {
    const double f = spec.x_scale == AxisScale::log ? std::log(v / xlo) / std::log(xhi / xlo) : (v - xlo) / (xhi - xlo);
    return L + f * (W - L - R);
  };
  auto ty = [&](double v) {
    const double f = spec.y_scale == AxisScale::log ? std::log(v / ylo) / std::log(yhi / ylo) : (v - ylo) / (yhi - ylo);
    return H - B - f * (H - T - B);
  };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty())
    os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"28\" text-anchor=\"middle\" font-size=\"15\">"
       << detail::xml_escape(spec.title) << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << (W - L - R) << "\" height=\"" << (H - T - B)
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double v : detail::ticks(xlo, xhi, spec.x_scale)) {
    const double px = tx(v);
    os << "<line x1=\"" << px << "\" y1=\"" << (H - B) << "\" x2=\"" << px << "\" y2=\"" << (H - B + 5)
       << "\" stroke=\"black\"/><text x=\"" << px << "\" y=\"" << (H - B + 18) << "\" text-anchor=\"middle\">"
       << detail::num(v) << "</text>\n";
  }
  for (double v : detail::ticks(ylo, yhi, spec.y_scale)) {
    const double py = ty(v);
    os << "<line x1=\"" << (L - 5) << "\" y1=\"" << py << "\" x2=\"" << L << "\" y2=\"" << py
       << "\" stroke=\"black\"/><line x1=\"" << L << "\" y1=\"" << py << "\" x2=\"" << (W - R) << "\" y2=\"" << py
       << "\" stroke=\"#e0e0e0\"/><text x=\"" << (L - 8) << "\" y=\"" << (py + 4) << "\" text-anchor=\"end\">"
       << detail::num(v) << "</text>\n";
  }
  os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << (H - 15) << "\" text-anchor=\"middle\">"
     << detail::xml_escape(spec.x) << (spec.x_scale == AxisScale::log ? " (log)" : "") << "</text>\n";
  os << "<text transform=\"translate(20," << (T + (H - T - B) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << detail::xml_escape(spec.y) << (spec.y_scale == AxisScale::log ? " (log)" : "") << "</text>\n";

  for (std::size_t si = 0; si < order.size(); ++si) {
    const auto& pts = series[order[si]];
    const char* color = palette[si % std::size(palette)];
    os << "<g stroke=\"" << color << "\" fill=\"" << color << "\">\n<polyline fill=\"none\" stroke-width=\"2\" points=\"";
    for (const auto& p : pts) os << tx(p.x) << ',' << ty(p.y) << ' ';
    os << "\"/>\n";
    for (const auto& p : pts) {
      if (p.err > 0.0) {
        const double lo = spec.y_scale == AxisScale::log && p.y - p.err <= 0.0 ? p.y : p.y - p.err;
        os << "<line x1=\"" << tx(p.x) << "\" y1=\"" << ty(lo) << "\" x2=\"" << tx(p.x) << "\" y2=\""
           << ty(p.y + p.err) << "\"/>\n";
      }
      os << "<circle cx=\"" << tx(p.x) << "\" cy=\"" << ty(p.y) << "\" r=\"3.5\"/>\n";
    }
    os << "</g>\n";
    const double ly = T + 14 + 20.0 * static_cast<double>(si);
    os << "<line x1=\"" << (W - R + 15) << "\" y1=\"" << ly << "\" x2=\"" << (W - R + 40) << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/><text x=\"" << (W - R + 46) << "\" y=\"" << (ly + 4)
       << "\">" << detail::xml_escape(order[si]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace iclmix
