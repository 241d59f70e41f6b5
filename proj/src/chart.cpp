// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/chart.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "seqjepa/errors.hpp"

namespace seqjepa {
namespace {

using nlohmann::json;

std::string escape(const std::string& s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::vector<json> parse_lines(const JsonlSource& src) {
  std::vector<json> out;
  std::istringstream in(src.text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(src.name + ":" + std::to_string(n) + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(src.name + ":" + std::to_string(n) + ": not a JSON object");
    out.push_back(std::move(j));
  }
  return out;
}

// Evenly spaced "nice" ticks covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step) out.push_back(t);
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

std::size_t Chart::point_count() const {
  std::size_t n = 0;
  for (const auto& s : series) n += s.points.size();
  return n;
}

Chart chart_from_jsonl(const std::vector<JsonlSource>& sources, const std::vector<std::string>& fields) {
  std::vector<std::pair<std::string, std::vector<json>>> docs;
  for (const auto& src : sources) docs.emplace_back(src.name, parse_lines(src));
  const json* first = nullptr;
  for (const auto& [name, recs] : docs) {
    if (!recs.empty()) {
      first = &recs.front();
      break;
    }
  }
  if (!first) throw FormatError("no metric records to chart");
  const bool training = first->contains("step");
  const bool prefix = sources.size() > 1;

  Chart chart;
  if (training) {
    const std::vector<std::string> ys = fields.empty() ? std::vector<std::string>{"loss"} : fields;
    chart.title = "training";
    chart.x_label = "step";
    chart.y_label = ys.size() == 1 ? ys.front() : "value";
    for (const auto& [name, recs] : docs) {
      for (const auto& field : ys) {
        ChartSeries s;
        s.label = prefix ? name + ": " + field : field;
        for (const auto& r : recs) {
          if (!r.contains("step") || !r.contains(field) || !r.at(field).is_number()) {
            throw FormatError(name + ": training record without numeric step/" + field);
          }
          s.points.emplace_back(r.at("step").get<double>(), r.at(field).get<double>());
        }
        chart.series.push_back(std::move(s));
      }
    }
    return chart;
  }

  bool all_path = true;
  std::map<std::string, ChartSeries> grouped;
  std::vector<std::string> order;
  for (const auto& [name, recs] : docs) {
    for (const auto& r : recs) {
      if (!r.contains("metric") || !r.contains("value") || !r.at("value").is_number()) {
        throw FormatError(name + ": metric record without metric/value");
      }
      const std::string metric = r.at("metric").get<std::string>();
      all_path = all_path && metric == "path_r2";
      std::string key = metric;
      if (r.contains("target")) key += " " + r.at("target").get<std::string>();
      if (r.contains("ablation") && r.at("ablation").get<std::string>() != "none") {
        key += " [" + r.at("ablation").get<std::string>() + "]";
      }
      if (r.contains("M_tr") && metric != "path_r2") key += " M_tr=" + std::to_string(r.at("M_tr").get<int>());
      if (prefix) key = name + ": " + key;
      auto [it, fresh] = grouped.try_emplace(key);
      if (fresh) {
        it->second.label = key;
        order.push_back(key);
      }
      it->second.points.emplace_back(r.value("M_val", 0), r.at("value").get<double>());
    }
  }
  chart.title = all_path ? "path integration" : "metric vs M_val";
  chart.x_label = all_path ? "M" : "M_val";
  chart.y_label = all_path ? "path R2" : "value";
  for (const auto& key : order) {
    auto s = grouped[key];
    std::stable_sort(s.points.begin(), s.points.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    chart.series.push_back(std::move(s));
  }
  return chart;
}

std::string render_svg(const Chart& chart, int width, int height) {
  if (chart.point_count() == 0) throw FormatError("chart has no points");
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : chart.series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) throw FormatError("chart has no finite points");
  if (x1 == x0) {
    x0 -= 1;
    x1 += 1;
  }
  if (y1 == y0) {
    y0 -= std::max(1e-3, std::abs(y0) * 0.1);
    y1 += std::max(1e-3, std::abs(y1) * 0.1);
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  const double left = 70, right = 20, top = 40;
  const double legend_h = 18.0 * static_cast<double>(chart.series.size());
  const double bottom = 50 + legend_h;
  const double pw = width - left - right;
  const double ph = height - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + (1 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(chart.title)
     << "</text>\n";
  os << "<g class=\"axes\" stroke=\"#333\">\n";
  os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(left + pw) << "\" y2=\""
     << num(top + ph) << "\"/>\n";
  os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
     << num(top + ph) << "\"/>\n</g>\n";
  for (double t : ticks(x0, x1)) {
    os << "<line x1=\"" << num(sx(t)) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(sx(t)) << "\" y2=\""
       << num(top + ph + 5) << "\" stroke=\"#333\"/><text x=\"" << num(sx(t)) << "\" y=\"" << num(top + ph + 18)
       << "\" text-anchor=\"middle\">" << tick_label(t) << "</text>\n";
  }
  for (double t : ticks(y0, y1)) {
    os << "<line x1=\"" << num(left - 5) << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << num(left + pw) << "\" y2=\""
       << num(sy(t)) << "\" stroke=\"#ddd\"/><text x=\"" << num(left - 8) << "\" y=\"" << num(sy(t) + 4)
       << "\" text-anchor=\"end\">" << tick_label(t) << "</text>\n";
  }
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(top + ph + 36) << "\" text-anchor=\"middle\">"
     << escape(chart.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(chart.y_label) << "</text>\n";

  for (std::size_t i = 0; i < chart.series.size(); ++i) {
    const auto& s = chart.series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<polyline class=\"series\" data-label=\"" << escape(s.label) << "\" data-points=\"" << s.points.size()
       << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool sep = false;
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      os << (sep ? " " : "") << num(sx(x)) << "," << num(sy(y));
      sep = true;
    }
    os << "\"/>\n";
    if (s.points.size() <= 40) {
      for (auto [x, y] : s.points) {
        if (std::isfinite(x) && std::isfinite(y)) {
          os << "<circle cx=\"" << num(sx(x)) << "\" cy=\"" << num(sy(y)) << "\" r=\"2.5\" fill=\"" << color
             << "\"/>\n";
        }
      }
    }
  }
  os << "<g class=\"legend\">\n";
  for (std::size_t i = 0; i < chart.series.size(); ++i) {
    const double y = top + ph + 50 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(y - 4) << "\" x2=\"" << num(left + 24) << "\" y2=\""
       << num(y - 4) << "\" stroke=\"" << kPalette[i % std::size(kPalette)] << "\" stroke-width=\"2\"/>"
       << "<text class=\"legend-entry\" x=\"" << num(left + 30) << "\" y=\"" << num(y) << "\">"
       << escape(chart.series[i].label) << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

}  // namespace seqjepa
