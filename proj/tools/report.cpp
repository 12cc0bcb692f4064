// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "report.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dqoforge/error.hpp"

namespace dqoforge::tools {

namespace fs = std::filesystem;
using nlohmann::json;

void flatten_numeric(const json& j, const std::string& prefix, std::map<std::string, double>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      if (prefix.empty() && k == "round") continue;
      flatten_numeric(v, prefix.empty() ? k : prefix + "." + k, out);
    }
  } else if (j.is_number() && !prefix.empty()) {
    out[prefix] = j.get<double>();
  }
}

RunSeries read_run_series(const fs::path& dir, std::string label) {
  fs::path file = dir / "rounds.jsonl";
  if (!fs::exists(file) && fs::exists(dir / "run" / "rounds.jsonl")) file = dir / "run" / "rounds.jsonl";
  if (!fs::exists(file)) throw ConfigError("empty run: no rounds.jsonl in " + dir.string());
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());

  RunSeries run;
  run.label = std::move(label);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError(file.string() + ": " + e.what());
    }
    const int round = j.at("round").get<int>();
    std::map<std::string, double> values;
    flatten_numeric(j.value("dev", json::object()), "", values);
    for (const auto& [k, v] : values) run.metrics[k].emplace_back(round, v);
    ++n;
  }
  if (n == 0) throw ConfigError("empty run: " + file.string() + " has no rounds");
  if (run.metrics.empty()) throw ConfigError("empty run: " + file.string() + " records no dev metrics");
  for (auto& [k, pts] : run.metrics) std::sort(pts.begin(), pts.end());
  return run;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

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

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace

std::string series_csv(const std::vector<RunSeries>& runs) {
  std::set<std::string> metrics;
  for (const auto& r : runs) {
    for (const auto& [k, v] : r.metrics) metrics.insert(k);
  }
  std::ostringstream out;
  out << "metric,run,round,value\n";
  for (const auto& m : metrics) {
    for (const auto& r : runs) {
      const auto it = r.metrics.find(m);
      if (it == r.metrics.end()) continue;
      for (const auto& [round, v] : it->second) out << m << ',' << r.label << ',' << round << ',' << num(v) << '\n';
    }
  }
  return out.str();
}

std::string svg_line_chart(const std::string& title, const std::vector<ChartLine>& lines) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  int x0 = 0, x1 = 1;
  double y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& l : lines) {
    for (const auto& [x, y] : l.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 - y0 < 1e-12) {
    const double pad = std::max(std::abs(y0) * 0.05, 0.5);
    y0 -= pad;
    y1 += pad;
  } else {
    const double pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;
  }
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return T + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << px(L + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
  // axes and grid
  s << "<g stroke=\"#cccccc\" stroke-width=\"1\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = T + ph * i / 4.0;
    s << "<line x1=\"" << px(L) << "\" y1=\"" << px(y) << "\" x2=\"" << px(L + pw) << "\" y2=\"" << px(y) << "\"/>\n";
  }
  s << "</g>\n";
  s << "<g stroke=\"black\" stroke-width=\"1\">\n";
  s << "<line x1=\"" << px(L) << "\" y1=\"" << px(T + ph) << "\" x2=\"" << px(L + pw) << "\" y2=\"" << px(T + ph)
    << "\"/>\n";
  s << "<line x1=\"" << px(L) << "\" y1=\"" << px(T) << "\" x2=\"" << px(L) << "\" y2=\"" << px(T + ph) << "\"/>\n";
  s << "</g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y1 - (y1 - y0) * i / 4.0;
    s << "<text x=\"" << px(L - 6) << "\" y=\"" << px(T + ph * i / 4.0 + 4) << "\" text-anchor=\"end\">" << tick(v)
      << "</text>\n";
  }
  const int step = std::max(1, (x1 - x0) / 10);
  for (int x = x0; x <= x1; x += step) {
    s << "<text x=\"" << px(sx(x)) << "\" y=\"" << px(T + ph + 18) << "\" text-anchor=\"middle\">" << x
      << "</text>\n";
  }
  s << "<text x=\"" << px(L + pw / 2) << "\" y=\"" << px(H - 10) << "\" text-anchor=\"middle\">round</text>\n";

  for (std::size_t i = 0; i < lines.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    const auto& l = lines[i];
    s << "<g fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\">\n<polyline points=\"";
    for (std::size_t p = 0; p < l.points.size(); ++p)
      s << (p ? " " : "") << px(sx(l.points[p].first)) << ',' << px(sy(l.points[p].second));
    s << "\"/>\n</g>\n<g fill=\"" << color << "\">\n";
    for (const auto& [x, y] : l.points)
      s << "<circle cx=\"" << px(sx(x)) << "\" cy=\"" << px(sy(y)) << "\" r=\"3\"/>\n";
    s << "</g>\n";
    const double ly = T + 10 + 20.0 * static_cast<double>(i);
    s << "<line x1=\"" << px(L + pw + 15) << "\" y1=\"" << px(ly) << "\" x2=\"" << px(L + pw + 35) << "\" y2=\""
      << px(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << px(L + pw + 40) << "\" y=\"" << px(ly + 4) << "\">" << escape(l.label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string file_stem(const std::string& metric) {
  std::string out;
  for (char c : metric) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-';
    if (ok) {
      out += c;
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "metric" : out;
}

std::vector<fs::path> write_report(const std::vector<RunSeries>& runs, const fs::path& out) {
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto write = [&](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    written.push_back(p);
  };
  write(out / "series.csv", series_csv(runs));

  std::set<std::string> metrics;
  for (const auto& r : runs) {
    for (const auto& [k, v] : r.metrics) metrics.insert(k);
  }
  std::set<std::string> stems;
  for (const auto& m : metrics) {
    std::vector<ChartLine> lines;
    for (const auto& r : runs) {
      const auto it = r.metrics.find(m);
      if (it != r.metrics.end()) lines.push_back({r.label, it->second});
    }
    std::string stem = file_stem(m);
    for (int i = 2; stems.count(stem); ++i) stem = file_stem(m) + "_" + std::to_string(i);
    stems.insert(stem);
    write(out / (stem + ".svg"), svg_line_chart(m, lines));
  }
  return written;
}

}  // namespace dqoforge::tools
