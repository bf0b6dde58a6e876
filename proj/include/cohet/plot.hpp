#pragma once

// SVG line charts (mean across seeds, min-max band when there is more than one
// run) and a merged long-format CSV built from run directories.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cohet/config.hpp"
#include "cohet/metrics.hpp"

namespace cohet::plot {

namespace fs = std::filesystem;

struct Run {
  std::string dir;
  std::string group;  // "<algo> beta=<beta>"
  metrics::Table table;
};

struct Series {
  std::vector<double> x;
  std::vector<double> mean, lo, hi;
  int runs = 0;
};

struct LoadReport {
  std::vector<Run> runs;
  std::vector<std::string> problems;  // one line per rejected file
};

inline std::string group_of(const RunConfig& c) {
  return to_string(c.algo.mode) + " beta=" + config_detail::fmt_double(c.algo.beta);
}

inline LoadReport load_runs(const std::vector<std::string>& dirs) {
  LoadReport rep;
  for (const auto& d : dirs) {
    const fs::path csv = fs::path(d) / "metrics.csv";
    const fs::path ini = fs::path(d) / "config.ini";
    try {
      if (!fs::exists(csv)) throw std::runtime_error(csv.string() + ": missing");
      RunConfig cfg = fs::exists(ini) ? parse_config(ini.string()) : RunConfig{};
      metrics::Table t = metrics::read_csv(csv.string());
      const int n = t.n_agents();
      std::vector<std::string> missing;
      for (const auto& c : metrics::header(std::max(n, 1))) {
        if (t.column(c) < 0) missing.push_back(c);
      }
      if (!missing.empty()) {
        std::string m;
        for (const auto& c : missing) m += (m.empty() ? "" : ", ") + c;
        throw std::runtime_error(csv.string() + ": missing columns: " + m);
      }
      if (t.columns != metrics::header(n)) throw std::runtime_error(csv.string() + ": unexpected column layout");
      rep.runs.push_back({d, group_of(cfg), std::move(t)});
    } catch (const std::exception& e) {
      rep.problems.push_back(e.what());
    }
  }
  return rep;
}

// Per-iteration value of a metric. Per-agent metrics are averaged over agents.
inline std::vector<std::pair<double, double>> metric_points(const metrics::Table& t, const std::string& metric) {
  std::vector<std::pair<double, double>> out;
  const int it = t.column("iteration");
  std::vector<int> cols;
  if (t.column(metric) >= 0) {
    cols.push_back(t.column(metric));
  } else {
    for (int i = 0; i < t.n_agents(); ++i) cols.push_back(t.column(metric + "_" + std::to_string(i)));
  }
  for (const auto& r : t.rows) {
    double s = 0.0;
    int n = 0;
    for (int c : cols) {
      if (c >= 0 && std::isfinite(r[static_cast<std::size_t>(c)])) {
        s += r[static_cast<std::size_t>(c)];
        ++n;
      }
    }
    if (n > 0) out.emplace_back(r[static_cast<std::size_t>(it)], s / n);
  }
  return out;
}

inline Series aggregate(const std::vector<const Run*>& runs, const std::string& metric) {
  std::map<double, std::vector<double>> by_x;
  for (const Run* r : runs) {
    for (const auto& [x, y] : metric_points(r->table, metric)) by_x[x].push_back(y);
  }
  Series s;
  s.runs = static_cast<int>(runs.size());
  for (const auto& [x, ys] : by_x) {
    double sum = 0.0;
    for (double y : ys) sum += y;
    s.x.push_back(x);
    s.mean.push_back(sum / static_cast<double>(ys.size()));
    s.lo.push_back(*std::min_element(ys.begin(), ys.end()));
    s.hi.push_back(*std::max_element(ys.begin(), ys.end()));
  }
  return s;
}

inline const std::vector<std::pair<std::string, std::string>>& plotted_metrics() {
  static const std::vector<std::pair<std::string, std::string>> m{
      {"episodic_reward_mean", "Mean Episodic Reward"},
      {"intrinsic_reward_mean", "Mean Intrinsic Reward"},
      {"dynamics_loss", "Mean Dynamics Model Loss"},
      {"policy_loss", "Policy Loss"},
      {"value_loss", "Value Loss"},
  };
  return m;
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline const char* color(std::size_t k) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return palette[k % (sizeof palette / sizeof *palette)];
}

}  // namespace detail

inline std::string render_svg(const std::string& title, const std::map<std::string, Series>& groups) {
  const double W = 720, H = 440, left = 70, right = 190, top = 40, bottom = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& [name, s] : groups) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.lo[k]);
      y1 = std::max(y1, s.hi[k]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + (y1 - y) / (y1 - y0) * ph; };

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::px(W) + "\" height=\"" + detail::px(H) +
       "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + detail::px(left) + "\" y=\"24\" font-size=\"15\">" + title + "</text>\n";
  o += "<rect x=\"" + detail::px(left) + "\" y=\"" + detail::px(top) + "\" width=\"" + detail::px(pw) + "\" height=\"" +
       detail::px(ph) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fy = y0 + (y1 - y0) * k / 4.0;
    const double fx = x0 + (x1 - x0) * k / 4.0;
    o += "<text x=\"" + detail::px(left - 6) + "\" y=\"" + detail::px(sy(fy) + 4) + "\" text-anchor=\"end\">" +
         detail::num(fy) + "</text>\n";
    o += "<text x=\"" + detail::px(sx(fx)) + "\" y=\"" + detail::px(top + ph + 18) + "\" text-anchor=\"middle\">" +
         detail::num(fx) + "</text>\n";
  }
  o += "<text x=\"" + detail::px(left + pw / 2) + "\" y=\"" + detail::px(H - 10) +
       "\" text-anchor=\"middle\">iteration</text>\n";

  std::size_t gi = 0;
  for (const auto& [name, s] : groups) {
    const char* c = detail::color(gi);
    if (s.runs > 1 && !s.x.empty()) {
      std::string pts;
      for (std::size_t k = 0; k < s.x.size(); ++k) pts += detail::px(sx(s.x[k])) + "," + detail::px(sy(s.hi[k])) + " ";
      for (std::size_t k = s.x.size(); k-- > 0;) pts += detail::px(sx(s.x[k])) + "," + detail::px(sy(s.lo[k])) + " ";
      o += "<polygon class=\"band\" points=\"" + pts + "\" fill=\"" + c + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t k = 0; k < s.x.size(); ++k) pts += detail::px(sx(s.x[k])) + "," + detail::px(sy(s.mean[k])) + " ";
    o += "<polyline class=\"mean\" points=\"" + pts + "\" fill=\"none\" stroke=\"" + c + "\" stroke-width=\"1.5\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(gi);
    o += "<line x1=\"" + detail::px(W - right + 12) + "\" y1=\"" + detail::px(ly) + "\" x2=\"" +
         detail::px(W - right + 32) + "\" y2=\"" + detail::px(ly) + "\" stroke=\"" + c + "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + detail::px(W - right + 38) + "\" y=\"" + detail::px(ly + 4) + "\">" + name + " (n=" +
         std::to_string(s.runs) + ")</text>\n";
    ++gi;
  }
  o += "</svg>\n";
  return o;
}

struct PlotOutput {
  std::vector<std::string> files;
  std::vector<std::string> problems;
};

// Writes <out>/<metric>.svg for every plotted metric and <out>/merged.csv.
inline PlotOutput plot_runs(const std::vector<std::string>& dirs, const std::string& out_dir) {
  LoadReport rep = load_runs(dirs);
  PlotOutput out;
  out.problems = rep.problems;
  if (rep.runs.empty()) return out;
  fs::create_directories(out_dir);

  std::map<std::string, std::vector<const Run*>> groups;
  for (const auto& r : rep.runs) groups[r.group].push_back(&r);

  for (const auto& [metric, title] : plotted_metrics()) {
    std::map<std::string, Series> series;
    for (const auto& [g, runs] : groups) series[g] = aggregate(runs, metric);
    const std::string path = (fs::path(out_dir) / (metric + ".svg")).string();
    std::ofstream f(path, std::ios::trunc);
    f << render_svg(title, series);
    out.files.push_back(path);
  }

  const std::string merged = (fs::path(out_dir) / "merged.csv").string();
  std::ofstream f(merged, std::ios::trunc);
  f << "run,group,iteration,metric,value\n";
  for (const auto& r : rep.runs) {
    const int it = r.table.column("iteration");
    for (const auto& row : r.table.rows) {
      for (std::size_t c = 0; c < r.table.columns.size(); ++c) {
        if (static_cast<int>(c) == it) continue;
        f << r.dir << ',' << r.group << ',' << metrics::format_value(row[static_cast<std::size_t>(it)]) << ','
          << r.table.columns[c] << ',' << metrics::format_value(row[c]) << '\n';
      }
    }
  }
  out.files.push_back(merged);
  return out;
}

}  // namespace cohet::plot
