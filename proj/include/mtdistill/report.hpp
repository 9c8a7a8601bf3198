#pragma once

// Aggregates grid summaries (ablation.json, sweep.json, reduction.json) and single-run
// reports into plain-text tables, CSV, and SVG line plots.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtdistill/errors.hpp"
#include "mtdistill/evaluator.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

inline std::string svg_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// A minimal line chart. `reference` draws a dotted horizontal line (e.g. the 100% FF score).
inline std::string render_svg_plot(const std::vector<Series>& series, const std::string& x_label,
                                   const std::string& y_label, std::optional<std::pair<std::string, double>> reference = {}) {
  const double W = 640, H = 420, L = 70, R = 20, T = 30, B = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (reference) {
    ymin = std::min(ymin, reference->second);
    ymax = std::max(ymax, reference->second);
  }
  if (xmin > xmax) xmin = 0, xmax = 1;
  if (ymin > ymax) ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 0.1, ymin -= 0.1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + format_fixed(W, 0) + "\" height=\"" +
                    format_fixed(H, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<line x1=\"" + format_fixed(L, 1) + "\" y1=\"" + format_fixed(H - B, 1) + "\" x2=\"" + format_fixed(W - R, 1) +
         "\" y2=\"" + format_fixed(H - B, 1) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + format_fixed(L, 1) + "\" y1=\"" + format_fixed(T, 1) + "\" x2=\"" + format_fixed(L, 1) +
         "\" y2=\"" + format_fixed(H - B, 1) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double yv = ymin + (ymax - ymin) * i / 4.0, xv = xmin + (xmax - xmin) * i / 4.0;
    out += "<text x=\"" + format_fixed(L - 8, 1) + "\" y=\"" + format_fixed(py(yv) + 4, 1) +
           "\" text-anchor=\"end\">" + format_fixed(yv, 3) + "</text>\n";
    out += "<text x=\"" + format_fixed(px(xv), 1) + "\" y=\"" + format_fixed(H - B + 18, 1) +
           "\" text-anchor=\"middle\">" + format_fixed(xv, 3) + "</text>\n";
  }
  out += "<text x=\"" + format_fixed((L + W - R) / 2, 1) + "\" y=\"" + format_fixed(H - 15, 1) +
         "\" text-anchor=\"middle\">" + svg_escape(x_label) + "</text>\n";
  out += "<text x=\"15\" y=\"" + format_fixed((T + H - B) / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 15 " +
         format_fixed((T + H - B) / 2, 1) + ")\">" + svg_escape(y_label) + "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    std::string pts;
    for (auto [x, y] : series[s].points) pts += format_fixed(px(x), 1) + "," + format_fixed(py(y), 1) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (auto [x, y] : series[s].points)
      out += "<circle cx=\"" + format_fixed(px(x), 1) + "\" cy=\"" + format_fixed(py(y), 1) + "\" r=\"3\" fill=\"" +
             color + "\"/>\n";
    out += "<text x=\"" + format_fixed(W - R - 150, 1) + "\" y=\"" + format_fixed(T + 14 * (s + 1), 1) + "\" fill=\"" +
           color + "\">" + svg_escape(series[s].label) + "</text>\n";
  }
  if (reference) {
    out += "<line x1=\"" + format_fixed(L, 1) + "\" y1=\"" + format_fixed(py(reference->second), 1) + "\" x2=\"" +
           format_fixed(W - R, 1) + "\" y2=\"" + format_fixed(py(reference->second), 1) +
           "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
    out += "<text x=\"" + format_fixed(L + 6, 1) + "\" y=\"" + format_fixed(py(reference->second) - 4, 1) +
           "\" fill=\"gray\">" + svg_escape(reference->first) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

struct ReportOutput {
  std::string text;
  std::vector<std::string> written;
};

/// Renders whatever summaries exist in `run_dir` and writes report.txt, *.csv and *.svg there.
inline ReportOutput write_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw ConfigError("not a run directory: " + run_dir.string());
  ReportOutput out;
  auto emit = [&](const std::string& name, const std::string& content) {
    util::write_file_atomic(run_dir / name, content);
    out.written.push_back((run_dir / name).string());
  };

  if (fs::exists(run_dir / "eval_report.json")) {
    auto r = util::read_json(run_dir / "eval_report.json").get<EvalReport>();
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    std::string csv = "dataset,accuracy,n,extraction_failures\n";
    for (const auto& [name, s] : r.datasets) {
      rows.push_back({name, {format_fixed(s.accuracy, 4), std::to_string(s.n), std::to_string(s.extraction_failures)}});
      csv += csv_field(name) + "," + format_fixed(s.accuracy, 6) + "," + std::to_string(s.n) + "," +
             std::to_string(s.extraction_failures) + "\n";
    }
    rows.push_back({"overall", {format_fixed(r.overall, 4), "", ""}});
    for (const auto& [b, d] : r.deltas) rows.push_back({"delta vs " + b, {format_fixed(100 * d, 2) + "%", "", ""}});
    out.text += render_table({"accuracy", "n", "failures"}, rows, "Evaluation") + "\n";
    emit("eval.csv", csv);
  }

  if (fs::exists(run_dir / "ablation.json")) {
    auto j = util::read_json(run_dir / "ablation.json");
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    std::string csv = "variant,overall\n";
    for (const auto& v : j.at("variants")) {
      rows.push_back({v.at("variant").get<std::string>(), {format_fixed(v.at("overall").get<double>(), 4)}});
      csv += csv_field(v.at("variant").get<std::string>()) + "," + format_fixed(v.at("overall").get<double>(), 6) + "\n";
    }
    out.text += render_table({"accuracy"}, rows, "Ablation") + "\n";
    emit("ablation.csv", csv);
  }

  if (fs::exists(run_dir / "sweep.json")) {
    auto j = util::read_json(run_dir / "sweep.json");
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    std::string csv = "alphas,overall\n";
    std::map<std::string, Series> by_teacher;
    for (const auto& p : j.at("points")) {
      std::string label;
      for (const auto& [t, v] : p.at("alphas").items())
        label += (label.empty() ? "" : " ") + t + "=" + format_fixed(v.get<double>(), 2);
      double acc = p.at("overall").get<double>();
      rows.push_back({label, {format_fixed(acc, 4)}});
      csv += csv_field(label) + "," + format_fixed(acc, 6) + "\n";
      // Cross-product grids have no single varied axis and are left out of the plot.
      auto swept = p.value("swept", std::string{});
      if (swept.empty()) continue;
      const auto& alphas = p.at("alphas");
      double x = swept == "all" ? alphas.begin()->get<double>() : alphas.at(swept).get<double>();
      by_teacher[swept].label = swept == "all" ? "joint alpha" : "alpha of " + swept;
      by_teacher[swept].points.emplace_back(x, acc);
    }
    out.text += render_table({"accuracy"}, rows, "Alpha sweep") + "\n";
    emit("sweep.csv", csv);
    std::vector<Series> series;
    for (auto& [_, s] : by_teacher) {
      std::sort(s.points.begin(), s.points.end());
      s.points.erase(std::unique(s.points.begin(), s.points.end(),
                                 [](auto a, auto b) { return a.first == b.first; }),
                     s.points.end());
      series.push_back(s);
    }
    emit("accuracy_vs_alpha.svg", render_svg_plot(series, "alpha", "accuracy"));
  }

  if (fs::exists(run_dir / "reduction.json")) {
    auto j = util::read_json(run_dir / "reduction.json");
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    std::string csv = "ratio,overall\n";
    Series s{"distilled student", {}};
    for (const auto& p : j.at("points")) {
      double r = p.at("ratio").get<double>(), acc = p.at("overall").get<double>();
      rows.push_back({format_fixed(100 * r, 1) + "%", {format_fixed(acc, 4)}});
      csv += format_fixed(r, 4) + "," + format_fixed(acc, 6) + "\n";
      s.points.emplace_back(r, acc);
    }
    std::optional<std::pair<std::string, double>> ref;
    if (j.contains("ff_reference")) {
      double ff = j.at("ff_reference").at("overall").get<double>();
      rows.push_back({"FF 100%", {format_fixed(ff, 4)}});
      csv += "ff_reference," + format_fixed(ff, 6) + "\n";
      ref = std::make_pair(std::string("full fine-tuning, 100% data"), ff);
    }
    std::sort(s.points.begin(), s.points.end());
    out.text += render_table({"accuracy"}, rows, "Training-set reduction") + "\n";
    emit("reduction.csv", csv);
    emit("accuracy_vs_ratio.svg", render_svg_plot({s}, "fraction of training data", "accuracy", ref));
  }

  if (out.text.empty()) throw DataError("no summaries found in " + run_dir.string());
  emit("report.txt", out.text);
  return out;
}

/// The shipped baseline table with recomputed deltas, laid out like the published grid.
inline std::string render_baseline_table(const BaselineTable& t) {
  std::string out;
  std::vector<std::pair<std::string, std::vector<std::string>>> teachers;
  for (const auto& [name, v] : t.teachers) teachers.push_back({name, format_row(v)});
  out += render_table(t.columns, teachers, "Teachers") + "\n";
  for (const auto& size : t.student_order) {
    const auto& s = t.students.at(size);
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    for (const auto& [name, v] : s.rows) rows.push_back({name, format_row(v)});
    const auto& method = s.row(t.method_row);
    for (const auto& [baseline, _] : s.printed_deltas_pct) {
      const auto& b = s.row(baseline);
      std::vector<std::string> cells;
      for (std::size_t i = 0; i < method.size(); ++i)
        cells.push_back(format_fixed(100 * delta_report(method[i], {{"b", b[i]}}).at("b"), 2) + "%");
      rows.push_back({"delta vs " + baseline, cells});
    }
    out += render_table(t.columns, rows, size + " student") + "\n";
  }
  return out;
}

}  // namespace mtdistill
