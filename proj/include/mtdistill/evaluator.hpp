#pragma once

// Answer extraction, accuracy, student explanations, and relative-improvement deltas.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/prompting.hpp"
#include "mtdistill/student.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

inline constexpr double kExtractionThreshold = 0.6;

enum class ExtractionStage { label, text, overlap, none };

struct Extraction {
  std::optional<std::size_t> index;
  ExtractionStage stage = ExtractionStage::none;
};

namespace detail {

/// Length of the longest common substring.
inline std::size_t longest_common_substring(std::string_view a, std::string_view b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  std::size_t best = 0;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(prev, cur);
  }
  return best;
}

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

/// `needle` occurs in `hay` with non-word characters (or the ends) on both sides.
inline bool contains_bounded(std::string_view hay, std::string_view needle) {
  if (needle.empty()) return false;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) {
    bool left = pos == 0 || !is_word_char(hay[pos - 1]) || !is_word_char(needle.front());
    auto end = pos + needle.size();
    bool right = end == hay.size() || !is_word_char(hay[end]) || !is_word_char(needle.back());
    if (left && right) return true;
  }
  return false;
}

}  // namespace detail

/// Cascade: (1) leading "(x)" or "x)" label; (2) exact case-insensitive option text, else the
/// longest option found inside the output at word boundaries; (3) best longest-common-substring
/// overlap (normalized by option length) strictly above `threshold`. Ties go to the lowest index.
inline Extraction extract_answer_detailed(std::string_view generated, const std::vector<std::string>& options,
                                          double threshold = kExtractionThreshold) {
  auto text = util::to_lower(util::normalize_ws(generated));

  // Stage 1.
  std::string_view t = text;
  if (t.size() >= 3 && t[0] == '(' && t[1] >= 'a' && t[1] <= 'z' && t[2] == ')') {
    std::size_t idx = static_cast<std::size_t>(t[1] - 'a');
    if (idx < options.size()) return {idx, ExtractionStage::label};
  } else if (t.size() >= 2 && t[0] >= 'a' && t[0] <= 'z' && t[1] == ')') {
    std::size_t idx = static_cast<std::size_t>(t[0] - 'a');
    if (idx < options.size()) return {idx, ExtractionStage::label};
  }

  std::vector<std::string> norm;
  norm.reserve(options.size());
  for (const auto& o : options) norm.push_back(util::to_lower(util::normalize_ws(o)));

  // Stage 2.
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (!norm[i].empty() && norm[i] == text) return {i, ExtractionStage::text};
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (detail::contains_bounded(text, norm[i]) && (!best || norm[i].size() > norm[*best].size())) best = i;
  if (best) return {best, ExtractionStage::text};

  // Stage 3.
  double best_score = threshold;
  for (std::size_t i = 0; i < norm.size(); ++i) {
    if (norm[i].empty()) continue;
    double score = static_cast<double>(detail::longest_common_substring(text, norm[i])) /
                   static_cast<double>(norm[i].size());
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  if (best) return {best, ExtractionStage::overlap};
  return {};
}

inline std::optional<std::size_t> extract_answer(std::string_view generated, const std::vector<std::string>& options,
                                                 double threshold = kExtractionThreshold) {
  return extract_answer_detailed(generated, options, threshold).index;
}

struct DatasetScore {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t correct = 0;
  std::size_t extraction_failures = 0;
};

inline void to_json(json& j, const DatasetScore& s) {
  j = json{{"accuracy", s.accuracy}, {"n", s.n}, {"correct", s.correct}, {"extraction_failures", s.extraction_failures}};
}

inline void from_json(const json& j, DatasetScore& s) {
  s.accuracy = j.at("accuracy").get<double>();
  s.n = j.at("n").get<std::size_t>();
  s.correct = j.value("correct", static_cast<std::size_t>(s.accuracy * static_cast<double>(s.n) + 0.5));
  s.extraction_failures = j.at("extraction_failures").get<std::size_t>();
}

struct ItemPrediction {
  std::string item_id;
  std::string generated;
  std::optional<std::size_t> predicted;
  bool correct = false;
};

struct EvalResult {
  DatasetScore score;
  std::vector<ItemPrediction> predictions;
};

/// Greedy-decodes every item under the answer prefix. A decode failure counts as an
/// extraction failure and the run continues.
inline EvalResult evaluate(const Student& student, const DatasetSplit& split, const PrefixConfig& prefixes,
                           double threshold = kExtractionThreshold) {
  if (split.items.empty()) throw EvalError("cannot evaluate an empty split (accuracy undefined)");
  EvalResult r;
  for (const auto& item : split.items) {
    ItemPrediction p{item.id, {}, std::nullopt, false};
    try {
      p.generated = student.greedy_decode(build_student_input(item, prefixes, prefixes.answer_prefix));
      p.predicted = extract_answer(p.generated, item.options, threshold);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      p.predicted.reset();
    }
    if (!p.predicted) ++r.score.extraction_failures;
    p.correct = p.predicted && *p.predicted == item.answer_index;
    r.score.correct += p.correct;
    r.predictions.push_back(std::move(p));
  }
  r.score.n = split.items.size();
  r.score.accuracy = static_cast<double>(r.score.correct) / static_cast<double>(r.score.n);
  return r;
}

/// The student's rationale under a teacher prefix, verbatim.
inline std::string explain(const Student& student, const MCQAItem& item, const PrefixConfig& prefixes,
                           std::string_view teacher_prefix) {
  if (!prefixes.contains(teacher_prefix) || teacher_prefix == prefixes.answer_prefix)
    throw ConfigError("unknown teacher prefix '" + std::string(teacher_prefix) + "'");
  auto input = build_student_input(item, prefixes, teacher_prefix);
  try {
    return student.greedy_decode(input);
  } catch (const std::exception& e) {
    throw EvalError(std::string("decode failed for item '") + item.id + "': " + e.what());
  }
}

inline std::map<std::string, double> delta_report(double overall, const std::map<std::string, double>& baselines) {
  std::map<std::string, double> out;
  for (const auto& [name, b] : baselines) {
    if (!(b > 0.0)) throw DomainError("baseline '" + name + "' must be > 0");
    out[name] = (overall - b) / b;
  }
  return out;
}

/// Unweighted mean of per-dataset scores.
inline double overall_score(const std::vector<double>& scores) {
  if (scores.empty()) throw EvalError("no dataset scores");
  double s = 0.0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

struct EvalReport {
  std::map<std::string, DatasetScore> datasets;
  double overall = 0.0;
  std::map<std::string, double> deltas;

  void recompute_overall() {
    std::vector<double> acc;
    for (const auto& [_, s] : datasets) acc.push_back(s.accuracy);
    overall = overall_score(acc);
  }
};

inline void to_json(json& j, const EvalReport& r) {
  j = json{{"datasets", r.datasets}, {"overall", r.overall}, {"deltas", r.deltas}};
}

inline void from_json(const json& j, EvalReport& r) {
  r.datasets = j.at("datasets").get<std::map<std::string, DatasetScore>>();
  r.overall = j.at("overall").get<double>();
  r.deltas = j.value("deltas", std::map<std::string, double>{});
}

// ---------------------------------------------------------------------------
// Baseline tables
// ---------------------------------------------------------------------------

/// Published comparison rows: per student size, method name -> per-column scores (last column
/// is the total), plus the deltas as printed alongside them.
struct BaselineTable {
  std::vector<std::string> columns;
  std::string method_row;
  std::map<std::string, std::vector<double>> teachers;
  struct Size {
    std::vector<std::pair<std::string, std::vector<double>>> rows;  // file order
    std::map<std::string, std::vector<double>> printed_deltas_pct;
    std::map<std::string, double> printed_teacher_deltas_pct;

    const std::vector<double>& row(const std::string& name) const {
      for (const auto& [n, v] : rows)
        if (n == name) return v;
      throw DataError("no baseline row '" + name + "'");
    }
  };
  std::map<std::string, Size> students;
  std::vector<std::string> student_order;

  static BaselineTable load(const std::filesystem::path& path) {
    auto j = util::read_json(path);
    BaselineTable t;
    try {
      t.columns = j.at("columns").get<std::vector<std::string>>();
      t.method_row = j.at("method_row").get<std::string>();
      t.teachers = j.at("teachers").get<std::map<std::string, std::vector<double>>>();
      for (const auto& [size, body] : j.at("students").items()) {
        Size s;
        for (const auto& [name, vals] : body.at("rows").items()) s.rows.emplace_back(name, vals.get<std::vector<double>>());
        s.printed_deltas_pct = body.at("printed_deltas_pct").get<std::map<std::string, std::vector<double>>>();
        if (body.contains("printed_teacher_deltas_pct"))
          s.printed_teacher_deltas_pct = body.at("printed_teacher_deltas_pct").get<std::map<std::string, double>>();
        t.student_order.push_back(size);
        t.students.emplace(size, std::move(s));
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("baseline table: ") + e.what());
    }
    for (const auto& [name, v] : t.teachers)
      if (v.size() != t.columns.size()) throw DataError("teacher row '" + name + "' has wrong width");
    for (const auto& [size, s] : t.students)
      for (const auto& [name, v] : s.rows)
        if (v.size() != t.columns.size()) throw DataError("row '" + name + "' (" + size + ") has wrong width");
    return t;
  }
};

inline std::string format_fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Plain-text grid: a header of column names and one line per row.
inline std::string render_table(const std::vector<std::string>& columns,
                                const std::vector<std::pair<std::string, std::vector<std::string>>>& rows,
                                std::string_view title = {}) {
  std::size_t label_w = 6;
  for (const auto& [label, _] : rows) label_w = std::max(label_w, label.size());
  std::vector<std::size_t> w(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    w[c] = columns[c].size();
    for (const auto& [_, cells] : rows)
      if (c < cells.size()) w[c] = std::max(w[c], cells[c].size());
  }
  auto pad = [](const std::string& s, std::size_t width, bool right) {
    std::string fill(width > s.size() ? width - s.size() : 0, ' ');
    return right ? fill + s : s + fill;
  };
  std::string out;
  if (!title.empty()) out += std::string(title) + "\n";
  std::string header = pad("", label_w, false);
  for (std::size_t c = 0; c < columns.size(); ++c) header += "  " + pad(columns[c], w[c], true);
  out += header + "\n" + std::string(header.size(), '-') + "\n";
  for (const auto& [label, cells] : rows) {
    std::string line = pad(label, label_w, false);
    for (std::size_t c = 0; c < columns.size(); ++c) line += "  " + pad(c < cells.size() ? cells[c] : "", w[c], true);
    out += line + "\n";
  }
  return out;
}

inline std::vector<std::string> format_row(const std::vector<double>& v, int digits = 2) {
  std::vector<std::string> out;
  for (double x : v) out.push_back(format_fixed(x, digits));
  return out;
}

}  // namespace mtdistill
