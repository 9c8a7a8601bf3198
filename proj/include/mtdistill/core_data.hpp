#pragma once

// Canonical multiple-choice QA records: loading, validation, subsampling.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mtdistill/errors.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

/// One k-way question with its options and the index of the gold option.
struct MCQAItem {
  std::string id;
  std::string dataset;
  std::string question;
  std::vector<std::string> options;
  std::size_t answer_index = 0;

  const std::string& answer_text() const { return options.at(answer_index); }

  bool operator==(const MCQAItem&) const = default;
};

struct DatasetSplit {
  std::string name;  // train | dev | test
  std::vector<MCQAItem> items;
  std::string source_path;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }

  bool operator==(const DatasetSplit&) const = default;
};

inline void to_json(json& j, const MCQAItem& item) {
  j = json{{"id", item.id},
           {"dataset", item.dataset},
           {"question", item.question},
           {"options", item.options},
           {"answer_index", item.answer_index}};
}

/// Returns the violated invariants of `item`; empty means valid.
inline std::vector<std::string> validate_item(const MCQAItem& item) {
  std::vector<std::string> violations;
  if (item.options.size() < 2) violations.emplace_back("k ≥ 2 violated");
  bool empty_option = false;
  for (const auto& o : item.options) empty_option |= util::trim(o).empty();
  if (empty_option) violations.emplace_back("empty option text");
  std::set<std::string> seen;
  bool duplicate = false;
  for (const auto& o : item.options) {
    auto norm = util::normalize_ws(o);
    if (!norm.empty() && !seen.insert(norm).second) duplicate = true;
  }
  if (duplicate) violations.emplace_back("duplicate option texts");
  if (item.answer_index >= item.options.size()) violations.emplace_back("answer_index out of range");
  return violations;
}

/// Maps a raw gold label to an option index. Accepts a letter ("A".."Z", either case) or
/// the exact text of one option. Returns nullopt when the label matches nothing or is ambiguous.
inline std::optional<std::size_t> resolve_answer_label(std::string_view label, const std::vector<std::string>& options) {
  auto trimmed = util::trim(label);
  std::optional<std::size_t> by_letter;
  if (trimmed.size() == 1 && std::isalpha(static_cast<unsigned char>(trimmed[0]))) {
    auto idx = static_cast<std::size_t>(std::toupper(static_cast<unsigned char>(trimmed[0])) - 'A');
    if (idx < options.size()) by_letter = idx;
  }
  std::vector<std::size_t> by_text;
  for (std::size_t i = 0; i < options.size(); ++i)
    if (options[i] == trimmed) by_text.push_back(i);
  if (by_text.size() > 1) return std::nullopt;
  if (by_letter && !by_text.empty() && by_text.front() != *by_letter) return std::nullopt;
  if (by_letter) return by_letter;
  if (!by_text.empty()) return by_text.front();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Raw adapters
// ---------------------------------------------------------------------------

/// Converts one raw record into an MCQAItem. `dataset` is the caller-supplied dataset name.
using RawAdapter = std::function<MCQAItem(const json& record, const std::string& dataset)>;

namespace detail {

inline std::string require_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) throw ParseError(std::string("missing string field '") + key + "'");
  return j.at(key).get<std::string>();
}

inline std::string id_or_empty(const json& j) {
  if (!j.contains("id")) return {};
  const auto& v = j.at("id");
  return v.is_string() ? v.get<std::string>() : v.dump();
}

/// Out-of-range sentinel so unresolved labels surface as validation errors naming the id.
inline std::size_t label_or_invalid(std::string_view label, const std::vector<std::string>& options) {
  auto idx = resolve_answer_label(label, options);
  return idx ? *idx : options.size();
}

inline MCQAItem adapt_ai2(const json& r, const std::string& dataset) {
  // {"id", "question": {"stem", "choices": [{"label", "text"}]}, "answerKey"}
  MCQAItem item;
  item.id = id_or_empty(r);
  item.dataset = dataset;
  if (!r.contains("question") || !r.at("question").is_object()) throw ParseError("missing object field 'question'");
  const auto& q = r.at("question");
  item.question = require_string(q, "stem");
  if (!q.contains("choices") || !q.at("choices").is_array()) throw ParseError("missing array field 'choices'");
  std::vector<std::string> labels;
  for (const auto& c : q.at("choices")) {
    item.options.push_back(require_string(c, "text"));
    labels.push_back(c.contains("label") ? c.at("label").get<std::string>() : std::string{});
  }
  auto key = require_string(r, "answerKey");
  auto it = std::find(labels.begin(), labels.end(), key);
  item.answer_index = it != labels.end() ? static_cast<std::size_t>(it - labels.begin())
                                         : label_or_invalid(key, item.options);
  return item;
}

inline MCQAItem adapt_letter_label(const json& r, const std::string& dataset) {
  // {"id", "question", "options": [...], "answer": "B" | option text}
  MCQAItem item;
  item.id = id_or_empty(r);
  item.dataset = r.contains("dataset") ? r.at("dataset").get<std::string>() : dataset;
  item.question = require_string(r, "question");
  if (!r.contains("options") || !r.at("options").is_array()) throw ParseError("missing array field 'options'");
  item.options = r.at("options").get<std::vector<std::string>>();
  item.answer_index = label_or_invalid(require_string(r, "answer"), item.options);
  return item;
}

inline MCQAItem adapt_piqa(const json& r, const std::string& dataset) {
  // {"id", "goal", "sol1", "sol2", "label": 0|1}
  MCQAItem item;
  item.id = id_or_empty(r);
  item.dataset = dataset;
  item.question = require_string(r, "goal");
  item.options = {require_string(r, "sol1"), require_string(r, "sol2")};
  if (!r.contains("label") || !r.at("label").is_number_integer()) throw ParseError("missing integer field 'label'");
  item.answer_index = r.at("label").get<std::size_t>();
  return item;
}

inline MCQAItem adapt_pubmedqa(const json& r, const std::string& dataset) {
  // {"id", "question", "final_decision": "yes"|"no"|"maybe"}
  MCQAItem item;
  item.id = id_or_empty(r);
  item.dataset = dataset;
  item.question = require_string(r, "question");
  item.options = {"yes", "no", "maybe"};
  item.answer_index = label_or_invalid(util::to_lower(require_string(r, "final_decision")), item.options);
  return item;
}

inline MCQAItem adapt_bioasq(const json& r, const std::string& dataset) {
  // yes/no subset: {"id", "body", "exact_answer": "yes"|"no"}
  MCQAItem item;
  item.id = id_or_empty(r);
  item.dataset = dataset;
  item.question = require_string(r, "body");
  item.options = {"yes", "no"};
  item.answer_index = label_or_invalid(util::to_lower(require_string(r, "exact_answer")), item.options);
  return item;
}

inline std::map<std::string, RawAdapter>& adapter_registry() {
  static std::map<std::string, RawAdapter> registry = {
      {"ai2", adapt_ai2},              // OpenBookQA, ARC, RiddleSense (CommonsenseQA layout)
      {"obqa", adapt_ai2},
      {"arc", adapt_ai2},
      {"riddlesense", adapt_ai2},
      {"letter-label", adapt_letter_label},
      {"piqa", adapt_piqa},
      {"pubmedqa", adapt_pubmedqa},
      {"bioasq", adapt_bioasq},
  };
  return registry;
}

}  // namespace detail

/// Registers (or replaces) a named raw adapter, usable as "raw-adapter:<name>".
inline void register_adapter(const std::string& name, RawAdapter adapter) {
  detail::adapter_registry()[name] = std::move(adapter);
}

inline std::vector<std::string> registered_adapters() {
  std::vector<std::string> names;
  for (const auto& [name, _] : detail::adapter_registry()) names.push_back(name);
  return names;
}

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

struct LoadOptions {
  std::string split_name = "train";
  /// Dataset name given to records that do not carry one (raw adapters). Defaults to the file stem.
  std::string dataset;
};

inline MCQAItem item_from_canonical(const json& j) {
  MCQAItem item;
  item.id = detail::require_string(j, "id");
  item.dataset = detail::require_string(j, "dataset");
  item.question = detail::require_string(j, "question");
  if (!j.contains("options") || !j.at("options").is_array()) throw ParseError("missing array field 'options'");
  for (const auto& o : j.at("options")) {
    if (!o.is_string()) throw ParseError("option is not a string");
    item.options.push_back(o.get<std::string>());
  }
  if (!j.contains("answer_index") || !j.at("answer_index").is_number_integer() || j.at("answer_index").get<long long>() < 0)
    throw ParseError("missing non-negative integer field 'answer_index'");
  item.answer_index = j.at("answer_index").get<std::size_t>();
  return item;
}

/// Validates every item and id uniqueness; throws ValidationError listing offending ids.
inline void validate_split(const DatasetSplit& split) {
  std::vector<std::string> bad;
  std::string detail;
  std::unordered_set<std::string> ids;
  for (const auto& item : split.items) {
    auto v = validate_item(item);
    if (!ids.insert(item.id).second) v.emplace_back("duplicate id");
    if (item.id.empty()) v.emplace_back("empty id");
    if (!v.empty()) {
      bad.push_back(item.id);
      detail += "\n  " + (item.id.empty() ? std::string("<no id>") : item.id) + ": " + util::join(v, "; ");
    }
  }
  if (!bad.empty())
    throw ValidationError("invalid records in " + (split.source_path.empty() ? split.name : split.source_path) + ":" + detail,
                          std::move(bad));
}

/// Loads a split. `format_id` is "canonical-jsonl" or "raw-adapter:<name>".
inline DatasetSplit load_dataset(const std::filesystem::path& path, std::string_view format_id, LoadOptions opts = {}) {
  if (!std::filesystem::exists(path)) throw Error("dataset file not found: " + path.string());
  RawAdapter adapter;
  if (format_id == "canonical-jsonl") {
    adapter = [](const json& j, const std::string&) { return item_from_canonical(j); };
  } else if (format_id.starts_with("raw-adapter:")) {
    auto name = std::string(format_id.substr(12));
    auto& reg = detail::adapter_registry();
    auto it = reg.find(name);
    if (it == reg.end()) throw ConfigError("unknown raw adapter '" + name + "'");
    adapter = it->second;
  } else {
    throw ConfigError("unknown dataset format '" + std::string(format_id) + "'");
  }
  std::string dataset = opts.dataset.empty() ? path.stem().string() : opts.dataset;

  DatasetSplit split;
  split.name = opts.split_name;
  split.source_path = path.string();
  util::for_each_jsonl(path, [&](std::size_t line, const json& j) {
    try {
      split.items.push_back(adapter(j, dataset));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line);
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  });
  validate_split(split);
  return split;
}

inline void write_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  std::string out;
  for (const auto& item : split.items) out += json(item).dump() + "\n";
  util::write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Target size for a ratio: round-half-up of ratio * n, at least 1 for non-empty input.
inline std::size_t subsample_size(std::size_t n, double ratio) {
  if (n == 0) return 0;
  auto k = static_cast<std::size_t>(util::round_half_up(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Samples without replacement, keeping the original relative order. For a fixed seed the
/// sampled sets are nested across ratios.
inline DatasetSplit subsample(const DatasetSplit& split, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0) throw DomainError("subsample ratio must lie in (0, 1], got " + std::to_string(ratio));
  const auto n = split.items.size();
  const auto k = subsample_size(n, ratio);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  std::sort(order.begin(), order.end());

  DatasetSplit out;
  out.name = split.name;
  out.source_path = split.source_path;
  out.items.reserve(k);
  for (auto i : order) out.items.push_back(split.items[i]);
  return out;
}

}  // namespace mtdistill
