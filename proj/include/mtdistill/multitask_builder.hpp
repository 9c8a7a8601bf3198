#pragma once

// Prefix-routed multi-task corpus: one answer example per item plus one rationale example per
// teacher with a usable rationale and a non-zero weight.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/prompting.hpp"
#include "mtdistill/teacher_harvest.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

/// Task routing tag: the answer task, or rationale imitation of one teacher.
struct Task {
  enum class Kind { answer, teacher };
  Kind kind = Kind::answer;
  std::string teacher_id;

  static Task answer() { return {}; }
  static Task teacher(std::string id) { return {Kind::teacher, std::move(id)}; }

  bool is_answer() const noexcept { return kind == Kind::answer; }

  std::string str() const { return is_answer() ? "answer" : "teacher:" + teacher_id; }

  static Task parse(std::string_view s) {
    if (s == "answer") return answer();
    if (s.starts_with("teacher:") && s.size() > 8) return teacher(std::string(s.substr(8)));
    throw ParseError("unknown task tag '" + std::string(s) + "'");
  }

  auto operator<=>(const Task&) const = default;
};

struct TrainingExample {
  std::string item_id;
  Task task;
  std::string input;
  std::string target;
  double weight = 1.0;

  auto operator<=>(const TrainingExample&) const = default;
};

inline void to_json(json& j, const TrainingExample& e) {
  j = json{{"item_id", e.item_id}, {"task", e.task.str()}, {"input", e.input}, {"target", e.target}, {"weight", e.weight}};
}

inline void from_json(const json& j, TrainingExample& e) {
  e.item_id = j.at("item_id").get<std::string>();
  e.task = Task::parse(j.at("task").get<std::string>());
  e.input = j.at("input").get<std::string>();
  e.target = j.at("target").get<std::string>();
  e.weight = j.at("weight").get<double>();
}

struct DistillationConfig {
  std::vector<std::string> teachers;
  std::map<std::string, double> alphas;
  PrefixConfig prefixes;
  bool teacher_forcing = true;
  int icl_count = 3;

  static DistillationConfig with_defaults(std::vector<std::string> teachers, double alpha = 1.0) {
    DistillationConfig c;
    c.teachers = std::move(teachers);
    for (const auto& t : c.teachers) c.alphas[t] = alpha;
    c.prefixes = PrefixConfig::defaults(c.teachers);
    return c;
  }

  double alpha(const std::string& teacher) const {
    auto it = alphas.find(teacher);
    if (it == alphas.end()) throw ConfigError("no alpha for teacher '" + teacher + "'");
    return it->second;
  }

  void validate() const {
    std::set<std::string> ids(teachers.begin(), teachers.end());
    if (ids.size() != teachers.size()) throw ConfigError("duplicate teacher in distillation config");
    std::set<std::string> keyed;
    for (const auto& [t, a] : alphas) {
      keyed.insert(t);
      if (!(a >= 0.0)) throw ConfigError("alpha for '" + t + "' must be >= 0");
    }
    if (keyed != ids) throw ConfigError("alphas must be keyed exactly by the configured teachers");
    if (icl_count < 0) throw ConfigError("icl_count must be >= 0");
    prefixes.validate(teachers);
  }
};

inline void to_json(json& j, const DistillationConfig& c) {
  j = json{{"teachers", c.teachers},
           {"alphas", c.alphas},
           {"prefixes", c.prefixes},
           {"teacher_forcing", c.teacher_forcing},
           {"icl_count", c.icl_count}};
}

/// Builds the corpus in item-major order: the answer example first, then one example per
/// teacher (config order) whose record is ok. Teachers with alpha = 0 are skipped entirely.
/// A configured teacher with no record at all for an item is a ConsistencyError.
inline std::vector<TrainingExample> assemble(const DatasetSplit& split, const RationaleStore& store,
                                             const DistillationConfig& config) {
  config.validate();
  std::vector<TrainingExample> out;
  out.reserve(split.items.size() * (1 + config.teachers.size()));
  for (const auto& item : split.items) {
    out.push_back({item.id, Task::answer(), build_student_input(item, config.prefixes, config.prefixes.answer_prefix),
                   item.answer_text(), 1.0});
    for (const auto& teacher : config.teachers) {
      double alpha = config.alpha(teacher);
      if (alpha == 0.0) continue;
      auto record = store.latest(item.id, teacher);
      if (!record)
        throw ConsistencyError("no rationale record for item '" + item.id + "' and teacher '" + teacher + "'");
      if (record->status != RecordStatus::ok) continue;
      out.push_back({item.id, Task::teacher(teacher),
                     build_student_input(item, config.prefixes, config.prefixes.for_teacher(teacher)),
                     record->rationale, alpha});
    }
  }
  return out;
}

inline std::vector<TrainingExample> shuffle_for_training(std::vector<TrainingExample> examples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(examples.begin(), examples.end(), rng);
  return examples;
}

inline std::string corpus_to_jsonl(const std::vector<TrainingExample>& examples) {
  std::string out;
  for (const auto& e : examples) out += json(e).dump() + "\n";
  return out;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<TrainingExample>& examples) {
  util::write_file_atomic(path, corpus_to_jsonl(examples));
}

inline std::vector<TrainingExample> read_corpus(const std::filesystem::path& path) {
  std::vector<TrainingExample> out;
  util::for_each_jsonl(path, [&](std::size_t line, const json& j) {
    try {
      out.push_back(j.get<TrainingExample>());
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  });
  return out;
}

/// Records what produced a corpus. `fingerprint` is stable across re-runs with the same inputs.
inline json corpus_manifest(const std::vector<TrainingExample>& examples, const DistillationConfig& config,
                            const std::string& store_fingerprint) {
  std::map<std::string, std::size_t> per_task;
  for (const auto& e : examples) ++per_task[e.task.str()];
  json m{{"distillation", config},
         {"store_fingerprint", store_fingerprint},
         {"corpus_sha256", util::sha256_hex(corpus_to_jsonl(examples))},
         {"examples", examples.size()},
         {"per_task", per_task}};
  m["fingerprint"] = util::sha256_hex(m.dump());
  return m;
}

}  // namespace mtdistill
