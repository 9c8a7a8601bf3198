#pragma once

// A generated MCQA task with a learnable answer rule, plus rule-teacher rationale grammars.
//
// Each question names one key word as its last token; the correct option is the answer word
// the key is permanently paired with. Distractors are other answer words.

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "mtdistill/backends.hpp"
#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/teacher_harvest.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

struct SyntheticTaskConfig {
  std::string dataset = "synthetic";
  int keys = 12;
  int options = 4;
  int train_items = 480;
  int test_items = 120;
  std::uint64_t seed = 7;
};

struct SyntheticTask {
  DatasetSplit train;
  DatasetSplit test;
  std::map<std::string, std::string> pairing;  // key word -> answer word
  std::string description;
};

inline const std::vector<std::string>& synthetic_question_stems() {
  static const std::vector<std::string> stems{"which option goes with", "pick the partner of",
                                              "what is paired with", "choose the match for"};
  return stems;
}

inline SyntheticTask make_synthetic_task(const SyntheticTaskConfig& cfg = {}) {
  if (cfg.keys < cfg.options || cfg.options < 2) throw ConfigError("synthetic task needs keys >= options >= 2");
  if (cfg.train_items < 1 || cfg.test_items < 1) throw ConfigError("synthetic task needs items in both splits");
  std::mt19937_64 rng(cfg.seed);
  auto word = [](const char* stem, int i) {
    std::string n = std::to_string(i);
    return stem + std::string(n.size() < 2 ? "0" : "") + n;
  };
  std::vector<std::string> keys, answers;
  for (int i = 0; i < cfg.keys; ++i) {
    keys.push_back(word("key", i));
    answers.push_back(word("ans", i));
  }
  std::shuffle(answers.begin(), answers.end(), rng);

  SyntheticTask task;
  task.description = "matching each key word to its partner answer word";
  for (int i = 0; i < cfg.keys; ++i) task.pairing[keys[i]] = answers[i];

  auto make_split = [&](const std::string& name, int n, const std::string& id_prefix) {
    DatasetSplit split;
    split.name = name;
    std::uniform_int_distribution<int> pick_key(0, cfg.keys - 1);
    std::uniform_int_distribution<std::size_t> pick_stem(0, synthetic_question_stems().size() - 1);
    for (int i = 0; i < n; ++i) {
      int k = pick_key(rng);
      std::vector<std::string> pool;
      for (int j = 0; j < cfg.keys; ++j)
        if (j != k) pool.push_back(answers[j]);
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<std::string> opts(pool.begin(), pool.begin() + (cfg.options - 1));
      std::uniform_int_distribution<int> pos(0, cfg.options - 1);
      std::size_t gold = static_cast<std::size_t>(pos(rng));
      opts.insert(opts.begin() + static_cast<std::ptrdiff_t>(gold), answers[k]);
      MCQAItem item;
      item.id = id_prefix + std::to_string(i);
      item.dataset = cfg.dataset;
      item.question = synthetic_question_stems()[pick_stem(rng)] + " " + keys[k];
      item.options = std::move(opts);
      item.answer_index = gold;
      split.items.push_back(std::move(item));
    }
    return split;
  };
  task.train = make_split("train", cfg.train_items, "train-");
  task.test = make_split("test", cfg.test_items, "test-");
  return task;
}

/// Rationale templates of the two default rule teachers.
inline const std::vector<std::string>& synthetic_teacher_templates() {
  static const std::vector<std::string> t{"the answer is {answer} because {q_last} maps to {answer} .",
                                          "{q_last} goes with {answer} so pick {answer} ."};
  return t;
}

inline std::vector<TeacherSpec> synthetic_teacher_specs() {
  std::vector<TeacherSpec> out;
  for (std::size_t i = 0; i < synthetic_teacher_templates().size(); ++i) {
    TeacherSpec s;
    s.teacher_id = "rule" + std::to_string(i + 1);
    s.backend = BackendKind::synthetic_rule;
    s.settings = json{{"templates", {synthetic_teacher_templates()[i]}}};
    out.push_back(std::move(s));
  }
  return out;
}

/// Whole-string grammar for a rule template: literal text must match exactly, each placeholder
/// matches one or more non-space words, and repeated placeholders must repeat the same text.
class RuleGrammar {
 public:
  explicit RuleGrammar(std::string_view tmpl) {
    std::string pattern;
    std::map<std::string, int> groups;
    int next = 1;
    auto text = util::normalize_ws(tmpl);
    std::size_t i = 0;
    while (i < text.size()) {
      if (text[i] == '{') {
        auto close = text.find('}', i);
        if (close == std::string::npos) throw ConfigError("unterminated placeholder in rule template");
        auto name = text.substr(i + 1, close - i - 1);
        auto it = groups.find(name);
        if (it == groups.end()) {
          groups[name] = next++;
          pattern += R"((\S+(?: \S+)*?))";
        } else {
          pattern += "\\" + std::to_string(it->second);
        }
        i = close + 1;
        continue;
      }
      char c = text[i++];
      if (std::string_view(R"(\^$.|?*+()[]{}/)").find(c) != std::string_view::npos) pattern += '\\';
      pattern += c;
    }
    re_ = std::regex(pattern);
  }

  bool matches(std::string_view text) const { return std::regex_match(util::normalize_ws(text), re_); }

 private:
  std::regex re_;
};

}  // namespace mtdistill
