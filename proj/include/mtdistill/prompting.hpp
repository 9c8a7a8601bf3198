#pragma once

// Every prompt string the pipeline produces: in-context example generation, teacher
// rationale prompts, and prefix-tagged student inputs. All builders are pure.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

enum class Provenance { generated, user_supplied };

inline std::string to_string(Provenance p) { return p == Provenance::generated ? "generated" : "user-supplied"; }

inline Provenance provenance_from_string(std::string_view s) {
  if (s == "generated") return Provenance::generated;
  if (s == "user-supplied") return Provenance::user_supplied;
  throw ParseError("unknown provenance '" + std::string(s) + "'");
}

/// A demonstration attached to teacher prompts.
struct InContextExample {
  std::string question;
  std::string rationale;
  std::string source_teacher;
  Provenance provenance = Provenance::generated;

  bool operator==(const InContextExample&) const = default;
};

inline void to_json(json& j, const InContextExample& e) {
  j = json{{"question", e.question},
           {"rationale", e.rationale},
           {"source_teacher", e.source_teacher},
           {"provenance", to_string(e.provenance)}};
}

inline void from_json(const json& j, InContextExample& e) {
  e.question = j.at("question").get<std::string>();
  e.rationale = j.at("rationale").get<std::string>();
  e.source_teacher = j.value("source_teacher", std::string{});
  e.provenance = provenance_from_string(j.value("provenance", std::string("user-supplied")));
  if (util::trim(e.question).empty() || util::trim(e.rationale).empty())
    throw ParseError("in-context example with empty question or rationale");
}

/// Instruction prefixes routing the student between answer prediction and per-teacher rationales.
struct PrefixConfig {
  std::string answer_prefix = "predict:";
  std::map<std::string, std::string> teacher_prefixes;  // teacher id -> prefix

  /// Defaults: "predict:" and "explain[<teacher-id>]:".
  static PrefixConfig defaults(const std::vector<std::string>& teachers) {
    PrefixConfig cfg;
    for (const auto& t : teachers) cfg.teacher_prefixes[t] = "explain[" + t + "]:";
    return cfg;
  }

  const std::string& for_teacher(const std::string& teacher) const {
    auto it = teacher_prefixes.find(teacher);
    if (it == teacher_prefixes.end()) throw ConfigError("no prefix configured for teacher '" + teacher + "'");
    return it->second;
  }

  bool contains(std::string_view prefix) const {
    if (prefix == answer_prefix) return true;
    for (const auto& [_, p] : teacher_prefixes)
      if (p == prefix) return true;
    return false;
  }

  /// Throws ConfigError unless prefixes are non-empty, pairwise distinct, and keyed exactly by `teachers`.
  void validate(const std::vector<std::string>& teachers) const {
    if (util::trim(answer_prefix).empty()) throw ConfigError("answer prefix is empty");
    std::set<std::string> seen{answer_prefix};
    for (const auto& [t, p] : teacher_prefixes) {
      if (util::trim(p).empty()) throw ConfigError("prefix for teacher '" + t + "' is empty");
      if (!seen.insert(p).second) throw ConfigError("prefix '" + p + "' is not unique");
    }
    std::set<std::string> want(teachers.begin(), teachers.end());
    std::set<std::string> have;
    for (const auto& [t, _] : teacher_prefixes) have.insert(t);
    if (want != have) throw ConfigError("teacher prefixes must cover exactly the configured teachers");
  }
};

inline void to_json(json& j, const PrefixConfig& p) {
  j = json{{"answer_prefix", p.answer_prefix}, {"teacher_prefixes", p.teacher_prefixes}};
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Prompt templates. Placeholders are `{name}`; `{{` and `}}` are literal braces.
///
///   icl_generation              {description} {count} {count_phrase}
///   demonstration               {index} {question} {rationale}
///   rationale_teacher_forcing   {demonstrations} {question} {options} {answer} {answer_label}
///   rationale_free              {demonstrations} {question} {options}
///
/// The placeholder sets are closed: anything else is a ConfigError at render time.
struct PromptTemplates {
  std::string icl_generation =
      "You are preparing worked examples for {description}.\n"
      "Write {count_phrase}. Each example is a question typical of this task together with a short rationale "
      "that explains the reasoning leading to its answer.\n"
      "Use exactly this layout for each example and nothing else between the markers:\n"
      "BEGIN EXAMPLE\n"
      "Question: <question>\n"
      "Rationale: <rationale>\n"
      "END EXAMPLE\n";
  std::string demonstration =
      "Example {index}\n"
      "Question: {question}\n"
      "Rationale: {rationale}\n"
      "\n";
  std::string rationale_teacher_forcing =
      "{demonstrations}"
      "Question: {question}\n"
      "Options: {options}\n"
      "Answer: {answer}\n"
      "Explain why \"{answer}\" is the correct answer.\n"
      "Rationale:";
  std::string rationale_free =
      "{demonstrations}"
      "Question: {question}\n"
      "Options: {options}\n"
      "Reason step by step about which option is correct, then state your choice.\n"
      "Rationale:";

  static constexpr const char* kFiles[] = {"icl_generation.txt", "demonstration.txt", "rationale_teacher_forcing.txt",
                                           "rationale_free.txt"};

  /// Loads overrides from `dir`; files that are absent keep the built-in text.
  static PromptTemplates from_directory(const std::filesystem::path& dir) {
    PromptTemplates t;
    std::string* slots[] = {&t.icl_generation, &t.demonstration, &t.rationale_teacher_forcing, &t.rationale_free};
    for (std::size_t i = 0; i < 4; ++i) {
      auto p = dir / kFiles[i];
      if (std::filesystem::exists(p)) *slots[i] = util::read_file(p);
    }
    return t;
  }

  std::string fingerprint() const {
    return util::sha256_hex(icl_generation + '\x1f' + demonstration + '\x1f' + rationale_teacher_forcing + '\x1f' +
                            rationale_free);
  }
};

/// Substitutes `{name}` placeholders. Throws ConfigError on a placeholder outside `allowed`
/// or one without a value.
inline std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values,
                                   const std::set<std::string>& allowed) {
  std::string out;
  out.reserve(tmpl.size() + 64);
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    char c = tmpl[i];
    if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
      out.push_back('{');
      ++i;
      continue;
    }
    if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
      out.push_back('}');
      ++i;
      continue;
    }
    if (c != '{') {
      out.push_back(c);
      continue;
    }
    auto close = tmpl.find('}', i);
    if (close == std::string_view::npos) throw ConfigError("unterminated placeholder in template");
    std::string name(tmpl.substr(i + 1, close - i - 1));
    if (!allowed.contains(name)) throw ConfigError("unknown template placeholder {" + name + "}");
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("no value for template placeholder {" + name + "}");
    out += it->second;
    i = close;
  }
  return out;
}

inline std::set<std::string> template_placeholders(std::string_view tmpl) {
  std::set<std::string> names;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
      ++i;
      continue;
    }
    if (tmpl[i] != '{') continue;
    auto close = tmpl.find('}', i);
    if (close == std::string_view::npos) break;
    names.insert(std::string(tmpl.substr(i + 1, close - i - 1)));
    i = close;
  }
  return names;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline std::string option_label(std::size_t index) {
  if (index >= 26) throw DomainError("at most 26 options can be labelled");
  return std::string(1, static_cast<char>('a' + index));
}

/// "(a) first (b) second ..."
inline std::string render_options(const std::vector<std::string>& options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i) out += ' ';
    out += '(' + option_label(i) + ") " + options[i];
  }
  return out;
}

inline std::string build_icl_generation_prompt(std::string_view dataset_description, int count,
                                               const PromptTemplates& templates = {}) {
  if (count < 1) throw DomainError("in-context example count must be >= 1");
  auto desc = util::normalize_ws(dataset_description);
  if (desc.empty()) desc = "a multiple-choice question answering task";
  std::string phrase = "exactly " + std::to_string(count) + (count == 1 ? " example" : " examples");
  return render_template(templates.icl_generation,
                         {{"description", desc}, {"count", std::to_string(count)}, {"count_phrase", phrase}},
                         {"description", "count", "count_phrase"});
}

struct ParsedExamples {
  std::vector<InContextExample> examples;
  std::size_t skipped = 0;
};

/// Extracts BEGIN EXAMPLE / END EXAMPLE blocks. Malformed or unterminated blocks are skipped
/// and counted; a response with no well-formed block is a ParseError carrying the raw text.
inline ParsedExamples parse_icl_response(std::string_view raw, std::string_view source_teacher = {}) {
  ParsedExamples out;
  bool open = false;
  std::string question, rationale;
  std::string* field = nullptr;

  auto finish = [&] {
    auto q = std::string(util::trim(question));
    auto r = std::string(util::trim(rationale));
    bool placeholder = q == "<question>" || r == "<rationale>";
    if (q.empty() || r.empty() || placeholder) {
      ++out.skipped;
    } else {
      out.examples.push_back({q, r, std::string(source_teacher), Provenance::generated});
    }
  };

  for (const auto& line : util::split_lines(raw)) {
    auto t = util::trim(line);
    if (t == "BEGIN EXAMPLE") {
      if (open) ++out.skipped;
      open = true;
      question.clear();
      rationale.clear();
      field = nullptr;
    } else if (t == "END EXAMPLE") {
      if (open) finish();
      open = false;
      field = nullptr;
    } else if (open) {
      if (t.starts_with("Question:")) {
        question = std::string(t.substr(9));
        field = &question;
      } else if (t.starts_with("Rationale:")) {
        rationale = std::string(t.substr(10));
        field = &rationale;
      } else if (field && !t.empty()) {
        *field += ' ';
        *field += t;
      }
    }
  }
  if (open) ++out.skipped;
  if (out.examples.empty()) throw ParseError("no well-formed in-context example block in response", 0, std::string(raw));
  return out;
}

inline std::string render_demonstrations(const std::vector<InContextExample>& examples,
                                         const PromptTemplates& templates = {}) {
  std::string out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out += render_template(templates.demonstration,
                           {{"index", std::to_string(i + 1)},
                            {"question", examples[i].question},
                            {"rationale", examples[i].rationale}},
                           {"index", "question", "rationale"});
  }
  return out;
}

/// Teacher prompt for one item. With teacher forcing the gold option text is stated and the
/// teacher is asked to justify it; without, the teacher must reason to an answer itself.
inline std::string build_rationale_prompt(const MCQAItem& item, const std::vector<InContextExample>& examples,
                                          bool teacher_forcing, const PromptTemplates& templates = {}) {
  std::map<std::string, std::string> values{{"demonstrations", render_demonstrations(examples, templates)},
                                            {"question", item.question},
                                            {"options", render_options(item.options)}};
  if (teacher_forcing) {
    values["answer"] = item.answer_text();
    values["answer_label"] = option_label(item.answer_index);
    return render_template(templates.rationale_teacher_forcing, values,
                           {"demonstrations", "question", "options", "answer", "answer_label"});
  }
  return render_template(templates.rationale_free, values, {"demonstrations", "question", "options"});
}

/// The (question, options) region of a student input; identical for every prefix.
inline std::string render_student_body(const MCQAItem& item) {
  return "question: " + item.question + "\noptions: " + render_options(item.options);
}

/// prefix + "\n" + body. The prefix must be one of `prefixes`.
inline std::string build_student_input(const MCQAItem& item, const PrefixConfig& prefixes, std::string_view prefix) {
  if (util::trim(prefix).empty()) throw ConfigError("student input prefix is empty");
  if (!prefixes.contains(prefix)) throw ConfigError("unknown prefix '" + std::string(prefix) + "'");
  return std::string(prefix) + "\n" + render_student_body(item);
}

}  // namespace mtdistill
