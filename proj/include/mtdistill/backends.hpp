#pragma once

// Concrete teacher backends: a deterministic rule program, an HTTP JSON endpoint, and a
// local subprocess.
//
// HTTP contract (remote-endpoint):
//   POST <url><path>   {"prompt": str, "max_new_tokens": int, "temperature": float,
//                       "stop": [str], "seed": int}
//   200                {"completion": str}
// Any other status, a connection failure, or a body without "completion" is a TransportError.
//
// Subprocess contract (local-process): the same request object is written to the command's
// stdin; the command's stdout is the completion. A non-zero exit status is a TransportError.

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "httplib.h"
#include "mtdistill/errors.hpp"
#include "mtdistill/prompting.hpp"
#include "mtdistill/teacher_harvest.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

inline json generation_request(const std::string& prompt, const GenerationParams& p) {
  return json{{"prompt", prompt},
              {"max_new_tokens", p.max_new_tokens},
              {"temperature", p.temperature},
              {"stop", p.stop},
              {"seed", p.seed}};
}

// ---------------------------------------------------------------------------
// Synthetic rule teacher
// ---------------------------------------------------------------------------

/// Rationale template placeholders: {answer} {letter} {q_last} {question}.
inline const std::set<std::string>& rule_placeholders() {
  static const std::set<std::string> names{"answer", "letter", "q_last", "question"};
  return names;
}

/// Last word of the question with trailing punctuation stripped.
inline std::string question_last_word(std::string_view question) {
  auto words = util::split_ws(question);
  if (words.empty()) return {};
  auto w = words.back();
  while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
  return w.empty() ? words.back() : w;
}

/// The rule program: a templated rationale citing option `cited`.
inline std::string rule_rationale(std::string_view tmpl, std::string_view question,
                                  const std::vector<std::string>& options, std::size_t cited) {
  return render_template(tmpl,
                         {{"answer", options.at(cited)},
                          {"letter", option_label(cited)},
                          {"q_last", question_last_word(question)},
                          {"question", std::string(question)}},
                         rule_placeholders());
}

/// Demonstrations the rule program emits for an in-context generation request.
inline std::vector<InContextExample> rule_icl_examples(std::string_view description, int count, std::string_view tmpl,
                                                       std::string_view teacher_id = {}) {
  std::vector<InContextExample> out;
  for (int i = 1; i <= count; ++i) {
    std::string q = "which choice fits sample" + std::to_string(i);
    std::vector<std::string> opts{"choice" + std::to_string(i)};
    out.push_back({q + " in " + std::string(description), rule_rationale(tmpl, q, opts, 0),
                   std::string(teacher_id), Provenance::generated});
  }
  return out;
}

inline std::string format_icl_blocks(const std::vector<InContextExample>& examples) {
  std::string out;
  for (const auto& e : examples)
    out += "BEGIN EXAMPLE\nQuestion: " + e.question + "\nRationale: " + e.rationale + "\nEND EXAMPLE\n";
  return out;
}

/// Parses "(a) x (b) y ..." back into option texts.
inline std::vector<std::string> parse_rendered_options(std::string_view rendered) {
  std::vector<std::string> out;
  std::string s(rendered);
  std::size_t expect = 0;
  std::size_t pos = 0;
  std::vector<std::size_t> starts;
  while (true) {
    auto marker = "(" + option_label(expect) + ") ";
    auto at = s.find(marker, pos);
    if (at == std::string::npos || (at != 0 && s[at - 1] != ' ')) break;
    starts.push_back(at);
    pos = at + marker.size();
    if (++expect >= 26) break;
  }
  for (std::size_t i = 0; i < starts.size(); ++i) {
    auto begin = starts[i] + 4;
    auto end = i + 1 < starts.size() ? starts[i + 1] - 1 : s.size();
    out.push_back(s.substr(begin, end - begin));
  }
  return out;
}

/// Deterministic stand-in for an LLM teacher. Understands prompts built from the default
/// templates: it reads the last Question/Options/Answer lines of a rationale prompt and cites
/// the stated answer, or without one, an option chosen by hashing the question.
///
/// settings: {"templates": [str, ...]}. Greedy requests use the first template; sampled
/// requests (temperature > 0) pick one by hashing the prompt with the request seed.
class SyntheticRuleBackend : public TeacherBackend {
 public:
  explicit SyntheticRuleBackend(const json& settings = json::object()) {
    if (settings.contains("templates")) templates_ = settings.at("templates").get<std::vector<std::string>>();
    if (templates_.empty()) templates_.push_back(kDefaultTemplate);
    for (const auto& t : templates_)
      for (const auto& name : template_placeholders(t))
        if (!rule_placeholders().contains(name)) throw ConfigError("unknown rule template placeholder {" + name + "}");
  }

  static constexpr const char* kDefaultTemplate = "the answer is {answer} because {q_last} maps to {answer} .";

  const std::vector<std::string>& templates() const noexcept { return templates_; }

  std::string complete(const std::string& prompt, const GenerationParams& params) override {
    const auto& tmpl = pick_template(prompt, params);
    auto body = util::trim(prompt);
    if (body.ends_with("Rationale:")) return answer_rationale_prompt(prompt, tmpl);
    return answer_icl_prompt(prompt, tmpl);
  }

 private:
  const std::string& pick_template(const std::string& prompt, const GenerationParams& params) const {
    if (params.temperature <= 0.0 || templates_.size() == 1) return templates_.front();
    auto h = std::hash<std::string>{}(prompt + '\x1f' + std::to_string(params.seed));
    return templates_[h % templates_.size()];
  }

  static std::string answer_rationale_prompt(const std::string& prompt, const std::string& tmpl) {
    auto lines = util::split_lines(prompt);
    std::size_t q_line = lines.size();
    for (std::size_t i = lines.size(); i-- > 0;)
      if (lines[i].starts_with("Question: ")) {
        q_line = i;
        break;
      }
    if (q_line == lines.size()) return {};
    std::string question = lines[q_line].substr(10);
    std::vector<std::string> options;
    std::optional<std::string> answer;
    for (std::size_t i = q_line + 1; i < lines.size(); ++i) {
      if (lines[i].starts_with("Options: ")) options = parse_rendered_options(std::string_view(lines[i]).substr(9));
      if (lines[i].starts_with("Answer: ")) answer = lines[i].substr(8);
    }
    if (options.empty()) return {};
    std::size_t cited = std::hash<std::string>{}(question) % options.size();
    if (answer) {
      auto it = std::find(options.begin(), options.end(), *answer);
      if (it == options.end()) return {};
      cited = static_cast<std::size_t>(it - options.begin());
    }
    return rule_rationale(tmpl, question, options, cited);
  }

  static std::string answer_icl_prompt(const std::string& prompt, const std::string& tmpl) {
    static const std::regex count_re(R"(exactly (\d+) examples?)");
    static const std::regex desc_re(R"(worked examples for (.*)\.)");
    std::smatch m;
    if (!std::regex_search(prompt, m, count_re)) return {};
    int count = std::stoi(m[1].str());
    std::string desc = "the task";
    auto first_line = util::split_lines(prompt).front();
    std::smatch d;
    if (std::regex_search(first_line, d, desc_re)) desc = d[1].str();
    return "Here are the examples.\n" + format_icl_blocks(rule_icl_examples(desc, count, tmpl));
  }

  std::vector<std::string> templates_;
};

// ---------------------------------------------------------------------------
// Remote endpoint
// ---------------------------------------------------------------------------

/// settings: {"url": "http://host:port", "path": "/generate", "timeout_s": 60}
class RemoteEndpointBackend : public TeacherBackend {
 public:
  explicit RemoteEndpointBackend(const json& settings) {
    if (!settings.contains("url")) throw ConfigError("remote-endpoint teacher needs settings.url");
    url_ = settings.at("url").get<std::string>();
    path_ = settings.value("path", std::string("/generate"));
    timeout_s_ = settings.value("timeout_s", 60);
  }

  std::string complete(const std::string& prompt, const GenerationParams& params) override {
    httplib::Client client(url_);
    client.set_connection_timeout(timeout_s_, 0);
    client.set_read_timeout(timeout_s_, 0);
    auto res = client.Post(path_, generation_request(prompt, params).dump(), "application/json");
    if (!res) throw TransportError("request to " + url_ + path_ + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
    try {
      auto body = json::parse(res->body);
      return body.at("completion").get<std::string>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("malformed endpoint response: ") + e.what());
    }
  }

 private:
  std::string url_;
  std::string path_;
  int timeout_s_ = 60;
};

// ---------------------------------------------------------------------------
// Local process
// ---------------------------------------------------------------------------

/// settings: {"command": "shell command"}
class LocalProcessBackend : public TeacherBackend {
 public:
  explicit LocalProcessBackend(const json& settings) {
    if (!settings.contains("command")) throw ConfigError("local-process teacher needs settings.command");
    command_ = settings.at("command").get<std::string>();
  }

  std::string complete(const std::string& prompt, const GenerationParams& params) override {
    auto dir = std::filesystem::temp_directory_path();
    std::string tmpl = (dir / "mtdistill-req-XXXXXX").string();
    std::vector<char> name(tmpl.begin(), tmpl.end());
    name.push_back('\0');
    int fd = mkstemp(name.data());
    if (fd < 0) throw TransportError("cannot create request file");
    std::filesystem::path req(name.data());
    auto payload = generation_request(prompt, params).dump();
    bool wrote = ::write(fd, payload.data(), payload.size()) == static_cast<ssize_t>(payload.size());
    ::close(fd);
    if (!wrote) {
      std::filesystem::remove(req);
      throw TransportError("cannot write request file");
    }

    std::string cmd = command_ + " < '" + req.string() + "'";
    std::string output;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) {
      std::filesystem::remove(req);
      throw TransportError("cannot start teacher process");
    }
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) output.append(buf, n);
    int status = ::pclose(pipe);
    std::filesystem::remove(req);
    if (status != 0) throw TransportError("teacher process exited with status " + std::to_string(status));
    return output;
  }

 private:
  std::string command_;
};

inline std::shared_ptr<TeacherBackend> make_backend(const TeacherSpec& spec) {
  switch (spec.backend) {
    case BackendKind::synthetic_rule: return std::make_shared<SyntheticRuleBackend>(spec.settings);
    case BackendKind::remote_endpoint: return std::make_shared<RemoteEndpointBackend>(spec.settings);
    case BackendKind::local_process: return std::make_shared<LocalProcessBackend>(spec.settings);
  }
  throw ConfigError("unsupported backend");
}

}  // namespace mtdistill
