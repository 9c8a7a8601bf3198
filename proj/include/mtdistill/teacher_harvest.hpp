#pragma once

// Driving teacher models: rationale prompts in, validated RationaleRecords out, persisted in an
// append-only store so interrupted harvests resume where they stopped.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/prompting.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

enum class BackendKind { remote_endpoint, local_process, synthetic_rule };

inline std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::remote_endpoint: return "remote-endpoint";
    case BackendKind::local_process: return "local-process";
    case BackendKind::synthetic_rule: return "synthetic-rule";
  }
  return "?";
}

inline BackendKind backend_kind_from_string(std::string_view s) {
  if (s == "remote-endpoint") return BackendKind::remote_endpoint;
  if (s == "local-process") return BackendKind::local_process;
  if (s == "synthetic-rule") return BackendKind::synthetic_rule;
  throw ConfigError("unknown teacher backend '" + std::string(s) + "'");
}

struct GenerationParams {
  int max_new_tokens = 256;
  double temperature = 0.0;  // 0 = greedy
  std::vector<std::string> stop;
  std::uint64_t seed = 0;
};

struct TeacherSpec {
  std::string teacher_id;
  BackendKind backend = BackendKind::synthetic_rule;
  GenerationParams generation;
  json settings = json::object();  // backend-specific

  void validate() const {
    if (util::trim(teacher_id).empty()) throw ConfigError("teacher id is empty");
    if (generation.max_new_tokens < 1) throw ConfigError("teacher '" + teacher_id + "': max_new_tokens must be >= 1");
    if (!(generation.temperature >= 0.0)) throw ConfigError("teacher '" + teacher_id + "': temperature must be >= 0");
  }
};

inline void validate_teacher_set(const std::vector<TeacherSpec>& teachers) {
  std::set<std::string> ids;
  for (const auto& t : teachers) {
    t.validate();
    if (!ids.insert(t.teacher_id).second) throw ConfigError("duplicate teacher id '" + t.teacher_id + "'");
  }
}

inline void to_json(json& j, const TeacherSpec& t) {
  j = json{{"id", t.teacher_id},
           {"backend", to_string(t.backend)},
           {"generation",
            {{"max_new_tokens", t.generation.max_new_tokens},
             {"temperature", t.generation.temperature},
             {"stop", t.generation.stop},
             {"seed", t.generation.seed}}},
           {"settings", t.settings}};
}

inline void from_json(const json& j, TeacherSpec& t) {
  t.teacher_id = j.at("id").get<std::string>();
  t.backend = backend_kind_from_string(j.value("backend", std::string("synthetic-rule")));
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    t.generation.max_new_tokens = g.value("max_new_tokens", 256);
    t.generation.temperature = g.value("temperature", 0.0);
    t.generation.stop = g.value("stop", std::vector<std::string>{});
    t.generation.seed = g.value("seed", std::uint64_t{0});
  }
  t.settings = j.value("settings", json::object());
}

/// A text-completion backend. Implementations must be safe to call concurrently and throw
/// TransportError on transport-level failures.
class TeacherBackend {
 public:
  virtual ~TeacherBackend() = default;
  virtual std::string complete(const std::string& prompt, const GenerationParams& params) = 0;
};

// ---------------------------------------------------------------------------
// Records and the store
// ---------------------------------------------------------------------------

enum class RecordStatus { ok, rejected, failed };

inline std::string to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::ok: return "ok";
    case RecordStatus::rejected: return "rejected";
    case RecordStatus::failed: return "failed";
  }
  return "?";
}

inline RecordStatus record_status_from_string(std::string_view s) {
  if (s == "ok") return RecordStatus::ok;
  if (s == "rejected") return RecordStatus::rejected;
  if (s == "failed") return RecordStatus::failed;
  throw ParseError("unknown record status '" + std::string(s) + "'");
}

struct RationaleRecord {
  std::string item_id;
  std::string dataset;
  std::string teacher_id;
  std::string rationale;
  std::string prompt_fingerprint;
  std::string created_at;
  RecordStatus status = RecordStatus::failed;

  std::string key() const { return item_id + '\x1f' + teacher_id + '\x1f' + prompt_fingerprint; }
};

inline void to_json(json& j, const RationaleRecord& r) {
  j = json{{"item_id", r.item_id},
           {"dataset", r.dataset},
           {"teacher_id", r.teacher_id},
           {"rationale", r.rationale},
           {"prompt_fingerprint", r.prompt_fingerprint},
           {"created_at", r.created_at},
           {"status", to_string(r.status)}};
}

inline void from_json(const json& j, RationaleRecord& r) {
  r.item_id = j.at("item_id").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.teacher_id = j.at("teacher_id").get<std::string>();
  r.rationale = j.at("rationale").get<std::string>();
  r.prompt_fingerprint = j.at("prompt_fingerprint").get<std::string>();
  r.created_at = j.value("created_at", std::string{});
  r.status = record_status_from_string(j.at("status").get<std::string>());
  if (r.status == RecordStatus::ok && r.rationale.empty()) throw ParseError("ok record with empty rationale");
}

/// Append-only JSONL log of RationaleRecords with an in-memory key index.
///
/// Opening compacts the log: torn trailing lines (a crash mid-write) and duplicate keys are
/// dropped and the file rewritten. Appends are serialized and flushed one line at a time.
class RationaleStore {
 public:
  explicit RationaleStore(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::error_code ec;
    if (std::filesystem::is_regular_file(path_, ec)) load_and_compact();
    out_.open(path_, std::ios::app);
    if (!out_) throw StoreError("cannot open rationale store " + path_.string());
  }

  RationaleStore(const RationaleStore&) = delete;
  RationaleStore& operator=(const RationaleStore&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  /// Lines dropped while compacting on open.
  std::size_t dropped_on_open() const noexcept { return dropped_; }

  bool contains(const std::string& key) const {
    std::lock_guard lock(mu_);
    return index_.contains(key);
  }

  std::optional<RationaleRecord> find(const std::string& item_id, const std::string& teacher_id,
                                      const std::string& fingerprint) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(item_id + '\x1f' + teacher_id + '\x1f' + fingerprint);
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
  }

  /// Most recently appended record for the pair, whatever its fingerprint.
  std::optional<RationaleRecord> latest(const std::string& item_id, const std::string& teacher_id) const {
    std::lock_guard lock(mu_);
    auto it = latest_.find(item_id + '\x1f' + teacher_id);
    if (it == latest_.end()) return std::nullopt;
    return records_[it->second];
  }

  std::vector<RationaleRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  /// Appends unless the key already exists. Returns false for an existing key.
  bool append(const RationaleRecord& record) {
    if (record.status == RecordStatus::ok && record.rationale.empty())
      throw StoreError("refusing ok record with empty rationale");
    std::lock_guard lock(mu_);
    if (index_.contains(record.key())) return false;
    out_ << json(record).dump() << '\n';
    out_.flush();
    if (!out_) throw StoreError("write to rationale store " + path_.string() + " failed");
    insert(record);
    return true;
  }

  /// Content hash over the records, ignoring timestamps and file order.
  std::string fingerprint() const {
    std::vector<std::string> lines;
    {
      std::lock_guard lock(mu_);
      for (auto r : records_) {
        r.created_at.clear();
        lines.push_back(json(r).dump());
      }
    }
    std::sort(lines.begin(), lines.end());
    return util::sha256_hex(util::join(lines, "\n"));
  }

 private:
  void insert(const RationaleRecord& r) {
    index_.emplace(r.key(), records_.size());
    latest_[r.item_id + '\x1f' + r.teacher_id] = records_.size();
    records_.push_back(r);
  }

  void load_and_compact() {
    std::ifstream in(path_);
    if (!in) throw StoreError("cannot read rationale store " + path_.string());
    std::string line;
    while (std::getline(in, line)) {
      if (util::trim(line).empty()) continue;
      try {
        auto r = json::parse(line).get<RationaleRecord>();
        if (index_.contains(r.key())) {
          ++dropped_;
          continue;
        }
        insert(r);
      } catch (const std::exception&) {
        ++dropped_;
      }
    }
    in.close();
    if (dropped_ > 0) {
      std::string content;
      for (const auto& r : records_) content += json(r).dump() + "\n";
      util::write_file_atomic(path_, content);
    }
  }

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<RationaleRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::size_t> latest_;
  std::ofstream out_;
  std::size_t dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Validation and single-item harvesting
// ---------------------------------------------------------------------------

struct ValidationLimits {
  std::size_t max_chars = 2000;
};

struct ValidatedRationale {
  RecordStatus status = RecordStatus::rejected;
  std::string text;
};

/// Trims surrounding whitespace, rejects empty output, and cuts overlong text at the last word
/// boundary that fits in `max_chars`. Interior content is otherwise left alone.
inline ValidatedRationale validate_rationale(std::string_view raw, const MCQAItem& /*item*/,
                                             ValidationLimits limits = {}) {
  auto t = util::trim(raw);
  if (t.empty()) return {RecordStatus::rejected, {}};
  if (t.size() <= limits.max_chars) return {RecordStatus::ok, std::string(t)};

  auto cut = limits.max_chars;
  if (!util::is_space(t[cut])) {
    // Inside a word: back up to the whitespace before it.
    while (cut > 0 && !util::is_space(t[cut - 1])) --cut;
  }
  auto head = util::trim(t.substr(0, cut));
  if (head.empty()) head = t.substr(0, limits.max_chars);  // a single word longer than the limit
  return {RecordStatus::ok, std::string(head)};
}

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_backoff{200};

  std::chrono::milliseconds backoff(int attempt) const { return base_backoff * (1LL << std::min(attempt, 20)); }
};

struct HarvestOptions {
  bool teacher_forcing = true;
  ValidationLimits limits;
  RetryPolicy retry;
  PromptTemplates templates;
  std::size_t parallelism = 4;
  /// Stop after this many new records (simulated interruption); unset = run to completion.
  std::optional<std::size_t> stop_after;
};

inline std::string rationale_prompt_fingerprint(const std::string& prompt) { return util::sha256_hex(prompt); }

namespace detail {

struct HarvestOutcome {
  RationaleRecord record;
  std::size_t calls = 0;
};

inline HarvestOutcome harvest_one(TeacherBackend& backend, const TeacherSpec& teacher, const MCQAItem& item,
                                  const std::vector<InContextExample>& examples, const HarvestOptions& opts) {
  HarvestOutcome out;
  auto prompt = build_rationale_prompt(item, examples, opts.teacher_forcing, opts.templates);
  out.record.item_id = item.id;
  out.record.dataset = item.dataset;
  out.record.teacher_id = teacher.teacher_id;
  out.record.prompt_fingerprint = rationale_prompt_fingerprint(prompt);
  out.record.status = RecordStatus::failed;

  for (int attempt = 0; attempt < opts.retry.attempts; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(opts.retry.backoff(attempt - 1));
    std::string completion;
    ++out.calls;
    try {
      completion = backend.complete(prompt, teacher.generation);
    } catch (const std::exception&) {
      continue;
    }
    if (completion.empty()) continue;  // no output at all counts against the retry budget
    auto v = validate_rationale(completion, item, opts.limits);
    out.record.status = v.status;
    out.record.rationale = std::move(v.text);
    break;
  }
  out.record.created_at = util::utc_timestamp();
  return out;
}

}  // namespace detail

/// Prompts `teacher` for one item. Transport failures are retried; exhaustion yields a
/// status=failed record rather than an exception.
inline RationaleRecord harvest_rationale(TeacherBackend& backend, const TeacherSpec& teacher, const MCQAItem& item,
                                         const std::vector<InContextExample>& examples, const HarvestOptions& opts = {}) {
  return detail::harvest_one(backend, teacher, item, examples, opts).record;
}

/// Zero-shot generation of up to `count` demonstrations from one teacher.
inline std::vector<InContextExample> generate_in_context_examples(TeacherBackend& backend, const TeacherSpec& teacher,
                                                                  std::string_view dataset_description, int count,
                                                                  const HarvestOptions& opts = {}) {
  auto prompt = build_icl_generation_prompt(dataset_description, count, opts.templates);
  bool any_response = false;
  std::string last_error;
  for (int attempt = 0; attempt < opts.retry.attempts; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(opts.retry.backoff(attempt - 1));
    std::string completion;
    try {
      completion = backend.complete(prompt, teacher.generation);
    } catch (const std::exception& e) {
      last_error = e.what();
      continue;
    }
    any_response = true;
    try {
      auto parsed = parse_icl_response(completion, teacher.teacher_id);
      if (parsed.examples.size() > static_cast<std::size_t>(count)) parsed.examples.resize(count);
      return parsed.examples;
    } catch (const ParseError& e) {
      last_error = e.what();
    }
  }
  if (!any_response)
    throw TransportError("teacher '" + teacher.teacher_id + "' unreachable after " +
                         std::to_string(opts.retry.attempts) + " attempts: " + last_error);
  throw GenerationError("teacher '" + teacher.teacher_id + "' produced no parseable in-context examples: " + last_error);
}

// ---------------------------------------------------------------------------
// Whole-split harvesting
// ---------------------------------------------------------------------------

/// A configured teacher with its backend and the demonstrations attached to its prompts.
struct TeacherBinding {
  TeacherSpec spec;
  std::shared_ptr<TeacherBackend> backend;
  std::vector<InContextExample> examples;
};

struct TeacherHarvestCounts {
  std::size_t ok = 0;
  std::size_t rejected = 0;
  std::size_t failed = 0;
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;
};

struct HarvestSummary {
  std::map<std::string, TeacherHarvestCounts> per_teacher;
  bool interrupted = false;

  std::size_t total_cache_hits() const {
    std::size_t n = 0;
    for (const auto& [_, c] : per_teacher) n += c.cache_hits;
    return n;
  }
  std::size_t total_backend_calls() const {
    std::size_t n = 0;
    for (const auto& [_, c] : per_teacher) n += c.backend_calls;
    return n;
  }
  std::size_t total_new_records() const {
    std::size_t n = 0;
    for (const auto& [_, c] : per_teacher) n += c.ok + c.rejected + c.failed;
    return n;
  }
};

inline void to_json(json& j, const HarvestSummary& s) {
  j = json::object();
  for (const auto& [t, c] : s.per_teacher)
    j["teachers"][t] = {{"ok", c.ok},
                        {"rejected", c.rejected},
                        {"failed", c.failed},
                        {"cache_hits", c.cache_hits},
                        {"backend_calls", c.backend_calls}};
  j["interrupted"] = s.interrupted;
}

/// Ensures the store holds one record per (item, teacher) for the current prompts. Existing
/// keys are cache hits and cost no backend call. Records are flushed as they complete, so a
/// killed run loses at most the in-flight calls.
inline HarvestSummary harvest_all(const std::vector<TeacherBinding>& teachers, const DatasetSplit& split,
                                  RationaleStore& store, const HarvestOptions& opts = {}) {
  {
    std::vector<TeacherSpec> specs;
    for (const auto& t : teachers) {
      if (!t.backend) throw ConfigError("teacher '" + t.spec.teacher_id + "' has no backend");
      specs.push_back(t.spec);
    }
    validate_teacher_set(specs);
  }

  struct Work {
    std::size_t item;
    std::size_t teacher;
  };
  HarvestSummary summary;
  for (const auto& t : teachers) summary.per_teacher[t.spec.teacher_id];

  std::vector<Work> pending;
  for (std::size_t i = 0; i < split.items.size(); ++i) {
    for (std::size_t m = 0; m < teachers.size(); ++m) {
      const auto& t = teachers[m];
      auto fp = rationale_prompt_fingerprint(
          build_rationale_prompt(split.items[i], t.examples, opts.teacher_forcing, opts.templates));
      if (store.find(split.items[i].id, t.spec.teacher_id, fp)) {
        ++summary.per_teacher[t.spec.teacher_id].cache_hits;
      } else {
        pending.push_back({i, m});
      }
    }
  }
  if (opts.stop_after && pending.size() > *opts.stop_after) {
    pending.resize(*opts.stop_after);
    summary.interrupted = true;
  }

  std::mutex summary_mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr failure;

  auto worker = [&] {
    while (!abort.load()) {
      auto w = next.fetch_add(1);
      if (w >= pending.size()) return;
      const auto& binding = teachers[pending[w].teacher];
      try {
        auto outcome = detail::harvest_one(*binding.backend, binding.spec, split.items[pending[w].item],
                                           binding.examples, opts);
        store.append(outcome.record);
        std::lock_guard lock(summary_mu);
        auto& c = summary.per_teacher[binding.spec.teacher_id];
        c.backend_calls += outcome.calls;
        switch (outcome.record.status) {
          case RecordStatus::ok: ++c.ok; break;
          case RecordStatus::rejected: ++c.rejected; break;
          case RecordStatus::failed: ++c.failed; break;
        }
      } catch (...) {
        std::lock_guard lock(summary_mu);
        if (!failure) failure = std::current_exception();
        abort = true;
      }
    }
  };

  auto n_workers = std::max<std::size_t>(1, std::min(opts.parallelism, pending.size()));
  if (pending.empty()) n_workers = 0;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return summary;
}

}  // namespace mtdistill
