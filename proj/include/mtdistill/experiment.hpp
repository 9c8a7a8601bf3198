#pragma once

// Config-driven orchestration: harvest -> build -> train -> eval per dataset, and the
// ablation, alpha-sweep and data-reduction runners built on top of a single run.
//
// Layout under output_root:
//   cache/<dataset>/icl/<teacher>-<hash>.json          in-context example pools
//   cache/<dataset>/rationales-<hash>.jsonl            rationale store (shared across runs)
//   <run_id>/config.json                               resolved config snapshot
//   <run_id>/<dataset>/corpus.jsonl, corpus_manifest.json
//   <run_id>/<dataset>/train_log.jsonl, train_summary.json, step-<k>/
//   <run_id>/<dataset>/eval.json
//   <run_id>/eval_report.json, stages.json

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtdistill/backends.hpp"
#include "mtdistill/core_data.hpp"
#include "mtdistill/errors.hpp"
#include "mtdistill/evaluator.hpp"
#include "mtdistill/multitask_builder.hpp"
#include "mtdistill/prompting.hpp"
#include "mtdistill/student.hpp"
#include "mtdistill/synthetic.hpp"
#include "mtdistill/teacher_harvest.hpp"
#include "mtdistill/trainer.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

namespace fs = std::filesystem;

enum class ExperimentKind { single, ablation, alpha_sweep, reduction };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::single: return "single";
    case ExperimentKind::ablation: return "ablation";
    case ExperimentKind::alpha_sweep: return "alpha-sweep";
    case ExperimentKind::reduction: return "reduction";
  }
  return "single";
}

inline ExperimentKind experiment_kind_from_string(std::string_view s) {
  if (s == "single") return ExperimentKind::single;
  if (s == "ablation") return ExperimentKind::ablation;
  if (s == "alpha-sweep") return ExperimentKind::alpha_sweep;
  if (s == "reduction") return ExperimentKind::reduction;
  throw ConfigError("unknown experiment kind '" + std::string(s) + "'");
}

struct DatasetEntry {
  std::string name;
  std::string description;
  fs::path train;
  fs::path test;
  std::string format = "canonical-jsonl";
  fs::path icl_examples;  // optional user-supplied demonstrations (JSON array)
};

struct HarvestSettings {
  std::size_t parallelism = 4;
  std::size_t max_chars = 2000;
  int retry_attempts = 3;
  int retry_backoff_ms = 200;
  fs::path templates_dir;  // empty = built-in templates
};

struct SweepSettings {
  std::vector<double> grid{0.01, 0.1, 0.5, 1.0, 2.0, 3.0};
  std::string mode = "per-teacher";  // per-teacher | joint | cross
  std::vector<std::string> teachers;  // swept teachers; empty = all
};

struct ReductionSettings {
  std::vector<double> ratios{0.125, 0.25, 0.5, 0.75, 1.0};
  std::uint64_t seed = 0;
  bool ff_reference = true;
};

struct AblationSettings {
  std::string strongest_teacher;  // empty = first configured teacher
  int diverse_samples = 2;
  double diverse_temperature = 0.7;
};

struct ExperimentConfig {
  std::string run_id;
  fs::path output_root;
  ExperimentKind kind = ExperimentKind::single;
  std::vector<DatasetEntry> datasets;
  std::vector<TeacherSpec> teachers;
  DistillationConfig distillation;
  TrainConfig train;
  TinySeq2Seq::Dims student;
  HarvestSettings harvest;
  SweepSettings sweep;
  ReductionSettings reduction;
  AblationSettings ablation;
  std::map<std::string, double> baselines;  // name -> overall score, for deltas
  std::size_t explain_samples = 20;
  std::optional<double> train_ratio;  // set by the reduction runner
  std::uint64_t subsample_seed = 0;

  fs::path run_dir() const { return output_root / run_id; }

  const TeacherSpec& teacher(const std::string& id) const {
    for (const auto& t : teachers)
      if (t.teacher_id == id) return t;
    throw ConfigError("unknown teacher '" + id + "'");
  }

  /// Launch-time checks. `check_files` also requires every referenced file to exist.
  void validate(bool check_files = true) const {
    if (util::trim(run_id).empty()) throw ConfigError("run_id is empty");
    if (run_id.find("..") != std::string::npos) throw ConfigError("run_id must not contain '..'");
    if (output_root.empty()) throw ConfigError("output_root is empty");
    if (datasets.empty()) throw ConfigError("no datasets configured");
    std::set<std::string> names;
    for (const auto& d : datasets) {
      if (util::trim(d.name).empty()) throw ConfigError("dataset name is empty");
      if (d.name == "cache" || d.name.find('/') != std::string::npos) throw ConfigError("invalid dataset name '" + d.name + "'");
      if (!names.insert(d.name).second) throw ConfigError("duplicate dataset '" + d.name + "'");
      if (check_files) {
        for (const auto& p : {d.train, d.test})
          if (!fs::exists(p)) throw ConfigError("dataset '" + d.name + "': missing file " + p.string());
        if (!d.icl_examples.empty() && !fs::exists(d.icl_examples))
          throw ConfigError("dataset '" + d.name + "': missing file " + d.icl_examples.string());
      }
    }
    if (teachers.empty()) throw ConfigError("no teachers configured");
    validate_teacher_set(teachers);
    std::vector<std::string> ids;
    for (const auto& t : teachers) ids.push_back(t.teacher_id);
    if (distillation.teachers != ids) throw ConfigError("distillation teachers must mirror the teacher list");
    distillation.validate();
    train.validate();
    if (train.alphas != distillation.alphas) throw ConfigError("train.alphas must mirror distillation.alphas");
    if (student.embed < 1 || student.hidden < 1 || student.max_target < 1 || !(student.init_scale > 0.0))
      throw ConfigError("student dims must be positive");
    if (harvest.parallelism < 1) throw ConfigError("harvest.parallelism must be >= 1");
    if (harvest.max_chars < 1) throw ConfigError("harvest.max_chars must be >= 1");
    if (harvest.retry_attempts < 1) throw ConfigError("harvest.retry_attempts must be >= 1");
    if (check_files && !harvest.templates_dir.empty() && !fs::is_directory(harvest.templates_dir))
      throw ConfigError("harvest.templates_dir is not a directory: " + harvest.templates_dir.string());
    if (train_ratio && (!(*train_ratio > 0.0) || *train_ratio > 1.0)) throw ConfigError("train ratio must lie in (0, 1]");
    for (const auto& [name, b] : baselines)
      if (!(b > 0.0)) throw ConfigError("baseline '" + name + "' must be > 0");

    switch (kind) {
      case ExperimentKind::single: break;
      case ExperimentKind::alpha_sweep:
        if (sweep.grid.empty()) throw ConfigError("sweep.grid is empty");
        for (double g : sweep.grid)
          if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("sweep.grid values must be finite and >= 0");
        if (sweep.mode != "per-teacher" && sweep.mode != "joint" && sweep.mode != "cross")
          throw ConfigError("sweep.mode must be per-teacher, joint or cross");
        for (const auto& t : sweep.teachers) (void)teacher(t);
        break;
      case ExperimentKind::reduction:
        if (reduction.ratios.empty()) throw ConfigError("reduction.ratios is empty");
        for (double r : reduction.ratios)
          if (!(r > 0.0) || r > 1.0) throw ConfigError("reduction ratios must lie in (0, 1]");
        break;
      case ExperimentKind::ablation:
        if (teachers.size() < 2) throw ConfigError("ablation needs at least 2 teachers");
        if (!ablation.strongest_teacher.empty()) (void)teacher(ablation.strongest_teacher);
        if (ablation.diverse_samples < 2) throw ConfigError("ablation.diverse_samples must be >= 2");
        if (!(ablation.diverse_temperature > 0.0)) throw ConfigError("ablation.diverse_temperature must be > 0");
        break;
    }
  }

  /// Keeps the teacher list, distillation teachers, prefixes and alphas in step.
  void set_teachers(std::vector<TeacherSpec> specs, std::map<std::string, double> alphas) {
    teachers = std::move(specs);
    distillation.teachers.clear();
    for (const auto& t : teachers) distillation.teachers.push_back(t.teacher_id);
    distillation.alphas = std::move(alphas);
    PrefixConfig prefixes = PrefixConfig::defaults(distillation.teachers);
    prefixes.answer_prefix = distillation.prefixes.answer_prefix;
    for (const auto& id : distillation.teachers) {
      auto it = distillation.prefixes.teacher_prefixes.find(id);
      if (it != distillation.prefixes.teacher_prefixes.end()) prefixes.teacher_prefixes[id] = it->second;
    }
    distillation.prefixes = std::move(prefixes);
    train.alphas = distillation.alphas;
  }

  void set_alphas(const std::map<std::string, double>& alphas) {
    distillation.alphas = alphas;
    train.alphas = alphas;
  }
};

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

namespace detail {

inline fs::path resolve_path(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return {};
  fs::path p = j.at(key).get<std::string>();
  if (p.empty()) return {};
  return fs::absolute(p.is_absolute() ? p : base / p).lexically_normal();
}

inline json parse_override_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return raw;
  }
}

}  // namespace detail

/// Sets a leaf addressed by a dotted path ("train.learning_rate", "datasets.0.train").
/// The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& root, std::string_view assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("override must be key.path=value: " + std::string(assignment));
  std::string path(assignment.substr(0, eq));
  json value = detail::parse_override_value(std::string(assignment.substr(eq + 1)));
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override path '" + path + "'");
    bool last = dot == std::string::npos;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError("override path '" + path + "': '" + key + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override path '" + path + "': index out of range");
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
      node = &(*node)[key];
    }
    if (last) {
      *node = value;
      return;
    }
    start = dot + 1;
  }
}

inline ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  try {
    c.run_id = j.at("run_id").get<std::string>();
    c.output_root = detail::resolve_path(j, "output_root", base_dir);
    c.kind = experiment_kind_from_string(j.value("kind", std::string("single")));
    for (const auto& d : j.at("datasets")) {
      DatasetEntry e;
      e.name = d.at("name").get<std::string>();
      e.description = d.value("description", std::string{});
      e.train = detail::resolve_path(d, "train", base_dir);
      e.test = detail::resolve_path(d, "test", base_dir);
      e.format = d.value("format", e.format);
      e.icl_examples = detail::resolve_path(d, "icl_examples", base_dir);
      if (e.train.empty() || e.test.empty()) throw ConfigError("dataset '" + e.name + "' needs train and test paths");
      c.datasets.push_back(std::move(e));
    }
    std::vector<TeacherSpec> specs = j.at("teachers").get<std::vector<TeacherSpec>>();

    const json dist = j.value("distillation", json::object());
    std::map<std::string, double> alphas;
    if (dist.contains("alphas")) {
      alphas = dist.at("alphas").get<std::map<std::string, double>>();
    } else {
      for (const auto& t : specs) alphas[t.teacher_id] = 1.0;
    }
    c.distillation.teacher_forcing = dist.value("teacher_forcing", true);
    c.distillation.icl_count = dist.value("icl_count", 3);
    if (dist.contains("prefixes")) {
      const auto& p = dist.at("prefixes");
      c.distillation.prefixes.answer_prefix = p.value("answer_prefix", c.distillation.prefixes.answer_prefix);
      c.distillation.prefixes.teacher_prefixes =
          p.value("teacher_prefixes", std::map<std::string, std::string>{});
    }
    c.train = j.value("train", json::object()).get<TrainConfig>();
    c.set_teachers(std::move(specs), std::move(alphas));

    const json st = j.value("student", json::object());
    c.student.embed = st.value("embed", c.student.embed);
    c.student.hidden = st.value("hidden", c.student.hidden);
    c.student.max_target = st.value("max_target", c.student.max_target);
    c.student.init_scale = st.value("init_scale", c.student.init_scale);

    const json hv = j.value("harvest", json::object());
    c.harvest.parallelism = hv.value("parallelism", c.harvest.parallelism);
    c.harvest.max_chars = hv.value("max_chars", c.harvest.max_chars);
    c.harvest.retry_attempts = hv.value("retry_attempts", c.harvest.retry_attempts);
    c.harvest.retry_backoff_ms = hv.value("retry_backoff_ms", c.harvest.retry_backoff_ms);
    c.harvest.templates_dir = detail::resolve_path(hv, "templates_dir", base_dir);

    const json sw = j.value("sweep", json::object());
    c.sweep.grid = sw.value("grid", c.sweep.grid);
    c.sweep.mode = sw.value("mode", c.sweep.mode);
    c.sweep.teachers = sw.value("teachers", c.sweep.teachers);

    const json rd = j.value("reduction", json::object());
    c.reduction.ratios = rd.value("ratios", c.reduction.ratios);
    c.reduction.seed = rd.value("seed", c.reduction.seed);
    c.reduction.ff_reference = rd.value("ff_reference", c.reduction.ff_reference);

    const json ab = j.value("ablation", json::object());
    c.ablation.strongest_teacher = ab.value("strongest_teacher", c.ablation.strongest_teacher);
    c.ablation.diverse_samples = ab.value("diverse_samples", c.ablation.diverse_samples);
    c.ablation.diverse_temperature = ab.value("diverse_temperature", c.ablation.diverse_temperature);

    c.baselines = j.value("baselines", c.baselines);
    c.explain_samples = j.value("explain_samples", c.explain_samples);
    if (j.contains("train_ratio") && !j.at("train_ratio").is_null()) c.train_ratio = j.at("train_ratio").get<double>();
    c.subsample_seed = j.value("subsample_seed", c.subsample_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json datasets = json::array();
  for (const auto& d : c.datasets) {
    json e{{"name", d.name}, {"description", d.description}, {"train", d.train.string()}, {"test", d.test.string()},
           {"format", d.format}};
    if (!d.icl_examples.empty()) e["icl_examples"] = d.icl_examples.string();
    datasets.push_back(std::move(e));
  }
  json j{{"run_id", c.run_id},
         {"output_root", c.output_root.string()},
         {"kind", to_string(c.kind)},
         {"datasets", datasets},
         {"teachers", c.teachers},
         {"distillation",
          {{"alphas", c.distillation.alphas},
           {"prefixes", c.distillation.prefixes},
           {"teacher_forcing", c.distillation.teacher_forcing},
           {"icl_count", c.distillation.icl_count}}},
         {"train", c.train},
         {"student",
          {{"embed", c.student.embed},
           {"hidden", c.student.hidden},
           {"max_target", c.student.max_target},
           {"init_scale", c.student.init_scale}}},
         {"harvest",
          {{"parallelism", c.harvest.parallelism},
           {"max_chars", c.harvest.max_chars},
           {"retry_attempts", c.harvest.retry_attempts},
           {"retry_backoff_ms", c.harvest.retry_backoff_ms},
           {"templates_dir", c.harvest.templates_dir.string()}}},
         {"sweep", {{"grid", c.sweep.grid}, {"mode", c.sweep.mode}, {"teachers", c.sweep.teachers}}},
         {"reduction",
          {{"ratios", c.reduction.ratios}, {"seed", c.reduction.seed}, {"ff_reference", c.reduction.ff_reference}}},
         {"ablation",
          {{"strongest_teacher", c.ablation.strongest_teacher},
           {"diverse_samples", c.ablation.diverse_samples},
           {"diverse_temperature", c.ablation.diverse_temperature}}},
         {"baselines", c.baselines},
         {"explain_samples", c.explain_samples},
         {"subsample_seed", c.subsample_seed}};
  j["train_ratio"] = c.train_ratio ? json(*c.train_ratio) : json(nullptr);
  return j;
}

/// Reads a config file, applies `--set` style overrides, resolves relative paths against the
/// file's directory, and validates.
inline ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides = {},
                                               bool check_files = true) {
  json j;
  try {
    j = util::read_json(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  auto c = experiment_config_from_json(j, fs::absolute(path).parent_path());
  c.validate(check_files);
  return c;
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

enum class Stage { harvest = 0, build = 1, train = 2, eval = 3 };

inline std::string to_string(Stage s) {
  static const char* names[] = {"harvest", "build", "train", "eval"};
  return names[static_cast<int>(s)];
}

struct DatasetRunRecord {
  std::string dataset;
  std::size_t train_items = 0;
  HarvestSummary harvest;
  bool harvested = false;  // harvest stage ran (possibly all cache hits)
  bool built = false;      // corpus written this run (false = reused or not requested)
  bool trained = false;
  bool evaluated = false;
  std::size_t corpus_size = 0;
  std::size_t steps = 0;
  std::string corpus_fingerprint;
  fs::path checkpoint;
  std::optional<double> initial_mean_loss;
  std::vector<double> epoch_mean_losses;
  std::optional<DatasetScore> score;
};

inline void to_json(json& j, const DatasetRunRecord& r) {
  j = json{{"dataset", r.dataset},
           {"train_items", r.train_items},
           {"harvest", r.harvest},
           {"stages_executed",
            {{"harvest", r.harvested}, {"build", r.built}, {"train", r.trained}, {"eval", r.evaluated}}},
           {"corpus_size", r.corpus_size},
           {"steps", r.steps},
           {"corpus_fingerprint", r.corpus_fingerprint},
           {"checkpoint", r.checkpoint.string()},
           {"epoch_mean_losses", r.epoch_mean_losses}};
  j["initial_mean_loss"] = r.initial_mean_loss ? json(*r.initial_mean_loss) : json(nullptr);
  if (r.score) j["score"] = *r.score;
}

struct RunResult {
  fs::path run_dir;
  EvalReport report;
  std::vector<DatasetRunRecord> datasets;
};

struct RunOptions {
  Stage first = Stage::harvest;
  Stage last = Stage::eval;
  /// Backend override per teacher id (tests inject fakes here).
  std::map<std::string, std::shared_ptr<TeacherBackend>> backends;
  std::function<void(const std::string&)> progress;
};

namespace detail {

inline std::string short_hash(const json& j) { return util::sha256_hex(j.dump()).substr(0, 16); }

inline PromptTemplates templates_for(const ExperimentConfig& c) {
  return c.harvest.templates_dir.empty() ? PromptTemplates{} : PromptTemplates::from_directory(c.harvest.templates_dir);
}

inline HarvestOptions harvest_options(const ExperimentConfig& c) {
  HarvestOptions o;
  o.teacher_forcing = c.distillation.teacher_forcing;
  o.limits.max_chars = c.harvest.max_chars;
  o.retry.attempts = c.harvest.retry_attempts;
  o.retry.base_backoff = std::chrono::milliseconds(c.harvest.retry_backoff_ms);
  o.templates = templates_for(c);
  o.parallelism = c.harvest.parallelism;
  return o;
}

inline fs::path cache_dir(const ExperimentConfig& c, const DatasetEntry& d) { return c.output_root / "cache" / d.name; }

inline fs::path store_path(const ExperimentConfig& c, const DatasetEntry& d) {
  json scope{{"teacher_forcing", c.distillation.teacher_forcing},
             {"icl_count", c.distillation.icl_count},
             {"templates", templates_for(c).fingerprint()},
             {"max_chars", c.harvest.max_chars},
             {"icl_examples", d.icl_examples.empty() ? std::string{} : util::sha256_hex(util::read_file(d.icl_examples))}};
  return cache_dir(c, d) / ("rationales-" + short_hash(scope) + ".jsonl");
}

inline std::vector<std::string> active_teachers(const ExperimentConfig& c) {
  std::vector<std::string> out;
  for (const auto& t : c.distillation.teachers)
    if (c.distillation.alpha(t) != 0.0) out.push_back(t);
  return out;
}

inline std::shared_ptr<TeacherBackend> backend_for(const TeacherSpec& spec, const RunOptions& opts) {
  auto it = opts.backends.find(spec.teacher_id);
  return it != opts.backends.end() ? it->second : make_backend(spec);
}

/// The demonstration pool for one teacher on one dataset, generated once and cached.
inline std::vector<InContextExample> icl_pool(const ExperimentConfig& c, const DatasetEntry& d, const TeacherSpec& spec,
                                              TeacherBackend& backend, const HarvestOptions& hopts) {
  if (c.distillation.icl_count == 0) return {};
  if (!d.icl_examples.empty()) {
    auto all = util::read_json(d.icl_examples).get<std::vector<InContextExample>>();
    for (auto& e : all) e.provenance = Provenance::user_supplied;
    if (all.size() > static_cast<std::size_t>(c.distillation.icl_count)) all.resize(c.distillation.icl_count);
    return all;
  }
  json key{{"teacher", spec},
           {"description", d.description},
           {"count", c.distillation.icl_count},
           {"templates", hopts.templates.fingerprint()}};
  auto path = cache_dir(c, d) / "icl" / (spec.teacher_id + "-" + short_hash(key) + ".json");
  if (fs::exists(path)) return util::read_json(path).get<std::vector<InContextExample>>();
  auto examples = generate_in_context_examples(backend, spec, d.description, c.distillation.icl_count, hopts);
  util::write_json(path, examples);
  return examples;
}

/// Fingerprint of exactly the store records a corpus draws on.
inline std::string used_records_fingerprint(const RationaleStore& store, const DatasetSplit& split,
                                            const std::vector<std::string>& teachers) {
  std::string acc;
  for (const auto& item : split.items)
    for (const auto& t : teachers) {
      auto r = store.latest(item.id, t);
      if (!r) continue;
      json j = *r;
      j.erase("created_at");
      acc += j.dump() + "\n";
    }
  return util::sha256_hex(acc);
}

inline std::size_t planned_steps(const std::vector<TrainingExample>& corpus, const TrainConfig& t) {
  std::size_t n = 0;
  for (const auto& e : corpus) n += e.weight != 0.0;
  return static_cast<std::size_t>(t.epochs) * ((n + t.batch_size - 1) / t.batch_size);
}

inline json student_json(const TinySeq2Seq::Dims& d) {
  return json{{"embed", d.embed}, {"hidden", d.hidden}, {"max_target", d.max_target}, {"init_scale", d.init_scale}};
}

template <class F>
auto run_stage(Stage stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(to_string(stage), e.what());
  }
}

}  // namespace detail

inline DatasetSplit load_train_split(const ExperimentConfig& c, const DatasetEntry& d) {
  auto split = load_dataset(d.train, d.format, {"train", d.name});
  if (c.train_ratio) split = subsample(split, *c.train_ratio, c.subsample_seed);
  return split;
}

inline DatasetSplit load_test_split(const DatasetEntry& d) { return load_dataset(d.test, d.format, {"test", d.name}); }

/// Harvests rationales for every active teacher into the shared store.
inline HarvestSummary harvest_dataset(const ExperimentConfig& c, const DatasetEntry& d, const DatasetSplit& split,
                                      const RunOptions& opts = {}) {
  auto hopts = detail::harvest_options(c);
  std::vector<TeacherBinding> bindings;
  for (const auto& id : detail::active_teachers(c)) {
    const auto& spec = c.teacher(id);
    auto backend = detail::backend_for(spec, opts);
    bindings.push_back({spec, backend, detail::icl_pool(c, d, spec, *backend, hopts)});
  }
  RationaleStore store(detail::store_path(c, d));
  return harvest_all(bindings, split, store, hopts);
}

struct BuiltCorpus {
  std::vector<TrainingExample> examples;
  json manifest;
  bool written = false;
};

inline BuiltCorpus build_dataset_corpus(const ExperimentConfig& c, const DatasetEntry& d, const DatasetSplit& split,
                                        const fs::path& dataset_dir) {
  RationaleStore store(detail::store_path(c, d));
  BuiltCorpus out;
  out.examples = assemble(split, store, c.distillation);
  out.manifest = corpus_manifest(out.examples, c.distillation,
                                 detail::used_records_fingerprint(store, split, detail::active_teachers(c)));
  auto manifest_path = dataset_dir / "corpus_manifest.json";
  auto corpus_path = dataset_dir / "corpus.jsonl";
  if (fs::exists(manifest_path) && fs::exists(corpus_path)) {
    auto old = util::read_json(manifest_path);
    if (old.value("fingerprint", std::string{}) == out.manifest["fingerprint"] &&
        util::sha256_hex(util::read_file(corpus_path)) == out.manifest["corpus_sha256"])
      return out;
  }
  write_corpus(corpus_path, out.examples);
  util::write_json(manifest_path, out.manifest);
  out.written = true;
  return out;
}

inline BuiltCorpus read_dataset_corpus(const fs::path& dataset_dir) {
  auto manifest_path = dataset_dir / "corpus_manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("no corpus in " + dataset_dir.string() + " (run the build stage)");
  BuiltCorpus out;
  out.manifest = util::read_json(manifest_path);
  out.examples = read_corpus(dataset_dir / "corpus.jsonl");
  return out;
}

struct TrainedStudent {
  std::unique_ptr<TinySeq2Seq> student;
  fs::path checkpoint;
  std::string model_sha256;
  bool trained = false;
  std::size_t steps = 0;
  std::optional<double> initial_mean_loss;
  std::vector<double> epoch_mean_losses;
};

inline TinySeq2Seq make_student(const ExperimentConfig& c, const std::vector<TrainingExample>& corpus) {
  std::vector<std::string> texts;
  for (const auto& e : corpus) {
    texts.push_back(e.input);
    texts.push_back(e.target);
  }
  return TinySeq2Seq(Vocabulary::build(texts), c.student, c.train.seed,
                     static_cast<std::size_t>(c.train.max_input_length));
}

/// Trains unless a checkpoint for the same corpus, train config and student dims exists.
inline TrainedStudent train_dataset(const ExperimentConfig& c, const BuiltCorpus& corpus, const fs::path& dataset_dir,
                                    bool allow_training = true) {
  TrainedStudent out;
  out.steps = detail::planned_steps(corpus.examples, c.train);
  out.checkpoint = dataset_dir / ("step-" + std::to_string(out.steps));
  const std::string corpus_fp = corpus.manifest.at("fingerprint").get<std::string>();
  auto manifest_path = out.checkpoint / "manifest.json";
  auto summary_path = dataset_dir / "train_summary.json";
  if (fs::exists(manifest_path) && fs::exists(out.checkpoint / "model.json") && fs::exists(summary_path)) {
    auto m = util::read_json(manifest_path);
    if (m.value("corpus_fingerprint", std::string{}) == corpus_fp && m.at("train") == json(c.train) &&
        m.value("student", json{}) == detail::student_json(c.student)) {
      out.student = load_checkpoint(out.checkpoint);
      out.model_sha256 = m.at("model_sha256").get<std::string>();
      auto s = util::read_json(summary_path);
      if (!s.at("initial_mean_loss").is_null()) out.initial_mean_loss = s.at("initial_mean_loss").get<double>();
      out.epoch_mean_losses = s.at("epoch_mean_losses").get<std::vector<double>>();
      return out;
    }
  }
  if (!allow_training) throw DataError("no matching checkpoint at " + out.checkpoint.string() + " (run the train stage)");

  auto student = std::make_unique<TinySeq2Seq>(make_student(c, corpus.examples));
  TrainOptions topts;
  topts.measure_initial_loss = true;
  auto log = train(*student, corpus.examples, c.train, topts);
  write_training_log(dataset_dir / "train_log.jsonl", log);
  util::write_json(summary_path, json{{"initial_mean_loss", log.initial_mean_loss ? json(*log.initial_mean_loss) : json()},
                                      {"epoch_mean_losses", log.epoch_mean_losses},
                                      {"steps", log.steps.size()},
                                      {"dropped_zero_weight", log.dropped_zero_weight}});
  auto manifest = save_checkpoint(out.checkpoint, *student, c.train, corpus_fp, log.steps.size(),
                                  json{{"student", detail::student_json(c.student)}});
  out.model_sha256 = manifest.at("model_sha256").get<std::string>();
  out.initial_mean_loss = log.initial_mean_loss;
  out.epoch_mean_losses = log.epoch_mean_losses;
  out.student = std::move(student);
  out.trained = true;
  return out;
}

/// Evaluates unless eval.json already scores this exact checkpoint on this exact test split.
inline std::pair<DatasetScore, bool> eval_dataset(const ExperimentConfig& c, const DatasetSplit& test,
                                                  const TrainedStudent& trained, const fs::path& dataset_dir) {
  auto path = dataset_dir / "eval.json";
  std::string test_sha;
  for (const auto& item : test.items) test_sha += json(item).dump() + "\n";
  test_sha = util::sha256_hex(test_sha);
  if (fs::exists(path)) {
    auto old = util::read_json(path);
    if (old.value("model_sha256", std::string{}) == trained.model_sha256 &&
        old.value("test_sha256", std::string{}) == test_sha)
      return {old.at("score").get<DatasetScore>(), false};
  }
  auto result = evaluate(*trained.student, test, c.distillation.prefixes);
  json predictions = json::array();
  for (const auto& p : result.predictions)
    predictions.push_back({{"item_id", p.item_id},
                           {"generated", p.generated},
                           {"predicted", p.predicted ? json(*p.predicted) : json(nullptr)},
                           {"correct", p.correct}});
  json explanations = json::array();
  for (std::size_t i = 0; i < std::min(c.explain_samples, test.items.size()); ++i)
    for (const auto& t : detail::active_teachers(c))
      explanations.push_back({{"item_id", test.items[i].id},
                              {"teacher", t},
                              {"text", explain(*trained.student, test.items[i], c.distillation.prefixes,
                                               c.distillation.prefixes.for_teacher(t))}});
  util::write_json(path, json{{"model_sha256", trained.model_sha256},
                              {"test_sha256", test_sha},
                              {"score", result.score},
                              {"predictions", predictions},
                              {"explanations", explanations}});
  return {result.score, true};
}

/// Runs stages [opts.first, opts.last] for every dataset. Stages before `first` must have left
/// their artifacts; completed stages are reused when their inputs are unchanged.
inline RunResult run_single(const ExperimentConfig& config, const RunOptions& opts = {}) {
  config.validate();
  RunResult result;
  result.run_dir = config.run_dir();
  fs::create_directories(result.run_dir);

  auto snapshot = to_json(config);
  auto config_path = result.run_dir / "config.json";
  if (fs::exists(config_path)) {
    json existing;
    try {
      existing = util::read_json(config_path);
    } catch (const std::exception&) {
    }
    if (!existing.is_null() && existing != snapshot)
      throw ConfigError("run_id '" + config.run_id + "' already exists under " + config.output_root.string() +
                        " with a different config");
  }
  util::write_json(config_path, snapshot);

  auto in_range = [&](Stage s) { return s >= opts.first && s <= opts.last; };
  auto note = [&](const std::string& msg) {
    if (opts.progress) opts.progress(msg);
  };

  for (const auto& d : config.datasets) {
    DatasetRunRecord rec;
    rec.dataset = d.name;
    auto dataset_dir = result.run_dir / d.name;
    fs::create_directories(dataset_dir);

    auto split = detail::run_stage(Stage::harvest, [&] { return load_train_split(config, d); });
    rec.train_items = split.items.size();

    if (in_range(Stage::harvest)) {
      note(d.name + ": harvest");
      rec.harvest = detail::run_stage(Stage::harvest, [&] { return harvest_dataset(config, d, split, opts); });
      rec.harvested = true;
      util::write_json(dataset_dir / "harvest.json", rec.harvest);
    }
    if (opts.last < Stage::build) {
      result.datasets.push_back(std::move(rec));
      continue;
    }

    BuiltCorpus corpus = detail::run_stage(Stage::build, [&] {
      if (in_range(Stage::build)) {
        note(d.name + ": build");
        return build_dataset_corpus(config, d, split, dataset_dir);
      }
      return read_dataset_corpus(dataset_dir);
    });
    rec.built = corpus.written;
    rec.corpus_size = corpus.examples.size();
    rec.corpus_fingerprint = corpus.manifest.at("fingerprint").get<std::string>();
    if (opts.last < Stage::train) {
      result.datasets.push_back(std::move(rec));
      continue;
    }

    auto trained = detail::run_stage(Stage::train, [&] {
      if (in_range(Stage::train)) note(d.name + ": train");
      return train_dataset(config, corpus, dataset_dir, in_range(Stage::train));
    });
    rec.trained = trained.trained;
    rec.steps = trained.steps;
    rec.checkpoint = trained.checkpoint;
    rec.initial_mean_loss = trained.initial_mean_loss;
    rec.epoch_mean_losses = trained.epoch_mean_losses;

    if (in_range(Stage::eval)) {
      note(d.name + ": eval");
      auto [score, evaluated] = detail::run_stage(Stage::eval, [&] {
        auto test = load_test_split(d);
        return eval_dataset(config, test, trained, dataset_dir);
      });
      rec.score = score;
      rec.evaluated = evaluated;
      result.report.datasets[d.name] = score;
    }
    result.datasets.push_back(std::move(rec));
  }

  if (!result.report.datasets.empty()) {
    result.report.recompute_overall();
    result.report.deltas = delta_report(result.report.overall, config.baselines);
    util::write_json(result.run_dir / "eval_report.json", result.report);
  }
  util::write_json(result.run_dir / "stages.json", result.datasets);
  return result;
}

// ---------------------------------------------------------------------------
// Grid runners
// ---------------------------------------------------------------------------

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline ExperimentConfig child_config(const ExperimentConfig& parent, const std::string& suffix) {
  ExperimentConfig c = parent;
  c.kind = ExperimentKind::single;
  c.run_id = parent.run_id + "/" + suffix;
  return c;
}

struct NamedRun {
  std::string name;
  ExperimentConfig config;
  std::string swept;  // sweep points: the teacher whose alpha varies, "all" (joint) or "" (cross)
};

/// full, wo-in-context, wo-<teacher> per teacher, wo-diverse-teachers, wo-teacher-forcing.
inline std::vector<NamedRun> ablation_variants(const ExperimentConfig& base) {
  std::vector<NamedRun> out;
  out.push_back({"full", child_config(base, "full")});

  auto no_icl = child_config(base, "wo-in-context");
  no_icl.distillation.icl_count = 0;
  out.push_back({"wo-in-context", no_icl});

  for (const auto& t : base.teachers) {
    auto v = child_config(base, "wo-" + t.teacher_id);
    std::vector<TeacherSpec> specs;
    std::map<std::string, double> alphas;
    for (const auto& s : base.teachers)
      if (s.teacher_id != t.teacher_id) {
        specs.push_back(s);
        alphas[s.teacher_id] = base.distillation.alpha(s.teacher_id);
      }
    v.set_teachers(std::move(specs), std::move(alphas));
    out.push_back({"wo-" + t.teacher_id, v});
  }

  auto diverse = child_config(base, "wo-diverse-teachers");
  const auto& strongest =
      base.teacher(base.ablation.strongest_teacher.empty() ? base.teachers.front().teacher_id : base.ablation.strongest_teacher);
  std::vector<TeacherSpec> clones;
  std::map<std::string, double> clone_alphas;
  for (int k = 1; k <= base.ablation.diverse_samples; ++k) {
    TeacherSpec s = strongest;
    s.teacher_id = strongest.teacher_id + "#" + std::to_string(k);
    s.generation.temperature = base.ablation.diverse_temperature;
    s.generation.seed = static_cast<std::uint64_t>(k);
    clone_alphas[s.teacher_id] = base.distillation.alpha(strongest.teacher_id);
    clones.push_back(std::move(s));
  }
  diverse.distillation.prefixes.teacher_prefixes.clear();
  diverse.set_teachers(std::move(clones), std::move(clone_alphas));
  out.push_back({"wo-diverse-teachers", diverse});

  auto no_tf = child_config(base, "wo-teacher-forcing");
  no_tf.distillation.teacher_forcing = false;
  out.push_back({"wo-teacher-forcing", no_tf});
  return out;
}

/// One run per alpha assignment: per-teacher (one teacher swept, others as configured),
/// joint (all swept teachers share the value), or cross (cartesian product).
inline std::vector<NamedRun> sweep_points(const ExperimentConfig& base) {
  std::vector<std::string> swept = base.sweep.teachers.empty() ? base.distillation.teachers : base.sweep.teachers;
  std::vector<std::map<std::string, double>> assignments;
  std::vector<std::string> varied;
  if (base.sweep.mode == "per-teacher") {
    for (const auto& t : swept)
      for (double g : base.sweep.grid) {
        auto a = base.distillation.alphas;
        a[t] = g;
        assignments.push_back(a);
        varied.push_back(t);
      }
  } else if (base.sweep.mode == "joint") {
    for (double g : base.sweep.grid) {
      auto a = base.distillation.alphas;
      for (const auto& t : swept) a[t] = g;
      assignments.push_back(a);
      varied.push_back("all");
    }
  } else {
    assignments.push_back(base.distillation.alphas);
    for (const auto& t : swept) {
      std::vector<std::map<std::string, double>> next;
      for (const auto& a : assignments)
        for (double g : base.sweep.grid) {
          auto b = a;
          b[t] = g;
          next.push_back(b);
        }
      assignments = std::move(next);
    }
    varied.assign(assignments.size(), "");
  }
  std::vector<NamedRun> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    std::string name;
    for (const auto& [t, v] : assignments[i]) name += (name.empty() ? "" : ",") + t + "=" + format_number(v);
    auto c = child_config(base, "alpha-" + name);
    c.set_alphas(assignments[i]);
    out.push_back({name, c, varied[i]});
  }
  return out;
}

inline std::vector<NamedRun> reduction_points(const ExperimentConfig& base) {
  std::vector<NamedRun> out;
  for (double r : base.reduction.ratios) {
    auto c = child_config(base, "ratio-" + format_number(r));
    c.train_ratio = r;
    c.subsample_seed = base.reduction.seed;
    out.push_back({format_number(r), c});
  }
  return out;
}

/// Answer-only fine-tuning on the full training split.
inline ExperimentConfig ff_reference_config(const ExperimentConfig& base) {
  auto c = child_config(base, "ff-100");
  auto a = base.distillation.alphas;
  for (auto& [_, v] : a) v = 0.0;
  c.set_alphas(a);
  c.train_ratio.reset();
  return c;
}

struct GridResult {
  std::vector<std::pair<std::string, RunResult>> runs;
  json summary;
};

inline GridResult run_ablation(const ExperimentConfig& config, const RunOptions& opts = {}) {
  auto base = config;
  base.kind = ExperimentKind::ablation;
  base.validate();
  GridResult g;
  json rows = json::array();
  for (auto& v : ablation_variants(base)) {
    auto r = run_single(v.config, opts);
    rows.push_back({{"variant", v.name},
                    {"run_id", v.config.run_id},
                    {"overall", r.report.overall},
                    {"datasets", r.report.datasets}});
    g.runs.emplace_back(v.name, std::move(r));
  }
  g.summary = json{{"kind", "ablation"}, {"variants", rows}};
  util::write_json(base.run_dir() / "ablation.json", g.summary);
  return g;
}

inline GridResult run_alpha_sweep(const ExperimentConfig& config, const RunOptions& opts = {}) {
  auto base = config;
  base.kind = ExperimentKind::alpha_sweep;
  base.validate();
  GridResult g;
  json rows = json::array();
  for (auto& p : sweep_points(base)) {
    auto r = run_single(p.config, opts);
    rows.push_back({{"alphas", p.config.distillation.alphas},
                    {"swept", p.swept},
                    {"run_id", p.config.run_id},
                    {"overall", r.report.overall}});
    g.runs.emplace_back(p.name, std::move(r));
  }
  g.summary = json{{"kind", "alpha-sweep"}, {"mode", base.sweep.mode}, {"grid", base.sweep.grid}, {"points", rows}};
  util::write_json(base.run_dir() / "sweep.json", g.summary);
  return g;
}

inline GridResult run_reduction(const ExperimentConfig& config, const RunOptions& opts = {}) {
  auto base = config;
  base.kind = ExperimentKind::reduction;
  base.validate();
  GridResult g;
  json rows = json::array();
  for (auto& p : reduction_points(base)) {
    auto r = run_single(p.config, opts);
    rows.push_back({{"ratio", *p.config.train_ratio},
                    {"run_id", p.config.run_id},
                    {"train_sizes", [&] {
                       json s = json::object();
                       for (const auto& d : r.datasets) s[d.dataset] = d.train_items;
                       return s;
                     }()},
                    {"overall", r.report.overall}});
    g.runs.emplace_back(p.name, std::move(r));
  }
  g.summary = json{{"kind", "reduction"}, {"points", rows}};
  if (base.reduction.ff_reference) {
    auto ff = ff_reference_config(base);
    auto r = run_single(ff, opts);
    g.summary["ff_reference"] = {{"run_id", ff.run_id}, {"overall", r.report.overall}};
    g.runs.emplace_back("ff-100", std::move(r));
  }
  util::write_json(base.run_dir() / "reduction.json", g.summary);
  return g;
}

/// Dispatches on config.kind. Returns the grid summary (or the single run's report).
inline json run_experiment(const ExperimentConfig& config, const RunOptions& opts = {}) {
  switch (config.kind) {
    case ExperimentKind::single: return json(run_single(config, opts).report);
    case ExperimentKind::ablation: return run_ablation(config, opts).summary;
    case ExperimentKind::alpha_sweep: return run_alpha_sweep(config, opts).summary;
    case ExperimentKind::reduction: return run_reduction(config, opts).summary;
  }
  return {};
}

// ---------------------------------------------------------------------------
// Synthetic experiment
// ---------------------------------------------------------------------------

/// Writes the synthetic splits under `data_dir` and returns a ready-to-run config with the two
/// rule teachers at alpha 1.
inline ExperimentConfig synthetic_experiment(const fs::path& data_dir, const fs::path& output_root, std::string run_id,
                                             const SyntheticTaskConfig& task_cfg = {}) {
  auto task = make_synthetic_task(task_cfg);
  auto train_path = fs::absolute(data_dir / (task_cfg.dataset + "-train.jsonl"));
  auto test_path = fs::absolute(data_dir / (task_cfg.dataset + "-test.jsonl"));
  write_dataset(task.train, train_path);
  write_dataset(task.test, test_path);

  ExperimentConfig c;
  c.run_id = std::move(run_id);
  c.output_root = fs::absolute(output_root);
  c.datasets.push_back({task_cfg.dataset, task.description, train_path, test_path, "canonical-jsonl", {}});
  c.train.learning_rate = 1e-2;
  c.train.batch_size = 8;
  c.train.epochs = 1;
  c.train.seed = 0;
  c.harvest.retry_backoff_ms = 5;
  c.explain_samples = 10;
  auto specs = synthetic_teacher_specs();
  std::map<std::string, double> alphas;
  for (const auto& s : specs) alphas[s.teacher_id] = 1.0;
  c.set_teachers(std::move(specs), std::move(alphas));
  c.ablation.strongest_teacher = c.teachers.front().teacher_id;
  return c;
}

}  // namespace mtdistill
