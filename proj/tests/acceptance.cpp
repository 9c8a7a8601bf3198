// Acceptance suite: one PASS/FAIL line per criterion, each with its runtime. Tolerances and
// runtime budgets are fixed below. Exit status is non-zero if any criterion fails.

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mtdistill/backends.hpp"
#include "mtdistill/evaluator.hpp"
#include "mtdistill/experiment.hpp"
#include "mtdistill/multitask_builder.hpp"
#include "mtdistill/synthetic.hpp"
#include "mtdistill/trainer.hpp"
#include "support.hpp"

namespace {

using namespace mtdistill;
namespace fs = std::filesystem;

constexpr double kDeltaTolPp = 0.05;
constexpr double kTotalTol = 0.01;
constexpr double kDecompRel = 1e-6;
constexpr double kAffineRel = 1e-5;
constexpr double kGradRel = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr std::size_t kGradCoords = 100;
constexpr double kMinAccuracy = 0.90;
constexpr double kMinGrammarShare = 0.80;

// Values quoted in the text alongside the table (percent).
constexpr double kQuoted80MTotalVsFF = 15.69;
constexpr double kQuoted780MVs3B = 14.56;
constexpr double kQuoted780MVs7B = 23.40;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

std::string fmt(double v, int digits = 4) { return format_fixed(v, digits); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double rel_err(double a, double b) {
  double scale = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / scale;
}

fs::path data_file() { return fs::path(MTDISTILL_SOURCE_DIR) / "data" / "table1_baselines.json"; }

// ---------------------------------------------------------------------------
// 1, 2: table arithmetic
// ---------------------------------------------------------------------------

Outcome delta_fixture() {
  Outcome o;
  auto t = BaselineTable::load(data_file());
  std::size_t checked = 0;
  double worst = 0.0;
  auto check = [&](double method, double base, double printed, const std::string& label) {
    auto d = delta_report(method / 100.0, {{"b", base / 100.0}}).at("b") * 100.0;
    worst = std::max(worst, std::abs(d - printed));
    ++checked;
    o.require(std::abs(d - printed) <= kDeltaTolPp, label + " computed " + fmt(d, 2) + " vs printed " + fmt(printed, 2));
    return d;
  };
  for (const auto& size : t.student_order) {
    const auto& s = t.students.at(size);
    const auto& method = s.row(t.method_row);
    for (const auto& [baseline, printed] : s.printed_deltas_pct) {
      const auto& base = s.row(baseline);
      for (std::size_t c = 0; c < t.columns.size(); ++c)
        check(method[c], base[c], printed.at(c), size + "/" + baseline + "/" + t.columns[c]);
    }
    for (const auto& [teacher, printed] : s.printed_teacher_deltas_pct)
      check(method.back(), t.teachers.at(teacher).back(), printed, size + " vs " + teacher);
  }
  // The values quoted in the text must agree with the shipped file.
  const auto& s80 = t.students.at("80M");
  o.require(std::abs(s80.printed_deltas_pct.at("Full Fine-tuning").back() - kQuoted80MTotalVsFF) < 1e-9,
            "80M total delta in data file differs from quoted value");
  const auto& s780 = t.students.at("780M");
  o.require(std::abs(s780.printed_teacher_deltas_pct.at("3B teacher") - kQuoted780MVs3B) < 1e-9 &&
                std::abs(s780.printed_teacher_deltas_pct.at("7B teacher") - kQuoted780MVs7B) < 1e-9,
            "780M teacher deltas in data file differ from quoted values");
  o.require(checked >= 3 * 2 * 7 + 2, "too few deltas checked: " + std::to_string(checked));
  o.note(std::to_string(checked) + " deltas, worst |err| " + fmt(worst, 4) + "pp");
  return o;
}

Outcome total_fixture() {
  Outcome o;
  auto t = BaselineTable::load(data_file());
  double worst = 0.0;
  for (const auto& size : t.student_order) {
    const auto& row = t.students.at(size).row(t.method_row);
    double mean = overall_score(std::vector<double>(row.begin(), row.end() - 1));
    worst = std::max(worst, std::abs(mean - row.back()));
    o.require(std::abs(mean - row.back()) <= kTotalTol,
              size + " mean " + fmt(mean, 4) + " vs printed total " + fmt(row.back(), 2));
  }
  o.note("3 sizes, worst |err| " + fmt(worst, 4));
  return o;
}

// ---------------------------------------------------------------------------
// 3, 4: loss decomposition and gradients
// ---------------------------------------------------------------------------

struct RandomCorpus {
  std::vector<TrainingExample> examples;
  std::vector<std::string> teachers;
};

RandomCorpus random_corpus(std::mt19937_64& rng, std::size_t items, std::size_t teachers, std::size_t words) {
  RandomCorpus rc;
  for (std::size_t m = 0; m < teachers; ++m) rc.teachers.push_back("t" + std::to_string(m));
  auto prefixes = PrefixConfig::defaults(rc.teachers);
  std::uniform_int_distribution<std::size_t> word(0, words - 1), len(1, 5);
  auto phrase = [&] {
    std::string s;
    for (std::size_t i = 0, n = len(rng); i < n; ++i) s += (i ? " w" : "w") + std::to_string(word(rng));
    return s;
  };
  for (std::size_t i = 0; i < items; ++i) {
    MCQAItem item;
    item.id = "i" + std::to_string(i);
    item.question = phrase();
    item.options = {"o" + std::to_string(i) + "a", "o" + std::to_string(i) + "b"};
    item.answer_index = rng() % 2;
    rc.examples.push_back({item.id, Task::answer(), build_student_input(item, prefixes, prefixes.answer_prefix),
                           item.answer_text(), 1.0});
    for (const auto& t : rc.teachers)
      if (rng() % 4 != 0)
        rc.examples.push_back({item.id, Task::teacher(t), build_student_input(item, prefixes, prefixes.for_teacher(t)),
                               phrase(), 1.0});
  }
  return rc;
}

TinySeq2Seq student_for(const std::vector<TrainingExample>& corpus, TinySeq2Seq::Dims dims, std::uint64_t seed) {
  std::vector<std::string> texts;
  for (const auto& e : corpus) {
    texts.push_back(e.input);
    texts.push_back(e.target);
  }
  return TinySeq2Seq(Vocabulary::build(texts), dims, seed);
}

Outcome loss_decomposition() {
  Outcome o;
  std::mt19937_64 rng(20261015);
  std::uniform_real_distribution<double> alpha(0.0, 3.0), unit(0.0, 1.0);
  double worst_decomp = 0.0, worst_oracle = 0.0, worst_affine = 0.0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    auto rc = random_corpus(rng, 12, 3, 30);
    auto student = student_for(rc.examples, {6, 8, 6, 0.3}, rng());
    std::shuffle(rc.examples.begin(), rc.examples.end(), rng);
    std::size_t bs = 1 + rng() % 10;
    std::vector<TrainingExample> batch(rc.examples.begin(), rc.examples.begin() + std::min(bs, rc.examples.size()));

    std::map<std::string, double> a, b;
    for (const auto& t : rc.teachers) {
      a[t] = trial % 5 == 0 ? 0.0 : alpha(rng);
      b[t] = alpha(rng);
    }
    auto la = batch_loss(student, batch, a);

    // Decomposition identity.
    double recomposed = la.answer_term;
    for (const auto& [t, w] : a) recomposed += w * la.teacher_terms.at(t);
    worst_decomp = std::max(worst_decomp, rel_err(la.total, recomposed));

    // Independent oracle from per-example losses.
    std::map<std::string, std::pair<double, int>> per_task;
    for (const auto& e : batch) {
      auto& [sum, n] = per_task[e.task.str()];
      sum += example_loss(student, e);
      ++n;
    }
    double oracle = 0.0;
    for (const auto& [task, sn] : per_task) {
      double mean = sn.first / sn.second;
      auto parsed = Task::parse(task);
      oracle += parsed.is_answer() ? mean : a.at(parsed.teacher_id) * mean;
    }
    worst_oracle = std::max(worst_oracle, rel_err(la.total, oracle));

    // Affine in alpha: f(l a + (1 - l) b) = l f(a) + (1 - l) f(b).
    double lam = unit(rng);
    std::map<std::string, double> mix;
    for (const auto& t : rc.teachers) mix[t] = lam * a[t] + (1 - lam) * b[t];
    double lhs = batch_loss(student, batch, mix).total;
    double rhs = lam * la.total + (1 - lam) * batch_loss(student, batch, b).total;
    worst_affine = std::max(worst_affine, rel_err(lhs, rhs));
  }
  o.require(worst_decomp <= kDecompRel, "decomposition rel err " + sci(worst_decomp));
  o.require(worst_oracle <= kDecompRel, "oracle rel err " + sci(worst_oracle));
  o.require(worst_affine <= kAffineRel, "affinity rel err " + sci(worst_affine));

  // alpha = 0 versus answer-only fine-tuning under the same seed.
  auto rc = random_corpus(rng, 40, 2, 25);
  std::vector<TrainingExample> zeroed = rc.examples, answer_only;
  for (auto& e : zeroed)
    if (!e.task.is_answer()) e.weight = 0.0;
  for (const auto& e : rc.examples)
    if (e.task.is_answer()) answer_only.push_back(e);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 99;
  cfg.alphas = {{"t0", 0.0}, {"t1", 0.0}};
  auto s0 = student_for(rc.examples, {8, 12, 8, 0.1}, 5);
  auto sa = student_for(rc.examples, {8, 12, 8, 0.1}, 5);
  auto l0 = train(s0, zeroed, cfg);
  auto la = train(sa, answer_only, cfg);
  bool same_steps = l0.steps.size() == la.steps.size() && !l0.steps.empty();
  for (std::size_t i = 0; same_steps && i < l0.steps.size(); ++i)
    same_steps = l0.steps[i].loss.total == la.steps[i].loss.total;
  bool same_params = std::equal(s0.parameters().begin(), s0.parameters().end(), sa.parameters().begin(),
                                sa.parameters().end());
  o.require(same_steps, "alpha=0 step losses differ from answer-only");
  o.require(same_params, "alpha=0 parameters differ from answer-only");
  o.note(std::to_string(trials) + " batches; decomposition " + sci(worst_decomp) + ", oracle " + sci(worst_oracle) +
         ", affinity " + sci(worst_affine) + "; alpha=0 equal over " +
         std::to_string(l0.steps.size()) + " steps");
  return o;
}

Outcome gradient_check() {
  Outcome o;
  std::vector<TrainingExample> batch{
      {"1", Task::answer(), "predict:\nquestion: q1 w2 options: (a) x (b) y", "x", 1.0},
      {"2", Task::answer(), "predict:\nquestion: w2 w3 options: (a) x (b) y", "y", 1.0},
      {"1", Task::teacher("t"), "explain[t]:\nquestion: q1 w2 options: (a) x (b) y", "w2 x", 0.8},
      {"2", Task::teacher("u"), "explain[u]:\nquestion: w2 w3 options: (a) x (b) y", "y w3 x", 1.7}};
  auto student = student_for(batch, {5, 7, 4, 0.5}, 17);
  std::map<std::string, double> alphas{{"t", 0.8}, {"u", 1.7}};
  auto params = student.parameters();
  o.require(student.vocabulary().size() <= 16, "vocabulary larger than 16");
  o.require(params.size() <= 10000, "more than 1e4 parameters");

  std::vector<double> grad;
  batch_loss_gradient(student, batch, alphas, grad);
  std::mt19937_64 rng(4);
  std::vector<std::size_t> coords(params.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(std::min(kGradCoords, coords.size()));

  double worst = 0.0;
  std::size_t nonzero = 0;
  for (auto i : coords) {
    double orig = params[i];
    params[i] = orig + kGradStep;
    double up = batch_loss(student, batch, alphas).total;
    params[i] = orig - kGradStep;
    double down = batch_loss(student, batch, alphas).total;
    params[i] = orig;
    double fd = (up - down) / (2 * kGradStep);
    nonzero += fd != 0.0;
    double err = std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), 1e-8});
    worst = std::max(worst, err);
  }
  o.require(coords.size() == kGradCoords, "fewer than 100 coordinates");
  o.require(worst <= kGradRel, "worst relative error " + sci(worst));
  o.note(std::to_string(params.size()) + " params, V=" + std::to_string(student.vocabulary().size()) + ", " +
         std::to_string(coords.size()) + " coords (" + std::to_string(nonzero) + " non-zero), worst rel " + sci(worst));
  return o;
}

// ---------------------------------------------------------------------------
// 5: corpus oracle
// ---------------------------------------------------------------------------

using ExampleKey = std::tuple<std::string, std::string, std::string, std::string, double>;

/// Reads the store file line by line and emits the expected corpus without the builder.
std::multiset<ExampleKey> walk_store(const fs::path& store_file, const DatasetSplit& split,
                                     const std::vector<std::string>& teachers, const std::map<std::string, double>& alphas) {
  std::map<std::pair<std::string, std::string>, json> last;
  std::istringstream in(util::read_file(store_file));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    last[{j.at("item_id").get<std::string>(), j.at("teacher_id").get<std::string>()}] = j;
  }
  std::multiset<ExampleKey> out;
  for (const auto& item : split.items) {
    std::string body = "question: " + item.question + "\noptions:";
    for (std::size_t k = 0; k < item.options.size(); ++k)
      body += std::string(" (") + char('a' + k) + ") " + item.options[k];
    out.insert({item.id, "answer", "predict:\n" + body, item.options[item.answer_index], 1.0});
    for (const auto& t : teachers) {
      if (alphas.at(t) == 0.0) continue;
      const auto& r = last.at({item.id, t});
      if (r.at("status") != "ok") continue;
      out.insert({item.id, "teacher:" + t, "explain[" + t + "]:\n" + body, r.at("rationale").get<std::string>(),
                  alphas.at(t)});
    }
  }
  return out;
}

std::multiset<ExampleKey> as_keys(const std::vector<TrainingExample>& corpus) {
  std::multiset<ExampleKey> out;
  for (const auto& e : corpus) out.insert({e.item_id, e.task.str(), e.input, e.target, e.weight});
  return out;
}

Outcome corpus_oracle() {
  Outcome o;
  testing::TempDir dir;
  std::mt19937_64 rng(50);
  auto split = testing::make_split(50, 50, 4);
  std::vector<std::string> teachers{"t1", "t2"};
  RationaleStore store(dir / "store.jsonl");
  RationaleStore clean(dir / "clean.jsonl");
  std::size_t rejected = 0;
  for (const auto& item : split.items)
    for (const auto& t : teachers) {
      // A superseded record first for some pairs, so the walker must honor the latest one.
      if (rng() % 5 == 0)
        store.append({item.id, "toy", t, "old text " + item.id, "fp-old", "", RecordStatus::ok});
      auto roll = rng() % 6;
      RecordStatus status = roll == 0 ? RecordStatus::rejected : roll == 1 ? RecordStatus::failed : RecordStatus::ok;
      rejected += status != RecordStatus::ok;
      std::string text = status == RecordStatus::ok ? t + " says " + item.answer_text() : "";
      store.append({item.id, "toy", t, text, "fp", "", status});
      clean.append({item.id, "toy", t, t + " explains " + item.id, "fp", "", RecordStatus::ok});
    }

  std::size_t cases = 0;
  for (auto alphas : std::vector<std::map<std::string, double>>{
           {{"t1", 1.0}, {"t2", 1.0}}, {{"t1", 0.0}, {"t2", 0.5}}, {{"t1", 2.0}, {"t2", 0.0}}, {{"t1", 0.0}, {"t2", 0.0}}}) {
    auto config = DistillationConfig::with_defaults(teachers);
    config.alphas = alphas;
    auto got = as_keys(assemble(split, store, config));
    auto want = walk_store(dir / "store.jsonl", split, teachers, alphas);
    o.require(got == want, "multiset mismatch for alphas t1=" + fmt(alphas["t1"], 2) + " t2=" + fmt(alphas["t2"], 2));
    ++cases;
  }
  auto full = assemble(split, clean, DistillationConfig::with_defaults(teachers));
  o.require(full.size() == split.size() * (1 + teachers.size()),
            "no-rejection cardinality " + std::to_string(full.size()));
  o.require(as_keys(full) == walk_store(dir / "clean.jsonl", split, teachers, {{"t1", 1.0}, {"t2", 1.0}}),
            "no-rejection multiset mismatch");
  o.note(std::to_string(cases) + " alpha settings, " + std::to_string(rejected) + " rejected/failed of 100 pairs; N(1+M)=" +
         std::to_string(full.size()));
  return o;
}

// ---------------------------------------------------------------------------
// 6: harvest idempotence and kill-resume
// ---------------------------------------------------------------------------

class SlowBackend : public TeacherBackend {
 public:
  SlowBackend(std::shared_ptr<TeacherBackend> inner, std::chrono::milliseconds delay)
      : inner_(std::move(inner)), delay_(delay) {}
  std::string complete(const std::string& prompt, const GenerationParams& p) override {
    std::this_thread::sleep_for(delay_);
    return inner_->complete(prompt, p);
  }

 private:
  std::shared_ptr<TeacherBackend> inner_;
  std::chrono::milliseconds delay_;
};

std::vector<TeacherBinding> rule_bindings(std::shared_ptr<TeacherBackend> a, std::shared_ptr<TeacherBackend> b) {
  TeacherSpec s1, s2;
  s1.teacher_id = "rule1";
  s2.teacher_id = "rule2";
  return {{s1, std::move(a), {}}, {s2, std::move(b), {}}};
}

Outcome harvest_idempotence() {
  Outcome o;
  testing::TempDir dir;
  auto split = testing::make_split(10, 6);
  auto specs = synthetic_teacher_specs();
  auto r1 = std::make_shared<SyntheticRuleBackend>(specs[0].settings);
  auto r2 = std::make_shared<SyntheticRuleBackend>(specs[1].settings);
  HarvestOptions opts;
  opts.retry.base_backoff = std::chrono::milliseconds(1);

  auto c1 = std::make_shared<testing::CountingBackend>(r1);
  auto c2 = std::make_shared<testing::CountingBackend>(r2);
  std::string cold_fp;
  {
    RationaleStore store(dir / "cold.jsonl");
    auto cold = harvest_all(rule_bindings(c1, c2), split, store, opts);
    o.require(store.size() == 20 && cold.total_new_records() == 20, "cold harvest wrote " + std::to_string(store.size()));
    auto calls_before = c1->calls() + c2->calls();
    auto warm = harvest_all(rule_bindings(c1, c2), split, store, opts);
    o.require(c1->calls() + c2->calls() == calls_before && warm.total_backend_calls() == 0,
              "warm rerun made backend calls");
    o.require(warm.total_cache_hits() == 20, "warm rerun cache hits " + std::to_string(warm.total_cache_hits()));
    cold_fp = store.fingerprint();
  }

  // Kill a harvesting child mid-run, then resume in this process.
  auto killed_path = dir / "killed.jsonl";
  pid_t pid = fork();
  if (pid == 0) {
    HarvestOptions slow = opts;
    slow.parallelism = 1;
    RationaleStore store(killed_path);
    auto d = std::chrono::milliseconds(40);
    harvest_all(rule_bindings(std::make_shared<SlowBackend>(r1, d), std::make_shared<SlowBackend>(r2, d)), split, store,
                slow);
    _exit(0);
  }
  std::size_t before_kill = 0;
  for (int i = 0; i < 200 && before_kill < 5; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    if (fs::exists(killed_path)) before_kill = util::split_lines(util::read_file(killed_path)).size();
  }
  kill(pid, SIGKILL);
  int status = 0;
  waitpid(pid, &status, 0);
  o.require(WIFSIGNALED(status), "child finished before it could be killed");
  // Simulate a torn final write as well.
  {
    std::ofstream out(killed_path, std::ios::app);
    out << R"({"item_id":"item-9","dataset":"toy","teacher)";
  }
  std::size_t partial = 0;
  auto k1 = std::make_shared<testing::CountingBackend>(r1);
  auto k2 = std::make_shared<testing::CountingBackend>(r2);
  {
    RationaleStore store(killed_path);
    partial = store.size();
    auto resumed = harvest_all(rule_bindings(k1, k2), split, store, opts);
    o.require(store.size() == 20, "resumed store holds " + std::to_string(store.size()));
    o.require(resumed.total_cache_hits() == partial, "resume re-requested completed pairs");
    o.require(k1->calls() + k2->calls() == 20 - partial, "resume made " + std::to_string(k1->calls() + k2->calls()) +
                                                              " calls for " + std::to_string(20 - partial) + " pairs");
    o.require(store.fingerprint() == cold_fp, "resumed records differ from the cold run");
  }
  o.require(partial > 0 && partial < 20, "kill point left " + std::to_string(partial) + " records");
  o.note("cold 20 records, warm 0 calls, killed after " + std::to_string(partial) + " records, resumed to 20");
  return o;
}

// ---------------------------------------------------------------------------
// 7: teacher-forcing containment
// ---------------------------------------------------------------------------

std::vector<std::string> answer_clauses(const std::string& prompt) {
  std::vector<std::string> out;
  for (const auto& line : util::split_lines(prompt))
    if (line.starts_with("Answer:")) out.push_back(line);
  return out;
}

Outcome teacher_forcing_containment() {
  Outcome o;
  auto split = testing::make_split(100, 7, 4);
  std::vector<InContextExample> demos{{"why is the sky blue", "short wavelengths scatter more", "t", Provenance::generated},
                                      {"why do ships float", "they displace their weight in water", "t",
                                       Provenance::generated}};
  std::size_t forced_ok = 0, free_ok = 0;
  for (const auto& item : split.items) {
    auto forced = build_rationale_prompt(item, demos, true);
    auto clauses = answer_clauses(forced);
    bool has = !clauses.empty();
    for (const auto& c : clauses) has = has && c.find(item.answer_text()) != std::string::npos;
    forced_ok += has;

    auto free = build_rationale_prompt(item, demos, false);
    bool leaked = false;
    for (const auto& c : answer_clauses(free)) leaked = leaked || c.find(item.answer_text()) != std::string::npos;
    leaked = leaked || free.find('"' + item.answer_text() + '"') != std::string::npos;
    free_ok += !leaked;
  }
  o.require(forced_ok == split.size(), std::to_string(forced_ok) + "/100 forced prompts carry the gold answer");
  o.require(free_ok == split.size(), std::to_string(100 - free_ok) + " free prompts leak the gold answer");
  o.note("100/100 forced with gold answer clause, " + std::to_string(free_ok) + "/100 free without");
  return o;
}

// ---------------------------------------------------------------------------
// 8, 9: synthetic end-to-end and reduction
// ---------------------------------------------------------------------------

struct SyntheticState {
  fs::path root;
  ExperimentConfig base;
  std::optional<double> accuracy;
};

Outcome synthetic_end_to_end(SyntheticState& st) {
  Outcome o;
  auto r = run_single(st.base);
  const auto& d = r.datasets.at(0);
  o.require(d.trained && d.steps > 0, "training did not run");
  o.require(d.initial_mean_loss && !d.epoch_mean_losses.empty() && d.epoch_mean_losses.back() < *d.initial_mean_loss,
            "mean epoch loss did not drop below the initial loss");
  double acc = d.score ? d.score->accuracy : 0.0;
  st.accuracy = acc;
  o.require(acc >= kMinAccuracy, "accuracy " + fmt(acc));

  auto eval = util::read_json(r.run_dir / d.dataset / "eval.json");
  std::map<std::string, RuleGrammar> grammars;
  for (std::size_t i = 0; i < st.base.teachers.size(); ++i)
    grammars.emplace(st.base.teachers[i].teacher_id, RuleGrammar(synthetic_teacher_templates().at(i)));
  std::size_t total = 0, parsed = 0;
  for (const auto& e : eval.at("explanations")) {
    ++total;
    parsed += grammars.at(e.at("teacher").get<std::string>()).matches(e.at("text").get<std::string>());
  }
  double share = total ? static_cast<double>(parsed) / static_cast<double>(total) : 0.0;
  o.require(total > 0 && share >= kMinGrammarShare, "grammar share " + fmt(share) + " of " + std::to_string(total));

  // Recorded only: the answer-only student on the same data and seed.
  auto answer_only = ff_reference_config(st.base);
  answer_only.run_id = st.base.run_id + "-answer-only";
  auto ra = run_single(answer_only);
  o.note("accuracy " + fmt(acc) + " (answer-only " + fmt(ra.report.overall) + "), loss " +
         fmt(*d.initial_mean_loss, 3) + " -> " + fmt(d.epoch_mean_losses.back(), 3) + ", " + std::to_string(parsed) +
         "/" + std::to_string(total) + " explanations parse");
  return o;
}

Outcome reduction_protocol(SyntheticState& st) {
  Outcome o;
  auto c = st.base;
  c.run_id = "reduction";
  c.reduction.ratios = {0.125, 0.25, 0.5, 0.75, 1.0};
  c.reduction.ff_reference = false;
  auto g = run_reduction(c);
  o.require(g.runs.size() == 5, std::to_string(g.runs.size()) + " runs");
  std::size_t n = load_dataset(st.base.datasets[0].train, "canonical-jsonl").size();
  std::string sizes;
  for (std::size_t i = 0; i < g.runs.size() && i < c.reduction.ratios.size(); ++i) {
    auto expected = static_cast<std::size_t>(std::floor(c.reduction.ratios[i] * static_cast<double>(n) + 0.5));
    auto got = g.runs[i].second.datasets.at(0).train_items;
    sizes += (sizes.empty() ? "" : ",") + std::to_string(got);
    o.require(got == expected, "ratio " + fmt(c.reduction.ratios[i], 3) + " size " + std::to_string(got) + " != " +
                                   std::to_string(expected));
  }
  if (!st.accuracy) {
    st.accuracy = run_single(st.base).report.overall;
  }
  double full = g.runs.empty() ? -1.0 : g.runs.back().second.datasets.at(0).score->accuracy;
  o.require(std::memcmp(&full, &*st.accuracy, sizeof(double)) == 0,
            "r=1.0 accuracy " + fmt(full, 6) + " vs single run " + fmt(*st.accuracy, 6));
  o.note("sizes " + sizes + " of N=" + std::to_string(n) + ", r=1.0 accuracy " + fmt(full) + " identical to single run");
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  testing::TempDir scratch;
  SyntheticState st;
  st.root = scratch.path();
  st.base = synthetic_experiment(scratch / "data", scratch / "runs", "e2e");

  std::vector<Criterion> criteria{
      {1, "delta arithmetic fixture", 1.0, delta_fixture},
      {2, "total column fixture", 1.0, total_fixture},
      {3, "loss decomposition", 60.0, loss_decomposition},
      {4, "gradient check", 120.0, gradient_check},
      {5, "corpus oracle", 10.0, corpus_oracle},
      {6, "harvest idempotence", 30.0, harvest_idempotence},
      {7, "teacher-forcing containment", 5.0, teacher_forcing_containment},
      {8, "synthetic end-to-end", 600.0, [&] { return synthetic_end_to_end(st); }},
      {9, "reduction protocol", 1800.0, [&] { return reduction_protocol(st); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > c.budget_s) o.require(false, "over runtime budget of " + fmt(c.budget_s, 0) + " s");
    failures += !o.pass;
    std::printf("%s [%d] %s (%.3f s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
