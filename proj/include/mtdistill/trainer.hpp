#pragma once

// Joint objective L = L_A + sum_m alpha_m * L_m over prefix-routed examples, with per-token
// mean cross-entropy per example and per-task means per batch. A task absent from a batch
// contributes 0 so the total stays affine in every alpha.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mtdistill/errors.hpp"
#include "mtdistill/multitask_builder.hpp"
#include "mtdistill/student.hpp"
#include "mtdistill/util.hpp"

namespace mtdistill {

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 8;
  int max_input_length = 1024;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::map<std::string, double> alphas;

  // Adam moments.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// epochs may be 0 (no updates, empty log).
  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be > 0");
    if (max_input_length < 1) throw ConfigError("train.max_input_length must be > 0");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    for (const auto& [t, a] : alphas)
      if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("train.alphas['" + t + "'] must be finite and >= 0");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_input_length", c.max_input_length},
           {"epochs", c.epochs},               {"seed", c.seed},             {"alphas", c.alphas},
           {"beta1", c.beta1},                 {"beta2", c.beta2},           {"eps", c.eps}};
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_input_length = j.value("max_input_length", d.max_input_length);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.alphas = j.value("alphas", d.alphas);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

struct LossBreakdown {
  double total = 0.0;
  double answer_term = 0.0;
  std::map<std::string, double> teacher_terms;
  std::map<std::string, std::size_t> token_counts;  // keyed by Task::str()
  std::map<std::string, std::size_t> example_counts;
};

inline void to_json(json& j, const LossBreakdown& b) {
  j = json{{"total", b.total},
           {"answer_term", b.answer_term},
           {"teacher_terms", b.teacher_terms},
           {"token_counts", b.token_counts},
           {"example_counts", b.example_counts}};
}

inline void from_json(const json& j, LossBreakdown& b) {
  b.total = j.at("total").get<double>();
  b.answer_term = j.at("answer_term").get<double>();
  b.teacher_terms = j.at("teacher_terms").get<std::map<std::string, double>>();
  b.token_counts = j.value("token_counts", std::map<std::string, std::size_t>{});
  b.example_counts = j.value("example_counts", std::map<std::string, std::size_t>{});
}

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step, LossBreakdown breakdown)
      : Error(what), step_(step), breakdown_(std::move(breakdown)) {}
  std::size_t step() const noexcept { return step_; }
  const LossBreakdown& breakdown() const noexcept { return breakdown_; }

 private:
  std::size_t step_;
  LossBreakdown breakdown_;
};

/// Mean cross-entropy over non-pad target positions.
inline double encoded_loss(const Student& student, const EncodedExample& enc) {
  auto lps = student.target_log_probs(enc);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < enc.target.size(); ++t) {
    if (enc.target[t] == student.pad_id()) continue;
    sum -= lps[t];
    ++n;
  }
  if (n == 0) throw DataError("target has no non-pad positions");
  return sum / static_cast<double>(n);
}

inline double example_loss(const Student& student, const TrainingExample& example) {
  return encoded_loss(student, student.encode(example.input, example.target));
}

namespace detail {

struct Prepared {
  Task task;
  EncodedExample enc;
  std::size_t tokens = 0;
};

inline Prepared prepare(const Student& student, const TrainingExample& e) {
  Prepared p{e.task, student.encode(e.input, e.target), 0};
  for (int y : p.enc.target) p.tokens += y != student.pad_id();
  return p;
}

/// Per-example loss coefficients in the batch total: 1/n_A for answer members, alpha_m/n_m
/// for teacher m members.
inline std::vector<double> coefficients(const std::vector<const Prepared*>& batch,
                                        const std::map<std::string, double>& alphas) {
  std::map<std::string, std::size_t> counts;
  for (const auto* p : batch) ++counts[p->task.str()];
  std::vector<double> c;
  c.reserve(batch.size());
  for (const auto* p : batch) {
    double n = static_cast<double>(counts[p->task.str()]);
    if (p->task.is_answer()) {
      c.push_back(1.0 / n);
    } else {
      auto it = alphas.find(p->task.teacher_id);
      if (it == alphas.end()) throw ConfigError("no alpha for teacher '" + p->task.teacher_id + "'");
      c.push_back(it->second / n);
    }
  }
  return c;
}

inline LossBreakdown combine(const std::vector<const Prepared*>& batch, const std::vector<double>& losses,
                             const std::map<std::string, double>& alphas) {
  LossBreakdown b;
  std::map<std::string, double> sums;
  for (const auto& [t, a] : alphas) b.teacher_terms[t] = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto key = batch[i]->task.str();
    sums[key] += losses[i];
    ++b.example_counts[key];
    b.token_counts[key] += batch[i]->tokens;
  }
  for (const auto& [key, sum] : sums) {
    double mean = sum / static_cast<double>(b.example_counts[key]);
    auto task = Task::parse(key);
    if (task.is_answer()) {
      b.answer_term = mean;
    } else {
      if (!alphas.contains(task.teacher_id)) throw ConfigError("no alpha for teacher '" + task.teacher_id + "'");
      b.teacher_terms[task.teacher_id] = mean;
    }
  }
  b.total = b.answer_term;
  for (const auto& [t, a] : alphas) b.total += a * b.teacher_terms[t];
  return b;
}

inline LossBreakdown forward(const Student& student, const std::vector<const Prepared*>& batch,
                             const std::map<std::string, double>& alphas) {
  std::vector<double> losses;
  losses.reserve(batch.size());
  for (const auto* p : batch) losses.push_back(encoded_loss(student, p->enc));
  return combine(batch, losses, alphas);
}

inline LossBreakdown forward_backward(const Student& student, const std::vector<const Prepared*>& batch,
                                      const std::map<std::string, double>& alphas, std::span<double> grad) {
  auto coef = coefficients(batch, alphas);
  std::vector<double> losses;
  losses.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (coef[i] == 0.0)
      losses.push_back(encoded_loss(student, batch[i]->enc));
    else
      losses.push_back(student.accumulate_loss_gradient(batch[i]->enc, coef[i], grad));
  }
  return combine(batch, losses, alphas);
}

inline std::vector<const Prepared*> pointers(const std::vector<Prepared>& v) {
  std::vector<const Prepared*> out;
  for (const auto& p : v) out.push_back(&p);
  return out;
}

}  // namespace detail

inline LossBreakdown batch_loss(const Student& student, const std::vector<TrainingExample>& batch,
                                const std::map<std::string, double>& alphas) {
  if (batch.empty()) throw DomainError("batch_loss needs a non-empty batch");
  std::vector<detail::Prepared> prepared;
  for (const auto& e : batch) prepared.push_back(detail::prepare(student, e));
  return detail::forward(student, detail::pointers(prepared), alphas);
}

/// Gradient of batch_loss(...).total with respect to student.parameters().
inline LossBreakdown batch_loss_gradient(const Student& student, const std::vector<TrainingExample>& batch,
                                         const std::map<std::string, double>& alphas, std::vector<double>& grad) {
  if (batch.empty()) throw DomainError("batch_loss needs a non-empty batch");
  std::vector<detail::Prepared> prepared;
  for (const auto& e : batch) prepared.push_back(detail::prepare(student, e));
  grad.assign(student.parameters().size(), 0.0);
  return detail::forward_backward(student, detail::pointers(prepared), alphas, grad);
}

struct StepRecord {
  std::size_t step = 0;  // 1-based
  int epoch = 0;         // 0-based
  double wall_time_s = 0.0;
  LossBreakdown loss;
};

inline void to_json(json& j, const StepRecord& r) {
  j = json(r.loss);
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["wall_time_s"] = r.wall_time_s;
}

inline void from_json(const json& j, StepRecord& r) {
  r.step = j.at("step").get<std::size_t>();
  r.epoch = j.at("epoch").get<int>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.loss = j.get<LossBreakdown>();
}

struct TrainingLog {
  std::vector<StepRecord> steps;
  std::optional<double> initial_mean_loss;  // mean batch total over epoch-0 batches before any update
  std::vector<double> epoch_mean_losses;
  std::size_t dropped_zero_weight = 0;
};

struct TrainOptions {
  bool measure_initial_loss = false;
  std::function<void(const StepRecord&)> on_step;
};

/// Mini-batch Adam over the corpus. Zero-weight examples (teachers with alpha = 0) are removed
/// before batching, so an all-zero-alpha run presents exactly the answer-only stream.
inline TrainingLog train(Student& student, const std::vector<TrainingExample>& corpus, const TrainConfig& config,
                         const TrainOptions& options = {}) {
  config.validate();
  if (corpus.empty()) throw DomainError("train needs a non-empty corpus");

  TrainingLog log;
  std::vector<detail::Prepared> prepared;
  prepared.reserve(corpus.size());
  for (const auto& e : corpus) {
    if (!e.task.is_answer()) {
      auto it = config.alphas.find(e.task.teacher_id);
      if (it == config.alphas.end()) throw ConfigError("no alpha for teacher '" + e.task.teacher_id + "'");
      if (e.weight != it->second)
        throw ConfigError("example weight for teacher '" + e.task.teacher_id + "' disagrees with train.alphas");
    }
    if (e.weight == 0.0) {
      ++log.dropped_zero_weight;
      continue;
    }
    prepared.push_back(detail::prepare(student, e));
  }
  if (prepared.empty()) throw DomainError("every example has zero weight");

  const std::size_t n = prepared.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  auto params = student.parameters();
  std::vector<double> grad(params.size()), m(params.size(), 0.0), v(params.size(), 0.0);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  auto start = std::chrono::steady_clock::now();

  auto batch_at = [&](std::size_t b) {
    std::vector<const detail::Prepared*> batch;
    for (std::size_t i = b; i < std::min(n, b + bs); ++i) batch.push_back(&prepared[order[i]]);
    return batch;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    if (epoch == 0 && options.measure_initial_loss) {
      double sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t b = 0; b < n; b += bs, ++batches) sum += detail::forward(student, batch_at(b), config.alphas).total;
      log.initial_mean_loss = sum / static_cast<double>(batches);
    }

    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      ++step;
      std::fill(grad.begin(), grad.end(), 0.0);
      auto breakdown = detail::forward_backward(student, batch_at(b), config.alphas, grad);
      if (!std::isfinite(breakdown.total))
        throw TrainingError("non-finite loss at step " + std::to_string(step), step, breakdown);

      const double t = static_cast<double>(step);
      const double c1 = 1.0 - std::pow(config.beta1, t);
      const double c2 = 1.0 - std::pow(config.beta2, t);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
        params[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
      }

      StepRecord rec{step, epoch, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(),
                     std::move(breakdown)};
      epoch_sum += rec.loss.total;
      ++epoch_steps;
      if (options.on_step) options.on_step(rec);
      log.steps.push_back(std::move(rec));
    }
    log.epoch_mean_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
  }
  return log;
}

inline void write_training_log(const std::filesystem::path& path, const TrainingLog& log) {
  std::string out;
  for (const auto& s : log.steps) out += json(s).dump() + "\n";
  util::write_file_atomic(path, out);
}

inline std::vector<StepRecord> read_training_log(const std::filesystem::path& path) {
  std::vector<StepRecord> out;
  util::for_each_jsonl(path, [&](std::size_t line, const json& j) {
    try {
      out.push_back(j.get<StepRecord>());
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  });
  return out;
}

/// Writes `<dir>/model.json` and `<dir>/manifest.json`.
/// `extra` keys are merged into the manifest.
inline json save_checkpoint(const std::filesystem::path& dir, const Student& student, const TrainConfig& config,
                            const std::string& corpus_fingerprint, std::size_t step, const json& extra = json::object()) {
  std::filesystem::create_directories(dir);
  auto model = student.serialize().dump();
  util::write_file_atomic(dir / "model.json", model);
  json manifest{{"train", config},
                {"corpus_fingerprint", corpus_fingerprint},
                {"step", step},
                {"model_sha256", util::sha256_hex(model)}};
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  util::write_json(dir / "manifest.json", manifest);
  return manifest;
}

inline std::unique_ptr<TinySeq2Seq> load_checkpoint(const std::filesystem::path& dir) {
  return TinySeq2Seq::deserialize(util::read_json(dir / "model.json"));
}

}  // namespace mtdistill
