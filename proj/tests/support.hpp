#pragma once

// Shared fixtures: scratch directories, scripted teacher backends, toy students.

#include <atomic>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "mtdistill/core_data.hpp"
#include "mtdistill/student.hpp"
#include "mtdistill/teacher_harvest.hpp"

namespace testing {

namespace fs = std::filesystem;
using namespace mtdistill;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("mtdistill-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Returns queued responses in order (the last one repeats); an empty optional throws
/// TransportError. Counts calls.
class ScriptedBackend : public TeacherBackend {
 public:
  explicit ScriptedBackend(std::vector<std::optional<std::string>> script) : script_(std::move(script)) {}

  std::string complete(const std::string& prompt, const GenerationParams&) override {
    std::lock_guard lock(mu_);
    prompts_.push_back(prompt);
    auto i = std::min(calls_++, script_.size() - 1);
    if (!script_[i]) throw TransportError("scripted transport failure");
    return *script_[i];
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  std::vector<std::string> prompts() const {
    std::lock_guard lock(mu_);
    return prompts_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::optional<std::string>> script_;
  std::vector<std::string> prompts_;
  std::size_t calls_ = 0;
};

/// Wraps another backend and counts calls.
class CountingBackend : public TeacherBackend {
 public:
  explicit CountingBackend(std::shared_ptr<TeacherBackend> inner) : inner_(std::move(inner)) {}
  std::string complete(const std::string& prompt, const GenerationParams& p) override {
    ++calls_;
    return inner_->complete(prompt, p);
  }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::shared_ptr<TeacherBackend> inner_;
  std::atomic<std::size_t> calls_{0};
};

inline MCQAItem make_item(std::string id, std::string question, std::vector<std::string> options, std::size_t answer,
                          std::string dataset = "toy") {
  MCQAItem item;
  item.id = std::move(id);
  item.dataset = std::move(dataset);
  item.question = std::move(question);
  item.options = std::move(options);
  item.answer_index = answer;
  return item;
}

inline DatasetSplit make_split(std::size_t n, std::uint64_t seed = 1, std::size_t k = 4) {
  std::mt19937_64 rng(seed);
  DatasetSplit split;
  split.name = "train";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> opts;
    for (std::size_t j = 0; j < k; ++j) opts.push_back("opt" + std::to_string(i) + "x" + std::to_string(j));
    split.items.push_back(make_item("item-" + std::to_string(i), "question number " + std::to_string(i), opts,
                                    static_cast<std::size_t>(rng() % k)));
  }
  return split;
}

/// Student whose next-token distribution is a fixed table: probs[t][token] at position t.
/// Only the loss path is implemented.
class TableStudent : public Student {
 public:
  TableStudent(int vocab, std::vector<std::vector<double>> probs, std::vector<int> target)
      : vocab_(vocab), probs_(std::move(probs)), target_(std::move(target)) {}

  EncodedExample encode(std::string_view, std::string_view target) const override {
    if (util::split_ws(target).empty()) throw DataError("empty target");
    return {{}, target_};
  }
  int pad_id() const override { return -1; }
  std::vector<double> target_log_probs(const EncodedExample& ex) const override {
    std::vector<double> out;
    for (std::size_t t = 0; t < ex.target.size(); ++t) out.push_back(std::log(probs_.at(t).at(ex.target[t])));
    return out;
  }
  double accumulate_loss_gradient(const EncodedExample&, double, std::span<double>) const override {
    throw DomainError("not differentiable");
  }
  std::string greedy_decode(std::string_view) const override { return {}; }
  std::span<double> parameters() override { return {}; }
  std::span<const double> parameters() const override { return {}; }
  json serialize() const override { return json::object(); }

 private:
  int vocab_;
  std::vector<std::vector<double>> probs_;
  std::vector<int> target_;
};

/// Student that emits a fixed answer per input, for evaluator tests.
class LookupStudent : public Student {
 public:
  explicit LookupStudent(std::function<std::string(std::string_view)> f) : f_(std::move(f)) {}
  EncodedExample encode(std::string_view, std::string_view) const override { return {}; }
  int pad_id() const override { return 0; }
  std::vector<double> target_log_probs(const EncodedExample&) const override { return {}; }
  double accumulate_loss_gradient(const EncodedExample&, double, std::span<double>) const override { return 0; }
  std::string greedy_decode(std::string_view input) const override { return f_(input); }
  std::span<double> parameters() override { return {}; }
  std::span<const double> parameters() const override { return {}; }
  json serialize() const override { return json::object(); }

 private:
  std::function<std::string(std::string_view)> f_;
};

}  // namespace testing
