#include <map>

#include "catch_amalgamated.hpp"
#include "mtdistill/multitask_builder.hpp"
#include "support.hpp"

using namespace mtdistill;
using testing::TempDir;

namespace {

RationaleRecord record(const std::string& item, const std::string& teacher, RecordStatus status,
                       std::string text = "because reasons") {
  if (status != RecordStatus::ok) text.clear();
  return {item, "toy", teacher, text, "fp", "", status};
}

}  // namespace

TEST_CASE("assemble yields one answer example per item plus usable rationales") {
  TempDir dir;
  auto split = testing::make_split(3);
  RationaleStore store(dir / "s.jsonl");
  store.append(record("item-0", "t1", RecordStatus::ok, "r01"));
  store.append(record("item-0", "t2", RecordStatus::ok, "r02"));
  store.append(record("item-1", "t1", RecordStatus::rejected));
  store.append(record("item-1", "t2", RecordStatus::ok, "r12"));
  store.append(record("item-2", "t1", RecordStatus::failed));
  store.append(record("item-2", "t2", RecordStatus::failed));

  auto config = DistillationConfig::with_defaults({"t1", "t2"});
  config.alphas["t2"] = 0.5;
  auto corpus = assemble(split, store, config);
  REQUIRE(corpus.size() == 3 + 3);

  std::vector<std::string> tasks;
  for (const auto& e : corpus) tasks.push_back(e.item_id + "/" + e.task.str());
  CHECK(tasks == std::vector<std::string>{"item-0/answer", "item-0/teacher:t1", "item-0/teacher:t2",
                                          "item-1/answer", "item-1/teacher:t2", "item-2/answer"});
  CHECK(corpus[0].target == split.items[0].answer_text());
  CHECK(corpus[0].weight == 1.0);
  CHECK(corpus[2].weight == 0.5);
  CHECK(corpus[2].target == "r02");
  CHECK(corpus[1].input.starts_with("explain[t1]:\n"));
  CHECK(corpus[0].input.starts_with("predict:\n"));

  SECTION("alpha zero drops the teacher's examples") {
    config.alphas["t1"] = 0.0;
    auto c = assemble(split, store, config);
    CHECK(c.size() == 5);
    for (const auto& e : c) CHECK(e.task != Task::teacher("t1"));
  }
  SECTION("a missing record is a consistency error") {
    auto more = testing::make_split(4);
    CHECK_THROWS_AS(assemble(more, store, config), ConsistencyError);
  }
  SECTION("bad alphas are config errors") {
    config.alphas["t1"] = -1.0;
    CHECK_THROWS_AS(assemble(split, store, config), ConfigError);
    config.alphas.erase("t1");
    CHECK_THROWS_AS(assemble(split, store, config), ConfigError);
  }
}

TEST_CASE("full coverage gives N times one plus M examples") {
  TempDir dir;
  auto split = testing::make_split(7);
  RationaleStore store(dir / "s.jsonl");
  for (const auto& it : split.items)
    for (const char* t : {"a", "b", "c"}) store.append(record(it.id, t, RecordStatus::ok));
  auto corpus = assemble(split, store, DistillationConfig::with_defaults({"a", "b", "c"}));
  CHECK(corpus.size() == 7 * 4);
  std::map<std::string, int> per_task;
  for (const auto& e : corpus) ++per_task[e.task.str()];
  CHECK(per_task == std::map<std::string, int>{{"answer", 7}, {"teacher:a", 7}, {"teacher:b", 7}, {"teacher:c", 7}});
}

TEST_CASE("corpus round-trips through JSONL and the manifest is stable") {
  TempDir dir;
  auto split = testing::make_split(4);
  RationaleStore store(dir / "s.jsonl");
  for (const auto& it : split.items) store.append(record(it.id, "t", RecordStatus::ok, "why " + it.id));
  auto config = DistillationConfig::with_defaults({"t"});
  auto corpus = assemble(split, store, config);
  write_corpus(dir / "c.jsonl", corpus);
  CHECK(read_corpus(dir / "c.jsonl") == corpus);

  auto m1 = corpus_manifest(corpus, config, store.fingerprint());
  auto m2 = corpus_manifest(assemble(split, store, config), config, store.fingerprint());
  CHECK(m1.at("fingerprint") == m2.at("fingerprint"));
  CHECK(m1.at("per_task").at("teacher:t") == 4);

  auto shuffled = shuffle_for_training(corpus, 9);
  CHECK(shuffled == shuffle_for_training(corpus, 9));
  std::sort(shuffled.begin(), shuffled.end());
  auto sorted = corpus;
  std::sort(sorted.begin(), sorted.end());
  CHECK(shuffled == sorted);

  util::write_file_atomic(dir / "bad.jsonl", R"({"item_id":"x","task":"nonsense","input":"i","target":"t","weight":1})"
                                             "\n");
  CHECK_THROWS_AS(read_corpus(dir / "bad.jsonl"), ParseError);
}

TEST_CASE("task tags parse and print") {
  CHECK(Task::parse("answer").is_answer());
  CHECK(Task::parse("teacher:big").teacher_id == "big");
  CHECK(Task::teacher("x").str() == "teacher:x");
  CHECK_THROWS_AS(Task::parse("teacher:"), ParseError);
}
