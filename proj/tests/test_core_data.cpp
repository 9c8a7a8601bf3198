#include <algorithm>
#include <cmath>
#include <set>

#include "catch_amalgamated.hpp"
#include "mtdistill/core_data.hpp"
#include "support.hpp"

using namespace mtdistill;
using testing::make_item;
using testing::TempDir;

TEST_CASE("validate_item reports each violated invariant") {
  auto ok = make_item("a", "q", {"w", "x", "y", "z"}, 2);
  CHECK(validate_item(ok).empty());

  auto single = make_item("b", "q", {"only"}, 0);
  CHECK(validate_item(single) == std::vector<std::string>{"k ≥ 2 violated"});

  auto out_of_range = make_item("c", "q", {"x", "y"}, 2);
  CHECK(validate_item(out_of_range) == std::vector<std::string>{"answer_index out of range"});

  auto blank = make_item("d", "q", {"x", "  "}, 0);
  CHECK(validate_item(blank) == std::vector<std::string>{"empty option text"});

  auto dup = make_item("e", "q", {"a  conductor", "a conductor"}, 0);
  CHECK(validate_item(dup) == std::vector<std::string>{"duplicate option texts"});
}

TEST_CASE("answer labels resolve by letter or by exact text") {
  std::vector<std::string> opts{"red", "green", "blue", "gray"};
  CHECK(resolve_answer_label("B", opts) == 1u);
  CHECK(resolve_answer_label("d", opts) == 3u);
  CHECK(resolve_answer_label("blue", opts) == 2u);
  CHECK_FALSE(resolve_answer_label("E", opts));
  CHECK_FALSE(resolve_answer_label("purple", opts));
  // A one-letter option that names a different position than its letter is ambiguous.
  CHECK_FALSE(resolve_answer_label("a", {"b", "a"}));
}

TEST_CASE("canonical JSONL loads in file order and round-trips") {
  TempDir dir;
  DatasetSplit split;
  split.name = "train";
  for (int i = 0; i < 3; ++i)
    split.items.push_back(make_item("id" + std::to_string(i), "question " + std::to_string(i), {"x", "y", "z"},
                                    static_cast<std::size_t>(i)));
  write_dataset(split, dir / "d.jsonl");
  auto loaded = load_dataset(dir / "d.jsonl", "canonical-jsonl");
  REQUIRE(loaded.size() == 3);
  CHECK(loaded.items == split.items);
  CHECK(loaded.items[0].id == "id0");
  CHECK(loaded.items[2].id == "id2");
}

TEST_CASE("parse failures carry the line number") {
  TempDir dir;
  util::write_file_atomic(dir / "bad.jsonl",
                          R"({"id":"a","dataset":"d","question":"q","options":["x","y"],"answer_index":0})"
                          "\n{not json\n");
  try {
    load_dataset(dir / "bad.jsonl", "canonical-jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  util::write_file_atomic(dir / "missing.jsonl", R"({"id":"a","dataset":"d","options":["x","y"],"answer_index":0})"
                                                 "\n");
  try {
    load_dataset(dir / "missing.jsonl", "canonical-jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
}

TEST_CASE("validation failures list the offending ids") {
  TempDir dir;
  util::write_file_atomic(dir / "v.jsonl",
                          R"({"id":"good","dataset":"d","question":"q","options":["x","y"],"answer_index":0})"
                          "\n"
                          R"({"id":"dup-opts","dataset":"d","question":"q","options":["x","x"],"answer_index":0})"
                          "\n"
                          R"({"id":"good","dataset":"d","question":"q","options":["x","y"],"answer_index":1})"
                          "\n");
  try {
    load_dataset(dir / "v.jsonl", "canonical-jsonl");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.offending_ids() == std::vector<std::string>{"dup-opts", "good"});
  }
}

TEST_CASE("raw adapters map source layouts onto items") {
  TempDir dir;
  SECTION("letter label") {
    util::write_file_atomic(dir / "l.jsonl", R"({"id":"q1","question":"pick","options":["a","b","c","d"],"answer":"B"})"
                                             "\n");
    auto s = load_dataset(dir / "l.jsonl", "raw-adapter:letter-label");
    CHECK(s.items.at(0).answer_index == 1);
    CHECK(s.items.at(0).dataset == "l");
  }
  SECTION("ai2 choices") {
    util::write_file_atomic(
        dir / "obqa.jsonl",
        R"({"id":"7-980","question":{"stem":"Metal is a good","choices":[{"label":"A","text":"insulator"},{"label":"B","text":"conductor"}]},"answerKey":"B"})"
        "\n");
    auto s = load_dataset(dir / "obqa.jsonl", "raw-adapter:obqa", {"train", "OBQA"});
    CHECK(s.items.at(0).answer_text() == "conductor");
    CHECK(s.items.at(0).dataset == "OBQA");
  }
  SECTION("piqa, pubmedqa, bioasq") {
    util::write_file_atomic(dir / "p.jsonl", R"({"id":"p","goal":"open jar","sol1":"twist","sol2":"smash","label":0})"
                                             "\n");
    util::write_file_atomic(dir / "m.jsonl", R"({"id":"m","question":"does it?","final_decision":"Maybe"})"
                                             "\n");
    util::write_file_atomic(dir / "b.jsonl", R"({"id":"b","body":"is it?","exact_answer":"no"})"
                                             "\n");
    CHECK(load_dataset(dir / "p.jsonl", "raw-adapter:piqa").items[0].answer_text() == "twist");
    CHECK(load_dataset(dir / "m.jsonl", "raw-adapter:pubmedqa").items[0].answer_index == 2);
    CHECK(load_dataset(dir / "b.jsonl", "raw-adapter:bioasq").items[0].answer_index == 1);
  }
  SECTION("an unresolvable label becomes a validation error naming the id") {
    util::write_file_atomic(dir / "u.jsonl", R"({"id":"lost","question":"q","options":["a","b"],"answer":"Z"})"
                                             "\n");
    try {
      load_dataset(dir / "u.jsonl", "raw-adapter:letter-label");
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(e.offending_ids() == std::vector<std::string>{"lost"});
    }
  }
  SECTION("unknown adapter or format") {
    util::write_file_atomic(dir / "x.jsonl", "{}\n");
    CHECK_THROWS_AS(load_dataset(dir / "x.jsonl", "raw-adapter:nope"), ConfigError);
    CHECK_THROWS_AS(load_dataset(dir / "x.jsonl", "csv"), ConfigError);
  }
}

TEST_CASE("subsample sizes, order and nesting") {
  auto split = testing::make_split(800);
  auto s = subsample(split, 0.125, 3);
  CHECK(s.size() == 100);

  CHECK(subsample(split, 1.0, 3) == split);

  auto again = subsample(split, 0.125, 3);
  CHECK(again == s);

  // Original relative order is kept.
  std::vector<std::size_t> positions;
  for (const auto& item : s.items)
    positions.push_back(static_cast<std::size_t>(
        std::find(split.items.begin(), split.items.end(), item) - split.items.begin()));
  CHECK(std::is_sorted(positions.begin(), positions.end()));

  // Sizes follow round-half-up of ratio * N; smaller ratios are subsets of larger ones.
  auto small = testing::make_split(10);
  std::set<std::string> prev;
  for (double r : {0.125, 0.25, 0.5, 0.75, 1.0}) {
    auto sub = subsample(small, r, 11);
    CHECK(sub.size() == static_cast<std::size_t>(std::floor(r * 10 + 0.5)));
    std::set<std::string> ids;
    for (const auto& item : sub.items) ids.insert(item.id);
    CHECK(std::includes(ids.begin(), ids.end(), prev.begin(), prev.end()));
    prev = ids;
  }

  CHECK_THROWS_AS(subsample(split, 0.0, 1), DomainError);
  CHECK_THROWS_AS(subsample(split, 1.5, 1), DomainError);
  CHECK_THROWS_AS(subsample(split, -0.1, 1), DomainError);
}
