#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pkue/common.hpp"
#include "pkue/corpus.hpp"

namespace fs = std::filesystem;
using namespace pkue;
using namespace pkue::corpus;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "pkue_corpus_test";
  fs::create_directories(dir);
  return dir;
}

QARecord make_qa(const std::string& qid, const std::string& eid,
                 const std::string& domain) {
  QARecord r;
  r.question_id = qid;
  r.entry_id = eid;
  r.question = "什么是" + qid + "？";
  r.standard_answer = "answer-" + qid;
  r.wrong_answers = {"wrong-a-" + qid, "wrong-b-" + qid, "wrong-c-" + qid};
  r.domain = domain;
  return r;
}

}  // namespace

TEST_CASE("utf8 scalar counting and truncation", "[corpus]") {
  CHECK(utf8::scalar_count("") == 0);
  CHECK(utf8::scalar_count("abc") == 3);
  CHECK(utf8::scalar_count("中文字符") == 4);
  CHECK(utf8::scalar_count("a中b文c") == 5);
  // 4-byte scalar (emoji) counts once.
  CHECK(utf8::scalar_count("\xF0\x9F\x98\x80") == 1);

  CHECK(utf8::truncate("中文字符", 2) == "中文");
  CHECK(utf8::truncate("中文字符", 10) == "中文字符");
  CHECK(utf8::truncate("abc中", 3) == "abc");
  CHECK(utf8::truncate("", 5) == "");
  // Truncation never splits a multi-byte scalar.
  std::string t = utf8::truncate("a中b", 2);
  CHECK(t == "a中");
  CHECK(utf8::scalar_count(t) == 2);
}

TEST_CASE("digest is FNV-1a 64", "[corpus]") {
  // Reference values for the classic FNV-1a 64-bit test vectors.
  CHECK(digest_bytes("") == "cbf29ce484222325");
  CHECK(digest_bytes("a") == "af63dc4c8601ec8c");
  CHECK(digest_bytes("foobar") == "85944171f73967e8");
}

TEST_CASE("qa record json round trip", "[corpus]") {
  QARecord r = make_qa("q1", "e1", "history");
  r.split = Split::Test;
  json j = to_json(r);
  QARecord back;
  from_json(j, back, 1);
  CHECK(back.question_id == r.question_id);
  CHECK(back.entry_id == r.entry_id);
  CHECK(back.question == r.question);
  CHECK(back.standard_answer == r.standard_answer);
  CHECK(back.wrong_answers == r.wrong_answers);
  CHECK(back.domain == r.domain);
  CHECK(back.split == Split::Test);
}

TEST_CASE("validation rejects malformed records", "[corpus]") {
  QARecord r = make_qa("q1", "e1", "history");
  r.wrong_answers.pop_back();
  CHECK_THROWS_AS(validate(r), InvariantViolationError);

  QARecord dup = make_qa("q2", "e1", "history");
  dup.wrong_answers[1] = dup.standard_answer;
  CHECK_THROWS_AS(validate(dup), InvariantViolationError);

  PreferencePair p;
  p.question_id = "q1";
  p.chosen = "same";
  p.rejected = "same";
  CHECK_THROWS_AS(validate(p), InvariantViolationError);

  EncycEntry e;
  e.entry_id = "e1";
  e.view_count = -5;
  CHECK_THROWS_AS(validate(e), InvariantViolationError);
}

TEST_CASE("jsonl store round trips and digests", "[corpus]") {
  auto path = (temp_dir() / "qa.jsonl").string();
  std::vector<QARecord> records = {make_qa("q1", "e1", "history"),
                                   make_qa("q2", "e1", "history"),
                                   make_qa("q3", "e2", "science")};
  std::string d1 = write_records(path, records);
  std::string d2 = write_records(path, records);
  CHECK(d1 == d2);
  CHECK(d1 == digest_file(path));

  auto back = read_records<QARecord>(path);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].question_id == records[i].question_id);
    CHECK(back[i].wrong_answers == records[i].wrong_answers);
  }
}

TEST_CASE("reader reports malformed lines with line numbers", "[corpus]") {
  auto path = (temp_dir() / "broken.jsonl").string();
  std::string good = to_json(make_qa("q1", "e1", "history")).dump();
  write_file(path, good + "\nnot json at all\n" + good + "\n");

  CHECK_THROWS_AS(read_records<QARecord>(path), SchemaViolationError);
  try {
    read_records<QARecord>(path);
  } catch (const SchemaViolationError& ex) {
    CHECK(ex.line() == 2);
  }

  std::vector<MalformedLine> skipped;
  auto records = read_records<QARecord>(path, true, &skipped);
  CHECK(records.size() == 2);
  REQUIRE(skipped.size() == 1);
  CHECK(skipped[0].line == 2);

  // Missing field carries the field name.
  json j = to_json(make_qa("q9", "e9", "science"));
  j.erase("domain");
  write_file(path, j.dump() + "\n");
  try {
    read_records<QARecord>(path);
    FAIL("expected SchemaViolationError");
  } catch (const SchemaViolationError& ex) {
    CHECK(ex.field() == "domain");
    CHECK(ex.line() == 1);
  }

  CHECK_THROWS_AS(read_records<QARecord>("/nonexistent/qa.jsonl"),
                  MissingFileError);
}

TEST_CASE("split assigns whole entries to one side", "[corpus]") {
  std::vector<QARecord> records;
  for (int e = 0; e < 40; ++e) {
    std::string eid = "e" + std::to_string(e);
    std::string domain = (e % 2 == 0) ? "history" : "science";
    for (int q = 0; q < 3; ++q) {
      records.push_back(
          make_qa(eid + "-q" + std::to_string(q), eid, domain));
    }
  }

  auto result = split_train_test(records, 9, 7);

  std::map<std::string, std::set<std::string>> sides;
  for (const auto& r : result.test) {
    sides[r.entry_id].insert("test");
    CHECK(r.split == Split::Test);
  }
  for (const auto& r : result.train) {
    sides[r.entry_id].insert("train");
    CHECK(r.split == Split::Train);
  }
  for (const auto& [eid, s] : sides) {
    INFO("entry " << eid);
    CHECK(s.size() == 1);
  }
  CHECK(result.test.size() + result.train.size() == records.size());

  // Entries carry 3 questions each, so a target of 9 is exactly fillable.
  for (const auto& [domain, count] : result.report.test_counts) {
    CHECK(count == 9);
  }
  CHECK(result.report.insufficient.empty());
}

TEST_CASE("split never exceeds the per-domain target", "[corpus]") {
  // 2-question entries against an odd target: 5 cannot be hit exactly.
  std::vector<QARecord> records;
  for (int e = 0; e < 30; ++e) {
    std::string eid = "e" + std::to_string(e);
    for (int q = 0; q < 2; ++q) {
      records.push_back(make_qa(eid + "-q" + std::to_string(q), eid, "geo"));
    }
  }
  auto result = split_train_test(records, 5, 3);
  CHECK(result.report.test_counts["geo"] == 4);
  CHECK(result.report.insufficient.count("geo") == 1);
  CHECK(result.report.insufficient["geo"] == 4);
}

TEST_CASE("entries touching the catch-all domain stay in train", "[corpus]") {
  std::vector<QARecord> records;
  records.push_back(make_qa("q1", "e1", "others"));
  records.push_back(make_qa("q2", "e1", "history"));
  records.push_back(make_qa("q3", "e2", "history"));
  records.push_back(make_qa("q4", "e3", "history"));

  auto result = split_train_test(records, 2, 11);
  for (const auto& r : result.test) {
    CHECK(r.entry_id != "e1");
  }
  CHECK(result.report.test_counts["history"] == 2);
  // The catch-all domain itself is never a target.
  CHECK(result.report.insufficient.count("others") == 0);
}

TEST_CASE("split is deterministic in the seed", "[corpus]") {
  std::vector<QARecord> records;
  for (int e = 0; e < 25; ++e) {
    std::string eid = "e" + std::to_string(e);
    records.push_back(make_qa(eid + "-q0", eid, "history"));
  }
  auto a = split_train_test(records, 10, 42);
  auto b = split_train_test(records, 10, 42);
  auto c = split_train_test(records, 10, 43);

  auto ids = [](const std::vector<QARecord>& rs) {
    std::set<std::string> s;
    for (const auto& r : rs) s.insert(r.question_id);
    return s;
  };
  CHECK(ids(a.test) == ids(b.test));
  CHECK(ids(a.test) != ids(c.test));
  CHECK(a.test.size() == 10);
  CHECK(c.test.size() == 10);
}

TEST_CASE("insufficient entries reported and target relaxed", "[corpus]") {
  std::vector<QARecord> records;
  records.push_back(make_qa("q1", "e1", "history"));
  records.push_back(make_qa("q2", "e2", "history"));
  auto result = split_train_test(records, 10, 1);
  CHECK(result.test.size() == 2);
  CHECK(result.train.empty());
  REQUIRE(result.report.insufficient.count("history") == 1);
  CHECK(result.report.insufficient["history"] == 2);
}
