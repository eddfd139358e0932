#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <string>
#include <vector>

#include "pkue/construct.hpp"
#include "test_support.hpp"

using namespace pkue;
using namespace pkue::construct;
using pkue::testing::ScriptedClient;
using pkue::testing::repeat;

namespace {

corpus::EncycEntry make_entry(const std::string& id, long long views,
                              const std::string& description) {
  corpus::EncycEntry e;
  e.entry_id = id;
  e.object = "obj-" + id;
  e.view_count = views;
  e.description = description;
  return e;
}

corpus::QARecord make_qa(const std::string& qid) {
  corpus::QARecord r;
  r.question_id = qid;
  r.entry_id = "e-" + qid;
  r.question = "问题" + qid;
  r.standard_answer = "标准" + qid;
  r.wrong_answers = {"误一" + qid, "误二" + qid, "误三" + qid};
  return r;
}

const char* kThreeBlocks =
    "【问题1】：黄鹤楼位于哪座城市？\n"
    "【标准答案】：武汉\n"
    "【错误答案1】：南京\n"
    "【错误答案2】：杭州\n"
    "【错误答案3】：长沙\n"
    "【问题2】：黄鹤楼始建于哪个朝代？\n"
    "【标准答案】：三国时期\n"
    "【错误答案1】：唐朝\n"
    "【错误答案2】：宋朝\n"
    "【错误答案3】：明朝\n"
    "【问题3】：黄鹤楼有几层？\n"
    "【标准答案】：五层\n"
    "【错误答案1】：三层\n"
    "【错误答案2】：七层\n"
    "【错误答案3】：九层\n";

}  // namespace

TEST_CASE("entry filter threshold is inclusive", "[construct]") {
  ConstructionConfig cfg;
  std::vector<corpus::EncycEntry> entries = {
      make_entry("a", 600000, "x"), make_entry("b", 400000, "x"),
      make_entry("c", 500000, "x"), make_entry("d", 499999, "x")};
  auto result = filter_entries(entries, cfg);
  REQUIRE(result.kept.size() == 2);
  CHECK(result.kept[0].entry_id == "a");
  CHECK(result.kept[1].entry_id == "c");
  CHECK(result.removed == 2);
}

TEST_CASE("description filter drops short and truncates long",
          "[construct]") {
  ConstructionConfig cfg;
  std::string at_min = repeat("字", 100);
  std::string below = repeat("字", 99);
  std::string above = repeat("长", 850);
  std::vector<corpus::EncycEntry> entries = {make_entry("min", 1, at_min),
                                             make_entry("below", 1, below),
                                             make_entry("above", 1, above)};
  auto result = filter_descriptions(entries, cfg);
  REQUIRE(result.kept.size() == 2);
  CHECK(result.dropped == 1);
  CHECK(result.truncated == 1);
  CHECK(result.kept[0].description == at_min);  // boundary kept unmodified
  CHECK(utf8::scalar_count(result.kept[1].description) == 800);
  CHECK(result.kept[1].description == repeat("长", 800));  // prefix

  // Idempotence: a second pass changes nothing.
  auto again = filter_descriptions(result.kept, cfg);
  CHECK(again.dropped == 0);
  CHECK(again.truncated == 0);
  REQUIRE(again.kept.size() == result.kept.size());
  for (std::size_t i = 0; i < again.kept.size(); ++i) {
    CHECK(again.kept[i].description == result.kept[i].description);
  }
}

TEST_CASE("question block parsing handles the labeled format",
          "[construct]") {
  ConstructionConfig cfg;
  auto entry = make_entry("e1", 1, "desc");

  auto parsed = parse_question_blocks(kThreeBlocks, entry, cfg);
  REQUIRE(parsed.records.size() == 3);
  CHECK(parsed.dropped_blocks == 0);
  CHECK(parsed.records[0].question_id == "e1-q0");
  CHECK(parsed.records[0].question == "黄鹤楼位于哪座城市？");
  CHECK(parsed.records[0].standard_answer == "武汉");
  CHECK(parsed.records[0].wrong_answers ==
        std::vector<std::string>{"南京", "杭州", "长沙"});
  CHECK(parsed.records[2].entry_id == "e1");
  for (const auto& r : parsed.records) CHECK_NOTHROW(corpus::validate(r));
}

TEST_CASE("incomplete blocks are dropped, none found fails", "[construct]") {
  ConstructionConfig cfg;
  auto entry = make_entry("e1", 1, "desc");

  std::string two_and_partial =
      "【问题1】：甲？\n【标准答案】：A\n【错误答案1】：B\n【错误答案2】：C\n"
      "【错误答案3】：D\n"
      "【问题2】：乙？\n【标准答案】：E\n【错误答案1】：F\n【错误答案2】：G\n"
      "【错误答案3】：H\n"
      "【问题3】：丙？\n【标准答案】：I\n【错误答案1】：J\n【错误答案2】：K\n";
  auto parsed = parse_question_blocks(two_and_partial, entry, cfg);
  CHECK(parsed.records.size() == 2);
  CHECK(parsed.dropped_blocks == 1);

  CHECK_THROWS_AS(parse_question_blocks("", entry, cfg), ParseFailureError);
  CHECK_THROWS_AS(parse_question_blocks("没有任何结构的文本", entry, cfg),
                  ParseFailureError);

  // A wrong answer equal to the standard answer invalidates its block.
  std::string dup =
      "【问题1】：甲？\n【标准答案】：A\n【错误答案1】：A\n【错误答案2】：C\n"
      "【错误答案3】：D\n";
  CHECK_THROWS_AS(parse_question_blocks(dup, entry, cfg), ParseFailureError);
}

TEST_CASE("english labels and multi-line values parse", "[construct]") {
  ConstructionConfig cfg;
  auto entry = make_entry("e2", 1, "desc");
  std::string text =
      "[Question 1]: Which river?\n"
      "continues on a second line\n"
      "[Standard Answer]: The Yangtze\n"
      "[Wrong Answer 1]: The Yellow River\n"
      "[Wrong Answer 2]: The Pearl River\n"
      "[Wrong Answer 3]: The Amur\n";
  auto parsed = parse_question_blocks(text, entry, cfg);
  REQUIRE(parsed.records.size() == 1);
  CHECK(parsed.records[0].question ==
        "Which river?\ncontinues on a second line");
  CHECK(parsed.records[0].standard_answer == "The Yangtze");
}

TEST_CASE("parser caps blocks at the per-entry maximum", "[construct]") {
  ConstructionConfig cfg;
  auto entry = make_entry("e3", 1, "desc");
  std::string four;
  for (int i = 1; i <= 4; ++i) {
    four += "【问题" + std::to_string(i) + "】：问" + std::to_string(i) +
            "？\n【标准答案】：对\n【错误答案1】：错甲\n【错误答案2】：错乙\n"
            "【错误答案3】：错丙\n";
  }
  auto parsed = parse_question_blocks(four, entry, cfg);
  CHECK(parsed.records.size() == 3);
  CHECK(parsed.dropped_blocks == 1);
}

TEST_CASE("template rendering replaces every occurrence", "[construct]") {
  std::string tmpl = "object={object} again={object} desc={description}";
  auto out = render_template(tmpl, {{"object", "月球"},
                                    {"description", "卫星"}});
  CHECK(out == "object=月球 again=月球 desc=卫星");
  CHECK(render_template("no holes", {}) == "no holes");
  CHECK(render_template("{unknown}", {{"object", "x"}}) == "{unknown}");
}

TEST_CASE("domain regrouping follows the strict count threshold",
          "[construct]") {
  ConstructionConfig cfg;
  std::vector<corpus::QARecord> records;
  auto add = [&](const std::string& tag, int count) {
    for (int i = 0; i < count; ++i) {
      records.push_back(make_qa(tag + std::to_string(i)));
    }
  };
  add("big", 501);
  add("edge", 500);
  add("small", 200);

  Classifier classifier = [](const corpus::QARecord& r) {
    if (r.question_id.rfind("big", 0) == 0) return std::string("big");
    if (r.question_id.rfind("edge", 0) == 0) return std::string("edge");
    return std::string("small");
  };
  auto result = classify_and_regroup(records, classifier, cfg);
  REQUIRE(result.records.size() == records.size());  // conservation
  CHECK(result.kept_domains == std::vector<std::string>{"big"});
  CHECK(result.relabeled == 700);

  std::map<std::string, int> final_counts;
  for (const auto& r : result.records) ++final_counts[r.domain];
  CHECK(final_counts["big"] == 501);       // strictly more than 500 kept
  CHECK(final_counts["others"] == 700);    // 500 is not more than 500
  CHECK(final_counts.count("edge") == 0);
  CHECK(final_counts.count("small") == 0);
}

TEST_CASE("classifier failures route to the catch-all domain",
          "[construct]") {
  ConstructionConfig cfg;
  cfg.min_domain_count = 1;
  std::vector<corpus::QARecord> records = {make_qa("a0"), make_qa("a1"),
                                           make_qa("boom")};
  Classifier classifier = [](const corpus::QARecord& r) -> std::string {
    if (r.question_id == "boom") throw IoError("classifier offline");
    return "stable";
  };
  auto result = classify_and_regroup(records, classifier, cfg);
  CHECK(result.classifier_failures == 1);
  CHECK(result.records[2].domain == "others");
  CHECK(result.records[0].domain == "stable");
  CHECK(result.relabeled == 0);
}

TEST_CASE("quality markers decide only when exactly one kind appears",
          "[construct]") {
  CHECK(parse_quality("这个问题表述清晰。【优质】") == Quality::HighQuality);
  CHECK(parse_quality("答案存在争议。【非优质】") == Quality::LowQuality);
  CHECK(parse_quality("Verdict: [High Quality]") == Quality::HighQuality);
  CHECK(parse_quality("Verdict: [Low Quality]") == Quality::LowQuality);
  CHECK(parse_quality("既有【优质】也有【非优质】") == Quality::Uncertain);
  CHECK(parse_quality("没有给出结论") == Quality::Uncertain);
  CHECK(parse_quality("") == Quality::Uncertain);
  // The negative marker must not be misread through its substring.
  CHECK(parse_quality("【非优质】") == Quality::LowQuality);
}

TEST_CASE("quality filter keeps high, drops low, retries uncertain",
          "[construct]") {
  std::vector<corpus::QARecord> records = {make_qa("good"), make_qa("bad"),
                                           make_qa("vague"),
                                           make_qa("offline")};
  int vague_calls = 0;
  ScriptedClient client([&](const std::string& prompt,
                            const provider::GenerationConfig&)
                            -> std::vector<std::string> {
    if (prompt.find("good") != std::string::npos) return {"表述明确。【优质】"};
    if (prompt.find("bad") != std::string::npos) return {"答案多解。【非优质】"};
    if (prompt.find("vague") != std::string::npos) {
      ++vague_calls;
      return {"难以判断。"};
    }
    throw provider::TransportError(503, "down");
  });

  auto result = filter_questions(records, client, "判断问题:{question}");
  REQUIRE(result.kept.size() == 1);
  CHECK(result.kept[0].question_id == "good");
  CHECK(result.dropped_low_quality == 1);
  CHECK(result.dropped_uncertain == 2);  // unparseable and provider failure
  CHECK(vague_calls == 2);               // exactly one retry

  REQUIRE(result.verdicts.size() == 4);
  CHECK(result.verdicts[0].verdict == Quality::HighQuality);
  CHECK(result.verdicts[1].verdict == Quality::LowQuality);
  CHECK(result.verdicts[2].verdict == Quality::Uncertain);
  CHECK(result.verdicts[3].verdict == Quality::Uncertain);
}

TEST_CASE("five-stage build is deterministic and stage-monotone",
          "[construct]") {
  ConstructionConfig cfg;
  cfg.min_domain_count = 1;

  std::vector<corpus::EncycEntry> entries;
  entries.push_back(make_entry("e1", 700000, repeat("甲", 150)));
  entries.push_back(make_entry("e2", 600000, repeat("乙", 900)));
  entries.push_back(make_entry("e3", 100, repeat("丙", 150)));    // view-filtered
  entries.push_back(make_entry("e4", 800000, repeat("丁", 50)));  // too short

  ScriptedClient client([&](const std::string& prompt,
                            const provider::GenerationConfig&)
                            -> std::vector<std::string> {
    if (prompt.rfind("生成:", 0) == 0) return {kThreeBlocks};
    return {"可以作答。【优质】"};
  });
  Classifier classifier = [](const corpus::QARecord& r) {
    return r.question_id.back() == '0' ? std::string("geo")
                                       : std::string("history");
  };
  PromptTemplates templates{"生成:{object}:{description}", "审核:{question}"};

  auto a = build_dataset(entries, client, templates, cfg, classifier);
  auto b = build_dataset(entries, client, templates, cfg, classifier);

  CHECK(a.report.entries_in == 4);
  CHECK(a.report.entries_after_view_filter == 3);
  CHECK(a.report.entries_after_description_filter == 2);
  CHECK(a.report.descriptions_truncated == 1);
  CHECK(a.report.questions_generated == 6);
  CHECK(a.report.questions_after_quality == 6);
  CHECK(a.report.domain_counts.at("geo") == 2);
  CHECK(a.report.domain_counts.at("history") == 4);

  CHECK(corpus::serialize_records(a.records) ==
        corpus::serialize_records(b.records));
  CHECK(a.report.to_json() == b.report.to_json());

  // No stage invents entries: every question's entry survived stages 1-2.
  for (const auto& r : a.records) {
    CHECK((r.entry_id == "e1" || r.entry_id == "e2"));
  }
}
