#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pkue/loop.hpp"
#include "test_support.hpp"

using namespace pkue;
using namespace pkue::loop;
using pkue::testing::ScriptedClient;

namespace {

corpus::QARecord make_qa(const std::string& qid) {
  corpus::QARecord r;
  r.question_id = qid;
  r.entry_id = "e-" + qid;
  r.question = "问:" + qid;
  r.standard_answer = "答:" + qid;
  r.wrong_answers = {"误1:" + qid, "误2:" + qid, "误3:" + qid};
  return r;
}

// One question's samples with the given verdict pattern, 'C'/'I'/'U'.
struct Fixture {
  std::vector<corpus::CandidateResponse> responses;
  std::vector<corpus::Judgment> judgments;
};

Fixture make_fixture(const std::string& qid, const std::string& pattern,
                     bool distinct_texts = true) {
  Fixture f;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    corpus::CandidateResponse r;
    r.question_id = qid;
    r.sample_index = static_cast<int>(i);
    r.text = distinct_texts ? "text-" + std::to_string(i) : "same-text";
    f.responses.push_back(r);
    corpus::Judgment j;
    j.question_id = qid;
    j.sample_index = static_cast<int>(i);
    j.verdict = pattern[i] == 'C'   ? corpus::Verdict::Correct
                : pattern[i] == 'I' ? corpus::Verdict::Incorrect
                                    : corpus::Verdict::Uncertain;
    f.judgments.push_back(j);
  }
  return f;
}

}  // namespace

TEST_CASE("verdict markers decide only when exactly one kind appears",
          "[loop]") {
  CHECK(parse_verdict("回答符合参考答案。【正确】") ==
        corpus::Verdict::Correct);
  CHECK(parse_verdict("与参考答案矛盾。【错误】") ==
        corpus::Verdict::Incorrect);
  CHECK(parse_verdict("The answer matches. [Correct]") ==
        corpus::Verdict::Correct);
  CHECK(parse_verdict("Contradicts the reference. [Incorrect]") ==
        corpus::Verdict::Incorrect);
  CHECK(parse_verdict("先判【正确】，后改【错误】") ==
        corpus::Verdict::Uncertain);
  CHECK(parse_verdict("难以判断。") == corpus::Verdict::Uncertain);
  CHECK(parse_verdict("") == corpus::Verdict::Uncertain);
  // Bracketless words do not count as markers.
  CHECK(parse_verdict("这是正确的说法") == corpus::Verdict::Uncertain);
  CHECK(parse_verdict("Incorrect without brackets") ==
        corpus::Verdict::Uncertain);
}

TEST_CASE("judge wraps the raw text and survives provider failure",
          "[loop]") {
  auto record = make_qa("q1");
  corpus::CandidateResponse response;
  response.question_id = "q1";
  response.sample_index = 3;
  response.text = "答:q1";

  RawJudge ok = [](const std::string& q, const std::string& c,
                   const std::string& s) {
    CHECK(q == "问:q1");
    CHECK(c == "答:q1");
    CHECK(s == "答:q1");
    return std::string("一致。【正确】");
  };
  auto j = judge(record, response, ok, "judge-a");
  CHECK(j.verdict == corpus::Verdict::Correct);
  CHECK(j.sample_index == 3);
  CHECK(j.judge_id == "judge-a");
  CHECK(j.raw_judge_text == "一致。【正确】");

  RawJudge boom = [](const std::string&, const std::string&,
                     const std::string&) -> std::string {
    throw provider::TransportError(503, "down");
  };
  auto u = judge(record, response, boom, "judge-a");
  CHECK(u.verdict == corpus::Verdict::Uncertain);
}

TEST_CASE("chat judge renders the template fields", "[loop]") {
  ScriptedClient client([](const std::string& prompt,
                           const provider::GenerationConfig& cfg)
                            -> std::vector<std::string> {
    CHECK(cfg.n == 1);
    CHECK(prompt == "Q=天问 S=地答 C=人答");
    return {"评定【错误】"};
  });
  auto raw = make_chat_raw_judge(
      client, "Q={question} S={standard_answer} C={candidate_answer}");
  CHECK(parse_verdict(raw("天问", "人答", "地答")) ==
        corpus::Verdict::Incorrect);
  CHECK(client.calls() == 1);
}

TEST_CASE("pair candidates are the correct-incorrect product", "[loop]") {
  PairConfig cfg;
  cfg.m = 100;  // no down-sampling

  auto f = make_fixture("q1", "CICIU");
  auto pairs = build_pairs("q1", f.responses, f.judgments, cfg);
  // Correct {0,2}, Incorrect {1,3}: lexicographic (chosen, rejected).
  REQUIRE(pairs.size() == 4);
  CHECK(pairs[0].chosen_index == 0);
  CHECK(pairs[0].rejected_index == 1);
  CHECK(pairs[1].chosen_index == 0);
  CHECK(pairs[1].rejected_index == 3);
  CHECK(pairs[2].chosen_index == 2);
  CHECK(pairs[2].rejected_index == 1);
  CHECK(pairs[3].chosen_index == 2);
  CHECK(pairs[3].rejected_index == 3);
  for (const auto& p : pairs) {
    CHECK(p.chosen == "text-" + std::to_string(p.chosen_index));
    CHECK(p.rejected == "text-" + std::to_string(p.rejected_index));
    CHECK(p.chosen_index != 4);  // the Uncertain sample never appears
    CHECK(p.rejected_index != 4);
  }
}

TEST_CASE("pair cap keeps exactly m of the candidates", "[loop]") {
  PairConfig cfg;
  cfg.m = 8;
  cfg.seed = 5;

  auto f = make_fixture("q1", "CCCIIIII");  // 3 x 5 = 15 candidates
  auto pairs = build_pairs("q1", f.responses, f.judgments, cfg);
  CHECK(pairs.size() == 8);
  std::set<std::pair<int, int>> unique;
  for (const auto& p : pairs) {
    unique.insert({p.chosen_index, p.rejected_index});
  }
  CHECK(unique.size() == 8);  // down-sampling without replacement

  auto again = build_pairs("q1", f.responses, f.judgments, cfg);
  REQUIRE(again.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(again[i].chosen_index == pairs[i].chosen_index);
    CHECK(again[i].rejected_index == pairs[i].rejected_index);
  }

  PairConfig other = cfg;
  other.seed = 6;
  auto different = build_pairs("q1", f.responses, f.judgments, other);
  bool same = true;
  for (std::size_t i = 0; i < 8; ++i) {
    same = same && different[i].chosen_index == pairs[i].chosen_index &&
           different[i].rejected_index == pairs[i].rejected_index;
  }
  CHECK_FALSE(same);
}

TEST_CASE("single correct-incorrect pair is seed-independent", "[loop]") {
  auto f = make_fixture("q1", "CI");
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    PairConfig cfg;
    cfg.seed = seed;
    auto pairs = build_pairs("q1", f.responses, f.judgments, cfg);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].chosen_index == 0);
    CHECK(pairs[0].rejected_index == 1);
  }
}

TEST_CASE("dedup removes text-identical pairs before the cap", "[loop]") {
  auto f = make_fixture("q1", "CI", false);  // both samples say "same-text"
  PairConfig cfg;
  auto pairs = build_pairs("q1", f.responses, f.judgments, cfg);
  CHECK(pairs.empty());

  cfg.dedup = false;
  CHECK_THROWS_AS(
      [&] {
        auto kept = build_pairs("q1", f.responses, f.judgments, cfg);
        for (const auto& p : kept) corpus::validate(p);
      }(),
      InvariantViolationError);
}

TEST_CASE("pair count law holds on random verdict vectors", "[loop]") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t n = 1 + rng.bounded(16);
    std::string pattern;
    std::size_t c = 0, w = 0;
    for (std::size_t i = 0; i < n; ++i) {
      switch (rng.bounded(3)) {
        case 0: pattern += 'C'; ++c; break;
        case 1: pattern += 'I'; ++w; break;
        default: pattern += 'U'; break;
      }
    }
    PairConfig cfg;
    cfg.m = 1 + rng.bounded(16);
    cfg.seed = rng.next_u64();
    auto f = make_fixture("q", pattern);
    auto pairs = build_pairs("q", f.responses, f.judgments, cfg);
    CHECK(pairs.size() == std::min<std::size_t>(cfg.m, c * w));
  }
}

TEST_CASE("sampling produces n indexed responses per question", "[loop]") {
  provider::MockWorld world;
  world.seed = 3;
  world.temperature_curve = {{0.0, 0.5}, {2.0, 0.5}};
  std::vector<corpus::QARecord> records;
  for (int i = 0; i < 10; ++i) {
    auto r = make_qa("q" + std::to_string(i));
    provider::AnswerPool pool;
    pool.correct = {r.standard_answer};
    pool.wrong = {r.wrong_answers[0]};
    world.questions[r.question_id] = pool;
    records.push_back(r);
  }

  SamplingPlan plan;
  plan.config.n = 8;
  plan.config.temperature = 1.4;
  auto outcome =
      sample_responses(records, plan, make_mock_sampler(world), 4);
  CHECK(outcome.responses.size() == 80);
  CHECK(outcome.incomplete_questions.empty());
  for (std::size_t i = 0; i < outcome.responses.size(); ++i) {
    CHECK(outcome.responses[i].question_id ==
          "q" + std::to_string(i / 8));
    CHECK(outcome.responses[i].sample_index == static_cast<int>(i % 8));
    CHECK(outcome.responses[i].generation_config_id == plan.config.id());
  }

  auto rerun = sample_responses(records, plan, make_mock_sampler(world), 1);
  REQUIRE(rerun.responses.size() == outcome.responses.size());
  for (std::size_t i = 0; i < rerun.responses.size(); ++i) {
    CHECK(rerun.responses[i].text == outcome.responses[i].text);
  }
}

TEST_CASE("failed questions are flagged and excluded", "[loop]") {
  std::vector<corpus::QARecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(make_qa("q" + std::to_string(i)));

  Sampler flaky = [](const corpus::QARecord& r,
                     const GenerationConfig& cfg) -> std::vector<std::string> {
    if (r.question_id == "q4") throw provider::TransportError(500, "boom");
    return std::vector<std::string>(cfg.n, "a:" + r.question_id);
  };
  SamplingPlan plan;
  plan.config.n = 8;
  auto outcome = sample_responses(records, plan, flaky, 3);
  CHECK(outcome.responses.size() == 72);
  REQUIRE(outcome.incomplete_questions.size() == 1);
  CHECK(outcome.incomplete_questions[0] == "q4");
  for (const auto& r : outcome.responses) CHECK(r.question_id != "q4");
}

TEST_CASE("sft labels follow the mode", "[loop]") {
  auto f = make_fixture("q1", "CCICCI");
  auto all = sft_labels("q1", f.responses, f.judgments, SftMode::All, 0);
  REQUIRE(all.size() == 4);
  CHECK(all[0].sample_index == 0);
  CHECK(all[3].sample_index == 4);

  auto one = sft_labels("q1", f.responses, f.judgments, SftMode::Single, 7);
  REQUIRE(one.size() == 1);
  auto rerun = sft_labels("q1", f.responses, f.judgments, SftMode::Single, 7);
  CHECK(one[0].sample_index == rerun[0].sample_index);

  auto none = make_fixture("q2", "III");
  CHECK(sft_labels("q2", none.responses, none.judgments, SftMode::Single, 7)
            .empty());

  // The single pick is one of the Correct indices.
  std::set<int> correct_indices{0, 1, 3, 4};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto pick = sft_labels("q1", f.responses, f.judgments, SftMode::Single,
                           seed);
    REQUIRE(pick.size() == 1);
    CHECK(correct_indices.count(pick[0].sample_index) == 1);
  }
}

TEST_CASE("tuning stats classify questions by verdict mix", "[loop]") {
  std::vector<corpus::QARecord> records = {make_qa("all-c"), make_qa("all-i"),
                                           make_qa("mixed")};
  std::vector<corpus::Judgment> judgments;
  auto add = [&](const std::string& qid, const std::string& pattern) {
    auto f = make_fixture(qid, pattern);
    judgments.insert(judgments.end(), f.judgments.begin(), f.judgments.end());
  };
  add("all-c", "CCCCCCCC");
  add("all-i", "IIIIIIII");
  add("mixed", "CCIIIIII");

  auto stats = tuning_stats(records, judgments, {}, 5);
  CHECK(stats.questions == 3);
  CHECK(stats.sft_valid == 2);   // all-c and mixed
  CHECK(stats.dpo_valid == 1);   // mixed only
  CHECK(stats.labels == 5);
  CHECK(stats.pairs == 0);
}

TEST_CASE("noise composition hits exact strata counts", "[loop]") {
  std::vector<corpus::PreferencePair> pairs;
  std::vector<PairRelation> relations;
  auto add = [&](PairRelation rel, int count) {
    for (int i = 0; i < count; ++i) {
      corpus::PreferencePair p;
      p.question_id = "q" + std::to_string(pairs.size());
      p.chosen = "c" + std::to_string(pairs.size());
      p.rejected = "r" + std::to_string(pairs.size());
      pairs.push_back(p);
      relations.push_back(rel);
    }
  };
  add(PairRelation::ChosenBetter, 120);
  add(PairRelation::Equal, 60);
  add(PairRelation::RejectedBetter, 30);

  NoiseComposition comp;
  comp.size = 100;
  comp.chosen_better = 0.9;
  comp.equal = 0.1;
  comp.rejected_better = 0.0;
  auto out = compose_noise_sets(pairs, relations, comp, 11);
  REQUIRE(out.size() == 100);
  std::map<std::string, PairRelation> relation_of;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    relation_of[pairs[i].question_id] = relations[i];
  }
  std::map<PairRelation, int> got;
  for (const auto& p : out) ++got[relation_of.at(p.question_id)];
  CHECK(got[PairRelation::ChosenBetter] == 90);
  CHECK(got[PairRelation::Equal] == 10);
  CHECK(got[PairRelation::RejectedBetter] == 0);

  // Residual lands on the largest fraction: thirds of 10 give 4/3/3.
  NoiseComposition thirds;
  thirds.size = 10;
  thirds.chosen_better = thirds.equal = thirds.rejected_better = 1.0 / 3.0;
  auto t = compose_noise_sets(pairs, relations, thirds, 11);
  std::map<PairRelation, int> tcounts;
  for (const auto& p : t) ++tcounts[relation_of.at(p.question_id)];
  CHECK(tcounts[PairRelation::ChosenBetter] == 4);
  CHECK(tcounts[PairRelation::Equal] == 3);
  CHECK(tcounts[PairRelation::RejectedBetter] == 3);

  NoiseComposition starved;
  starved.size = 100;
  starved.chosen_better = 0.2;
  starved.equal = 0.3;
  starved.rejected_better = 0.5;  // needs 50, only 30 available
  try {
    compose_noise_sets(pairs, relations, starved, 11);
    FAIL("expected InsufficientStratumError");
  } catch (const InsufficientStratumError& ex) {
    CHECK(ex.relation() == PairRelation::RejectedBetter);
    CHECK(ex.have() == 30);
    CHECK(ex.need() == 50);
  }

  NoiseComposition empty;
  empty.size = 0;
  empty.chosen_better = 1.0;
  CHECK(compose_noise_sets(pairs, relations, empty, 11).empty());
}

TEST_CASE("dataset pairs come from the stored wrong answers", "[loop]") {
  auto r = make_qa("q1");
  auto pairs = dataset_pairs(r);
  REQUIRE(pairs.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(pairs[j].chosen == r.standard_answer);
    CHECK(pairs[j].rejected == r.wrong_answers[j]);
    CHECK(pairs[j].chosen_index == -1);
    CHECK_NOTHROW(corpus::validate(pairs[j]));
  }
}

TEST_CASE("preference export writes the three-field shape", "[loop]") {
  auto f = make_fixture("q1", "CI");
  PairConfig cfg;
  auto pairs = build_pairs("q1", f.responses, f.judgments, cfg);
  auto dir = std::filesystem::temp_directory_path() / "pkue_loop_test";
  std::filesystem::create_directories(dir);
  auto path = (dir / "prefs.jsonl").string();

  auto digest = export_preference_jsonl(pairs, {{"q1", "问:q1"}}, path);
  CHECK(digest == digest_file(path));
  auto lines = read_file(path);
  auto parsed = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  CHECK(parsed["prompt"] == "问:q1");
  CHECK(parsed["chosen"] == "text-0");
  CHECK(parsed["rejected"] == "text-1");

  CHECK_THROWS_AS(export_preference_jsonl(pairs, {}, path),
                  InvariantViolationError);
}
