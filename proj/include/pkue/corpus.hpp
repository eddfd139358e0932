#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/rng.hpp"

namespace pkue::corpus {

using nlohmann::json;

enum class Split { Train, Test, Unassigned };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    default: return "unassigned";
  }
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw InvariantViolationError("unknown split value '" + s + "'");
}

enum class Verdict { Correct, Incorrect, Uncertain };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Correct: return "correct";
    case Verdict::Incorrect: return "incorrect";
    default: return "uncertain";
  }
}

inline Verdict verdict_from_string(const std::string& s) {
  if (s == "correct") return Verdict::Correct;
  if (s == "incorrect") return Verdict::Incorrect;
  if (s == "uncertain") return Verdict::Uncertain;
  throw InvariantViolationError("unknown verdict value '" + s + "'");
}

// ---------------------------------------------------------------------------
// Record types. Field names here are the wire format of the .jsonl files.
// ---------------------------------------------------------------------------

// One raw encyclopedia record: object name, page view count, description.
struct EncycEntry {
  std::string entry_id;
  std::string object;
  long long view_count = 0;
  std::string description;
};

// One dataset sample: a question, its standard answer, three wrong answers,
// and a domain label.
struct QARecord {
  std::string question_id;
  std::string entry_id;
  std::string question;
  std::string standard_answer;
  std::vector<std::string> wrong_answers;
  std::string domain;
  Split split = Split::Unassigned;
};

struct CandidateResponse {
  std::string question_id;
  int sample_index = 0;
  std::string text;
  std::string generation_config_id;
};

struct Judgment {
  std::string question_id;
  int sample_index = 0;
  Verdict verdict = Verdict::Uncertain;
  std::string raw_judge_text;
  std::string judge_id;
};

struct PreferencePair {
  std::string question_id;
  std::string chosen;
  std::string rejected;
  int chosen_index = 0;
  int rejected_index = 0;
};

// ---------------------------------------------------------------------------
// Per-type validation and (de)serialization.
// ---------------------------------------------------------------------------

inline void validate(const EncycEntry& e) {
  if (e.entry_id.empty()) {
    throw InvariantViolationError("entry_id must be non-empty");
  }
  if (e.view_count < 0) {
    throw InvariantViolationError("view_count must be >= 0 (entry " +
                                  e.entry_id + ")");
  }
}

inline void validate(const QARecord& r) {
  if (r.question_id.empty()) {
    throw InvariantViolationError("question_id must be non-empty");
  }
  if (r.wrong_answers.size() != 3) {
    throw InvariantViolationError(
        "wrong_answers must have exactly 3 elements (question " +
        r.question_id + " has " + std::to_string(r.wrong_answers.size()) +
        ")");
  }
  for (const auto& w : r.wrong_answers) {
    if (w == r.standard_answer) {
      throw InvariantViolationError(
          "wrong answer equals standard answer (question " + r.question_id +
          ")");
    }
  }
}

inline void validate(const CandidateResponse& r) {
  if (r.question_id.empty()) {
    throw InvariantViolationError("question_id must be non-empty");
  }
  if (r.sample_index < 0) {
    throw InvariantViolationError("sample_index must be >= 0");
  }
}

inline void validate(const Judgment& j) {
  if (j.question_id.empty()) {
    throw InvariantViolationError("question_id must be non-empty");
  }
}

inline void validate(const PreferencePair& p) {
  if (p.question_id.empty()) {
    throw InvariantViolationError("question_id must be non-empty");
  }
  if (p.chosen == p.rejected) {
    throw InvariantViolationError(
        "chosen and rejected must differ as strings (question " +
        p.question_id + ")");
  }
}

inline json to_json(const EncycEntry& e) {
  return json{{"entry_id", e.entry_id},
              {"object", e.object},
              {"view_count", e.view_count},
              {"description", e.description}};
}

inline json to_json(const QARecord& r) {
  return json{{"question_id", r.question_id},
              {"entry_id", r.entry_id},
              {"question", r.question},
              {"standard_answer", r.standard_answer},
              {"wrong_answers", r.wrong_answers},
              {"domain", r.domain},
              {"split", to_string(r.split)}};
}

inline json to_json(const CandidateResponse& r) {
  return json{{"question_id", r.question_id},
              {"sample_index", r.sample_index},
              {"text", r.text},
              {"generation_config_id", r.generation_config_id}};
}

inline json to_json(const Judgment& j) {
  return json{{"question_id", j.question_id},
              {"sample_index", j.sample_index},
              {"verdict", to_string(j.verdict)},
              {"raw_judge_text", j.raw_judge_text},
              {"judge_id", j.judge_id}};
}

inline json to_json(const PreferencePair& p) {
  return json{{"question_id", p.question_id},
              {"chosen", p.chosen},
              {"rejected", p.rejected},
              {"chosen_index", p.chosen_index},
              {"rejected_index", p.rejected_index}};
}

namespace detail {

template <typename T>
T require_field(const json& j, const char* field, std::size_t line) {
  auto it = j.find(field);
  if (it == j.end()) {
    throw SchemaViolationError(line, field, "missing");
  }
  try {
    return it->get<T>();
  } catch (const json::exception& ex) {
    throw SchemaViolationError(line, field, ex.what());
  }
}

}  // namespace detail

inline void from_json(const json& j, EncycEntry& e, std::size_t line) {
  e.entry_id = detail::require_field<std::string>(j, "entry_id", line);
  e.object = detail::require_field<std::string>(j, "object", line);
  e.view_count = detail::require_field<long long>(j, "view_count", line);
  e.description = detail::require_field<std::string>(j, "description", line);
}

inline void from_json(const json& j, QARecord& r, std::size_t line) {
  r.question_id = detail::require_field<std::string>(j, "question_id", line);
  r.entry_id = detail::require_field<std::string>(j, "entry_id", line);
  r.question = detail::require_field<std::string>(j, "question", line);
  r.standard_answer =
      detail::require_field<std::string>(j, "standard_answer", line);
  r.wrong_answers = detail::require_field<std::vector<std::string>>(
      j, "wrong_answers", line);
  r.domain = detail::require_field<std::string>(j, "domain", line);
  r.split = split_from_string(
      detail::require_field<std::string>(j, "split", line));
}

inline void from_json(const json& j, CandidateResponse& r, std::size_t line) {
  r.question_id = detail::require_field<std::string>(j, "question_id", line);
  r.sample_index = detail::require_field<int>(j, "sample_index", line);
  r.text = detail::require_field<std::string>(j, "text", line);
  r.generation_config_id =
      detail::require_field<std::string>(j, "generation_config_id", line);
}

inline void from_json(const json& j, Judgment& jm, std::size_t line) {
  jm.question_id = detail::require_field<std::string>(j, "question_id", line);
  jm.sample_index = detail::require_field<int>(j, "sample_index", line);
  jm.verdict = verdict_from_string(
      detail::require_field<std::string>(j, "verdict", line));
  jm.raw_judge_text =
      detail::require_field<std::string>(j, "raw_judge_text", line);
  jm.judge_id = detail::require_field<std::string>(j, "judge_id", line);
}

inline void from_json(const json& j, PreferencePair& p, std::size_t line) {
  p.question_id = detail::require_field<std::string>(j, "question_id", line);
  p.chosen = detail::require_field<std::string>(j, "chosen", line);
  p.rejected = detail::require_field<std::string>(j, "rejected", line);
  p.chosen_index = detail::require_field<int>(j, "chosen_index", line);
  p.rejected_index = detail::require_field<int>(j, "rejected_index", line);
}

// ---------------------------------------------------------------------------
// Line-delimited record store. One JSON object per line, UTF-8, stable field
// order (alphabetical per nlohmann::json), '\n' line endings. write_records
// validates and returns the digest over the written bytes; read_records
// reports malformed lines with their 1-based line number.
// ---------------------------------------------------------------------------

struct MalformedLine {
  std::size_t line = 0;
  std::string message;
};

template <typename T>
std::vector<T> read_records(const std::string& path,
                            bool skip_malformed = false,
                            std::vector<MalformedLine>* skipped = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingFileError(path);
  }
  std::vector<T> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      T record;
      from_json(j, record, line_no);
      records.push_back(std::move(record));
    } catch (const SchemaViolationError&) {
      if (!skip_malformed) throw;
      if (skipped) skipped->push_back({line_no, "schema violation"});
    } catch (const json::exception& ex) {
      if (!skip_malformed) {
        throw SchemaViolationError(line_no, "<json>", ex.what());
      }
      if (skipped) skipped->push_back({line_no, ex.what()});
    }
  }
  return records;
}

template <typename T>
std::string serialize_records(const std::vector<T>& records) {
  std::string out;
  for (const auto& record : records) {
    validate(record);
    out += to_json(record).dump();
    out += '\n';
  }
  return out;
}

// Returns the FNV-1a digest of the bytes written.
template <typename T>
std::string write_records(const std::string& path,
                          const std::vector<T>& records) {
  std::string bytes = serialize_records(records);
  write_file(path, bytes);
  return digest_bytes(bytes);
}

// ---------------------------------------------------------------------------
// Entry-level train/test split. The unit of assignment is the entry: every
// question of an entry lands on the same side. Entries containing any
// "others"-domain question are not eligible for the test side. Eligible
// entries are shuffled with the seed, then greedily assigned to the test set
// while no affected domain would exceed per_domain_target.
// ---------------------------------------------------------------------------

constexpr const char* kOthersDomain = "others";

struct SplitReport {
  // Domains that could not reach the target, with the count they ended at.
  std::map<std::string, std::size_t> insufficient;
  std::map<std::string, std::size_t> test_counts;
};

struct SplitResult {
  std::vector<QARecord> test;
  std::vector<QARecord> train;
  SplitReport report;
};

inline SplitResult split_train_test(const std::vector<QARecord>& records,
                                    std::size_t per_domain_target,
                                    std::uint64_t seed) {
  for (const auto& r : records) {
    if (r.entry_id.empty()) {
      throw InvariantViolationError("record " + r.question_id +
                                    " has no entry_id");
    }
    if (r.domain.empty()) {
      throw InvariantViolationError("record " + r.question_id +
                                    " has no domain");
    }
  }

  // Group questions by entry, preserving first-seen entry order.
  std::vector<std::string> entry_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_entry;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = by_entry.try_emplace(records[i].entry_id);
    if (inserted) entry_order.push_back(records[i].entry_id);
    it->second.push_back(i);
  }

  std::vector<std::string> eligible;
  for (const auto& entry_id : entry_order) {
    const auto& indices = by_entry[entry_id];
    bool has_others = std::any_of(
        indices.begin(), indices.end(),
        [&](std::size_t i) { return records[i].domain == kOthersDomain; });
    if (!has_others) eligible.push_back(entry_id);
  }

  Rng rng(combine_seed(seed, hash_str("split_train_test")));
  rng.shuffle(eligible);

  std::map<std::string, std::size_t> test_counts;
  std::unordered_set<std::string> test_entries;
  if (per_domain_target > 0) {
    for (const auto& entry_id : eligible) {
      const auto& indices = by_entry[entry_id];
      std::map<std::string, std::size_t> delta;
      for (std::size_t i : indices) ++delta[records[i].domain];
      bool fits = true;
      for (const auto& [domain, count] : delta) {
        if (test_counts[domain] + count > per_domain_target) {
          fits = false;
          break;
        }
      }
      if (!fits) continue;
      test_entries.insert(entry_id);
      for (const auto& [domain, count] : delta) test_counts[domain] += count;
    }
  }

  SplitResult result;
  for (const auto& r : records) {
    QARecord copy = r;
    if (test_entries.count(r.entry_id)) {
      copy.split = Split::Test;
      result.test.push_back(std::move(copy));
    } else {
      copy.split = Split::Train;
      result.train.push_back(std::move(copy));
    }
  }
  result.report.test_counts = test_counts;

  // A domain is short when its final count is below target. Report it with
  // the count it reached; the target is effectively relaxed to that count.
  std::set<std::string> all_domains;
  for (const auto& r : records) {
    if (r.domain != kOthersDomain) all_domains.insert(r.domain);
  }
  for (const auto& domain : all_domains) {
    std::size_t got = 0;
    if (auto it = test_counts.find(domain); it != test_counts.end()) {
      got = it->second;
    }
    if (got < per_domain_target) {
      result.report.insufficient[domain] = got;
    }
  }
  return result;
}

}  // namespace pkue::corpus
