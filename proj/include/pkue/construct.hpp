#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/corpus.hpp"
#include "pkue/provider.hpp"

namespace pkue::construct {

using nlohmann::json;

struct ParseFailureError : Error {
  explicit ParseFailureError(const std::string& entry_id)
      : Error("no complete question block for entry " + entry_id) {}
};

struct ConstructionConfig {
  long long view_count_threshold = 500000;
  std::size_t min_description_chars = 100;
  std::size_t max_description_chars = 800;
  std::size_t max_questions_per_entry = 3;
  std::size_t min_domain_count = 500;

  void validate() const {
    if (view_count_threshold < 1 || min_description_chars < 1 ||
        max_description_chars < 1 || max_questions_per_entry < 1 ||
        min_domain_count < 1) {
      throw ConfigError("construction thresholds must be positive");
    }
    if (min_description_chars >= max_description_chars) {
      throw ConfigError(
          "min_description_chars must be below max_description_chars");
    }
  }
};

enum class Quality { HighQuality, LowQuality, Uncertain };

inline std::string to_string(Quality q) {
  switch (q) {
    case Quality::HighQuality: return "high_quality";
    case Quality::LowQuality: return "low_quality";
    default: return "uncertain";
  }
}

struct QualityVerdict {
  std::string question_id;
  Quality verdict = Quality::Uncertain;
  std::string rationale;
};

// Verdict comes only from the bracketed marker: exactly one marker kind
// present decides, anything else is Uncertain.
inline Quality parse_quality(const std::string& text) {
  bool high = contains_any(text, {"【优质】", "[High Quality]"});
  bool low = contains_any(text, {"【非优质】", "[Low Quality]"});
  if (high && !low) return Quality::HighQuality;
  if (low && !high) return Quality::LowQuality;
  return Quality::Uncertain;
}

// {key} placeholders replaced from the map; unknown braces left alone.
inline std::string render_template(
    const std::string& tmpl, const std::map<std::string, std::string>& values) {
  std::string out = tmpl;
  for (const auto& [key, value] : values) {
    std::string needle = "{" + key + "}";
    std::size_t pos = 0;
    while ((pos = out.find(needle, pos)) != std::string::npos) {
      out.replace(pos, needle.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1: entry filter by view count (inclusive threshold).
// ---------------------------------------------------------------------------

struct EntryFilterResult {
  std::vector<corpus::EncycEntry> kept;
  std::size_t removed = 0;
};

inline EntryFilterResult filter_entries(
    const std::vector<corpus::EncycEntry>& entries,
    const ConstructionConfig& config) {
  EntryFilterResult result;
  for (const auto& e : entries) {
    if (e.view_count >= config.view_count_threshold) {
      result.kept.push_back(e);
    } else {
      ++result.removed;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: description filter. Below min is dropped, above max is cut to
// exactly max scalars, prefix preserved.
// ---------------------------------------------------------------------------

struct DescriptionFilterResult {
  std::vector<corpus::EncycEntry> kept;
  std::size_t dropped = 0;
  std::size_t truncated = 0;
};

inline DescriptionFilterResult filter_descriptions(
    const std::vector<corpus::EncycEntry>& entries,
    const ConstructionConfig& config) {
  DescriptionFilterResult result;
  for (const auto& e : entries) {
    std::size_t len = utf8::scalar_count(e.description);
    if (len < config.min_description_chars) {
      ++result.dropped;
      continue;
    }
    corpus::EncycEntry copy = e;
    if (len > config.max_description_chars) {
      copy.description =
          utf8::truncate(copy.description, config.max_description_chars);
      ++result.truncated;
    }
    result.kept.push_back(std::move(copy));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 3: question generation. The provider replies in labeled blocks,
// Chinese or English label forms:
//   【问题1】：...      [Question 1]: ...
//   【标准答案】：...   [Standard Answer]: ...
//   【错误答案1】：...  [Wrong Answer 1]: ...
// A block is complete when it has a question, a standard answer and exactly
// three wrong answers, none empty and no wrong answer equal to the standard.
// ---------------------------------------------------------------------------

namespace detail {

enum class LabelKind { Question, Standard, Wrong };

struct LabelMatch {
  LabelKind kind;
  std::string rest;
};

inline bool skip_colon(const std::string& s, std::size_t& pos) {
  if (pos < s.size() && s[pos] == ':') {
    ++pos;
    return true;
  }
  if (pos + 3 <= s.size() && s.compare(pos, 3, "\xEF\xBC\x9A") == 0) {
    pos += 3;
    return true;
  }
  return false;
}

inline void skip_spaces(const std::string& s, std::size_t& pos) {
  while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
}

inline bool skip_digits(const std::string& s, std::size_t& pos) {
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    ++pos;
  }
  return pos > start;
}

inline std::optional<LabelMatch> match_label(const std::string& raw) {
  std::size_t pos = 0;
  skip_spaces(raw, pos);
  std::string s = raw.substr(pos);

  auto finish = [&](LabelKind kind, std::size_t after) {
    skip_spaces(s, after);
    skip_colon(s, after);
    skip_spaces(s, after);
    return LabelMatch{kind, s.substr(after)};
  };

  auto try_cn = [&](const char* label,
                    bool numbered) -> std::optional<std::size_t> {
    std::string prefix = std::string("\xE3\x80\x90") + label;  // 【
    if (s.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
    std::size_t p = prefix.size();
    if (numbered && !skip_digits(s, p)) return std::nullopt;
    if (s.compare(p, 3, "\xE3\x80\x91") != 0) return std::nullopt;  // 】
    return p + 3;
  };
  auto try_en = [&](const char* label,
                    bool numbered) -> std::optional<std::size_t> {
    std::string prefix = std::string("[") + label;
    if (s.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
    std::size_t p = prefix.size();
    if (numbered) {
      skip_spaces(s, p);
      if (!skip_digits(s, p)) return std::nullopt;
    }
    if (p >= s.size() || s[p] != ']') return std::nullopt;
    return p + 1;
  };

  if (auto p = try_cn("\xE9\x97\xAE\xE9\xA2\x98", true)) {  // 问题
    return finish(LabelKind::Question, *p);
  }
  if (auto p = try_cn("\xE6\xA0\x87\xE5\x87\x86\xE7\xAD\x94\xE6\xA1\x88",
                      false)) {  // 标准答案
    return finish(LabelKind::Standard, *p);
  }
  if (auto p = try_cn("\xE9\x94\x99\xE8\xAF\xAF\xE7\xAD\x94\xE6\xA1\x88",
                      true)) {  // 错误答案
    return finish(LabelKind::Wrong, *p);
  }
  if (auto p = try_en("Question", true)) return finish(LabelKind::Question, *p);
  if (auto p = try_en("Standard Answer", false)) {
    return finish(LabelKind::Standard, *p);
  }
  if (auto p = try_en("Wrong Answer", true)) {
    return finish(LabelKind::Wrong, *p);
  }
  return std::nullopt;
}

struct RawBlock {
  std::string question;
  std::string standard;
  std::vector<std::string> wrongs;
};

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<RawBlock> split_blocks(const std::string& text) {
  std::vector<RawBlock> blocks;
  RawBlock current;
  bool open = false;
  std::string* active = nullptr;

  auto flush = [&] {
    if (open) blocks.push_back(current);
    current = RawBlock{};
    open = false;
    active = nullptr;
  };

  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = nl == std::string::npos
                           ? text.substr(pos)
                           : text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (auto label = match_label(line)) {
      switch (label->kind) {
        case LabelKind::Question:
          flush();
          open = true;
          current.question = label->rest;
          active = &current.question;
          break;
        case LabelKind::Standard:
          if (open) {
            current.standard = label->rest;
            active = &current.standard;
          }
          break;
        case LabelKind::Wrong:
          if (open) {
            current.wrongs.push_back(label->rest);
            active = &current.wrongs.back();
          }
          break;
      }
    } else if (active && !trim(line).empty()) {
      *active += "\n" + line;
    }
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  flush();
  return blocks;
}

}  // namespace detail

struct ParsedQuestions {
  std::vector<corpus::QARecord> records;
  std::size_t dropped_blocks = 0;
};

// Pure parsing step; question ids become "<entry_id>-q<ordinal>".
inline ParsedQuestions parse_question_blocks(const std::string& text,
                                             const corpus::EncycEntry& entry,
                                             const ConstructionConfig& config) {
  ParsedQuestions out;
  auto blocks = detail::split_blocks(text);
  for (const auto& block : blocks) {
    std::string question = detail::trim(block.question);
    std::string standard = detail::trim(block.standard);
    std::vector<std::string> wrongs;
    for (const auto& w : block.wrongs) wrongs.push_back(detail::trim(w));

    bool complete = !question.empty() && !standard.empty() &&
                    wrongs.size() == 3 &&
                    std::none_of(wrongs.begin(), wrongs.end(),
                                 [&](const std::string& w) {
                                   return w.empty() || w == standard;
                                 });
    if (!complete) {
      ++out.dropped_blocks;
      continue;
    }
    if (out.records.size() >= config.max_questions_per_entry) {
      ++out.dropped_blocks;
      continue;
    }
    corpus::QARecord r;
    r.question_id =
        entry.entry_id + "-q" + std::to_string(out.records.size());
    r.entry_id = entry.entry_id;
    r.question = question;
    r.standard_answer = standard;
    r.wrong_answers = wrongs;
    out.records.push_back(std::move(r));
  }
  if (out.records.empty()) throw ParseFailureError(entry.entry_id);
  return out;
}

inline ParsedQuestions generate_questions(const corpus::EncycEntry& entry,
                                          provider::ChatClient& client,
                                          const std::string& prompt_template,
                                          const ConstructionConfig& config) {
  provider::GenerationConfig gen;
  gen.n = 1;
  std::string prompt = render_template(
      prompt_template,
      {{"object", entry.object}, {"description", entry.description}});
  auto texts = client.complete(prompt, gen);
  return parse_question_blocks(texts.at(0), entry, config);
}

// ---------------------------------------------------------------------------
// Stage 4: domain labels. The classifier is pluggable; labels whose global
// count does not exceed min_domain_count collapse into "others".
// ---------------------------------------------------------------------------

using Classifier = std::function<std::string(const corpus::QARecord&)>;

struct RegroupResult {
  std::vector<corpus::QARecord> records;
  std::map<std::string, std::size_t> label_counts;  // before regrouping
  std::vector<std::string> kept_domains;
  std::size_t relabeled = 0;
  std::size_t classifier_failures = 0;
};

inline RegroupResult classify_and_regroup(
    const std::vector<corpus::QARecord>& records, const Classifier& classifier,
    const ConstructionConfig& config) {
  RegroupResult result;
  result.records = records;
  std::vector<bool> failed(records.size(), false);
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    std::string label;
    try {
      label = classifier(result.records[i]);
    } catch (const std::exception&) {
      ++result.classifier_failures;
      failed[i] = true;
      label = corpus::kOthersDomain;
    }
    result.records[i].domain = label;
    ++result.label_counts[label];
  }
  for (const auto& [label, count] : result.label_counts) {
    if (label != corpus::kOthersDomain && count > config.min_domain_count) {
      result.kept_domains.push_back(label);
    }
  }
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    auto& r = result.records[i];
    if (r.domain == corpus::kOthersDomain) continue;
    if (result.label_counts[r.domain] <= config.min_domain_count) {
      r.domain = corpus::kOthersDomain;
      if (!failed[i]) ++result.relabeled;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 5: question quality filter. Each question is judged on its own,
// without the description. Uncertain verdicts get exactly one retry, then
// drop with their own reason code. Provider failures read as Uncertain.
// ---------------------------------------------------------------------------

struct QualityFilterResult {
  std::vector<corpus::QARecord> kept;
  std::vector<QualityVerdict> verdicts;
  std::size_t dropped_low_quality = 0;
  std::size_t dropped_uncertain = 0;
};

inline QualityFilterResult filter_questions(
    const std::vector<corpus::QARecord>& records,
    provider::ChatClient& client, const std::string& prompt_template,
    int max_in_flight = 1) {
  provider::GenerationConfig gen;
  gen.n = 1;

  auto judge_one = [&](const corpus::QARecord& r) {
    QualityVerdict v;
    v.question_id = r.question_id;
    std::string prompt = render_template(
        prompt_template, {{"question", r.question},
                          {"standard_answer", r.standard_answer}});
    for (int attempt = 0; attempt < 2 && v.verdict == Quality::Uncertain;
         ++attempt) {
      try {
        auto texts = client.complete(prompt, gen);
        v.rationale = texts.at(0);
        v.verdict = parse_quality(v.rationale);
      } catch (const Error& ex) {
        v.rationale = ex.what();
        v.verdict = Quality::Uncertain;
      }
    }
    return v;
  };

  QualityFilterResult result;
  result.verdicts = provider::parallel_map(records, judge_one, max_in_flight);
  for (std::size_t i = 0; i < records.size(); ++i) {
    switch (result.verdicts[i].verdict) {
      case Quality::HighQuality:
        result.kept.push_back(records[i]);
        break;
      case Quality::LowQuality:
        ++result.dropped_low_quality;
        break;
      case Quality::Uncertain:
        ++result.dropped_uncertain;
        break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Full five-stage funnel with per-stage counts.
// ---------------------------------------------------------------------------

struct FunnelReport {
  std::size_t entries_in = 0;
  std::size_t entries_after_view_filter = 0;
  std::size_t entries_after_description_filter = 0;
  std::size_t descriptions_truncated = 0;
  std::size_t questions_generated = 0;
  std::size_t blocks_dropped = 0;
  std::size_t parse_failures = 0;
  std::size_t classifier_failures = 0;
  std::size_t relabeled_to_others = 0;
  std::map<std::string, std::size_t> domain_counts;  // final labels
  std::size_t questions_after_quality = 0;
  std::size_t dropped_low_quality = 0;
  std::size_t dropped_uncertain = 0;

  json to_json() const {
    return json{{"entries_in", entries_in},
                {"entries_after_view_filter", entries_after_view_filter},
                {"entries_after_description_filter",
                 entries_after_description_filter},
                {"descriptions_truncated", descriptions_truncated},
                {"questions_generated", questions_generated},
                {"blocks_dropped", blocks_dropped},
                {"parse_failures", parse_failures},
                {"classifier_failures", classifier_failures},
                {"relabeled_to_others", relabeled_to_others},
                {"domain_counts", domain_counts},
                {"questions_after_quality", questions_after_quality},
                {"dropped_low_quality", dropped_low_quality},
                {"dropped_uncertain", dropped_uncertain}};
  }
};

struct PromptTemplates {
  std::string generate;
  std::string quality_filter;
};

struct DatasetBuild {
  std::vector<corpus::QARecord> records;
  FunnelReport report;
};

inline DatasetBuild build_dataset(std::vector<corpus::EncycEntry> entries,
                                  provider::ChatClient& client,
                                  const PromptTemplates& templates,
                                  const ConstructionConfig& config,
                                  const Classifier& classifier,
                                  int max_in_flight = 1) {
  config.validate();
  DatasetBuild build;
  build.report.entries_in = entries.size();

  // Output order is by entry_id, never by completion time.
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.entry_id < b.entry_id; });

  auto viewed = filter_entries(entries, config);
  build.report.entries_after_view_filter = viewed.kept.size();

  auto described = filter_descriptions(viewed.kept, config);
  build.report.entries_after_description_filter = described.kept.size();
  build.report.descriptions_truncated = described.truncated;

  auto generated = provider::parallel_map(
      described.kept,
      [&](const corpus::EncycEntry& entry) -> ParsedQuestions {
        try {
          return generate_questions(entry, client, templates.generate, config);
        } catch (const ParseFailureError&) {
          return ParsedQuestions{};  // counted below, empty records
        }
      },
      max_in_flight);
  std::vector<corpus::QARecord> questions;
  for (const auto& parsed : generated) {
    if (parsed.records.empty() && parsed.dropped_blocks == 0) {
      ++build.report.parse_failures;
      continue;
    }
    build.report.blocks_dropped += parsed.dropped_blocks;
    questions.insert(questions.end(), parsed.records.begin(),
                     parsed.records.end());
  }
  build.report.questions_generated = questions.size();

  auto regrouped = classify_and_regroup(questions, classifier, config);
  build.report.classifier_failures = regrouped.classifier_failures;
  build.report.relabeled_to_others = regrouped.relabeled;

  auto filtered = filter_questions(regrouped.records, client,
                                   templates.quality_filter, max_in_flight);
  build.report.questions_after_quality = filtered.kept.size();
  build.report.dropped_low_quality = filtered.dropped_low_quality;
  build.report.dropped_uncertain = filtered.dropped_uncertain;
  for (const auto& r : filtered.kept) ++build.report.domain_counts[r.domain];

  build.records = std::move(filtered.kept);
  return build;
}

}  // namespace pkue::construct
