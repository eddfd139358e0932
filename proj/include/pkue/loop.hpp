#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/construct.hpp"
#include "pkue/corpus.hpp"
#include "pkue/provider.hpp"
#include "pkue/rng.hpp"

namespace pkue::loop {

using nlohmann::json;
using provider::GenerationConfig;

// ---------------------------------------------------------------------------
// Phase 1: diversity sampling. A Sampler hides which backend produces the
// texts; both chat endpoints and the offline mock fit behind it.
// ---------------------------------------------------------------------------

using Sampler = std::function<std::vector<std::string>(
    const corpus::QARecord&, const GenerationConfig&)>;

inline Sampler make_chat_sampler(provider::ChatClient& client) {
  return [&client](const corpus::QARecord& record,
                   const GenerationConfig& config) {
    return client.complete(record.question, config);
  };
}

inline Sampler make_mock_sampler(const provider::MockWorld& world) {
  return [&world](const corpus::QARecord& record,
                  const GenerationConfig& config) {
    return provider::mock_complete(record.question_id, config, world);
  };
}

struct SamplingPlan {
  GenerationConfig config;

  void validate() const {
    config.validate();
  }
};

struct SamplingOutcome {
  std::vector<corpus::CandidateResponse> responses;
  // Questions whose sampler call failed; their partial output is excluded.
  std::vector<std::string> incomplete_questions;
};

inline SamplingOutcome sample_responses(
    const std::vector<corpus::QARecord>& records, const SamplingPlan& plan,
    const Sampler& sampler, int max_in_flight = 1) {
  plan.validate();
  std::string config_id = plan.config.id();

  struct PerQuestion {
    std::vector<std::string> texts;
    bool failed = false;
  };
  auto drawn = provider::parallel_map(
      records,
      [&](const corpus::QARecord& record) {
        PerQuestion out;
        try {
          out.texts = sampler(record, plan.config);
        } catch (const Error&) {
          out.failed = true;
        }
        if (static_cast<int>(out.texts.size()) != plan.config.n) {
          out.failed = true;
        }
        return out;
      },
      max_in_flight);

  SamplingOutcome outcome;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (drawn[i].failed) {
      outcome.incomplete_questions.push_back(records[i].question_id);
      continue;
    }
    for (int k = 0; k < plan.config.n; ++k) {
      corpus::CandidateResponse r;
      r.question_id = records[i].question_id;
      r.sample_index = k;
      r.text = drawn[i].texts[k];
      r.generation_config_id = config_id;
      outcome.responses.push_back(std::move(r));
    }
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Phase 2: reference-based verification. The verdict comes only from the
// bracketed marker; exactly one marker kind decides, anything else is
// Uncertain and gets discarded downstream.
// ---------------------------------------------------------------------------

inline corpus::Verdict parse_verdict(const std::string& text) {
  bool correct = contains_any(text, {"【正确】", "[Correct]"});
  bool incorrect = contains_any(text, {"【错误】", "[Incorrect]"});
  if (correct && !incorrect) return corpus::Verdict::Correct;
  if (incorrect && !correct) return corpus::Verdict::Incorrect;
  return corpus::Verdict::Uncertain;
}

using RawJudge = provider::RawJudge;

inline RawJudge make_chat_raw_judge(provider::ChatClient& client,
                                    const std::string& prompt_template) {
  return [&client, prompt_template](const std::string& question,
                                    const std::string& candidate,
                                    const std::string& standard) {
    GenerationConfig config;
    config.n = 1;
    std::string prompt = construct::render_template(
        prompt_template, {{"question", question},
                          {"standard_answer", standard},
                          {"candidate_answer", candidate}});
    return client.complete(prompt, config).at(0);
  };
}

inline corpus::Judgment judge(const corpus::QARecord& record,
                              const corpus::CandidateResponse& response,
                              const RawJudge& raw_judge,
                              const std::string& judge_id) {
  corpus::Judgment j;
  j.question_id = response.question_id;
  j.sample_index = response.sample_index;
  j.judge_id = judge_id;
  try {
    j.raw_judge_text =
        raw_judge(record.question, response.text, record.standard_answer);
    j.verdict = parse_verdict(j.raw_judge_text);
  } catch (const Error& ex) {
    j.raw_judge_text = ex.what();
    j.verdict = corpus::Verdict::Uncertain;
  }
  return j;
}

inline std::vector<corpus::Judgment> judge_all(
    const std::vector<corpus::QARecord>& records,
    const std::vector<corpus::CandidateResponse>& responses,
    const RawJudge& raw_judge, const std::string& judge_id,
    int max_in_flight = 1) {
  std::unordered_map<std::string, const corpus::QARecord*> by_id;
  for (const auto& r : records) by_id[r.question_id] = &r;
  return provider::parallel_map(
      responses,
      [&](const corpus::CandidateResponse& response) {
        auto it = by_id.find(response.question_id);
        if (it == by_id.end()) {
          throw InvariantViolationError("response for unknown question " +
                                        response.question_id);
        }
        return judge(*it->second, response, raw_judge, judge_id);
      },
      max_in_flight);
}

// ---------------------------------------------------------------------------
// Phase 3: pair construction. Candidates are the Cartesian product of
// Correct and Incorrect samples in (chosen_index, rejected_index)
// lexicographic order; above m, a seeded Fisher-Yates prefix keeps exactly m.
// ---------------------------------------------------------------------------

struct PairConfig {
  std::size_t m = 8;
  std::uint64_t seed = 0;
  bool dedup = true;  // drop pairs whose chosen and rejected texts match

  void validate() const {
    if (m < 1) throw ConfigError("pair cap m must be >= 1");
  }
};

inline std::vector<corpus::PreferencePair> build_pairs(
    const std::string& question_id,
    const std::vector<corpus::CandidateResponse>& responses,
    const std::vector<corpus::Judgment>& judgments, const PairConfig& config) {
  config.validate();

  std::map<int, const corpus::CandidateResponse*> response_by_index;
  for (const auto& r : responses) {
    if (r.question_id == question_id) {
      response_by_index[r.sample_index] = &r;
    }
  }
  std::vector<int> correct, incorrect;
  for (const auto& j : judgments) {
    if (j.question_id != question_id) continue;
    if (!response_by_index.count(j.sample_index)) {
      throw InvariantViolationError(
          "judgment without response: " + question_id + "#" +
          std::to_string(j.sample_index));
    }
    if (j.verdict == corpus::Verdict::Correct) {
      correct.push_back(j.sample_index);
    } else if (j.verdict == corpus::Verdict::Incorrect) {
      incorrect.push_back(j.sample_index);
    }
  }
  std::sort(correct.begin(), correct.end());
  std::sort(incorrect.begin(), incorrect.end());

  std::vector<corpus::PreferencePair> candidates;
  for (int c : correct) {
    for (int w : incorrect) {
      const auto& chosen = *response_by_index[c];
      const auto& rejected = *response_by_index[w];
      if (config.dedup && chosen.text == rejected.text) continue;
      corpus::PreferencePair p;
      p.question_id = question_id;
      p.chosen = chosen.text;
      p.rejected = rejected.text;
      p.chosen_index = c;
      p.rejected_index = w;
      candidates.push_back(std::move(p));
    }
  }
  if (candidates.size() <= config.m) return candidates;

  Rng rng(combine_seed(config.seed, hash_str(question_id)));
  auto keep = rng.shuffle_prefix(candidates.size(), config.m);
  std::vector<corpus::PreferencePair> out;
  out.reserve(config.m);
  for (std::size_t i : keep) out.push_back(candidates[i]);
  return out;
}

// Reference pairs taken straight from the dataset record: the standard
// answer against each stored wrong answer. Negative chosen_index marks the
// non-sampled provenance.
inline std::vector<corpus::PreferencePair> dataset_pairs(
    const corpus::QARecord& record) {
  std::vector<corpus::PreferencePair> out;
  for (std::size_t j = 0; j < record.wrong_answers.size(); ++j) {
    corpus::PreferencePair p;
    p.question_id = record.question_id;
    p.chosen = record.standard_answer;
    p.rejected = record.wrong_answers[j];
    p.chosen_index = -1;
    p.rejected_index = static_cast<int>(j);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SFT label extraction.
// ---------------------------------------------------------------------------

enum class SftMode { Single, All };

inline std::vector<corpus::CandidateResponse> sft_labels(
    const std::string& question_id,
    const std::vector<corpus::CandidateResponse>& responses,
    const std::vector<corpus::Judgment>& judgments, SftMode mode,
    std::uint64_t seed) {
  std::map<int, const corpus::CandidateResponse*> response_by_index;
  for (const auto& r : responses) {
    if (r.question_id == question_id) response_by_index[r.sample_index] = &r;
  }
  std::vector<const corpus::CandidateResponse*> correct;
  for (const auto& j : judgments) {
    if (j.question_id != question_id) continue;
    if (j.verdict != corpus::Verdict::Correct) continue;
    auto it = response_by_index.find(j.sample_index);
    if (it != response_by_index.end()) correct.push_back(it->second);
  }
  std::sort(correct.begin(), correct.end(),
            [](const auto* a, const auto* b) {
              return a->sample_index < b->sample_index;
            });
  if (correct.empty()) return {};
  if (mode == SftMode::All) {
    std::vector<corpus::CandidateResponse> out;
    for (const auto* r : correct) out.push_back(*r);
    return out;
  }
  Rng rng(combine_seed(seed, hash_str(question_id)));
  return {*correct[rng.bounded(correct.size())]};
}

// ---------------------------------------------------------------------------
// Tuning-set bookkeeping.
// ---------------------------------------------------------------------------

struct TuningStats {
  std::size_t questions = 0;
  std::size_t sft_valid = 0;  // at least one Correct sample
  std::size_t dpo_valid = 0;  // at least one Correct and one Incorrect
  std::size_t labels = 0;
  std::size_t pairs = 0;

  json to_json() const {
    return json{{"questions", questions},
                {"sft_valid", sft_valid},
                {"dpo_valid", dpo_valid},
                {"labels", labels},
                {"pairs", pairs}};
  }
};

inline TuningStats tuning_stats(
    const std::vector<corpus::QARecord>& records,
    const std::vector<corpus::Judgment>& judgments,
    const std::vector<corpus::PreferencePair>& pairs,
    std::size_t label_count) {
  std::unordered_map<std::string, std::pair<bool, bool>> seen;  // correct, incorrect
  for (const auto& j : judgments) {
    auto& flags = seen[j.question_id];
    if (j.verdict == corpus::Verdict::Correct) flags.first = true;
    if (j.verdict == corpus::Verdict::Incorrect) flags.second = true;
  }
  TuningStats stats;
  stats.questions = records.size();
  for (const auto& r : records) {
    auto it = seen.find(r.question_id);
    if (it == seen.end()) continue;
    if (it->second.first) ++stats.sft_valid;
    if (it->second.first && it->second.second) ++stats.dpo_valid;
  }
  stats.labels = label_count;
  stats.pairs = pairs.size();
  return stats;
}

// ---------------------------------------------------------------------------
// Noise-set composition for the label-accuracy ablation: strata are defined
// by a second judge's relation between chosen and rejected.
// ---------------------------------------------------------------------------

enum class PairRelation { ChosenBetter, Equal, RejectedBetter };

inline std::string to_string(PairRelation r) {
  switch (r) {
    case PairRelation::ChosenBetter: return "chosen>rejected";
    case PairRelation::Equal: return "chosen=rejected";
    default: return "chosen<rejected";
  }
}

struct InsufficientStratumError : Error {
  InsufficientStratumError(PairRelation relation, std::size_t have,
                           std::size_t need)
      : Error("stratum " + to_string(relation) + " has " +
              std::to_string(have) + " pairs, needs " + std::to_string(need)),
        relation_(relation),
        have_(have),
        need_(need) {}
  PairRelation relation() const { return relation_; }
  std::size_t have() const { return have_; }
  std::size_t need() const { return need_; }

 private:
  PairRelation relation_;
  std::size_t have_;
  std::size_t need_;
};

struct NoiseComposition {
  std::size_t size = 0;
  double chosen_better = 0.0;
  double equal = 0.0;
  double rejected_better = 0.0;

  void validate() const {
    if (chosen_better < 0.0 || equal < 0.0 || rejected_better < 0.0) {
      throw ConfigError("composition fractions must be non-negative");
    }
    double sum = chosen_better + equal + rejected_better;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("composition fractions must sum to 1");
    }
  }

  // Integer counts per stratum: round each, then hand the rounding residual
  // to the largest fraction so the counts sum to size exactly.
  std::array<std::size_t, 3> counts() const {
    validate();
    std::array<double, 3> f{chosen_better, equal, rejected_better};
    std::array<long long, 3> c{};
    long long total = 0;
    for (int i = 0; i < 3; ++i) {
      c[i] = std::llround(f[i] * static_cast<double>(size));
      total += c[i];
    }
    long long residual = static_cast<long long>(size) - total;
    int largest = 0;
    for (int i = 1; i < 3; ++i) {
      if (f[i] > f[largest]) largest = i;
    }
    c[largest] += residual;
    if (c[largest] < 0) throw ConfigError("composition rounding underflow");
    return {static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]),
            static_cast<std::size_t>(c[2])};
  }
};

inline std::vector<corpus::PreferencePair> compose_noise_sets(
    const std::vector<corpus::PreferencePair>& pairs,
    const std::vector<PairRelation>& relations, const NoiseComposition& comp,
    std::uint64_t seed) {
  if (pairs.size() != relations.size()) {
    throw InvariantViolationError("pairs and relations must align");
  }
  auto need = comp.counts();
  std::array<std::vector<std::size_t>, 3> strata;
  for (std::size_t i = 0; i < relations.size(); ++i) {
    strata[static_cast<int>(relations[i])].push_back(i);
  }
  constexpr PairRelation kOrder[3] = {PairRelation::ChosenBetter,
                                      PairRelation::Equal,
                                      PairRelation::RejectedBetter};
  for (int s = 0; s < 3; ++s) {
    if (strata[s].size() < need[s]) {
      throw InsufficientStratumError(kOrder[s], strata[s].size(), need[s]);
    }
  }
  std::vector<corpus::PreferencePair> out;
  out.reserve(comp.size);
  Rng rng(combine_seed(seed, hash_str("compose_noise_sets")));
  for (int s = 0; s < 3; ++s) {
    auto picked = rng.shuffle_prefix(strata[s].size(), need[s]);
    for (std::size_t k : picked) out.push_back(pairs[strata[s][k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interop export: one {"prompt","chosen","rejected"} object per line.
// ---------------------------------------------------------------------------

inline std::string export_preference_jsonl(
    const std::vector<corpus::PreferencePair>& pairs,
    const std::map<std::string, std::string>& prompt_by_question,
    const std::string& path) {
  std::string bytes;
  for (const auto& p : pairs) {
    auto it = prompt_by_question.find(p.question_id);
    if (it == prompt_by_question.end()) {
      throw InvariantViolationError("no prompt for question " +
                                    p.question_id);
    }
    bytes += json{{"prompt", it->second},
                  {"chosen", p.chosen},
                  {"rejected", p.rejected}}
                 .dump();
    bytes += '\n';
  }
  write_file(path, bytes);
  return digest_bytes(bytes);
}

}  // namespace pkue::loop
