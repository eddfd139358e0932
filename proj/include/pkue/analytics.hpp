#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/corpus.hpp"
#include "pkue/rng.hpp"

namespace pkue::analytics {

using nlohmann::json;

struct EmptyInputError : Error {
  EmptyInputError() : Error("empty input") {}
};

struct MismatchedQuestionSetsError : Error {
  explicit MismatchedQuestionSetsError(const std::string& detail)
      : Error("mismatched question sets: " + detail) {}
};

struct IncompleteLabelsError : Error {
  explicit IncompleteLabelsError(const std::string& detail)
      : Error("incomplete labels: " + detail) {}
};

struct ZeroNormRowError : Error {
  explicit ZeroNormRowError(std::size_t row)
      : Error("feature row " + std::to_string(row) + " has zero norm"),
        row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

struct KOutOfRangeError : Error {
  KOutOfRangeError(std::size_t k, std::size_t rows)
      : Error("k=" + std::to_string(k) + " invalid for " +
              std::to_string(rows) + " rows (need 1 <= k < rows)") {}
};

struct MissingFieldError : Error {
  MissingFieldError(const std::string& label, const std::string& field)
      : Error("benchmark row '" + label + "' missing field '" + field + "'"),
        field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct MismatchedIdsError : Error {
  MismatchedIdsError() : Error("feature matrices do not share id order") {}
};

// ---------------------------------------------------------------------------
// Accuracy tables.
// ---------------------------------------------------------------------------

struct LabeledVerdict {
  std::string domain;
  corpus::Verdict verdict;
};

struct AccuracyCell {
  std::size_t questions = 0;
  std::size_t correct = 0;
  std::size_t uncertain = 0;
  // Conservative reading: Uncertain counts as Incorrect.
  double percent = 0.0;
  // Alternative with Uncertain excluded from the denominator; 0 when every
  // judgment is Uncertain.
  double percent_excluding_uncertain = 0.0;
};

struct AccuracyReport {
  AccuracyCell overall;
  std::map<std::string, AccuracyCell> per_domain;
};

inline AccuracyReport accuracy(const std::vector<LabeledVerdict>& items) {
  if (items.empty()) throw EmptyInputError();
  AccuracyReport report;
  auto tally = [](AccuracyCell& cell, corpus::Verdict v) {
    ++cell.questions;
    if (v == corpus::Verdict::Correct) ++cell.correct;
    if (v == corpus::Verdict::Uncertain) ++cell.uncertain;
  };
  for (const auto& item : items) {
    tally(report.overall, item.verdict);
    tally(report.per_domain[item.domain], item.verdict);
  }
  auto finish = [](AccuracyCell& cell) {
    cell.percent = 100.0 * static_cast<double>(cell.correct) /
                   static_cast<double>(cell.questions);
    std::size_t counted = cell.questions - cell.uncertain;
    cell.percent_excluding_uncertain =
        counted == 0 ? 0.0
                     : 100.0 * static_cast<double>(cell.correct) /
                           static_cast<double>(counted);
  };
  finish(report.overall);
  for (auto& [domain, cell] : report.per_domain) finish(cell);
  return report;
}

// ---------------------------------------------------------------------------
// Best-of-n coverage against single-sample accuracy.
// ---------------------------------------------------------------------------

struct QuestionVerdicts {
  std::string question_id;
  std::string domain;
  std::vector<corpus::Verdict> verdicts;
};

struct CoverageCell {
  std::size_t questions = 0;
  double bo1_accuracy = 0.0;
  double bon_coverage = 0.0;
};

struct CoverageReport {
  CoverageCell overall;
  std::map<std::string, CoverageCell> per_domain;
};

namespace detail {

inline void require_matching_questions(
    const std::vector<QuestionVerdicts>& a,
    const std::vector<QuestionVerdicts>& b) {
  std::map<std::string, std::string> domains;
  std::set<std::string> ids_a, ids_b;
  for (const auto& q : a) {
    if (!ids_a.insert(q.question_id).second) {
      throw MismatchedQuestionSetsError("duplicate id " + q.question_id);
    }
    domains[q.question_id] = q.domain;
  }
  for (const auto& q : b) {
    if (!ids_b.insert(q.question_id).second) {
      throw MismatchedQuestionSetsError("duplicate id " + q.question_id);
    }
    auto it = domains.find(q.question_id);
    if (it != domains.end() && it->second != q.domain) {
      throw MismatchedQuestionSetsError("domain disagreement for " +
                                        q.question_id);
    }
  }
  if (ids_a != ids_b) {
    throw MismatchedQuestionSetsError("id sets differ");
  }
}

inline bool any_correct(const std::vector<corpus::Verdict>& verdicts) {
  for (auto v : verdicts) {
    if (v == corpus::Verdict::Correct) return true;
  }
  return false;
}

}  // namespace detail

// `bo1` carries exactly one verdict per question; `bon` carries the n-sample
// judgment list for the same question set.
inline CoverageReport bo_n_coverage(const std::vector<QuestionVerdicts>& bo1,
                                    const std::vector<QuestionVerdicts>& bon) {
  if (bo1.empty()) throw EmptyInputError();
  detail::require_matching_questions(bo1, bon);
  for (const auto& q : bo1) {
    if (q.verdicts.size() != 1) {
      throw InvariantViolationError("bo1 entry for " + q.question_id +
                                    " must hold exactly one verdict");
    }
  }

  struct Tally {
    std::size_t questions = 0, bo1_correct = 0, covered = 0;
  };
  std::map<std::string, Tally> per_domain;
  Tally overall;
  std::map<std::string, const QuestionVerdicts*> bon_by_id;
  for (const auto& q : bon) bon_by_id[q.question_id] = &q;

  for (const auto& q : bo1) {
    const auto& wide = *bon_by_id.at(q.question_id);
    bool one = q.verdicts[0] == corpus::Verdict::Correct;
    bool covered = detail::any_correct(wide.verdicts);
    for (Tally* t : {&overall, &per_domain[q.domain]}) {
      ++t->questions;
      if (one) ++t->bo1_correct;
      if (covered) ++t->covered;
    }
  }

  auto cell = [](const Tally& t) {
    CoverageCell c;
    c.questions = t.questions;
    c.bo1_accuracy = 100.0 * static_cast<double>(t.bo1_correct) /
                     static_cast<double>(t.questions);
    c.bon_coverage = 100.0 * static_cast<double>(t.covered) /
                     static_cast<double>(t.questions);
    return c;
  };
  CoverageReport report;
  report.overall = cell(overall);
  for (const auto& [domain, tally] : per_domain) {
    report.per_domain[domain] = cell(tally);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Grouping questions by pre-training response accuracy.
// ---------------------------------------------------------------------------

struct QuestionCounts {
  std::string question_id;
  int correct = 0;  // of n samples
};

struct PriorBucket {
  int before_correct = 0;  // bucket label "k/n"
  std::size_t prompts = 0;
  double mean_after_accuracy = 0.0;  // percent
};

inline std::vector<PriorBucket> group_by_prior_accuracy(
    const std::vector<QuestionCounts>& before,
    const std::vector<QuestionCounts>& after, int n) {
  if (n < 1) throw ConfigError("sample count must be >= 1");
  if (before.empty()) throw EmptyInputError();
  std::map<std::string, int> after_by_id;
  for (const auto& q : after) {
    if (!after_by_id.emplace(q.question_id, q.correct).second) {
      throw MismatchedQuestionSetsError("duplicate id " + q.question_id);
    }
  }
  if (after_by_id.size() != before.size()) {
    throw MismatchedQuestionSetsError("id sets differ");
  }

  std::vector<PriorBucket> buckets(static_cast<std::size_t>(n) + 1);
  std::vector<double> sums(buckets.size(), 0.0);
  std::set<std::string> seen;
  for (const auto& q : before) {
    if (!seen.insert(q.question_id).second) {
      throw MismatchedQuestionSetsError("duplicate id " + q.question_id);
    }
    auto it = after_by_id.find(q.question_id);
    if (it == after_by_id.end()) {
      throw MismatchedQuestionSetsError("missing after entry for " +
                                        q.question_id);
    }
    for (int value : {q.correct, it->second}) {
      if (value < 0 || value > n) {
        throw InvariantViolationError("correct count out of 0..n for " +
                                      q.question_id);
      }
    }
    auto& bucket = buckets[static_cast<std::size_t>(q.correct)];
    ++bucket.prompts;
    sums[static_cast<std::size_t>(q.correct)] +=
        100.0 * static_cast<double>(it->second) / static_cast<double>(n);
  }
  for (std::size_t k = 0; k < buckets.size(); ++k) {
    buckets[k].before_correct = static_cast<int>(k);
    if (buckets[k].prompts > 0) {
      buckets[k].mean_after_accuracy =
          sums[k] / static_cast<double>(buckets[k].prompts);
    }
  }
  return buckets;
}

// ---------------------------------------------------------------------------
// Benchmark aggregation. Avg is the mean of five accuracy percentages plus
// the 10-point judge score scaled by ten; the win-rate column never enters.
// ---------------------------------------------------------------------------

struct BenchmarkRow {
  std::string label;
  std::optional<double> factualbench;
  std::optional<double> truthfulqa;
  std::optional<double> halluqa;
  std::optional<double> cmmlu;
  std::optional<double> halueval;
  std::optional<double> alignbench;
  std::optional<double> alpacaeval;  // reported but excluded from Avg

  void validate() const {
    auto check_pct = [&](const std::optional<double>& v, const char* name) {
      if (v && (*v < 0.0 || *v > 100.0)) {
        throw InvariantViolationError(std::string(name) + " out of [0,100]");
      }
    };
    check_pct(factualbench, "factualbench");
    check_pct(truthfulqa, "truthfulqa");
    check_pct(halluqa, "halluqa");
    check_pct(cmmlu, "cmmlu");
    check_pct(halueval, "halueval");
    check_pct(alpacaeval, "alpacaeval");
    if (alignbench && (*alignbench < 0.0 || *alignbench > 10.0)) {
      throw InvariantViolationError("alignbench out of [0,10]");
    }
  }
};

inline double average_score(const BenchmarkRow& row) {
  auto need = [&](const std::optional<double>& v,
                  const char* name) -> double {
    if (!v) throw MissingFieldError(row.label, name);
    return *v;
  };
  double sum = need(row.factualbench, "factualbench") +
               need(row.truthfulqa, "truthfulqa") +
               need(row.halluqa, "halluqa") + need(row.cmmlu, "cmmlu") +
               need(row.halueval, "halueval") +
               10.0 * need(row.alignbench, "alignbench");
  return sum / 6.0;
}

inline double delta_avg(const BenchmarkRow& base, const BenchmarkRow& treated) {
  return average_score(treated) - average_score(base);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

}  // namespace detail

// Header: label,factualbench,truthfulqa,halluqa,cmmlu,halueval,alignbench,
// alpacaeval. Blank cells stay unset and only trip MissingField when the
// aggregate needs them.
inline std::vector<BenchmarkRow> parse_benchmark_rows(
    const std::string& csv) {
  std::vector<std::string> lines;
  std::string line;
  for (char c : csv) {
    if (c == '\n') {
      lines.push_back(line);
      line.clear();
    } else {
      line += c;
    }
  }
  if (!line.empty()) lines.push_back(line);
  if (lines.empty()) throw SchemaViolationError(1, "header", "empty file");

  const std::vector<std::string> expected{
      "label",   "factualbench", "halluqa",    "truthfulqa",
      "cmmlu",   "halueval",     "alignbench", "alpacaeval"};
  auto header = detail::split_csv_line(lines[0]);
  std::map<std::string, std::size_t> columns;
  for (std::size_t i = 0; i < header.size(); ++i) columns[header[i]] = i;
  for (const auto& name : expected) {
    if (!columns.count(name)) {
      throw SchemaViolationError(1, name, "missing column");
    }
  }

  std::vector<BenchmarkRow> rows;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    auto cells = detail::split_csv_line(lines[ln]);
    auto cell = [&](const char* name) -> std::optional<double> {
      std::size_t idx = columns.at(name);
      if (idx >= cells.size() || cells[idx].empty()) return std::nullopt;
      try {
        return std::stod(cells[idx]);
      } catch (const std::exception&) {
        throw SchemaViolationError(static_cast<int>(ln + 1), name,
                                   "not a number: " + cells[idx]);
      }
    };
    BenchmarkRow row;
    std::size_t label_idx = columns.at("label");
    row.label = label_idx < cells.size() ? cells[label_idx] : "";
    if (row.label.empty()) {
      throw SchemaViolationError(static_cast<int>(ln + 1), "label",
                                 "empty label");
    }
    row.factualbench = cell("factualbench");
    row.truthfulqa = cell("truthfulqa");
    row.halluqa = cell("halluqa");
    row.cmmlu = cell("cmmlu");
    row.halueval = cell("halueval");
    row.alignbench = cell("alignbench");
    row.alpacaeval = cell("alpacaeval");
    row.validate();
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string serialize_benchmark_rows(
    const std::vector<BenchmarkRow>& rows) {
  std::string out =
      "label,factualbench,truthfulqa,halluqa,cmmlu,halueval,alignbench,"
      "alpacaeval\n";
  auto fmt = [](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return buf;
  };
  for (const auto& row : rows) {
    out += row.label + "," + fmt(row.factualbench) + "," +
           fmt(row.truthfulqa) + "," + fmt(row.halluqa) + "," +
           fmt(row.cmmlu) + "," + fmt(row.halueval) + "," +
           fmt(row.alignbench) + "," + fmt(row.alpacaeval) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-judge agreement over preference pairs.
// ---------------------------------------------------------------------------

using VerdictKey = std::pair<std::string, int>;  // (question_id, sample index)
using VerdictMap = std::map<VerdictKey, corpus::Verdict>;

struct AgreementReport {
  std::size_t chosen_better = 0;
  std::size_t equal = 0;
  std::size_t rejected_better = 0;
  // Distinct responses referenced by the pairs on which the judges differ.
  std::size_t response_disagreements = 0;
};

namespace detail {

inline int verdict_rank(corpus::Verdict v) {
  switch (v) {
    case corpus::Verdict::Correct: return 2;
    case corpus::Verdict::Uncertain: return 1;
    default: return 0;
  }
}

inline corpus::Verdict require_label(const VerdictMap& labels,
                                     const VerdictKey& key,
                                     const char* judge) {
  auto it = labels.find(key);
  if (it == labels.end()) {
    throw IncompleteLabelsError(std::string(judge) + " missing " + key.first +
                                "#" + std::to_string(key.second));
  }
  return it->second;
}

}  // namespace detail

inline AgreementReport pair_agreement(
    const std::vector<corpus::PreferencePair>& pairs,
    const VerdictMap& judge_a, const VerdictMap& judge_b) {
  AgreementReport report;
  std::set<VerdictKey> responses;
  for (const auto& pair : pairs) {
    VerdictKey chosen_key{pair.question_id, pair.chosen_index};
    VerdictKey rejected_key{pair.question_id, pair.rejected_index};
    detail::require_label(judge_a, chosen_key, "judge_a");
    detail::require_label(judge_a, rejected_key, "judge_a");
    int chosen = detail::verdict_rank(
        detail::require_label(judge_b, chosen_key, "judge_b"));
    int rejected = detail::verdict_rank(
        detail::require_label(judge_b, rejected_key, "judge_b"));
    if (chosen > rejected) {
      ++report.chosen_better;
    } else if (chosen == rejected) {
      ++report.equal;
    } else {
      ++report.rejected_better;
    }
    responses.insert(chosen_key);
    responses.insert(rejected_key);
  }
  for (const auto& key : responses) {
    if (judge_a.at(key) != judge_b.at(key)) ++report.response_disagreements;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Representation alignment via mutual k-nearest neighbors.
// ---------------------------------------------------------------------------

struct FeatureMatrix {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;

  void validate() const {
    if (ids.size() != rows.size()) {
      throw InvariantViolationError("id/row count mismatch");
    }
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != rows[0].size()) {
        throw InvariantViolationError("ragged feature rows");
      }
    }
  }
};

namespace detail {

inline std::vector<std::vector<double>> l2_normalized(
    const std::vector<std::vector<double>>& rows) {
  std::vector<std::vector<double>> out = rows;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double norm = 0.0;
    for (double x : out[i]) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ZeroNormRowError(i);
    for (double& x : out[i]) x /= norm;
  }
  return out;
}

}  // namespace detail

// Neighbor sets of size k per row under the inner-product kernel on
// l2-normalized rows; self is excluded and similarity ties take the lower
// index.
inline std::vector<std::vector<std::size_t>> knn_sets(
    const std::vector<std::vector<double>>& rows, std::size_t k) {
  if (k < 1 || k >= rows.size()) throw KOutOfRangeError(k, rows.size());
  auto unit = detail::l2_normalized(rows);
  std::vector<std::vector<std::size_t>> sets(rows.size());
  for (std::size_t i = 0; i < unit.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(unit.size() - 1);
    for (std::size_t j = 0; j < unit.size(); ++j) {
      if (j == i) continue;
      double sim = 0.0;
      for (std::size_t d = 0; d < unit[i].size(); ++d) {
        sim += unit[i][d] * unit[j][d];
      }
      scored.emplace_back(sim, j);
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
              });
    auto& set = sets[i];
    for (std::size_t t = 0; t < k; ++t) set.push_back(scored[t].second);
    std::sort(set.begin(), set.end());
  }
  return sets;
}

inline std::vector<std::vector<std::size_t>> knn_sets(
    const FeatureMatrix& features, std::size_t k) {
  features.validate();
  return knn_sets(features.rows, k);
}

struct AlignmentResult {
  double metric = 0.0;
  std::size_t batch = 0;  // effective batch size after any subsampling
  std::size_t k = 0;
  std::uint64_t seed = 0;

  json to_json() const {
    return json{{"metric", metric}, {"b", batch}, {"k", k}, {"seed", seed}};
  }
};

// Subsample selection shared by the metric and its test oracles: a seeded
// uniform prefix of a full shuffle, reported in ascending original order.
inline std::vector<std::size_t> subsample_indices(std::size_t rows,
                                                  std::size_t b_cap,
                                                  std::uint64_t seed) {
  Rng rng(combine_seed(seed, hash_str("mutual_knn_subsample")));
  auto picked = rng.shuffle_prefix(rows, b_cap);
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline AlignmentResult mutual_knn_alignment(const FeatureMatrix& phi,
                                            const FeatureMatrix& psi,
                                            std::size_t k, std::size_t b_cap,
                                            std::uint64_t seed) {
  phi.validate();
  psi.validate();
  if (phi.ids != psi.ids) throw MismatchedIdsError();
  if (b_cap < 2) throw ConfigError("b_cap must be >= 2");

  std::vector<std::vector<double>> rows_phi = phi.rows;
  std::vector<std::vector<double>> rows_psi = psi.rows;
  if (phi.rows.size() > b_cap) {
    auto picked = subsample_indices(phi.rows.size(), b_cap, seed);
    rows_phi.clear();
    rows_psi.clear();
    for (auto idx : picked) {
      rows_phi.push_back(phi.rows[idx]);
      rows_psi.push_back(psi.rows[idx]);
    }
  }

  auto sets_phi = knn_sets(rows_phi, k);
  auto sets_psi = knn_sets(rows_psi, k);
  double total = 0.0;
  for (std::size_t i = 0; i < sets_phi.size(); ++i) {
    std::vector<std::size_t> overlap;
    std::set_intersection(sets_phi[i].begin(), sets_phi[i].end(),
                          sets_psi[i].begin(), sets_psi[i].end(),
                          std::back_inserter(overlap));
    total += static_cast<double>(overlap.size()) / static_cast<double>(k);
  }
  AlignmentResult result;
  result.metric = total / static_cast<double>(sets_phi.size());
  result.batch = sets_phi.size();
  result.k = k;
  result.seed = seed;
  return result;
}

// Mean over `batches` independently seeded subsamples; batch t reuses the
// single-batch path under a derived seed.
inline AlignmentResult mutual_knn_alignment_batched(
    const FeatureMatrix& phi, const FeatureMatrix& psi, std::size_t k,
    std::size_t b_cap, std::uint64_t seed, std::size_t batches) {
  if (batches < 1) throw ConfigError("batches must be >= 1");
  double total = 0.0;
  AlignmentResult last;
  for (std::size_t t = 0; t < batches; ++t) {
    last = mutual_knn_alignment(phi, psi, k, b_cap,
                                combine_seed(seed, t));
    total += last.metric;
  }
  last.metric = total / static_cast<double>(batches);
  last.seed = seed;
  return last;
}

// ---------------------------------------------------------------------------
// Tabular output helpers.
// ---------------------------------------------------------------------------

inline std::string matrix_csv(const std::vector<std::string>& row_labels,
                              const std::vector<std::string>& col_labels,
                              const std::vector<std::vector<double>>& values,
                              const std::string& corner = "row") {
  if (values.size() != row_labels.size()) {
    throw InvariantViolationError("matrix row count mismatch");
  }
  std::string out = corner;
  for (const auto& c : col_labels) out += "," + c;
  out += "\n";
  char buf[48];
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    if (values[r].size() != col_labels.size()) {
      throw InvariantViolationError("matrix column count mismatch");
    }
    out += row_labels[r];
    for (double v : values[r]) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out += std::string(",") + buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string domain_accuracy_csv(
    const std::map<std::string, std::map<std::string, double>>& by_domain) {
  std::set<std::string> models;
  for (const auto& [domain, row] : by_domain) {
    for (const auto& [model, value] : row) models.insert(model);
  }
  std::vector<std::string> col_labels(models.begin(), models.end());
  std::vector<std::string> row_labels;
  std::vector<std::vector<double>> values;
  for (const auto& [domain, row] : by_domain) {
    row_labels.push_back(domain);
    std::vector<double> cells;
    for (const auto& model : col_labels) {
      auto it = row.find(model);
      if (it == row.end()) {
        throw IncompleteLabelsError("domain " + domain + " lacks model " +
                                    model);
      }
      cells.push_back(it->second);
    }
    values.push_back(std::move(cells));
  }
  return matrix_csv(row_labels, col_labels, values, "domain");
}

}  // namespace pkue::analytics
