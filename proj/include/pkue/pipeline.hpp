#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkue/analytics.hpp"
#include "pkue/common.hpp"
#include "pkue/construct.hpp"
#include "pkue/corpus.hpp"
#include "pkue/loop.hpp"
#include "pkue/provider.hpp"
#include "pkue/rng.hpp"
#include "pkue/trainer.hpp"

namespace pkue::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Minimal TOML subset for the training config: [section] headers, `key =
// value` lines, `#` comments, values limited to strings, integers, floats,
// and booleans.
// ---------------------------------------------------------------------------

namespace toml {

struct Value {
  enum class Kind { String, Integer, Float, Boolean } kind;
  std::string str;
  long long integer = 0;
  double real = 0.0;
  bool boolean = false;

  double number() const {
    if (kind == Kind::Integer) return static_cast<double>(integer);
    if (kind == Kind::Float) return real;
    throw ConfigError("expected a number, got '" + str + "'");
  }
};

using Table = std::map<std::string, std::map<std::string, Value>>;

inline std::string strip(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline Table parse(const std::string& text) {
  Table table;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(
        pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      // Keep # inside quoted strings.
      auto quote = line.find('"');
      if (quote == std::string::npos || hash < quote) line.resize(hash);
    }
    line = strip(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": unterminated section header");
      }
      section = strip(line.substr(1, line.size() - 2));
      if (section.empty()) {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": empty section name");
      }
      table[section];
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    std::string key = strip(line.substr(0, eq));
    std::string raw = strip(line.substr(eq + 1));
    if (key.empty() || raw.empty()) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": empty key or value");
    }
    Value value;
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": unterminated string");
      }
      value.kind = Value::Kind::String;
      value.str = raw.substr(1, raw.size() - 2);
    } else if (raw == "true" || raw == "false") {
      value.kind = Value::Kind::Boolean;
      value.boolean = raw == "true";
      value.str = raw;
    } else if (raw.find_first_of(".eE") != std::string::npos &&
               raw.find_first_not_of("+-0123456789.eE") ==
                   std::string::npos) {
      value.kind = Value::Kind::Float;
      value.str = raw;
      try {
        value.real = std::stod(raw);
      } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": bad float '" + raw + "'");
      }
    } else if (raw.find_first_not_of("+-0123456789") == std::string::npos) {
      value.kind = Value::Kind::Integer;
      value.str = raw;
      try {
        value.integer = std::stoll(raw);
      } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line_no) +
                          ": bad integer '" + raw + "'");
      }
    } else {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": unsupported value '" + raw + "'");
    }
    table[section][key] = std::move(value);
  }
  return table;
}

}  // namespace toml

inline trainer::TrainConfig parse_train_config(const std::string& text) {
  auto table = toml::parse(text);
  trainer::TrainConfig config;
  auto it = table.find("train");
  if (it == table.end()) throw ConfigError("missing [train] section");
  for (const auto& [key, value] : it->second) {
    if (key == "beta") {
      config.beta = value.number();
    } else if (key == "learning_rate") {
      config.learning_rate = value.number();
    } else if (key == "epochs") {
      config.epochs = static_cast<int>(value.number());
    } else if (key == "batch_size") {
      config.batch_size = static_cast<int>(value.number());
    } else if (key == "weight_decay") {
      config.weight_decay = value.number();
    } else if (key == "loss_mode") {
      config.loss_mode = trainer::loss_mode_from_string(value.str);
    } else if (key == "dpo_weight") {
      config.dpo_weight = value.number();
    } else if (key == "sft_weight") {
      config.sft_weight = value.number();
    } else if (key == "seed") {
      config.seed = static_cast<std::uint64_t>(value.integer);
    } else {
      throw ConfigError("unknown [train] key '" + key + "'");
    }
  }
  config.validate();
  return config;
}

// ---------------------------------------------------------------------------
// Pipeline configuration. Environment interpolation (`${VAR}`) is honored
// only inside the provider block so secrets stay out of config files;
// anywhere else the syntax is rejected outright.
// ---------------------------------------------------------------------------

struct ProviderConfig {
  std::string kind = "mock";  // mock | http
  std::string base_url;
  std::string model;
  std::string auth_env = "PKUE_API_KEY";
  int max_in_flight = 4;
};

struct DemoConfig {
  int domains = 5;
  int questions_per_domain = 36;
  int epochs = 1;
  double learning_rate = 0.1;
  int batch_size = 16;
  std::vector<std::size_t> scaling_budgets;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";
  ProviderConfig provider;
  construct::ConstructionConfig construction;
  // Narrow low-temperature probe vs wide high-temperature sweep.
  provider::GenerationConfig bo1{.temperature = 0.2, .n = 1};
  provider::GenerationConfig bo8{.temperature = 1.4, .n = 8};
  loop::PairConfig pairs;
  DemoConfig demo;
  std::size_t align_k = 10;
  std::size_t align_b_cap = 1000;
  std::size_t align_batches = 1;

  // Input paths, taken as written.
  std::string entries_path;
  std::string train_config_path;
  std::string prompts_dir = "prompts";
  std::string phi_path;
  std::string psi_path;

  // Artifact names, resolved under out_dir.
  std::string dataset_name = "dataset.jsonl";
  std::string funnel_name = "funnel_report.json";
  std::string responses_bo1_name = "responses_bo1.jsonl";
  std::string responses_bo8_name = "responses_bo8.jsonl";
  std::string judgments_bo1_name = "judgments_bo1.jsonl";
  std::string judgments_bo8_name = "judgments_bo8.jsonl";
  std::string pairs_name = "pairs.jsonl";
  std::string stats_name = "tuning_stats.json";
  std::string checkpoint_name = "checkpoint.bin";
  std::string train_report_name = "train_report.csv";
  std::string evaluation_name = "evaluation.json";
  std::string domain_table_name = "domain_accuracy.csv";
  std::string alignment_name = "alignment.json";
  std::string demo_report_name = "demo_report.json";
  std::string buckets_name = "buckets.csv";
  std::string scaling_name = "scaling_report.csv";

  std::string artifact(const std::string& name) const {
    return (std::filesystem::path(out_dir) / name).string();
  }
};

namespace detail {

inline bool has_interpolation(const std::string& s) {
  return s.find("${") != std::string::npos;
}

inline std::string interpolate_env(const std::string& input) {
  std::string out;
  std::size_t pos = 0;
  while (pos < input.size()) {
    auto open = input.find("${", pos);
    if (open == std::string::npos) {
      out += input.substr(pos);
      break;
    }
    out += input.substr(pos, open - pos);
    auto close = input.find('}', open + 2);
    if (close == std::string::npos) {
      throw ConfigError("unterminated ${...} in '" + input + "'");
    }
    std::string name = input.substr(open + 2, close - open - 2);
    const char* value = std::getenv(name.c_str());
    if (value == nullptr) {
      throw ConfigError("environment variable '" + name + "' is not set");
    }
    out += value;
    pos = close + 1;
  }
  return out;
}

inline void reject_interpolation(const json& node, const std::string& path) {
  if (node.is_string()) {
    if (has_interpolation(node.get<std::string>())) {
      throw ConfigError("env interpolation is allowed only under 'provider' "
                        "(found in " + path + ")");
    }
  } else if (node.is_object()) {
    for (const auto& [key, child] : node.items()) {
      if (path == "$" && key == "provider") continue;
      reject_interpolation(child, path + "." + key);
    }
  } else if (node.is_array()) {
    for (std::size_t i = 0; i < node.size(); ++i) {
      reject_interpolation(node[i], path + "[" + std::to_string(i) + "]");
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void load_generation(const json& j, provider::GenerationConfig& out) {
  maybe(j, "temperature", out.temperature);
  maybe(j, "top_p", out.top_p);
  maybe(j, "top_k", out.top_k);
  maybe(j, "n", out.n);
  maybe(j, "max_tokens", out.max_tokens);
  if (j.contains("seed")) out.seed = j.at("seed").get<std::uint64_t>();
}

}  // namespace detail

inline PipelineConfig config_from_json(const json& j) {
  detail::reject_interpolation(j, "$");
  PipelineConfig config;
  detail::maybe(j, "seed", config.seed);
  detail::maybe(j, "out_dir", config.out_dir);
  if (j.contains("provider")) {
    const auto& p = j.at("provider");
    detail::maybe(p, "kind", config.provider.kind);
    detail::maybe(p, "base_url", config.provider.base_url);
    detail::maybe(p, "model", config.provider.model);
    detail::maybe(p, "auth_env", config.provider.auth_env);
    detail::maybe(p, "max_in_flight", config.provider.max_in_flight);
    config.provider.base_url =
        detail::interpolate_env(config.provider.base_url);
    config.provider.model = detail::interpolate_env(config.provider.model);
    if (config.provider.kind != "mock" && config.provider.kind != "http") {
      throw ConfigError("provider.kind must be 'mock' or 'http'");
    }
    if (detail::has_interpolation(config.provider.auth_env)) {
      throw ConfigError("provider.auth_env names a variable; do not "
                        "interpolate it");
    }
  }
  if (j.contains("construction")) {
    const auto& c = j.at("construction");
    detail::maybe(c, "view_count_threshold",
                  config.construction.view_count_threshold);
    detail::maybe(c, "min_description_chars",
                  config.construction.min_description_chars);
    detail::maybe(c, "max_description_chars",
                  config.construction.max_description_chars);
    detail::maybe(c, "max_questions_per_entry",
                  config.construction.max_questions_per_entry);
    detail::maybe(c, "min_domain_count",
                  config.construction.min_domain_count);
    config.construction.validate();
  }
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    if (g.contains("bo1")) detail::load_generation(g.at("bo1"), config.bo1);
    if (g.contains("bo8")) detail::load_generation(g.at("bo8"), config.bo8);
  }
  config.bo1.validate();
  config.bo8.validate();
  if (j.contains("pairs")) {
    const auto& p = j.at("pairs");
    detail::maybe(p, "m", config.pairs.m);
    detail::maybe(p, "seed", config.pairs.seed);
    detail::maybe(p, "dedup", config.pairs.dedup);
    config.pairs.validate();
  }
  if (j.contains("align")) {
    const auto& a = j.at("align");
    detail::maybe(a, "k", config.align_k);
    detail::maybe(a, "b_cap", config.align_b_cap);
    detail::maybe(a, "batches", config.align_batches);
  }
  if (j.contains("demo")) {
    const auto& d = j.at("demo");
    detail::maybe(d, "domains", config.demo.domains);
    detail::maybe(d, "questions_per_domain",
                  config.demo.questions_per_domain);
    detail::maybe(d, "epochs", config.demo.epochs);
    detail::maybe(d, "learning_rate", config.demo.learning_rate);
    detail::maybe(d, "batch_size", config.demo.batch_size);
    detail::maybe(d, "scaling_budgets", config.demo.scaling_budgets);
    if (config.demo.domains < 1 || config.demo.questions_per_domain < 1) {
      throw ConfigError("demo sizes must be >= 1");
    }
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::maybe(p, "entries", config.entries_path);
    detail::maybe(p, "train_config", config.train_config_path);
    detail::maybe(p, "prompts_dir", config.prompts_dir);
    detail::maybe(p, "phi", config.phi_path);
    detail::maybe(p, "psi", config.psi_path);
    detail::maybe(p, "dataset", config.dataset_name);
    detail::maybe(p, "pairs", config.pairs_name);
    detail::maybe(p, "checkpoint", config.checkpoint_name);
  }
  return config;
}

inline PipelineConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stage manifests: deterministic provenance records (no wall-clock fields,
// so repeated runs digest identically).
// ---------------------------------------------------------------------------

struct Manifest {
  std::string stage;
  std::string root;  // artifact paths under this prefix are recorded relative
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> digest
  std::map<std::string, std::string> outputs;  // path -> digest
  json config_snapshot = json::object();

  // Keeps manifests byte-identical across runs that differ only in where
  // out_dir lives; files outside the run directory keep their given path.
  std::string key_for(const std::string& path) const {
    if (!root.empty()) {
      auto rel = std::filesystem::path(path).lexically_proximate(root);
      auto s = rel.generic_string();
      if (!s.empty() && rel.is_relative() && s.rfind("..", 0) != 0) return s;
    }
    return path;
  }

  void add_input(const std::string& path) {
    inputs[key_for(path)] = digest_file(path);
  }
  void add_output(const std::string& path) {
    outputs[key_for(path)] = digest_file(path);
  }

  json to_json() const {
    return json{{"stage", stage},
                {"seed", seed},
                {"inputs", inputs},
                {"outputs", outputs},
                {"config", config_snapshot}};
  }

  // Returns the manifest file's digest.
  std::string write(const std::string& out_dir) const {
    auto path = std::filesystem::path(out_dir) / "manifests" / (stage + ".json");
    write_file(path.string(), to_json().dump(2) + "\n");
    return digest_file(path.string());
  }
};

// ---------------------------------------------------------------------------
// Provider wiring. Cassette record/replay wraps whichever client the config
// selects; replay needs no live client at all.
// ---------------------------------------------------------------------------

struct ClientBundle {
  std::unique_ptr<provider::ChatClient> base;
  std::unique_ptr<provider::ChatClient> wrapper;
  provider::ChatClient* use = nullptr;
};

inline provider::MockWorld world_from_records(
    const std::vector<corpus::QARecord>& records, std::uint64_t seed) {
  provider::MockWorld world;
  world.seed = combine_seed(seed, hash_str("mock_world"));
  world.temperature_curve = {{0.0, 0.02}, {0.2, 0.10}, {1.4, 0.40},
                             {2.0, 0.50}};
  for (const auto& record : records) {
    provider::AnswerPool pool;
    pool.correct = {record.standard_answer};
    pool.correct_weights = {1.0};
    pool.wrong = record.wrong_answers;
    pool.wrong_weights = {0.8, 0.1, 0.1};
    world.questions[record.question_id] = pool;
  }
  world.validate();
  return world;
}

inline ClientBundle make_client(const PipelineConfig& config,
                                const provider::MockWorld* world,
                                const std::optional<std::string>& replay,
                                const std::optional<std::string>& record) {
  ClientBundle bundle;
  if (replay) {
    bundle.base = std::make_unique<provider::CassetteReplayer>(*replay);
  } else if (config.provider.kind == "mock") {
    if (world == nullptr) {
      throw InvariantViolationError("mock provider needs a world");
    }
    bundle.base = std::make_unique<provider::MockChatClient>(*world);
  } else {
    provider::ProviderEndpoint endpoint;
    endpoint.base_url = config.provider.base_url;
    endpoint.model_name = config.provider.model;
    endpoint.auth_env = config.provider.auth_env;
    endpoint.max_in_flight = config.provider.max_in_flight;
    if (endpoint.base_url.empty()) {
      throw ConfigError("provider.base_url is required for kind 'http'");
    }
    bundle.base = std::make_unique<provider::HttpChatClient>(endpoint);
  }
  if (record) {
    bundle.wrapper =
        std::make_unique<provider::CassetteRecorder>(*bundle.base, *record);
    bundle.use = bundle.wrapper.get();
  } else {
    bundle.use = bundle.base.get();
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Feature matrix CSV: each line `id,v1,v2,...`, no header.
// ---------------------------------------------------------------------------

inline analytics::FeatureMatrix parse_feature_csv(const std::string& text) {
  analytics::FeatureMatrix m;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    std::string line = text.substr(
        pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;
    ++line_no;
    if (line.empty()) continue;
    auto cells = analytics::detail::split_csv_line(line);
    if (cells.size() < 2) {
      throw SchemaViolationError(line_no, "row", "need id plus features");
    }
    m.ids.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      try {
        row.push_back(std::stod(cells[i]));
      } catch (const std::exception&) {
        throw SchemaViolationError(line_no, "feature",
                                   "not a number: " + cells[i]);
      }
    }
    m.rows.push_back(std::move(row));
  }
  m.validate();
  return m;
}

inline std::string serialize_feature_csv(const analytics::FeatureMatrix& m) {
  m.validate();
  std::string out;
  char buf[48];
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    out += m.ids[i];
    for (double v : m.rows[i]) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out += std::string(",") + buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage implementations. Files are the only channel between stages; every
// stage writes a manifest next to its outputs.
// ---------------------------------------------------------------------------

struct StageContext {
  PipelineConfig config;
  std::optional<std::string> replay;
  std::optional<std::string> record;
  std::ostream* log = nullptr;

  void say(const std::string& line) const {
    if (log != nullptr) *log << line << "\n";
  }
};

namespace detail {

inline std::vector<corpus::QARecord> load_dataset(const StageContext& ctx) {
  return corpus::read_records<corpus::QARecord>(
      ctx.config.artifact(ctx.config.dataset_name));
}

inline std::string prompt_file(const StageContext& ctx, const char* name) {
  return (std::filesystem::path(ctx.config.prompts_dir) / name).string();
}

inline corpus::Verdict judge_one(const std::string& text) {
  return loop::parse_verdict(text);
}

// Groups judgments into per-question verdict lists ordered by sample index.
inline std::vector<analytics::QuestionVerdicts> question_verdicts(
    const std::vector<corpus::QARecord>& records,
    const std::vector<corpus::Judgment>& judgments) {
  std::map<std::string, std::map<int, corpus::Verdict>> by_question;
  for (const auto& j : judgments) {
    by_question[j.question_id][j.sample_index] = j.verdict;
  }
  std::vector<analytics::QuestionVerdicts> out;
  for (const auto& record : records) {
    auto it = by_question.find(record.question_id);
    if (it == by_question.end()) continue;
    analytics::QuestionVerdicts qv;
    qv.question_id = record.question_id;
    qv.domain = record.domain;
    for (const auto& [index, verdict] : it->second) {
      qv.verdicts.push_back(verdict);
    }
    out.push_back(std::move(qv));
  }
  return out;
}

}  // namespace detail

inline Manifest run_build_dataset(const StageContext& ctx) {
  const auto& config = ctx.config;
  if (config.entries_path.empty()) {
    throw ConfigError("paths.entries is required for build-dataset");
  }
  auto entries = corpus::read_records<corpus::EncycEntry>(config.entries_path);
  ctx.say("build-dataset: " + std::to_string(entries.size()) + " entries");

  auto bundle = make_client(config, nullptr, ctx.replay, ctx.record);
  construct::PromptTemplates templates;
  templates.generate = read_file(detail::prompt_file(ctx, "generate.txt"));
  templates.quality_filter =
      read_file(detail::prompt_file(ctx, "quality_filter.txt"));

  // Domain labels come from the generation client as well: one short
  // classification call per record, keyed by the classify template.
  auto classify_template =
      read_file(detail::prompt_file(ctx, "classify.txt"));
  provider::GenerationConfig classify_config;
  classify_config.n = 1;
  classify_config.temperature = 0.0;
  classify_config.seed = combine_seed(config.seed, hash_str("classify"));
  construct::Classifier classifier =
      [&](const corpus::QARecord& record) -> std::string {
    auto prompt = construct::render_template(
        classify_template, {{"question", record.question},
                            {"standard_answer", record.standard_answer}});
    auto texts = bundle.use->complete(prompt, classify_config);
    return provider::trim_copy(texts.at(0));
  };

  auto build = construct::build_dataset(entries, *bundle.use, templates,
                                        config.construction, classifier,
                                        config.provider.max_in_flight);
  auto dataset_path = config.artifact(config.dataset_name);
  corpus::write_records(dataset_path, build.records);
  auto funnel_path = config.artifact(config.funnel_name);
  write_file(funnel_path, build.report.to_json().dump(2) + "\n");

  Manifest manifest;
  manifest.stage = "build-dataset";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.entries_path);
  manifest.add_output(dataset_path);
  manifest.add_output(funnel_path);
  manifest.config_snapshot = {
      {"view_count_threshold", config.construction.view_count_threshold},
      {"min_description_chars", config.construction.min_description_chars},
      {"max_description_chars", config.construction.max_description_chars},
      {"max_questions_per_entry",
       config.construction.max_questions_per_entry},
      {"min_domain_count", config.construction.min_domain_count}};
  manifest.write(config.out_dir);
  ctx.say("build-dataset: kept " + std::to_string(build.records.size()) +
          " questions");
  return manifest;
}

inline Manifest run_sample(const StageContext& ctx) {
  const auto& config = ctx.config;
  auto records = detail::load_dataset(ctx);
  auto world = world_from_records(records, config.seed);
  auto bundle = make_client(config, &world, ctx.replay, ctx.record);

  // The mock provider resolves questions by id; live providers see the
  // question text.
  loop::Sampler sampler;
  if (config.provider.kind == "mock" && !ctx.replay) {
    sampler = [&](const corpus::QARecord& record,
                  const provider::GenerationConfig& cfg) {
      return bundle.use->complete(record.question_id, cfg);
    };
  } else if (ctx.replay) {
    sampler = [&](const corpus::QARecord& record,
                  const provider::GenerationConfig& cfg) {
      return bundle.use->complete(config.provider.kind == "mock"
                                      ? record.question_id
                                      : record.question,
                                  cfg);
    };
  } else {
    sampler = loop::make_chat_sampler(*bundle.use);
  }

  Manifest manifest;
  manifest.stage = "sample";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.artifact(config.dataset_name));
  for (auto [tag, gen, name] :
       {std::tuple{"bo1", config.bo1, config.responses_bo1_name},
        std::tuple{"bo8", config.bo8, config.responses_bo8_name}}) {
    provider::GenerationConfig gen_config = gen;
    if (!gen_config.seed) {
      gen_config.seed = combine_seed(config.seed, hash_str(tag));
    }
    auto outcome = loop::sample_responses(records, {gen_config}, sampler,
                                          config.provider.max_in_flight);
    auto path = config.artifact(name);
    corpus::write_records(path, outcome.responses);
    manifest.add_output(path);
    manifest.config_snapshot[tag] = gen_config.to_json();
    manifest.config_snapshot[std::string(tag) + "_incomplete"] =
        outcome.incomplete_questions;
    ctx.say("sample " + std::string(tag) + ": " +
            std::to_string(outcome.responses.size()) + " responses, " +
            std::to_string(outcome.incomplete_questions.size()) +
            " incomplete");
  }
  manifest.write(config.out_dir);
  return manifest;
}

inline Manifest run_judge(const StageContext& ctx) {
  const auto& config = ctx.config;
  auto records = detail::load_dataset(ctx);

  loop::RawJudge raw_judge;
  ClientBundle bundle;
  provider::MockWorld world;
  if (config.provider.kind == "mock" && !ctx.replay && !ctx.record) {
    world = world_from_records(records, config.seed);
    std::map<std::string, std::string> id_by_text;
    for (const auto& record : records) {
      id_by_text[record.question] = record.question_id;
    }
    raw_judge = provider::make_world_judge(world, id_by_text);
  } else {
    world = world_from_records(records, config.seed);
    bundle = make_client(config, &world, ctx.replay, ctx.record);
    auto judge_template = read_file(detail::prompt_file(ctx, "judge.txt"));
    raw_judge = loop::make_chat_raw_judge(*bundle.use, judge_template);
  }

  Manifest manifest;
  manifest.stage = "judge";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.artifact(config.dataset_name));
  for (auto [tag, responses_name, judgments_name] :
       {std::tuple{"bo1", config.responses_bo1_name,
                   config.judgments_bo1_name},
        std::tuple{"bo8", config.responses_bo8_name,
                   config.judgments_bo8_name}}) {
    auto responses_path = config.artifact(responses_name);
    auto responses =
        corpus::read_records<corpus::CandidateResponse>(responses_path);
    auto judgments = loop::judge_all(records, responses, raw_judge,
                                     "judge-" + config.provider.kind,
                                     config.provider.max_in_flight);
    auto path = config.artifact(judgments_name);
    corpus::write_records(path, judgments);
    manifest.add_input(responses_path);
    manifest.add_output(path);
    ctx.say("judge " + std::string(tag) + ": " +
            std::to_string(judgments.size()) + " judgments");
  }
  manifest.write(config.out_dir);
  return manifest;
}

inline Manifest run_build_pairs(const StageContext& ctx) {
  const auto& config = ctx.config;
  auto records = detail::load_dataset(ctx);
  auto responses = corpus::read_records<corpus::CandidateResponse>(
      config.artifact(config.responses_bo8_name));
  auto judgments = corpus::read_records<corpus::Judgment>(
      config.artifact(config.judgments_bo8_name));

  loop::PairConfig pair_config = config.pairs;
  if (pair_config.seed == 0) {
    pair_config.seed = combine_seed(config.seed, hash_str("pairs"));
  }

  std::map<std::string, std::vector<corpus::CandidateResponse>> responses_by;
  std::map<std::string, std::vector<corpus::Judgment>> judgments_by;
  for (const auto& r : responses) responses_by[r.question_id].push_back(r);
  for (const auto& j : judgments) judgments_by[j.question_id].push_back(j);

  std::vector<corpus::PreferencePair> all_pairs;
  for (const auto& record : records) {
    auto rit = responses_by.find(record.question_id);
    auto jit = judgments_by.find(record.question_id);
    if (rit == responses_by.end() || jit == judgments_by.end()) continue;
    auto pairs = loop::build_pairs(record.question_id, rit->second,
                                   jit->second, pair_config);
    all_pairs.insert(all_pairs.end(), pairs.begin(), pairs.end());
  }
  auto labels = [&] {
    std::vector<corpus::CandidateResponse> out;
    for (const auto& record : records) {
      auto rit = responses_by.find(record.question_id);
      auto jit = judgments_by.find(record.question_id);
      if (rit == responses_by.end() || jit == judgments_by.end()) continue;
      auto picked = loop::sft_labels(record.question_id, rit->second,
                                     jit->second, loop::SftMode::Single,
                                     pair_config.seed);
      out.insert(out.end(), picked.begin(), picked.end());
    }
    return out;
  }();

  auto pairs_path = config.artifact(config.pairs_name);
  corpus::write_records(pairs_path, all_pairs);
  auto labels_path = config.artifact("sft_labels.jsonl");
  corpus::write_records(labels_path, labels);
  auto stats =
      loop::tuning_stats(records, judgments, all_pairs, labels.size());
  auto stats_path = config.artifact(config.stats_name);
  write_file(stats_path, stats.to_json().dump(2) + "\n");

  Manifest manifest;
  manifest.stage = "build-pairs";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.artifact(config.dataset_name));
  manifest.add_input(config.artifact(config.responses_bo8_name));
  manifest.add_input(config.artifact(config.judgments_bo8_name));
  manifest.add_output(pairs_path);
  manifest.add_output(labels_path);
  manifest.add_output(stats_path);
  manifest.config_snapshot = {{"m", pair_config.m},
                              {"seed", pair_config.seed},
                              {"dedup", pair_config.dedup}};
  manifest.write(config.out_dir);
  ctx.say("build-pairs: " + std::to_string(all_pairs.size()) + " pairs, " +
          std::to_string(labels.size()) + " labels");
  return manifest;
}

// Builds the shared character vocabulary for a dataset: question texts plus
// every answer string that can appear in training data.
inline trainer::Vocabulary dataset_vocabulary(
    const std::vector<corpus::QARecord>& records,
    const std::vector<corpus::PreferencePair>& pairs,
    const std::vector<corpus::CandidateResponse>& labels) {
  std::vector<std::string> texts;
  for (const auto& r : records) {
    texts.push_back(r.question);
    texts.push_back(r.standard_answer);
    for (const auto& w : r.wrong_answers) texts.push_back(w);
  }
  for (const auto& p : pairs) {
    texts.push_back(p.chosen);
    texts.push_back(p.rejected);
  }
  for (const auto& l : labels) texts.push_back(l.text);
  return trainer::Vocabulary::from_texts(texts);
}

inline std::map<std::string, std::string> prompt_map(
    const std::vector<corpus::QARecord>& records) {
  std::map<std::string, std::string> out;
  for (const auto& r : records) out[r.question_id] = r.question;
  return out;
}

inline Manifest run_train(const StageContext& ctx) {
  const auto& config = ctx.config;
  auto records = detail::load_dataset(ctx);
  auto pairs_path = config.artifact(config.pairs_name);
  auto pairs = corpus::read_records<corpus::PreferencePair>(pairs_path);
  auto labels_path = config.artifact("sft_labels.jsonl");
  auto labels = corpus::read_records<corpus::CandidateResponse>(labels_path);
  auto responses = corpus::read_records<corpus::CandidateResponse>(
      config.artifact(config.responses_bo8_name));

  trainer::TrainConfig train_config;
  if (!config.train_config_path.empty()) {
    train_config = parse_train_config(read_file(config.train_config_path));
  }
  if (train_config.seed == 0) {
    train_config.seed = combine_seed(config.seed, hash_str("train"));
  }

  auto vocab = dataset_vocabulary(records, pairs, labels);
  auto prompts = prompt_map(records);
  auto training_pairs = trainer::encode_pairs(vocab, pairs, prompts);
  auto training_labels = trainer::encode_labels(vocab, labels, prompts);

  // Initial policy clones the sampled behavior; the frozen reference is the
  // same distribution.
  trainer::ToyPolicy policy = trainer::ToyPolicy::bigram(vocab.size());
  std::vector<std::pair<std::vector<int>, std::vector<int>>> observed;
  for (const auto& r : responses) {
    auto pit = prompts.find(r.question_id);
    if (pit == prompts.end()) continue;
    auto target = vocab.encode(r.text);
    target.push_back(trainer::Vocabulary::kEos);
    observed.emplace_back(vocab.encode(pit->second), std::move(target));
  }
  trainer::fit_bigram_counts(policy, observed);
  trainer::ToyPolicy reference = policy;

  auto result = trainer::train(policy, reference, training_pairs,
                               training_labels, train_config);
  auto checkpoint_path = config.artifact(config.checkpoint_name);
  trainer::save_checkpoint(result.policy, checkpoint_path);
  auto reference_path = config.artifact("reference.bin");
  trainer::save_checkpoint(reference, reference_path);
  auto report_path = config.artifact(config.train_report_name);
  write_file(report_path, result.report.to_csv());

  Manifest manifest;
  manifest.stage = "train";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.artifact(config.dataset_name));
  manifest.add_input(pairs_path);
  manifest.add_input(labels_path);
  manifest.add_output(checkpoint_path);
  manifest.add_output(report_path);
  manifest.config_snapshot = {
      {"beta", train_config.beta},
      {"learning_rate", train_config.learning_rate},
      {"epochs", train_config.epochs},
      {"batch_size", train_config.batch_size},
      {"weight_decay", train_config.weight_decay},
      {"loss_mode", trainer::to_string(train_config.loss_mode)},
      {"seed", train_config.seed},
      {"final_params_digest", result.report.final_params_digest},
      {"steps", result.report.steps.size()}};
  manifest.write(config.out_dir);
  ctx.say("train: " + std::to_string(result.report.steps.size()) +
          " steps, digest " + result.report.final_params_digest);
  return manifest;
}

inline Manifest run_evaluate(const StageContext& ctx) {
  const auto& config = ctx.config;
  auto records = detail::load_dataset(ctx);
  auto j1 = corpus::read_records<corpus::Judgment>(
      config.artifact(config.judgments_bo1_name));
  auto j8 = corpus::read_records<corpus::Judgment>(
      config.artifact(config.judgments_bo8_name));

  auto bo1 = detail::question_verdicts(records, j1);
  auto bo8 = detail::question_verdicts(records, j8);
  auto coverage = analytics::bo_n_coverage(bo1, bo8);

  std::vector<std::string> domains;
  std::vector<std::vector<double>> cells;
  for (const auto& [domain, cell] : coverage.per_domain) {
    domains.push_back(domain);
    cells.push_back({cell.bo1_accuracy, cell.bon_coverage,
                     static_cast<double>(cell.questions)});
  }
  domains.push_back("overall");
  cells.push_back({coverage.overall.bo1_accuracy,
                   coverage.overall.bon_coverage,
                   static_cast<double>(coverage.overall.questions)});
  auto table_path = config.artifact(config.domain_table_name);
  write_file(table_path,
             analytics::matrix_csv(domains,
                                   {"bo1_accuracy", "bo8_coverage",
                                    "questions"},
                                   cells, "domain"));

  json evaluation{{"questions", coverage.overall.questions},
                  {"bo1_accuracy", coverage.overall.bo1_accuracy},
                  {"bo8_coverage", coverage.overall.bon_coverage}};
  auto eval_path = config.artifact(config.evaluation_name);
  write_file(eval_path, evaluation.dump(2) + "\n");

  Manifest manifest;
  manifest.stage = "evaluate";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.artifact(config.dataset_name));
  manifest.add_input(config.artifact(config.judgments_bo1_name));
  manifest.add_input(config.artifact(config.judgments_bo8_name));
  manifest.add_output(table_path);
  manifest.add_output(eval_path);
  manifest.write(config.out_dir);
  ctx.say("evaluate: bo1 " +
          std::to_string(coverage.overall.bo1_accuracy) + "%, bo8 coverage " +
          std::to_string(coverage.overall.bon_coverage) + "%");
  return manifest;
}

inline Manifest run_align_metric(const StageContext& ctx) {
  const auto& config = ctx.config;
  if (config.phi_path.empty() || config.psi_path.empty()) {
    throw ConfigError("paths.phi and paths.psi are required for align-metric");
  }
  auto phi = parse_feature_csv(read_file(config.phi_path));
  auto psi = parse_feature_csv(read_file(config.psi_path));
  auto result = analytics::mutual_knn_alignment_batched(
      phi, psi, config.align_k, config.align_b_cap,
      combine_seed(config.seed, hash_str("align")), config.align_batches);
  auto path = config.artifact(config.alignment_name);
  write_file(path, result.to_json().dump(2) + "\n");

  Manifest manifest;
  manifest.stage = "align-metric";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(config.phi_path);
  manifest.add_input(config.psi_path);
  manifest.add_output(path);
  manifest.config_snapshot = {{"k", config.align_k},
                              {"b_cap", config.align_b_cap},
                              {"batches", config.align_batches}};
  manifest.write(config.out_dir);
  ctx.say("align-metric: " + std::to_string(result.metric));
  return manifest;
}

// ---------------------------------------------------------------------------
// Offline demo: a synthetic QA world with per-question answer alphabets, run
// through the real stage functions end to end on the mock provider.
// ---------------------------------------------------------------------------

struct DemoReport {
  std::size_t questions = 0;
  std::size_t pairs = 0;
  std::size_t labels = 0;
  double bo1_accuracy = 0.0;
  double bo8_coverage = 0.0;
  std::map<std::string, double> bo1_by_domain;
  std::map<std::string, double> coverage_by_domain;
  double margin_before = 0.0;
  double margin_after = 0.0;
  double greedy_before = 0.0;  // percent correct on training questions
  double greedy_after = 0.0;
  long long train_steps = 0;
  std::string policy_digest_before;
  std::string policy_digest_after;

  json to_json() const {
    return json{{"questions", questions},
                {"pairs", pairs},
                {"labels", labels},
                {"bo1_accuracy", bo1_accuracy},
                {"bo8_coverage", bo8_coverage},
                {"bo1_by_domain", bo1_by_domain},
                {"coverage_by_domain", coverage_by_domain},
                {"margin_before", margin_before},
                {"margin_after", margin_after},
                {"greedy_before", greedy_before},
                {"greedy_after", greedy_after},
                {"train_steps", train_steps},
                {"policy_digest_before", policy_digest_before},
                {"policy_digest_after", policy_digest_after}};
  }
};

namespace detail {

inline std::string scalar(char32_t codepoint) {
  return utf8::encode_codepoint(static_cast<std::uint32_t>(codepoint));
}

// Disjoint per-question alphabets: prompt anchors, one correct answer
// character, three wrong ones. Transitions never collide across questions,
// so the bigram policy resolves each question independently.
inline std::vector<corpus::QARecord> demo_records(const DemoConfig& demo) {
  std::vector<corpus::QARecord> records;
  int index = 0;
  for (int d = 0; d < demo.domains; ++d) {
    for (int q = 0; q < demo.questions_per_domain; ++q, ++index) {
      corpus::QARecord record;
      record.question_id =
          "d" + std::to_string(d) + "-q" + std::to_string(q);
      record.entry_id = "demo-" + std::to_string(index);
      record.question = "q" + scalar(0x4E00 + index);
      record.standard_answer = scalar(0x5100 + index);
      record.wrong_answers = {scalar(0x6000 + 3 * index),
                              scalar(0x6000 + 3 * index + 1),
                              scalar(0x6000 + 3 * index + 2)};
      record.domain = "domain" + std::to_string(d);
      record.split = corpus::Split::Train;
      corpus::validate(record);
      records.push_back(std::move(record));
    }
  }
  return records;
}

// Seeded ancestral sampling from the toy policy, for post-training k-of-n
// accuracy buckets.
inline std::string sample_policy_text(const trainer::ToyPolicy& policy,
                                      const trainer::Vocabulary& vocab,
                                      const std::vector<int>& prompt,
                                      Rng& rng, int max_tokens) {
  std::vector<int> out;
  int ctx = prompt.empty() ? trainer::Vocabulary::kBos : prompt.back();
  for (int t = 0; t < max_tokens; ++t) {
    auto logp = policy.log_softmax(ctx);
    std::vector<double> probs(logp.size());
    for (std::size_t i = 0; i < logp.size(); ++i) {
      probs[i] = std::exp(logp[i]);
    }
    int token = static_cast<int>(rng.weighted(probs));
    if (token == trainer::Vocabulary::kEos) break;
    out.push_back(token);
    ctx = token;
  }
  return vocab.decode(out);
}

}  // namespace detail

inline DemoReport run_demo(const PipelineConfig& base_config,
                           std::ostream* log = nullptr) {
  PipelineConfig config = base_config;
  config.provider.kind = "mock";
  StageContext ctx{config, std::nullopt, std::nullopt, log};

  // Stage 0: synthesize the dataset in place of the construction funnel.
  auto records = detail::demo_records(config.demo);
  auto dataset_path = config.artifact(config.dataset_name);
  corpus::write_records(dataset_path, records);
  Manifest dataset_manifest;
  dataset_manifest.stage = "demo-dataset";
  dataset_manifest.root = config.out_dir;
  dataset_manifest.seed = config.seed;
  dataset_manifest.add_output(dataset_path);
  dataset_manifest.config_snapshot = {
      {"domains", config.demo.domains},
      {"questions_per_domain", config.demo.questions_per_domain}};
  dataset_manifest.write(config.out_dir);
  ctx.say("demo: " + std::to_string(records.size()) + " questions");

  run_sample(ctx);
  run_judge(ctx);
  run_build_pairs(ctx);
  run_evaluate(ctx);

  // Training data.
  auto pairs = corpus::read_records<corpus::PreferencePair>(
      config.artifact(config.pairs_name));
  auto labels = corpus::read_records<corpus::CandidateResponse>(
      config.artifact("sft_labels.jsonl"));
  auto responses = corpus::read_records<corpus::CandidateResponse>(
      config.artifact(config.responses_bo8_name));
  auto judgments = corpus::read_records<corpus::Judgment>(
      config.artifact(config.judgments_bo8_name));
  if (pairs.empty()) {
    throw InvariantViolationError(
        "demo produced no preference pairs; widen sampling or add questions");
  }

  auto vocab = dataset_vocabulary(records, pairs, labels);
  auto prompts = prompt_map(records);
  auto training_pairs = trainer::encode_pairs(vocab, pairs, prompts);

  trainer::ToyPolicy policy = trainer::ToyPolicy::bigram(vocab.size(), 8);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> observed;
  for (const auto& r : responses) {
    auto target = vocab.encode(r.text);
    target.push_back(trainer::Vocabulary::kEos);
    observed.emplace_back(vocab.encode(prompts.at(r.question_id)),
                          std::move(target));
  }
  trainer::fit_bigram_counts(policy, observed);
  trainer::ToyPolicy reference = policy;

  auto mean_margin = [&](const trainer::ToyPolicy& p) {
    double total = 0.0;
    for (const auto& pair : training_pairs) {
      total += trainer::log_prob(p, pair.prompt, pair.chosen) -
               trainer::log_prob(p, pair.prompt, pair.rejected);
    }
    return total / static_cast<double>(training_pairs.size());
  };
  auto greedy_accuracy = [&](const trainer::ToyPolicy& p) {
    std::size_t correct = 0;
    for (const auto& record : records) {
      auto decoded = trainer::greedy_decode(
          p, vocab.encode(record.question));
      if (vocab.decode(decoded) == record.standard_answer) ++correct;
    }
    return 100.0 * static_cast<double>(correct) /
           static_cast<double>(records.size());
  };

  DemoReport report;
  report.questions = records.size();
  report.pairs = pairs.size();
  report.labels = labels.size();
  report.policy_digest_before = trainer::params_digest(policy);
  report.margin_before = mean_margin(policy);
  report.greedy_before = greedy_accuracy(policy);

  trainer::TrainConfig train_config;
  train_config.learning_rate = config.demo.learning_rate;
  train_config.batch_size = config.demo.batch_size;
  train_config.epochs = config.demo.epochs;
  train_config.seed = combine_seed(config.seed, hash_str("demo_train"));
  auto result = trainer::train(policy, reference, training_pairs, {},
                               train_config);
  trainer::save_checkpoint(result.policy,
                           config.artifact(config.checkpoint_name));
  write_file(config.artifact(config.train_report_name),
             result.report.to_csv());

  report.train_steps = static_cast<long long>(result.report.steps.size());
  report.policy_digest_after = result.report.final_params_digest;
  report.margin_after = mean_margin(result.policy);
  report.greedy_after = greedy_accuracy(result.policy);

  // Coverage numbers from the evaluate stage's inputs.
  auto j1 = corpus::read_records<corpus::Judgment>(
      config.artifact(config.judgments_bo1_name));
  auto coverage = analytics::bo_n_coverage(
      detail::question_verdicts(records, j1),
      detail::question_verdicts(records, judgments));
  report.bo1_accuracy = coverage.overall.bo1_accuracy;
  report.bo8_coverage = coverage.overall.bon_coverage;
  for (const auto& [domain, cell] : coverage.per_domain) {
    report.bo1_by_domain[domain] = cell.bo1_accuracy;
    report.coverage_by_domain[domain] = cell.bon_coverage;
  }

  // Prior-accuracy buckets: before counts from the sampled world, after
  // counts from seeded samples of the trained policy.
  std::map<std::string, int> before_counts;
  for (const auto& j : judgments) {
    if (j.verdict == corpus::Verdict::Correct) {
      ++before_counts[j.question_id];
    } else {
      before_counts[j.question_id];
    }
  }
  int n_samples = config.bo8.n;
  std::vector<analytics::QuestionCounts> before, after;
  for (const auto& record : records) {
    auto it = before_counts.find(record.question_id);
    if (it == before_counts.end()) continue;
    before.push_back({record.question_id, it->second});
    Rng rng(combine_seed(combine_seed(config.seed, hash_str("after_samples")),
                         hash_str(record.question_id)));
    int correct = 0;
    auto prompt_ids = vocab.encode(record.question);
    for (int s = 0; s < n_samples; ++s) {
      auto text = detail::sample_policy_text(result.policy, vocab,
                                             prompt_ids, rng, 4);
      if (text == record.standard_answer) ++correct;
    }
    after.push_back({record.question_id, correct});
  }
  auto buckets = analytics::group_by_prior_accuracy(before, after, n_samples);
  std::string buckets_csv = "bucket,prompts,mean_after_accuracy\n";
  for (const auto& b : buckets) {
    char line[96];
    std::snprintf(line, sizeof(line), "%d/%d,%zu,%.17g\n", b.before_correct,
                  n_samples, b.prompts, b.mean_after_accuracy);
    buckets_csv += line;
  }
  auto buckets_path = config.artifact(config.buckets_name);
  write_file(buckets_path, buckets_csv);

  // Optional scaling harness: retrain on pair-count prefixes.
  if (!config.demo.scaling_budgets.empty()) {
    std::string scaling_csv = "pairs,greedy_accuracy\n";
    for (auto budget : config.demo.scaling_budgets) {
      std::size_t take = std::min(budget, training_pairs.size());
      std::vector<trainer::TrainingPair> subset(
          training_pairs.begin(),
          training_pairs.begin() + static_cast<std::ptrdiff_t>(take));
      auto sub = trainer::train(policy, reference, subset, {}, train_config);
      char line[64];
      std::snprintf(line, sizeof(line), "%zu,%.17g\n", take,
                    greedy_accuracy(sub.policy));
      scaling_csv += line;
    }
    write_file(config.artifact(config.scaling_name), scaling_csv);
  }

  auto report_path = config.artifact(config.demo_report_name);
  write_file(report_path, report.to_json().dump(2) + "\n");

  Manifest manifest;
  manifest.stage = "demo";
  manifest.root = config.out_dir;
  manifest.seed = config.seed;
  manifest.add_input(dataset_path);
  manifest.add_output(report_path);
  manifest.add_output(config.artifact(config.pairs_name));
  manifest.add_output(config.artifact(config.checkpoint_name));
  manifest.add_output(buckets_path);
  manifest.config_snapshot = {{"epochs", config.demo.epochs},
                              {"pairs", report.pairs},
                              {"train_steps", report.train_steps}};
  manifest.write(config.out_dir);
  ctx.say("demo: pairs " + std::to_string(report.pairs) + ", greedy " +
          std::to_string(report.greedy_before) + "% -> " +
          std::to_string(report.greedy_after) + "%");
  return report;
}

// ---------------------------------------------------------------------------
// Stage dispatch.
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{
      "build-dataset", "sample",   "judge",        "build-pairs",
      "train",         "evaluate", "align-metric", "demo"};
  return names;
}

inline int run_stage(const std::string& stage, const StageContext& ctx) {
  if (stage == "build-dataset") {
    run_build_dataset(ctx);
  } else if (stage == "sample") {
    run_sample(ctx);
  } else if (stage == "judge") {
    run_judge(ctx);
  } else if (stage == "build-pairs") {
    run_build_pairs(ctx);
  } else if (stage == "train") {
    run_train(ctx);
  } else if (stage == "evaluate") {
    run_evaluate(ctx);
  } else if (stage == "align-metric") {
    run_align_metric(ctx);
  } else if (stage == "demo") {
    run_demo(ctx.config, ctx.log);
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  return 0;
}

}  // namespace pkue::pipeline
