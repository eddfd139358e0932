#pragma once

#include <atomic>
#include <bit>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/rng.hpp"

namespace pkue::provider {

using nlohmann::json;

struct TransportError : Error {
  TransportError(int status, const std::string& body)
      : Error("transport failure (status " + std::to_string(status) + "): " +
              body.substr(0, 200)),
        status_(status),
        body_(body) {}
  int status() const { return status_; }
  const std::string& body() const { return body_; }

 private:
  int status_;
  std::string body_;
};

struct RateLimitedError : TransportError {
  using TransportError::TransportError;
};

struct CassetteMissError : Error {
  explicit CassetteMissError(const std::string& request_hash)
      : Error("no recorded response for request " + request_hash) {}
};

struct UnknownQuestionError : Error {
  explicit UnknownQuestionError(const std::string& question_id)
      : Error("question not in mock world: " + question_id) {}
};

// Diversity knobs for one sampling call. top_k 0 means unlimited.
struct GenerationConfig {
  double temperature = 1.0;
  double top_p = 0.9;
  int top_k = 50;
  int n = 1;
  int max_tokens = 256;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (n < 1) throw ConfigError("generation n must be >= 1");
    if (!(temperature > 0.0)) {
      throw ConfigError("generation temperature must be > 0");
    }
    if (!(top_p > 0.0) || top_p > 1.0) {
      throw ConfigError("generation top_p must be in (0,1]");
    }
    if (top_k < 0) throw ConfigError("generation top_k must be >= 0");
    if (max_tokens < 1) throw ConfigError("generation max_tokens must be >= 1");
  }

  json to_json() const {
    json j{{"temperature", temperature},
           {"top_p", top_p},
           {"top_k", top_k},
           {"n", n},
           {"max_tokens", max_tokens}};
    if (seed) j["seed"] = *seed;
    return j;
  }

  // Stable identifier for provenance fields.
  std::string id() const { return digest_bytes(to_json().dump()); }
};

struct RetryPolicy {
  int max_attempts = 3;
  double initial_backoff_seconds = 1.0;
};

struct ProviderEndpoint {
  std::string base_url;
  std::string model_name;
  std::string auth_env = "PKUE_API_KEY";
  int max_in_flight = 4;
  RetryPolicy retry;

  void validate() const {
    if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    if (retry.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  }
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  // Returns exactly config.n texts in provider index order.
  virtual std::vector<std::string> complete(const std::string& prompt,
                                            const GenerationConfig& config) = 0;
};

// Canonical request form shared by the recorder and the replayer. The key is
// the digest of this dump, so record and replay agree byte for byte.
inline json canonical_request(const std::string& prompt,
                              const GenerationConfig& config) {
  return json{{"messages", json::array({json{{"role", "user"},
                                             {"content", prompt}}})},
              {"max_tokens", config.max_tokens},
              {"n", config.n},
              {"temperature", config.temperature},
              {"top_k", config.top_k},
              {"top_p", config.top_p}};
}

inline std::string request_hash(const std::string& prompt,
                                const GenerationConfig& config) {
  return digest_bytes(canonical_request(prompt, config).dump());
}

// ---------------------------------------------------------------------------
// HTTP chat-completion client. POSTs {base_url}/v1/chat/completions and
// retries transport failures, 429 and 5xx with exponential backoff. The
// transport and the sleep function are injectable for tests.
// ---------------------------------------------------------------------------

struct TransportResult {
  int status = 0;  // 0 = connection-level failure
  std::string body;
};

using Transport = std::function<TransportResult(
    const std::string& path, const std::string& body,
    const std::vector<std::pair<std::string, std::string>>& headers)>;

using SleepFn = std::function<void(double seconds)>;

inline Transport make_http_transport(const std::string& base_url) {
  // Split an optional path prefix off the authority part.
  std::string authority = base_url;
  std::string prefix;
  auto scheme_end = base_url.find("://");
  std::size_t path_start = std::string::npos;
  if (scheme_end != std::string::npos) {
    path_start = base_url.find('/', scheme_end + 3);
  }
  if (path_start != std::string::npos) {
    authority = base_url.substr(0, path_start);
    prefix = base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  }
  return [authority, prefix](
             const std::string& path, const std::string& body,
             const std::vector<std::pair<std::string, std::string>>& headers) {
    httplib::Client client(authority);
    client.set_read_timeout(120, 0);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(prefix + path, h, body, "application/json");
    if (!res) return TransportResult{0, httplib::to_string(res.error())};
    return TransportResult{res->status, res->body};
  };
}

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(ProviderEndpoint endpoint)
      : endpoint_(std::move(endpoint)),
        transport_(make_http_transport(endpoint_.base_url)),
        sleep_([](double s) {
          std::this_thread::sleep_for(std::chrono::duration<double>(s));
        }) {
    endpoint_.validate();
  }

  HttpChatClient(ProviderEndpoint endpoint, Transport transport, SleepFn sleep)
      : endpoint_(std::move(endpoint)),
        transport_(std::move(transport)),
        sleep_(std::move(sleep)) {
    endpoint_.validate();
  }

  std::vector<std::string> complete(const std::string& prompt,
                                    const GenerationConfig& config) override {
    config.validate();
    json body = canonical_request(prompt, config);
    body["model"] = endpoint_.model_name;
    std::vector<std::pair<std::string, std::string>> headers;
    if (const char* token = std::getenv(endpoint_.auth_env.c_str());
        token && *token) {
      headers.emplace_back("Authorization", std::string("Bearer ") + token);
    }

    TransportResult last;
    bool rate_limited = false;
    double backoff = endpoint_.retry.initial_backoff_seconds;
    for (int attempt = 0; attempt < endpoint_.retry.max_attempts; ++attempt) {
      if (attempt > 0) {
        sleep_(backoff);
        backoff *= 2.0;
      }
      last = transport_("/v1/chat/completions", body.dump(), headers);
      if (last.status == 200) return parse_choices(last.body, config.n);
      rate_limited = last.status == 429;
      bool retryable =
          last.status == 0 || last.status == 429 || last.status >= 500;
      if (!retryable) break;
    }
    if (rate_limited) throw RateLimitedError(last.status, last.body);
    throw TransportError(last.status, last.body);
  }

 private:
  static std::vector<std::string> parse_choices(const std::string& body,
                                                int n) {
    json parsed;
    try {
      parsed = json::parse(body);
    } catch (const json::exception& ex) {
      throw TransportError(200, std::string("bad response json: ") + ex.what());
    }
    if (!parsed.contains("choices") || !parsed["choices"].is_array()) {
      throw TransportError(200, "response has no choices array");
    }
    std::vector<std::string> texts;
    for (const auto& choice : parsed["choices"]) {
      texts.push_back(choice.at("message").at("content").get<std::string>());
    }
    if (static_cast<int>(texts.size()) != n) {
      throw TransportError(200, "expected " + std::to_string(n) +
                                    " choices, got " +
                                    std::to_string(texts.size()));
    }
    return texts;
  }

  ProviderEndpoint endpoint_;
  Transport transport_;
  SleepFn sleep_;
};

// ---------------------------------------------------------------------------
// Cassette record/replay. One line per exchange: request hash, canonical
// request, response texts. Replay serves responses per hash in FIFO order so
// repeated identical requests (e.g. a retried quality check) work.
// ---------------------------------------------------------------------------

class CassetteRecorder : public ChatClient {
 public:
  CassetteRecorder(ChatClient& inner, const std::string& path)
      : inner_(inner), out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw IoError("cannot open cassette for append: " + path);
  }

  std::vector<std::string> complete(const std::string& prompt,
                                    const GenerationConfig& config) override {
    auto texts = inner_.complete(prompt, config);
    json line{{"request_hash", request_hash(prompt, config)},
              {"request", canonical_request(prompt, config)},
              {"response", texts}};
    std::lock_guard<std::mutex> lock(mu_);
    out_ << line.dump() << '\n';
    out_.flush();
    return texts;
  }

 private:
  ChatClient& inner_;
  std::ofstream out_;
  std::mutex mu_;
};

class CassetteReplayer : public ChatClient {
 public:
  explicit CassetteReplayer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError(path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& ex) {
        throw SchemaViolationError(line_no, "<json>", ex.what());
      }
      if (!j.contains("request_hash") || !j.contains("response")) {
        throw SchemaViolationError(line_no, "request_hash", "missing");
      }
      queues_[j["request_hash"].get<std::string>()].push_back(
          j["response"].get<std::vector<std::string>>());
    }
  }

  std::vector<std::string> complete(const std::string& prompt,
                                    const GenerationConfig& config) override {
    std::string hash = request_hash(prompt, config);
    std::lock_guard<std::mutex> lock(mu_);
    auto it = queues_.find(hash);
    if (it == queues_.end() || it->second.empty()) {
      throw CassetteMissError(hash);
    }
    auto texts = std::move(it->second.front());
    it->second.pop_front();
    return texts;
  }

 private:
  std::unordered_map<std::string, std::deque<std::vector<std::string>>>
      queues_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Mock world: a fixed answer pool per question plus a piecewise-linear curve
// from temperature to the probability of drawing a correct answer. Draw
// streams depend on (world seed, question, config seed, temperature) but not
// on n, so a shorter draw sequence is a prefix of a longer one.
// ---------------------------------------------------------------------------

struct AnswerPool {
  std::vector<std::string> correct;
  std::vector<double> correct_weights;  // empty = uniform
  std::vector<std::string> wrong;
  std::vector<double> wrong_weights;
};

struct MockWorld {
  std::uint64_t seed = 0;
  std::map<std::string, AnswerPool> questions;
  // (temperature, correct probability) knots, strictly increasing temps.
  std::vector<std::pair<double, double>> temperature_curve;

  void validate() const {
    if (temperature_curve.empty()) {
      throw ConfigError("mock world needs a temperature curve");
    }
    for (std::size_t i = 1; i < temperature_curve.size(); ++i) {
      if (!(temperature_curve[i - 1].first < temperature_curve[i].first)) {
        throw ConfigError("temperature curve knots must strictly increase");
      }
    }
    for (const auto& [qid, pool] : questions) {
      if (pool.correct.empty() && pool.wrong.empty()) {
        throw ConfigError("question " + qid + " has no answers");
      }
      auto check = [&](const std::vector<double>& w, std::size_t n) {
        if (!w.empty() && w.size() != n) {
          throw ConfigError("weight count mismatch for question " + qid);
        }
        for (double x : w) {
          if (x < 0.0) throw ConfigError("negative weight for question " + qid);
        }
      };
      check(pool.correct_weights, pool.correct.size());
      check(pool.wrong_weights, pool.wrong.size());
    }
  }

  double p_correct(double temperature) const {
    const auto& c = temperature_curve;
    if (temperature <= c.front().first) return clamp01(c.front().second);
    if (temperature >= c.back().first) return clamp01(c.back().second);
    for (std::size_t i = 1; i < c.size(); ++i) {
      if (temperature <= c[i].first) {
        double t = (temperature - c[i - 1].first) /
                   (c[i].first - c[i - 1].first);
        return clamp01(c[i - 1].second +
                       t * (c[i].second - c[i - 1].second));
      }
    }
    return clamp01(c.back().second);
  }

 private:
  static double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }
};

namespace detail {

// Maps one uniform draw in [0,1) to a pool index, so stream positions do not
// depend on pool composition.
inline std::size_t pick_index(double u, std::size_t size,
                              const std::vector<double>& weights) {
  if (weights.empty()) {
    auto i = static_cast<std::size_t>(u * static_cast<double>(size));
    return std::min(i, size - 1);
  }
  double total = 0.0;
  for (double w : weights) total += w;
  if (total <= 0.0) return size - 1;
  double target = u * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  return size - 1;
}

}  // namespace detail

inline std::vector<std::string> mock_complete(const std::string& question_id,
                                              const GenerationConfig& config,
                                              const MockWorld& world) {
  config.validate();
  auto it = world.questions.find(question_id);
  if (it == world.questions.end()) throw UnknownQuestionError(question_id);
  const AnswerPool& pool = it->second;

  double p = world.p_correct(config.temperature);
  std::uint64_t stream = combine_seed(
      combine_seed(combine_seed(world.seed, hash_str(question_id)),
                   config.seed.value_or(0)),
      std::bit_cast<std::uint64_t>(config.temperature));
  Rng rng(stream);

  std::vector<std::string> texts;
  texts.reserve(config.n);
  for (int i = 0; i < config.n; ++i) {
    // Fixed two draws per sample preserves the prefix property.
    bool correct = rng.uniform() < p;
    double side_draw = rng.uniform();
    bool use_correct =
        (correct && !pool.correct.empty()) || pool.wrong.empty();
    const auto& side = use_correct ? pool.correct : pool.wrong;
    const auto& weights =
        use_correct ? pool.correct_weights : pool.wrong_weights;
    texts.push_back(side[detail::pick_index(side_draw, side.size(), weights)]);
  }
  return texts;
}

// Adapter treating the prompt string as a question id.
class MockChatClient : public ChatClient {
 public:
  explicit MockChatClient(MockWorld world) : world_(std::move(world)) {
    world_.validate();
  }

  std::vector<std::string> complete(const std::string& prompt,
                                    const GenerationConfig& config) override {
    return mock_complete(prompt, config, world_);
  }

  const MockWorld& world() const { return world_; }

 private:
  MockWorld world_;
};

// Raw judge text producer: (question, candidate, standard) -> reply with a
// verdict marker, so the real marker parser runs downstream.
using RawJudge = std::function<std::string(
    const std::string& question, const std::string& candidate,
    const std::string& standard)>;

inline std::string trim_copy(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline RawJudge make_exact_match_judge() {
  return [](const std::string&, const std::string& candidate,
            const std::string& standard) {
    if (trim_copy(candidate) == trim_copy(standard)) {
      return std::string("候选答案与参考答案一致。【正确】");
    }
    return std::string("候选答案与参考答案不符。【错误】");
  };
}

// Membership judge: correct iff the candidate appears in the question's
// correct pool. Questions are looked up by their text.
inline RawJudge make_world_judge(
    const MockWorld& world,
    const std::map<std::string, std::string>& question_id_by_text) {
  return [&world, question_id_by_text](const std::string& question,
                                       const std::string& candidate,
                                       const std::string& standard) {
    auto qit = question_id_by_text.find(question);
    if (qit == question_id_by_text.end()) {
      return std::string("无法定位该问题，不作判断。");
    }
    const auto& pool = world.questions.at(qit->second);
    std::string c = trim_copy(candidate);
    for (const auto& answer : pool.correct) {
      if (c == answer) return std::string("回答与参考答案一致。【正确】");
    }
    if (c == trim_copy(standard)) {
      return std::string("回答与参考答案一致。【正确】");
    }
    return std::string("回答与参考答案不符。【错误】");
  };
}

// ---------------------------------------------------------------------------
// Bounded fan-out with deterministic result placement: results land at their
// item's index no matter which worker finishes first.
// ---------------------------------------------------------------------------

template <typename In, typename Fn>
auto parallel_map(const std::vector<In>& items, Fn fn, int max_in_flight)
    -> std::vector<std::invoke_result_t<Fn, const In&>> {
  using Out = std::invoke_result_t<Fn, const In&>;
  std::vector<Out> results(items.size());
  if (items.empty()) return results;
  if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
  std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(max_in_flight),
                            items.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < items.size(); ++i) results[i] = fn(items[i]);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= items.size()) return;
        try {
          results[i] = fn(items[i]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return results;
}

}  // namespace pkue::provider
