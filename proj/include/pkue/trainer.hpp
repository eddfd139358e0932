#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pkue/common.hpp"
#include "pkue/corpus.hpp"
#include "pkue/rng.hpp"

namespace pkue::trainer {

using nlohmann::json;

struct UnknownTokenError : Error {
  explicit UnknownTokenError(const std::string& token)
      : Error("token not in vocabulary: " + token) {}
};

struct EmptyResponseError : Error {
  EmptyResponseError() : Error("response must be non-empty") {}
};

struct NonFiniteLossError : Error {
  explicit NonFiniteLossError(long long step)
      : Error("non-finite loss at optimizer step " + std::to_string(step)),
        step_(step) {}
  long long step() const { return step_; }

 private:
  long long step_;
};

// ---------------------------------------------------------------------------
// Character-level vocabulary over Unicode scalars, with BOS/EOS specials at
// fixed indices.
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  static Vocabulary from_texts(const std::vector<std::string>& texts) {
    std::set<std::string> scalars;
    for (const auto& text : texts) {
      for (auto& s : utf8::split_scalars(text)) scalars.insert(std::move(s));
    }
    Vocabulary v;
    v.tokens_ = {"<bos>", "<eos>"};
    for (const auto& s : scalars) v.tokens_.push_back(s);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      v.index_[v.tokens_[i]] = static_cast<int>(i);
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& s : utf8::split_scalars(text)) {
      auto it = index_.find(s);
      if (it == index_.end()) throw UnknownTokenError(s);
      ids.push_back(it->second);
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kBos || id == kEos) continue;
      out += token(id);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Toy autoregressive policy. Context is the single previous token. Two
// parameterizations: a plain logit table, or one tanh hidden layer.
// ---------------------------------------------------------------------------

enum class Arch { Bigram, OneHidden };

inline std::string to_string(Arch a) {
  return a == Arch::Bigram ? "bigram" : "one_hidden";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "bigram") return Arch::Bigram;
  if (s == "one_hidden") return Arch::OneHidden;
  throw ConfigError("unknown policy arch '" + s + "'");
}

class ToyPolicy {
 public:
  static ToyPolicy bigram(int vocab_size, int max_len = 64) {
    ToyPolicy p;
    p.arch_ = Arch::Bigram;
    p.vocab_ = vocab_size;
    p.max_len_ = max_len;
    p.params_.assign(static_cast<std::size_t>(vocab_size) * vocab_size, 0.0);
    return p;
  }

  static ToyPolicy one_hidden(int vocab_size, int hidden, std::uint64_t seed,
                              int max_len = 64) {
    ToyPolicy p;
    p.arch_ = Arch::OneHidden;
    p.vocab_ = vocab_size;
    p.hidden_ = hidden;
    p.max_len_ = max_len;
    p.params_.assign(static_cast<std::size_t>(hidden) * vocab_size + hidden +
                         static_cast<std::size_t>(vocab_size) * hidden +
                         vocab_size,
                     0.0);
    Rng rng(combine_seed(seed, hash_str("one_hidden_init")));
    for (auto& x : p.params_) x = 0.1 * rng.normal();
    return p;
  }

  Arch arch() const { return arch_; }
  int vocab_size() const { return vocab_; }
  int hidden_size() const { return hidden_; }
  int max_len() const { return max_len_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  // Parameter layout for OneHidden: [W1 (H x V, column per context) | b1 (H)
  // | W2 (V x H) | b2 (V)].
  std::vector<double> logits(int ctx) const {
    check_token(ctx);
    if (arch_ == Arch::Bigram) {
      auto base = static_cast<std::size_t>(ctx) * vocab_;
      return {params_.begin() + base, params_.begin() + base + vocab_};
    }
    std::vector<double> h = hidden_activations(ctx);
    const double* w2 = params_.data() + w2_offset();
    const double* b2 = params_.data() + b2_offset();
    std::vector<double> out(vocab_);
    for (int v = 0; v < vocab_; ++v) {
      double acc = b2[v];
      const double* row = w2 + static_cast<std::size_t>(v) * hidden_;
      for (int k = 0; k < hidden_; ++k) acc += row[k] * h[k];
      out[v] = acc;
    }
    return out;
  }

  std::vector<double> log_softmax(int ctx) const {
    auto l = logits(ctx);
    double m = *std::max_element(l.begin(), l.end());
    double sum = 0.0;
    for (double x : l) sum += std::exp(x - m);
    double lse = m + std::log(sum);
    for (double& x : l) x -= lse;
    return l;
  }

  // Adds coeff * d log p(token | ctx) / d params into grad.
  void add_logprob_grad(int ctx, int token, double coeff,
                        std::vector<double>& grad) const {
    check_token(ctx);
    check_token(token);
    auto logp = log_softmax(ctx);
    if (arch_ == Arch::Bigram) {
      auto base = static_cast<std::size_t>(ctx) * vocab_;
      for (int v = 0; v < vocab_; ++v) {
        double indicator = v == token ? 1.0 : 0.0;
        grad[base + v] += coeff * (indicator - std::exp(logp[v]));
      }
      return;
    }
    std::vector<double> h = hidden_activations(ctx);
    const double* w2 = params_.data() + w2_offset();
    double* gw1 = grad.data();
    double* gb1 = grad.data() + b1_offset();
    double* gw2 = grad.data() + w2_offset();
    double* gb2 = grad.data() + b2_offset();

    std::vector<double> dlogits(vocab_);
    for (int v = 0; v < vocab_; ++v) {
      double indicator = v == token ? 1.0 : 0.0;
      dlogits[v] = coeff * (indicator - std::exp(logp[v]));
    }
    std::vector<double> dh(hidden_, 0.0);
    for (int v = 0; v < vocab_; ++v) {
      double dv = dlogits[v];
      gb2[v] += dv;
      const double* row = w2 + static_cast<std::size_t>(v) * hidden_;
      double* grow = gw2 + static_cast<std::size_t>(v) * hidden_;
      for (int k = 0; k < hidden_; ++k) {
        grow[k] += dv * h[k];
        dh[k] += dv * row[k];
      }
    }
    for (int k = 0; k < hidden_; ++k) {
      double da = dh[k] * (1.0 - h[k] * h[k]);
      gb1[k] += da;
      gw1[static_cast<std::size_t>(k) * vocab_ + ctx] += da;
    }
  }

  json shape_json() const {
    return json{{"arch", to_string(arch_)},
                {"vocab_size", vocab_},
                {"hidden", hidden_},
                {"max_len", max_len_},
                {"param_count", params_.size()}};
  }

  static ToyPolicy from_shape(const json& j) {
    Arch arch = arch_from_string(j.at("arch").get<std::string>());
    int vocab = j.at("vocab_size").get<int>();
    int hidden = j.at("hidden").get<int>();
    int max_len = j.at("max_len").get<int>();
    ToyPolicy p = arch == Arch::Bigram
                      ? bigram(vocab, max_len)
                      : one_hidden(vocab, hidden, 0, max_len);
    if (p.params_.size() != j.at("param_count").get<std::size_t>()) {
      throw InvariantViolationError("checkpoint shape mismatch");
    }
    return p;
  }

 private:
  void check_token(int id) const {
    if (id < 0 || id >= vocab_) {
      throw UnknownTokenError(std::to_string(id));
    }
  }

  std::vector<double> hidden_activations(int ctx) const {
    const double* w1 = params_.data();
    const double* b1 = params_.data() + b1_offset();
    std::vector<double> h(hidden_);
    for (int k = 0; k < hidden_; ++k) {
      h[k] = std::tanh(w1[static_cast<std::size_t>(k) * vocab_ + ctx] + b1[k]);
    }
    return h;
  }

  std::size_t b1_offset() const {
    return static_cast<std::size_t>(hidden_) * vocab_;
  }
  std::size_t w2_offset() const { return b1_offset() + hidden_; }
  std::size_t b2_offset() const {
    return w2_offset() + static_cast<std::size_t>(vocab_) * hidden_;
  }

  Arch arch_ = Arch::Bigram;
  int vocab_ = 0;
  int hidden_ = 0;
  int max_len_ = 64;
  std::vector<double> params_;
};

inline std::string params_digest(const ToyPolicy& policy) {
  const auto& p = policy.params();
  return digest_bytes(std::string_view(
      reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double)));
}

// ---------------------------------------------------------------------------
// Exact sequence log-likelihood. The context for the first response token is
// the last prompt token, or BOS for an empty prompt.
// ---------------------------------------------------------------------------

inline int context_for(const std::vector<int>& prompt,
                       const std::vector<int>& response, std::size_t t) {
  if (t == 0) return prompt.empty() ? Vocabulary::kBos : prompt.back();
  return response[t - 1];
}

inline double log_prob(const ToyPolicy& policy, const std::vector<int>& prompt,
                       const std::vector<int>& response) {
  if (response.empty()) throw EmptyResponseError();
  double total = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    total += policy.log_softmax(context_for(prompt, response, t))
        [static_cast<std::size_t>(response[t])];
  }
  return total;
}

inline void add_sequence_grad(const ToyPolicy& policy,
                              const std::vector<int>& prompt,
                              const std::vector<int>& response, double coeff,
                              std::vector<double>& grad) {
  for (std::size_t t = 0; t < response.size(); ++t) {
    policy.add_logprob_grad(context_for(prompt, response, t), response[t],
                            coeff, grad);
  }
}

// ---------------------------------------------------------------------------
// Losses. Objectives expose a value and an in-place gradient accumulation;
// accumulation is strictly sequential so results are thread-count
// independent.
// ---------------------------------------------------------------------------

struct TrainingPair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

struct TrainingLabel {
  std::vector<int> prompt;
  std::vector<int> target;
};

inline double stable_softplus(double x) {
  // log(1 + e^x) without overflow.
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

class Objective {
 public:
  virtual ~Objective() = default;
  virtual double value(const ToyPolicy& policy) const = 0;
  virtual void add_grad(const ToyPolicy& policy,
                        std::vector<double>& grad) const = 0;
};

inline std::vector<double> gradient(const Objective& objective,
                                    const ToyPolicy& policy) {
  std::vector<double> grad(policy.params().size(), 0.0);
  objective.add_grad(policy, grad);
  return grad;
}

// -E[log sigma(beta * (log-ratio margin))]; the expectation is the batch
// mean, computed as softplus(-z) for stability.
class DpoObjective : public Objective {
 public:
  DpoObjective(const ToyPolicy& reference,
               const std::vector<TrainingPair>& pairs, double beta)
      : reference_(reference), pairs_(pairs), beta_(beta) {
    if (pairs.empty()) throw InvariantViolationError("empty pair batch");
  }

  double value(const ToyPolicy& policy) const override {
    double total = 0.0;
    for (const auto& pair : pairs_) total += stable_softplus(-z_of(policy, pair));
    return total / static_cast<double>(pairs_.size());
  }

  void add_grad(const ToyPolicy& policy,
                std::vector<double>& grad) const override {
    double inv = 1.0 / static_cast<double>(pairs_.size());
    for (const auto& pair : pairs_) {
      double weight = sigmoid(-z_of(policy, pair)) * beta_ * inv;
      add_sequence_grad(policy, pair.prompt, pair.chosen, -weight, grad);
      add_sequence_grad(policy, pair.prompt, pair.rejected, weight, grad);
    }
  }

  // Mean chosen-minus-rejected log-prob under the given policy.
  double margin(const ToyPolicy& policy) const {
    double total = 0.0;
    for (const auto& pair : pairs_) {
      total += log_prob(policy, pair.prompt, pair.chosen) -
               log_prob(policy, pair.prompt, pair.rejected);
    }
    return total / static_cast<double>(pairs_.size());
  }

 private:
  double z_of(const ToyPolicy& policy, const TrainingPair& pair) const {
    double chosen_ratio = log_prob(policy, pair.prompt, pair.chosen) -
                          log_prob(reference_, pair.prompt, pair.chosen);
    double rejected_ratio = log_prob(policy, pair.prompt, pair.rejected) -
                            log_prob(reference_, pair.prompt, pair.rejected);
    return beta_ * (chosen_ratio - rejected_ratio);
  }

  const ToyPolicy& reference_;
  const std::vector<TrainingPair>& pairs_;
  double beta_;
};

// Mean negative log-likelihood over labeled answers.
class SftObjective : public Objective {
 public:
  explicit SftObjective(const std::vector<TrainingLabel>& labels)
      : labels_(labels) {
    if (labels.empty()) throw InvariantViolationError("empty label batch");
  }

  double value(const ToyPolicy& policy) const override {
    double total = 0.0;
    for (const auto& label : labels_) {
      total -= log_prob(policy, label.prompt, label.target);
    }
    return total / static_cast<double>(labels_.size());
  }

  void add_grad(const ToyPolicy& policy,
                std::vector<double>& grad) const override {
    double inv = -1.0 / static_cast<double>(labels_.size());
    for (const auto& label : labels_) {
      add_sequence_grad(policy, label.prompt, label.target, inv, grad);
    }
  }

 private:
  const std::vector<TrainingLabel>& labels_;
};

class CombinedObjective : public Objective {
 public:
  CombinedObjective(const DpoObjective& dpo, const SftObjective& sft,
                    double dpo_weight, double sft_weight)
      : dpo_(dpo), sft_(sft), dpo_weight_(dpo_weight),
        sft_weight_(sft_weight) {}

  double value(const ToyPolicy& policy) const override {
    return dpo_weight_ * dpo_.value(policy) + sft_weight_ * sft_.value(policy);
  }

  void add_grad(const ToyPolicy& policy,
                std::vector<double>& grad) const override {
    if (dpo_weight_ != 0.0) {
      std::vector<double> g(grad.size(), 0.0);
      dpo_.add_grad(policy, g);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] += dpo_weight_ * g[i];
      }
    }
    if (sft_weight_ != 0.0) {
      std::vector<double> g(grad.size(), 0.0);
      sft_.add_grad(policy, g);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] += sft_weight_ * g[i];
      }
    }
  }

 private:
  const DpoObjective& dpo_;
  const SftObjective& sft_;
  double dpo_weight_;
  double sft_weight_;
};

// Convenience wrappers over one-shot batch losses.
inline double dpo_loss(const ToyPolicy& policy, const ToyPolicy& reference,
                       const std::vector<TrainingPair>& pairs, double beta) {
  return DpoObjective(reference, pairs, beta).value(policy);
}

inline double sft_loss(const ToyPolicy& policy,
                       const std::vector<TrainingLabel>& labels) {
  return SftObjective(labels).value(policy);
}

struct CombinedWeights {
  double dpo_weight = 1.0;
  double sft_weight = 0.1;
};

inline double combined_loss(const ToyPolicy& policy,
                            const ToyPolicy& reference,
                            const std::vector<TrainingPair>& pairs,
                            const std::vector<TrainingLabel>& labels,
                            double beta, const CombinedWeights& weights) {
  DpoObjective dpo(reference, pairs, beta);
  SftObjective sft(labels);
  return CombinedObjective(dpo, sft, weights.dpo_weight, weights.sft_weight)
      .value(policy);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay, plus cosine decay to zero.
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamW {
 public:
  AdamW(std::size_t param_count, AdamWConfig config = {})
      : config_(config), m_(param_count, 0.0), v_(param_count, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad,
            double lr, double weight_decay) {
    ++t_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params[i] -= lr * (mhat / (std::sqrt(vhat) + config_.epsilon) +
                         weight_decay * params[i]);
    }
  }

 private:
  AdamWConfig config_;
  std::vector<double> m_, v_;
  long long t_ = 0;
};

// Multiplier 1 at step 0 decaying to 0 at the final step.
inline double cosine_multiplier(long long step, long long total_steps) {
  if (total_steps <= 1) return 1.0;
  double x = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

// ---------------------------------------------------------------------------
// Training driver.
// ---------------------------------------------------------------------------

enum class LossMode { Dpo, Sft, SftPlusDpo, SftThenDpo };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::Dpo: return "dpo";
    case LossMode::Sft: return "sft";
    case LossMode::SftPlusDpo: return "sft_plus_dpo";
    default: return "sft_then_dpo";
  }
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "dpo") return LossMode::Dpo;
  if (s == "sft") return LossMode::Sft;
  if (s == "sft_plus_dpo") return LossMode::SftPlusDpo;
  if (s == "sft_then_dpo") return LossMode::SftThenDpo;
  throw ConfigError("unknown loss_mode '" + s + "'");
}

struct TrainConfig {
  double beta = 0.1;
  double learning_rate = 1e-2;
  int epochs = 1;
  int batch_size = 128;
  double weight_decay = 1e-4;
  LossMode loss_mode = LossMode::Dpo;
  double dpo_weight = 1.0;
  double sft_weight = 0.1;
  std::uint64_t seed = 0;
  AdamWConfig adamw;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (loss_mode == LossMode::SftPlusDpo &&
        (!(dpo_weight > 0.0) || !(sft_weight > 0.0))) {
      throw ConfigError("sft_plus_dpo needs both weights > 0");
    }
  }
};

struct TrainStep {
  long long step = 0;
  double loss = 0.0;
  double margin = 0.0;  // mean chosen-minus-rejected log-prob, 0 for SFT steps
  double lr_multiplier = 0.0;
  double grad_norm = 0.0;
};

struct TrainReport {
  std::vector<TrainStep> steps;
  std::string final_params_digest;

  std::string to_csv() const {
    std::string out = "step,loss,margin,lr_multiplier,grad_norm\n";
    char line[256];
    for (const auto& s : steps) {
      std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g\n",
                    s.step, s.loss, s.margin, s.lr_multiplier, s.grad_norm);
      out += line;
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t count,
                                            std::uint64_t seed,
                                            const char* phase, int epoch) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(combine_seed(combine_seed(seed, hash_str(phase)),
                       static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

struct PhaseRunner {
  ToyPolicy& policy;
  const TrainConfig& config;
  TrainReport& report;
  long long& global_step;

  // Runs epochs over `count` items; `make_objective` receives the item
  // indices of one batch and returns the objective plus whether margins
  // apply.
  template <typename MakeObjective>
  void run(std::size_t count, const char* phase,
           MakeObjective make_objective) {
    if (count == 0 || config.epochs == 0) return;
    auto batches_per_epoch = static_cast<long long>(
        (count + config.batch_size - 1) / config.batch_size);
    long long total = batches_per_epoch * config.epochs;
    AdamW optimizer(policy.params().size(), config.adamw);
    long long phase_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      auto order = epoch_order(count, config.seed, phase, epoch);
      for (std::size_t start = 0; start < count;
           start += config.batch_size) {
        std::size_t end = std::min(count, start + config.batch_size);
        std::vector<std::size_t> batch(order.begin() + start,
                                       order.begin() + end);
        auto [objective, margin] = make_objective(batch);
        double loss = objective->value(policy);
        if (!std::isfinite(loss)) throw NonFiniteLossError(global_step);
        double batch_margin = margin(policy);
        auto grad = gradient(*objective, policy);
        double norm = 0.0;
        for (double g : grad) norm += g * g;
        norm = std::sqrt(norm);
        double multiplier = cosine_multiplier(phase_step, total);
        optimizer.step(policy.params(), grad,
                       config.learning_rate * multiplier,
                       config.weight_decay);
        report.steps.push_back(
            {global_step, loss, batch_margin, multiplier, norm});
        ++global_step;
        ++phase_step;
      }
    }
  }
};

}  // namespace detail

struct TrainResult {
  ToyPolicy policy;
  TrainReport report;
};

inline TrainResult train(const ToyPolicy& initial, const ToyPolicy& reference,
                         const std::vector<TrainingPair>& pairs,
                         const std::vector<TrainingLabel>& labels,
                         const TrainConfig& config) {
  config.validate();
  TrainResult result{initial, {}};
  long long global_step = 0;
  detail::PhaseRunner runner{result.policy, config, result.report,
                             global_step};

  auto zero_margin = [](const ToyPolicy&) { return 0.0; };

  auto run_sft = [&] {
    runner.run(labels.size(), "sft", [&](const std::vector<std::size_t>& b) {
      auto batch = std::make_shared<std::vector<TrainingLabel>>();
      for (auto i : b) batch->push_back(labels[i]);
      struct Holder : SftObjective {
        std::shared_ptr<std::vector<TrainingLabel>> keep;
        explicit Holder(std::shared_ptr<std::vector<TrainingLabel>> l)
            : SftObjective(*l), keep(std::move(l)) {}
      };
      std::shared_ptr<Objective> obj = std::make_shared<Holder>(batch);
      return std::pair<std::shared_ptr<Objective>,
                       std::function<double(const ToyPolicy&)>>(obj,
                                                                zero_margin);
    });
  };

  auto run_dpo = [&](const ToyPolicy& ref) {
    runner.run(pairs.size(), "dpo", [&](const std::vector<std::size_t>& b) {
      auto batch = std::make_shared<std::vector<TrainingPair>>();
      for (auto i : b) batch->push_back(pairs[i]);
      struct Holder : DpoObjective {
        std::shared_ptr<std::vector<TrainingPair>> keep;
        Holder(const ToyPolicy& r,
               std::shared_ptr<std::vector<TrainingPair>> p, double beta)
            : DpoObjective(r, *p, beta), keep(std::move(p)) {}
      };
      auto holder = std::make_shared<Holder>(ref, batch, config.beta);
      std::function<double(const ToyPolicy&)> margin =
          [holder](const ToyPolicy& p) { return holder->margin(p); };
      return std::pair<std::shared_ptr<Objective>,
                       std::function<double(const ToyPolicy&)>>(holder,
                                                                margin);
    });
  };

  switch (config.loss_mode) {
    case LossMode::Sft:
      run_sft();
      break;
    case LossMode::Dpo:
      run_dpo(reference);
      break;
    case LossMode::SftPlusDpo: {
      if (labels.empty()) {
        throw ConfigError("sft_plus_dpo needs labels");
      }
      // Batches walk the pair set; the SFT term sees a label batch of the
      // same size, cycled over a seeded shuffle of the labels.
      auto label_order = detail::epoch_order(labels.size(), config.seed,
                                             "combined_labels", 0);
      std::size_t cursor = 0;
      runner.run(pairs.size(), "combined",
                 [&](const std::vector<std::size_t>& b) {
                   auto pair_batch =
                       std::make_shared<std::vector<TrainingPair>>();
                   for (auto i : b) pair_batch->push_back(pairs[i]);
                   auto label_batch =
                       std::make_shared<std::vector<TrainingLabel>>();
                   for (std::size_t k = 0; k < b.size(); ++k) {
                     label_batch->push_back(
                         labels[label_order[cursor % labels.size()]]);
                     ++cursor;
                   }
                   struct Holder : Objective {
                     std::shared_ptr<std::vector<TrainingPair>> pairs;
                     std::shared_ptr<std::vector<TrainingLabel>> labels;
                     DpoObjective dpo;
                     SftObjective sft;
                     CombinedObjective combined;
                     Holder(const ToyPolicy& ref,
                            std::shared_ptr<std::vector<TrainingPair>> p,
                            std::shared_ptr<std::vector<TrainingLabel>> l,
                            double beta, double dw, double sw)
                         : pairs(std::move(p)),
                           labels(std::move(l)),
                           dpo(ref, *pairs, beta),
                           sft(*labels),
                           combined(dpo, sft, dw, sw) {}
                     double value(const ToyPolicy& p) const override {
                       return combined.value(p);
                     }
                     void add_grad(const ToyPolicy& p,
                                   std::vector<double>& g) const override {
                       combined.add_grad(p, g);
                     }
                   };
                   auto holder = std::make_shared<Holder>(
                       reference, pair_batch, label_batch, config.beta,
                       config.dpo_weight, config.sft_weight);
                   std::function<double(const ToyPolicy&)> margin =
                       [holder](const ToyPolicy& p) {
                         return holder->dpo.margin(p);
                       };
                   return std::pair<std::shared_ptr<Objective>,
                                    std::function<double(const ToyPolicy&)>>(
                       holder, margin);
                 });
      break;
    }
    case LossMode::SftThenDpo: {
      run_sft();
      // Re-freeze: the SFT result becomes the DPO reference.
      ToyPolicy new_reference = result.policy;
      run_dpo(new_reference);
      break;
    }
  }

  result.report.final_params_digest = params_digest(result.policy);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: raw little-endian doubles plus a JSON shape sidecar.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ToyPolicy& policy, const std::string& path) {
  const auto& p = policy.params();
  write_file(path, std::string_view(reinterpret_cast<const char*>(p.data()),
                                    p.size() * sizeof(double)));
  write_file(path + ".shape.json", policy.shape_json().dump(2) + "\n");
}

inline ToyPolicy load_checkpoint(const std::string& path) {
  json shape = json::parse(read_file(path + ".shape.json"));
  ToyPolicy policy = ToyPolicy::from_shape(shape);
  std::string bytes = read_file(path);
  if (bytes.size() != policy.params().size() * sizeof(double)) {
    throw InvariantViolationError("checkpoint byte count mismatch");
  }
  std::memcpy(policy.params().data(), bytes.data(), bytes.size());
  return policy;
}

// ---------------------------------------------------------------------------
// Bridges from pipeline records to token-level training data.
// ---------------------------------------------------------------------------

inline std::vector<TrainingPair> encode_pairs(
    const Vocabulary& vocab, const std::vector<corpus::PreferencePair>& pairs,
    const std::map<std::string, std::string>& prompt_by_question,
    bool append_eos = true) {
  std::vector<TrainingPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto it = prompt_by_question.find(p.question_id);
    if (it == prompt_by_question.end()) {
      throw InvariantViolationError("no prompt for question " +
                                    p.question_id);
    }
    TrainingPair t;
    t.prompt = vocab.encode(it->second);
    t.chosen = vocab.encode(p.chosen);
    t.rejected = vocab.encode(p.rejected);
    if (append_eos) {
      t.chosen.push_back(Vocabulary::kEos);
      t.rejected.push_back(Vocabulary::kEos);
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<TrainingLabel> encode_labels(
    const Vocabulary& vocab,
    const std::vector<corpus::CandidateResponse>& labels,
    const std::map<std::string, std::string>& prompt_by_question,
    bool append_eos = true) {
  std::vector<TrainingLabel> out;
  out.reserve(labels.size());
  for (const auto& label : labels) {
    auto it = prompt_by_question.find(label.question_id);
    if (it == prompt_by_question.end()) {
      throw InvariantViolationError("no prompt for question " +
                                    label.question_id);
    }
    TrainingLabel t;
    t.prompt = vocab.encode(it->second);
    t.target = vocab.encode(label.text);
    if (append_eos) t.target.push_back(Vocabulary::kEos);
    out.push_back(std::move(t));
  }
  return out;
}

// Fits bigram logits to smoothed transition counts over (prompt, response)
// sequences; exact maximum likelihood for the bigram table.
inline void fit_bigram_counts(
    ToyPolicy& policy,
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& data,
    double alpha = 0.5) {
  if (policy.arch() != Arch::Bigram) {
    throw ConfigError("count fitting needs the bigram arch");
  }
  int v = policy.vocab_size();
  std::vector<double> counts(static_cast<std::size_t>(v) * v, 0.0);
  for (const auto& [prompt, response] : data) {
    for (std::size_t t = 0; t < response.size(); ++t) {
      int ctx = context_for(prompt, response, t);
      counts[static_cast<std::size_t>(ctx) * v + response[t]] += 1.0;
    }
  }
  auto& params = policy.params();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    params[i] = std::log(counts[i] + alpha);
  }
}

// Greedy argmax decode until EOS or the policy's max length; ties take the
// lower token index.
inline std::vector<int> greedy_decode(const ToyPolicy& policy,
                                      const std::vector<int>& prompt) {
  std::vector<int> out;
  int ctx = prompt.empty() ? Vocabulary::kBos : prompt.back();
  for (int t = 0; t < policy.max_len(); ++t) {
    auto logits = policy.logits(ctx);
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
    ctx = best;
  }
  return out;
}

}  // namespace pkue::trainer
