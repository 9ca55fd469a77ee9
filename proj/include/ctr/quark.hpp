#pragma once

// Quark-style reward-quantized training loop: explore -> quantize -> learn.
// Gradient updates are delegated to a Learner hook; CountLearner is a
// desk-scale stand-in that refits per-reward-token n-gram tables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/decoder.hpp"
#include "ctr/error.hpp"
#include "ctr/lm.hpp"
#include "ctr/metrics.hpp"

namespace ctr {

enum class RewardKind { rougeL_precision, rougeL_recall, rougeL_f1 };

inline std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::rougeL_precision: return "rougeL_precision";
    case RewardKind::rougeL_recall: return "rougeL_recall";
    case RewardKind::rougeL_f1: return "rougeL_f1";
  }
  return "?";
}

enum class RewardSchedule { alternate_PR, P_plus_F1, R_plus_F1, F1_only };

inline std::string to_string(RewardSchedule s) {
  switch (s) {
    case RewardSchedule::alternate_PR: return "alternate-pr";
    case RewardSchedule::P_plus_F1: return "p-f1";
    case RewardSchedule::R_plus_F1: return "r-f1";
    case RewardSchedule::F1_only: return "f1";
  }
  return "?";
}

inline RewardSchedule parse_reward_schedule(std::string_view s) {
  if (s == "alternate-pr") return RewardSchedule::alternate_PR;
  if (s == "p-f1") return RewardSchedule::P_plus_F1;
  if (s == "r-f1") return RewardSchedule::R_plus_F1;
  if (s == "f1") return RewardSchedule::F1_only;
  throw Error("unknown reward schedule: " + std::string(s));
}

/// Reward kind for a loop iteration. Pair schedules alternate per
/// iteration, first member on even iterations; alternate-pr starts with
/// recall so coverage is rewarded before adherence.
inline RewardKind current_reward(RewardSchedule schedule, std::size_t iteration) {
  const bool even = iteration % 2 == 0;
  switch (schedule) {
    case RewardSchedule::alternate_PR:
      return even ? RewardKind::rougeL_recall : RewardKind::rougeL_precision;
    case RewardSchedule::P_plus_F1:
      return even ? RewardKind::rougeL_precision : RewardKind::rougeL_f1;
    case RewardSchedule::R_plus_F1:
      return even ? RewardKind::rougeL_recall : RewardKind::rougeL_f1;
    case RewardSchedule::F1_only:
      return RewardKind::rougeL_f1;
  }
  return RewardKind::rougeL_f1;
}

inline double reward_value(RewardKind kind, const TokenSeq& output, const TokenSeq& highlights) {
  const auto m = rouge_l(output, highlights);
  switch (kind) {
    case RewardKind::rougeL_precision: return m.precision;
    case RewardKind::rougeL_recall: return m.recall;
    case RewardKind::rougeL_f1: return m.f1;
  }
  return m.f1;
}

struct RewardedSample {
  std::string id;
  std::string output;
  double reward = 0.0;
  std::string reward_token;
  std::size_t iteration = 0;
  RewardKind kind = RewardKind::rougeL_f1;
};

inline json to_json(const RewardedSample& s) {
  return json{{"id", s.id}, {"output", s.output}, {"reward", s.reward}, {"reward_token", s.reward_token},
              {"iteration", s.iteration}};
}

struct QuarkConfig {
  std::size_t quantile_count = 8;
  std::size_t samples_per_instance = 4;
  double temperature = 1.0;
  double kl_coefficient = 0.25;
  std::size_t iterations = 5;
  RewardSchedule reward_schedule = RewardSchedule::alternate_PR;
  std::size_t max_tokens = 32;
  int policy_order = 3;  // n-gram order of the per-token tables fitted by CountLearner
  TokenizerOptions tokenizer;

  void validate() const {
    if (quantile_count < 2) throw Error("quantile count must be >= 2");
    if (iterations < 1) throw Error("iterations must be >= 1");
    if (samples_per_instance < 1) throw Error("samples per instance must be >= 1");
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
    if (!(kl_coefficient >= 0.0)) throw Error("beta must be >= 0");
  }
};

inline json to_json(const QuarkConfig& c) {
  return json{{"quantiles", c.quantile_count},    {"samples_per_instance", c.samples_per_instance},
              {"temperature", c.temperature},     {"beta", c.kl_coefficient},
              {"iterations", c.iterations},       {"reward", to_string(c.reward_schedule)},
              {"max_tokens", c.max_tokens},       {"policy_order", c.policy_order},
              {"tokenizer", to_json(c.tokenizer)}};
}

// splitmix64 finalizer; combines the root seed with per-draw coordinates.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(mix_seed(root ^ mix_seed(a)) ^ b) ^ c);
}

/// Concatenated-highlight token targets, keyed by instance id.
inline std::map<std::string, TokenSeq> highlight_targets(const std::vector<CtrInstance>& data,
                                                         const TokenizerOptions& opts) {
  std::map<std::string, TokenSeq> out;
  for (const auto& inst : data) out.emplace(inst.id, tokenize(concat_highlights(inst), opts));
  return out;
}

struct ExploreResult {
  std::vector<RewardedSample> samples;
  std::vector<std::string> failures;
};

/// Draws samples_per_instance samples per instance, conditioned on the top
/// reward token after the first iteration, and scores them under the
/// iteration's reward kind against the concatenated highlights.
inline ExploreResult explore(const LanguageModel& policy, const std::vector<CtrInstance>& data, const QuarkConfig& cfg,
                             std::size_t iteration, std::uint64_t seed) {
  const auto kind = current_reward(cfg.reward_schedule, iteration);
  ExploreResult out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& inst = data[i];
    const auto target = tokenize(concat_highlights(inst), cfg.tokenizer);
    auto ctx = instance_context(inst);
    if (iteration > 0) ctx.control = reward_token(1);
    for (std::size_t j = 0; j < cfg.samples_per_instance; ++j) {
      try {
        const auto cont = policy.sample(ctx, cfg.temperature, derive_seed(seed, iteration, i, j), cfg.max_tokens);
        RewardedSample s;
        s.id = inst.id;
        s.output = join(cont.tokens, " ");
        s.reward = reward_value(kind, tokenize(s.output, cfg.tokenizer), target);
        s.iteration = iteration;
        s.kind = kind;
        out.samples.push_back(std::move(s));
      } catch (const std::exception& e) {
        out.failures.push_back(inst.id + "#" + std::to_string(j) + ": " + e.what());
      }
    }
  }
  return out;
}

/// Recomputes every stored reward under `kind`.
inline void rescore(std::vector<RewardedSample>& pool, RewardKind kind, const std::map<std::string, TokenSeq>& targets,
                    const TokenizerOptions& opts) {
  for (auto& s : pool) {
    if (s.kind == kind) continue;
    auto it = targets.find(s.id);
    if (it == targets.end()) throw Error("pool sample references unknown instance \"" + s.id + "\"");
    s.reward = reward_value(kind, tokenize(s.output, opts), it->second);
    s.kind = kind;
  }
}

struct QuantileGroup {
  std::string token;
  std::size_t size = 0;
  double min_reward = 0.0;
  double max_reward = 0.0;
};

/// Sorts the pool by reward (descending, stable) and labels K contiguous
/// groups "<RWD_1>" (best) .. "<RWD_K>". Sizes differ by at most one;
/// earlier groups take the remainder.
inline std::vector<QuantileGroup> quantize(std::vector<RewardedSample>& pool, std::size_t k) {
  if (k < 1) throw Error("quantile count must be >= 1");
  if (pool.size() < k) {
    throw Error("pool of size " + std::to_string(pool.size()) + " is smaller than K=" + std::to_string(k));
  }
  std::stable_sort(pool.begin(), pool.end(),
                   [](const RewardedSample& a, const RewardedSample& b) { return a.reward > b.reward; });
  const std::size_t base = pool.size() / k;
  const std::size_t extra = pool.size() % k;
  std::vector<QuantileGroup> groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t n = base + (g < extra ? 1 : 0);
    QuantileGroup q{reward_token(g + 1), n, pool[pos + n - 1].reward, pool[pos].reward};
    for (std::size_t i = pos; i < pos + n; ++i) pool[i].reward_token = q.token;
    groups.push_back(q);
    pos += n;
  }
  return groups;
}

/// KL(policy || base) in nats over two untruncated distributions.
inline double kl_penalty(const NextTokenDistribution& policy, const NextTokenDistribution& base) {
  if (policy.truncated || base.truncated) throw Error("KL needs untruncated distributions");
  for (const auto* d : {&policy, &base}) {
    double mass = 0.0;
    for (const auto& e : d->entries) mass += std::exp(e.logprob);
    if (std::abs(mass - 1.0) > 1e-6) throw Error("KL input is not normalized (mass " + std::to_string(mass) + ")");
  }
  std::map<std::string_view, double> q;
  for (const auto& e : base.entries) q[e.token] = e.logprob;
  double kl = 0.0;
  for (const auto& e : policy.entries) {
    const double p = std::exp(e.logprob);
    if (p == 0.0) continue;
    auto it = q.find(e.token);
    if (it == q.end() || std::isinf(it->second)) throw Error("KL support mismatch at token \"" + e.token + "\"");
    kl += p * (e.logprob - it->second);
  }
  return std::max(0.0, kl);  // clamps rounding noise around p == q
}

// ---------------------------------------------------------------------------
// learning

/// Count tables fitted for one reward token: one over every sample, and one
/// per conditioning source that has samples of its own.
struct RewardTables {
  std::shared_ptr<const NgramModel> global;
  std::map<std::string, std::shared_ptr<const NgramModel>> by_source;

  const NgramModel& for_source(const std::string& conditioning) const {
    auto it = by_source.find(conditioning);
    return it == by_source.end() ? *global : *it->second;
  }
};

/// Policy answering the LM contract with reward-token conditioning. For a
/// known control token the next-token distribution minimizes
///   KL(q || P_token) + beta * KL(q || P_base),
/// i.e. q(w) is proportional to P_token(w)^(1/(1+beta)) * P_base(w)^(beta/(1+beta))
/// over the base support, renormalized. Without a control token it is the base model.
class QuarkPolicy : public LanguageModel {
 public:
  QuarkPolicy(std::shared_ptr<const LanguageModel> base, std::map<std::string, RewardTables> tables, double beta)
      : base_(std::move(base)), tables_(std::move(tables)), beta_(beta) {}

  const LanguageModel& base() const { return *base_; }
  bool has_table(const std::string& token) const { return tables_.count(token) > 0; }

  NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const override {
    if (!ctx.control) return base_->next_distribution(ctx, top_k);
    if (!is_reward_token(*ctx.control)) throw Error("unregistered control token: " + *ctx.control);
    auto it = tables_.find(*ctx.control);
    if (it == tables_.end()) return base_->next_distribution(ctx, top_k);

    const auto& table = it->second.for_source(ctx.conditioning);
    LmContext base_ctx = ctx;
    base_ctx.control.reset();
    const auto base_dist = base_->next_distribution(base_ctx, kAllTokens);
    const double wt = 1.0 / (1.0 + beta_);
    const double wb = beta_ / (1.0 + beta_);
    std::vector<TokenLogprob> entries;
    entries.reserve(base_dist.entries.size());
    for (const auto& e : base_dist.entries) {
      if (std::isinf(e.logprob)) continue;
      // tokens the table never saw get its add-k floor
      entries.push_back({e.token, wt * std::log(table.probability(ctx.prefix, e.token)) + wb * e.logprob});
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& e : entries) mx = std::max(mx, e.logprob);
    double z = 0.0;
    for (const auto& e : entries) z += std::exp(e.logprob - mx);
    const double log_z = mx + std::log(z);
    for (auto& e : entries) e.logprob -= log_z;
    return finalize_distribution(std::move(entries), top_k);
  }

 private:
  std::shared_ptr<const LanguageModel> base_;
  std::map<std::string, RewardTables> tables_;
  double beta_;
};

/// Hook for the Learning step: maximize likelihood of the quantized pool
/// conditioned on reward tokens, staying close to the base model.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::shared_ptr<const LanguageModel> learn(const std::vector<RewardedSample>& pool,
                                                     const QuarkConfig& cfg) = 0;
};

/// Fits n-gram tables per reward token from the quantized pool and combines
/// them with the base model at weight beta (the KL-penalty analogue). Samples
/// whose id names a known instance also feed that instance's own table.
/// Labelled samples accumulate across calls, the count analogue of continuing
/// to fine-tune the previous policy rather than restarting from the base.
class CountLearner : public Learner {
 public:
  explicit CountLearner(std::shared_ptr<const LanguageModel> base, const std::vector<CtrInstance>& data = {},
                        double table_k = 0.01)
      : base_(std::move(base)), table_k_(table_k) {
    for (const auto& inst : data) sources_.emplace(inst.id, instance_context(inst).conditioning);
  }

  std::shared_ptr<const LanguageModel> learn(const std::vector<RewardedSample>& pool, const QuarkConfig& cfg) override {
    for (const auto& s : pool) {
      if (s.reward_token.empty()) throw Error("pool must be quantized before learning");
      auto toks = tokenize(s.output, cfg.tokenizer).tokens;
      if (auto it = sources_.find(s.id); it != sources_.end()) by_source_[s.reward_token][it->second].push_back(toks);
      by_token_[s.reward_token].push_back(std::move(toks));
    }
    NgramOptions opts;
    opts.order = cfg.policy_order;
    opts.k = table_k_;
    opts.count_eos = true;
    opts.tokenizer = cfg.tokenizer;
    const auto vocab = base_support();
    std::map<std::string, RewardTables> tables;
    for (const auto& [token, docs] : by_token_) {
      RewardTables t;
      t.global = std::make_shared<NgramModel>(opts, docs, vocab);
      for (const auto& [source, sdocs] : by_source_[token]) {
        t.by_source.emplace(source, std::make_shared<NgramModel>(opts, sdocs, vocab));
      }
      tables.emplace(token, std::move(t));
    }
    return std::make_shared<QuarkPolicy>(base_, std::move(tables), cfg.kl_coefficient);
  }

 private:
  // Tokens the base model can emit for a known source (or with no conditioning).
  std::set<std::string> base_support() const {
    std::set<std::string> vocab;
    std::vector<LmContext> probes(1);
    for (const auto& [id, cond] : sources_) probes.push_back(LmContext{cond, {}, std::nullopt});
    for (const auto& ctx : probes) {
      try {
        for (const auto& e : base_->next_distribution(ctx, kAllTokens).entries) vocab.insert(e.token);
      } catch (const Error&) {
        // a model may refuse an empty conditioning text
      }
    }
    return vocab;
  }

  std::shared_ptr<const LanguageModel> base_;
  std::map<std::string, std::string> sources_;  // instance id -> conditioning text
  double table_k_;
  std::map<std::string, std::vector<std::vector<std::string>>> by_token_;
  std::map<std::string, std::map<std::string, std::vector<std::vector<std::string>>>> by_source_;
};

// ---------------------------------------------------------------------------
// loop

struct IterationRow {
  std::size_t iteration = 0;  // completed cycles, 1-based
  RewardKind reward_kind = RewardKind::rougeL_f1;
  std::size_t pool_size = 0;
  double mean_top_reward = 0.0;
  double mean_kl = 0.0;
  double q1_min = 0.0;
  double qk_max = 0.0;
};

struct LoopReport {
  QuarkConfig config;
  std::uint64_t seed = 0;
  double baseline_reward = 0.0;  // base policy, no control token
  std::vector<IterationRow> rows;
  std::vector<RewardedSample> pool;
  std::vector<std::string> failures;
};

struct Evaluation {
  double mean_reward = 0.0;
  double mean_kl = 0.0;
};

/// Fresh samples from `policy` (conditioned on `control` if set) scored by
/// ROUGE-L F1 against the highlights; KL to `base` averaged over every
/// visited prefix.
inline Evaluation evaluate_policy(const LanguageModel& policy, const LanguageModel& base,
                                  const std::vector<CtrInstance>& data, const QuarkConfig& cfg,
                                  std::optional<std::string> control, std::uint64_t seed) {
  Evaluation ev;
  std::size_t n = 0;
  std::size_t kl_n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto target = tokenize(concat_highlights(data[i]), cfg.tokenizer);
    auto ctx = instance_context(data[i]);
    ctx.control = control;
    for (std::size_t j = 0; j < cfg.samples_per_instance; ++j) {
      const auto cont = policy.sample(ctx, cfg.temperature, derive_seed(seed, 0xE7A1, i, j), cfg.max_tokens);
      ev.mean_reward += reward_value(RewardKind::rougeL_f1, tokenize(join(cont.tokens, " "), cfg.tokenizer), target);
      ++n;
      LmContext step = ctx;
      for (std::size_t t = 0; t <= cont.tokens.size(); ++t) {
        LmContext base_ctx = step;
        base_ctx.control.reset();
        ev.mean_kl += kl_penalty(policy.next_distribution(step, kAllTokens), base.next_distribution(base_ctx, kAllTokens));
        ++kl_n;
        if (t < cont.tokens.size()) step.prefix.push_back(cont.tokens[t]);
      }
    }
  }
  if (n) ev.mean_reward /= static_cast<double>(n);
  if (kl_n) ev.mean_kl /= static_cast<double>(kl_n);
  return ev;
}

inline LoopReport run_loop(const std::vector<CtrInstance>& data, const QuarkConfig& cfg,
                           std::shared_ptr<const LanguageModel> base, Learner& learner, std::uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw Error("quark loop needs a non-empty dataset");
  LoopReport report;
  report.config = cfg;
  report.seed = seed;
  const auto targets = highlight_targets(data, cfg.tokenizer);

  report.baseline_reward = evaluate_policy(*base, *base, data, cfg, std::nullopt, derive_seed(seed, 0, 0, 1)).mean_reward;

  std::shared_ptr<const LanguageModel> policy = base;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto kind = current_reward(cfg.reward_schedule, it);
    rescore(report.pool, kind, targets, cfg.tokenizer);
    auto fresh = explore(*policy, data, cfg, it, seed);
    report.failures.insert(report.failures.end(), fresh.failures.begin(), fresh.failures.end());
    report.pool.insert(report.pool.end(), std::make_move_iterator(fresh.samples.begin()),
                       std::make_move_iterator(fresh.samples.end()));
    const auto groups = quantize(report.pool, cfg.quantile_count);
    policy = learner.learn(report.pool, cfg);

    const auto ev = evaluate_policy(*policy, *base, data, cfg, reward_token(1), derive_seed(seed, it + 1, 0, 1));
    IterationRow row;
    row.iteration = it + 1;
    row.reward_kind = kind;
    row.pool_size = report.pool.size();
    row.mean_top_reward = ev.mean_reward;
    row.mean_kl = ev.mean_kl;
    row.q1_min = groups.front().min_reward;
    row.qk_max = groups.back().max_reward;
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace ctr
