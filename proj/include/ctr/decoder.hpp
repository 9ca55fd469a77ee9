#pragma once

// Highlight-sensitive lookahead beam search. Every expansion candidate is
// scored as
//
//   f = log P(prefix | x) + lambda * g(prefix ++ greedy_rollout(prefix, l), x_h)
//
// where x_h is the concatenated highlights and g is ROUGE-L F1 (or METEOR).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/error.hpp"
#include "ctr/lm.hpp"
#include "ctr/markers.hpp"
#include "ctr/metrics.hpp"

namespace ctr {

enum class GMetric { rougeL_f1, meteor };

inline std::string to_string(GMetric g) { return g == GMetric::rougeL_f1 ? "rougeL" : "meteor"; }

inline GMetric parse_g_metric(std::string_view s) {
  if (s == "rougeL" || s == "rougeL_f1") return GMetric::rougeL_f1;
  if (s == "meteor") return GMetric::meteor;
  throw Error("unknown g metric: " + std::string(s));
}

struct DecoderConfig {
  std::size_t beam_size = 8;
  double lambda = 1.0;
  std::size_t lookahead = 16;
  GMetric g_metric = GMetric::rougeL_f1;
  std::size_t max_output_tokens = 64;
  bool length_normalize_logprob = false;
  std::size_t expand_top_k = 0;  // candidates per hypothesis; 0 means beam_size
  TokenizerOptions tokenizer;

  std::size_t top_k() const { return expand_top_k ? expand_top_k : beam_size; }

  void validate() const {
    if (beam_size < 1) throw Error("beam size must be >= 1");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (max_output_tokens < 1) throw Error("max output tokens must be >= 1");
  }
};

inline json to_json(const DecoderConfig& c) {
  return json{{"beam", c.beam_size},
              {"lambda", c.lambda},
              {"lookahead", c.lookahead},
              {"g", to_string(c.g_metric)},
              {"max_tokens", c.max_output_tokens},
              {"length_normalize", c.length_normalize_logprob},
              {"top_k", c.top_k()},
              {"tokenizer", to_json(c.tokenizer)}};
}

struct Hypothesis {
  std::vector<std::string> tokens;  // EOS never stored
  double logprob_sum = 0.0;
  double lookahead_score = 0.0;
  double score = 0.0;  // combined f
  bool finished = false;
};

/// Total order used for pruning: f, then logprob, then token strings.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.logprob_sum != b.logprob_sum) return a.logprob_sum > b.logprob_sum;
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  return a.finished && !b.finished;
}

/// g(., x_h): scores generated tokens against the highlight target.
class HighlightScorer {
 public:
  HighlightScorer(std::string_view highlights, GMetric metric, TokenizerOptions opts)
      : target_(tokenize(highlights, opts)), metric_(metric), opts_(opts) {}

  double operator()(const std::vector<std::string>& tokens) const {
    // re-tokenize so model tokens are normalized the same way as the target
    const auto cand = tokenize(join(tokens, " "), opts_);
    if (metric_ == GMetric::rougeL_f1) return rouge_l(cand, target_).f1;
    return meteor_lite(cand, target_, opts_.stem).score;
  }

 private:
  TokenSeq target_;
  GMetric metric_;
  TokenizerOptions opts_;
};

inline double combined_score(const Hypothesis& h, const DecoderConfig& cfg) {
  double base = h.logprob_sum;
  if (cfg.length_normalize_logprob) base /= static_cast<double>(std::max<std::size_t>(1, h.tokens.size() + (h.finished ? 1 : 0)));
  return base + cfg.lambda * h.lookahead_score;
}

namespace detail {

inline Hypothesis extend(const Hypothesis& parent, const TokenLogprob& entry) {
  Hypothesis h;
  h.tokens = parent.tokens;
  h.logprob_sum = parent.logprob_sum + entry.logprob;
  if (entry.token == kEos) {
    h.finished = true;
  } else {
    h.tokens.push_back(entry.token);
  }
  return h;
}

inline bool needs_rollout(const Hypothesis& h, const DecoderConfig& cfg) {
  return cfg.lambda > 0.0 && cfg.lookahead > 0 && !h.finished;
}

inline void finish(Hypothesis& h, const Continuation* rollout, const HighlightScorer& g, const DecoderConfig& cfg) {
  if (rollout && !rollout->tokens.empty()) {
    auto full = h.tokens;
    full.insert(full.end(), rollout->tokens.begin(), rollout->tokens.end());
    h.lookahead_score = g(full);
  } else {
    h.lookahead_score = g(h.tokens);
  }
  h.score = combined_score(h, cfg);
}

}  // namespace detail

/// Scores a single expansion of `parent` by `entry` (one greedy rollout of
/// length l from the extended prefix; none when lambda is 0).
inline Hypothesis score_candidate(const LanguageModel& model, const LmContext& ctx, const Hypothesis& parent,
                                  const TokenLogprob& entry, const DecoderConfig& cfg, const HighlightScorer& g) {
  if (parent.finished) throw Error("finished hypotheses are never extended");
  auto h = detail::extend(parent, entry);
  if (detail::needs_rollout(h, cfg)) {
    const auto roll = model.greedy_rollout(ctx.extended(h.tokens), cfg.lookahead);
    detail::finish(h, &roll, g, cfg);
  } else {
    detail::finish(h, nullptr, g, cfg);
  }
  return h;
}

struct StepTrace {
  std::size_t step = 0;
  std::vector<Hypothesis> beam;
  std::size_t rollouts = 0;
  std::size_t candidates = 0;
};

inline json to_json(const StepTrace& s) {
  json beam = json::array();
  for (const auto& h : s.beam) {
    beam.push_back({{"tokens", h.tokens}, {"logprob", h.logprob_sum}, {"g", h.lookahead_score}, {"f", h.score}});
  }
  return json{{"step", s.step}, {"beam", beam}, {"rollouts", s.rollouts}};
}

struct DecodeResult {
  std::string text;
  Hypothesis best;
  std::vector<StepTrace> trace;
};

/// Conditioning context for an instance: the document with inline markers.
inline LmContext instance_context(const CtrInstance& inst) {
  LmContext ctx;
  ctx.conditioning = mark_highlights(inst);
  return ctx;
}

inline DecodeResult decode(const LanguageModel& model, const LmContext& ctx, std::string_view highlights,
                           const DecoderConfig& cfg) {
  cfg.validate();
  const HighlightScorer g(highlights, cfg.g_metric, cfg.tokenizer);
  std::vector<Hypothesis> beam(1);
  detail::finish(beam.front(), nullptr, g, cfg);
  DecodeResult result;

  for (std::size_t step = 1; step <= cfg.max_output_tokens; ++step) {
    if (std::all_of(beam.begin(), beam.end(), [](const Hypothesis& h) { return h.finished; })) break;

    std::vector<Hypothesis> pool;
    for (const auto& h : beam) {
      if (h.finished) {
        pool.push_back(h);
        continue;
      }
      const auto dist = model.next_distribution(ctx.extended(h.tokens), cfg.top_k());
      for (const auto& e : dist.entries) pool.push_back(detail::extend(h, e));
    }
    if (pool.empty()) throw Error("decoder has no viable candidates");

    StepTrace st;
    st.step = step;
    std::vector<LmContext> roll_ctx;
    std::vector<std::size_t> roll_idx;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (detail::needs_rollout(pool[i], cfg)) {
        roll_ctx.push_back(ctx.extended(pool[i].tokens));
        roll_idx.push_back(i);
      }
    }
    const auto rolls = model.greedy_rollouts(roll_ctx, cfg.lookahead);
    st.rollouts = rolls.size();
    std::vector<const Continuation*> by_pool(pool.size(), nullptr);
    for (std::size_t r = 0; r < roll_idx.size(); ++r) by_pool[roll_idx[r]] = &rolls[r];
    for (std::size_t i = 0; i < pool.size(); ++i) detail::finish(pool[i], by_pool[i], g, cfg);
    st.candidates = pool.size();

    std::sort(pool.begin(), pool.end(), better);
    if (pool.size() > cfg.beam_size) pool.resize(cfg.beam_size);
    beam = std::move(pool);
    if (step == cfg.max_output_tokens) {
      for (auto& h : beam) h.finished = true;
    }
    st.beam = beam;
    result.trace.push_back(std::move(st));
  }

  result.best = *std::min_element(beam.begin(), beam.end(), better);
  result.text = join(result.best.tokens, " ");
  return result;
}

inline DecodeResult decode(const LanguageModel& model, const CtrInstance& inst, const DecoderConfig& cfg) {
  return decode(model, instance_context(inst), concat_highlights(inst), cfg);
}

// ---------------------------------------------------------------------------
// sweeps

struct SweepGrid {
  std::vector<std::size_t> beams{8};
  std::vector<double> lambdas{1.0};
  std::vector<std::size_t> lookaheads{16};
  std::vector<GMetric> metrics{GMetric::rougeL_f1};
};

struct SweepRow {
  DecoderConfig config;
  double rouge1_f1 = 0.0;
  double rouge2_f1 = 0.0;
  double rougeL_f1 = 0.0;
  double meteor = 0.0;
  double runtime_ms = 0.0;
  std::size_t scored = 0;
  std::vector<std::string> failures;  // "id: message"
};

using ModelProvider = std::function<std::shared_ptr<const LanguageModel>(const CtrInstance&)>;

inline std::vector<SweepRow> sweep(const ModelProvider& models, const std::vector<CtrInstance>& data,
                                   const DecoderConfig& base, const SweepGrid& grid) {
  if (grid.beams.empty() || grid.lambdas.empty() || grid.lookaheads.empty() || grid.metrics.empty()) {
    throw Error("sweep grid must have at least one value per axis");
  }
  std::vector<SweepRow> rows;
  for (auto k : grid.beams) {
    for (auto lambda : grid.lambdas) {
      for (auto l : grid.lookaheads) {
        for (auto g : grid.metrics) {
          SweepRow row;
          row.config = base;
          row.config.beam_size = k;
          row.config.lambda = lambda;
          row.config.lookahead = l;
          row.config.g_metric = g;
          const auto t0 = std::chrono::steady_clock::now();
          for (const auto& inst : data) {
            try {
              const auto out = decode(*models(inst), inst, row.config);
              const auto rep = score_instance(out.text, inst, ScoreTarget::highlights, row.config.tokenizer);
              row.rouge1_f1 += rep.rouge1.f1;
              row.rouge2_f1 += rep.rouge2.f1;
              row.rougeL_f1 += rep.rougeL.f1;
              row.meteor += rep.meteor.f1;
              ++row.scored;
            } catch (const std::exception& e) {
              row.failures.push_back(inst.id + ": " + e.what());
            }
          }
          row.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
          if (row.scored) {
            const auto n = static_cast<double>(row.scored);
            row.rouge1_f1 /= n;
            row.rouge2_f1 /= n;
            row.rougeL_f1 /= n;
            row.meteor /= n;
          }
          rows.push_back(std::move(row));
        }
      }
    }
  }
  return rows;
}

}  // namespace ctr
