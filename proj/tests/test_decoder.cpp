#include <gtest/gtest.h>

#include <cmath>

#include "ctr/decoder.hpp"
#include "fixture_support.hpp"
#include "oracles.hpp"

using namespace ctr;

namespace {

DecoderConfig config(std::size_t k, double lambda, std::size_t l) {
  DecoderConfig c;
  c.beam_size = k;
  c.lambda = lambda;
  c.lookahead = l;
  c.max_output_tokens = 12;
  return c;
}

// k=1 expands only the top token, so A is never scored there unless the
// per-hypothesis expansion is widened
std::string decode_flip(double lambda, std::size_t k = 2, std::size_t top_k = 0) {
  const auto m = fixtures::flip_model();
  auto cfg = config(k, lambda, 1);
  cfg.expand_top_k = top_k;
  return decode(*m, LmContext{}, "A", cfg).text;
}

}  // namespace

TEST(ScoreCandidate, ScriptedExample) {
  const auto m = fixtures::flip_model();
  const HighlightScorer g("A", GMetric::rougeL_f1, {});
  const auto cfg = config(2, 1.0, 1);
  const Hypothesis root;
  const auto a = score_candidate(*m, LmContext{}, root, {"A", std::log(0.4)}, cfg, g);
  const auto b = score_candidate(*m, LmContext{}, root, {"B", std::log(0.6)}, cfg, g);
  EXPECT_NEAR(a.score, std::log(0.4) + 1.0, 1e-12);
  EXPECT_NEAR(b.score, std::log(0.6), 1e-12);
  EXPECT_EQ(a.lookahead_score, 1.0);
  EXPECT_EQ(b.lookahead_score, 0.0);
}

TEST(ScoreCandidate, LambdaZeroIsPureLogprob) {
  const auto m = fixtures::branching_model();
  const HighlightScorer g("a x q", GMetric::rougeL_f1, {});
  const auto h = score_candidate(*m, LmContext{}, Hypothesis{}, {"a", std::log(0.5)}, config(4, 0.0, 5), g);
  EXPECT_EQ(h.score, h.logprob_sum);
}

TEST(ScoreCandidate, PrefixAlreadyMatchingScoresOne) {
  const auto m = ScriptedModel::from_json(json::parse(R"({"*": [["</s>",1.0]]})"));
  const HighlightScorer g("red fox", GMetric::rougeL_f1, {});
  Hypothesis parent;
  parent.tokens = {"red"};
  const auto h = score_candidate(*m, LmContext{}, parent, {"fox", 0.0}, config(1, 1.0, 4), g);
  EXPECT_EQ(h.lookahead_score, 1.0);
}

TEST(ScoreCandidate, FinishedHypothesesAreNotExtended) {
  const auto m = fixtures::flip_model();
  const HighlightScorer g("A", GMetric::rougeL_f1, {});
  Hypothesis done;
  done.finished = true;
  EXPECT_THROW(score_candidate(*m, LmContext{}, done, {"A", 0.0}, config(1, 1.0, 1), g), Error);
}

TEST(Decode, ScriptedExampleFlipsWithLambda) {
  EXPECT_EQ(decode_flip(0.0), "B");
  EXPECT_EQ(decode_flip(1.0), "A");
  EXPECT_EQ(decode_flip(1.0, 1), "B");
  EXPECT_EQ(decode_flip(1.0, 1, 2), "A");
}

TEST(Decode, FlipHappensAtTheAnalyticThreshold) {
  const double star = std::log(0.6 / 0.4);
  EXPECT_EQ(decode_flip(star - 0.01), "B");
  EXPECT_EQ(decode_flip(star + 0.01), "A");
  for (std::size_t k : {2u, 8u}) {
    EXPECT_EQ(decode_flip(star - 1e-6, k), "B");
    EXPECT_EQ(decode_flip(star + 1e-6, k), "A");
  }
}

TEST(Decode, LambdaZeroMatchesPlainBeamSearchOnScriptedModels) {
  for (const auto& m : {fixtures::branching_model(), fixtures::flip_model()}) {
    for (std::size_t k : {1u, 2u, 4u, 8u}) {
      const auto got = decode(*m, LmContext{}, "a x", config(k, 0.0, 4));
      EXPECT_EQ(got.best.tokens, oracle::beam_search(*m, LmContext{}, k, 12)) << "k=" << k;
    }
  }
}

TEST(Decode, LambdaZeroMatchesPlainBeamSearchOnNgramModels) {
  const auto suite = fixtures::distractor_scripted();
  const auto ngram = fixtures::distractor_ngram(suite.data);
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    for (const auto& inst : suite.data) {
      auto cfg = config(k, 0.0, 4);
      cfg.max_output_tokens = 8;
      const auto got = decode(*ngram, inst, cfg);
      EXPECT_EQ(got.best.tokens, oracle::beam_search(*ngram, instance_context(inst), k, 8)) << inst.id << " k=" << k;
    }
  }
}

TEST(Decode, LambdaZeroMatchesPlainBeamSearchOnDistractorScripts) {
  const auto suite = fixtures::distractor_scripted();
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    for (const auto& inst : suite.data) {
      const auto m = suite.models(inst);
      EXPECT_EQ(decode(*m, inst, config(k, 0.0, 4)).best.tokens,
                oracle::beam_search(*m, instance_context(inst), k, 12))
          << inst.id << " k=" << k;
    }
  }
}

TEST(Decode, LookaheadHelpsOnDistractorSuite) {
  const auto suite = fixtures::distractor_scripted();
  ASSERT_EQ(suite.data.size(), 20u);
  const double plain = fixtures::mean_rouge_l(suite, config(8, 0.0, 16));
  const double guided = fixtures::mean_rouge_l(suite, config(8, 2.0, 16));
  EXPECT_GT(guided, plain);
}

TEST(Decode, TraceRespectsRolloutBudgetAndBounds) {
  const auto m = fixtures::branching_model();
  const auto cfg = config(2, 1.0, 3);
  const auto r = decode(*m, LmContext{}, "a x q", cfg);
  ASSERT_FALSE(r.trace.empty());
  for (const auto& st : r.trace) {
    EXPECT_LE(st.rollouts, cfg.beam_size * cfg.top_k());
    EXPECT_LE(st.beam.size(), cfg.beam_size);
    for (const auto& h : st.beam) {
      EXPECT_GE(h.lookahead_score, 0.0);
      EXPECT_LE(h.lookahead_score, 1.0);
      EXPECT_NEAR(h.score, h.logprob_sum + cfg.lambda * h.lookahead_score, 1e-12);
    }
  }
}

TEST(Decode, ZeroLookaheadScoresThePrefixOnly) {
  const auto m = fixtures::branching_model();
  const auto r = decode(*m, LmContext{}, "a x", config(3, 1.0, 0));
  const HighlightScorer g("a x", GMetric::rougeL_f1, {});
  for (const auto& st : r.trace) {
    EXPECT_EQ(st.rollouts, 0u);
    for (const auto& h : st.beam) EXPECT_EQ(h.lookahead_score, g(h.tokens));
  }
}

TEST(Decode, WiderBeamNeverFindsWorseLogprob) {
  const auto suite = fixtures::distractor_scripted();
  const auto ngram = fixtures::distractor_ngram(suite.data);
  for (const auto& inst : suite.data) {
    auto narrow = config(1, 0.0, 0);
    auto wide = config(8, 0.0, 0);
    narrow.max_output_tokens = wide.max_output_tokens = 6;
    EXPECT_LE(decode(*ngram, inst, narrow).best.logprob_sum, decode(*ngram, inst, wide).best.logprob_sum + 1e-12);
  }
}

TEST(Decode, Deterministic) {
  const auto suite = fixtures::distractor_scripted();
  const auto ngram = fixtures::distractor_ngram(suite.data);
  const auto cfg = config(4, 1.0, 6);
  for (const auto& inst : suite.data) {
    const auto a = decode(*ngram, inst, cfg);
    const auto b = decode(*ngram, inst, cfg);
    EXPECT_EQ(a.text, b.text);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(to_json(a.trace[i]), to_json(b.trace[i]));
  }
}

TEST(Decode, MeteorLookaheadAlsoRuns) {
  auto cfg = config(2, 1.0, 1);
  cfg.g_metric = GMetric::meteor;
  const auto m = fixtures::flip_model();
  EXPECT_EQ(decode(*m, LmContext{}, "A", cfg).text, "A");
  EXPECT_EQ(parse_g_metric("rougeL"), GMetric::rougeL_f1);
  EXPECT_THROW(parse_g_metric("bleu"), Error);
}

TEST(Decode, RejectsInvalidConfig) {
  const auto m = fixtures::flip_model();
  auto cfg = config(0, 1.0, 1);
  EXPECT_THROW(decode(*m, LmContext{}, "A", cfg), Error);
  cfg = config(1, -1.0, 1);
  EXPECT_THROW(decode(*m, LmContext{}, "A", cfg), Error);
}

TEST(Sweep, ShapeAndSingleCellEquivalence) {
  const auto suite = fixtures::distractor_scripted();
  SweepGrid grid;
  grid.beams = {2, 8};
  grid.lambdas = {0.0, 2.0};
  grid.lookaheads = {16};
  const auto rows = sweep(suite.models, suite.data, config(8, 1.0, 16), grid);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.scored, 20u);
    EXPECT_TRUE(r.failures.empty());
  }
  // rows are ordered k-major, then lambda
  EXPECT_GE(rows[3].rougeL_f1, rows[2].rougeL_f1);
  EXPECT_NEAR(rows[3].rougeL_f1, fixtures::mean_rouge_l(suite, config(8, 2.0, 16)), 1e-12);

  SweepGrid empty;
  empty.beams.clear();
  EXPECT_THROW(sweep(suite.models, suite.data, config(8, 1.0, 16), empty), Error);
}

TEST(Sweep, FailedCellsAreRecorded) {
  const auto suite = fixtures::distractor_scripted();
  ModelProvider broken = [](const CtrInstance& inst) -> std::shared_ptr<const LanguageModel> {
    if (inst.id == "x03") throw Error("model unavailable");
    return fixtures::flip_model();
  };
  const auto rows = sweep(broken, suite.data, config(2, 1.0, 1), SweepGrid{});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].scored, 19u);
  ASSERT_EQ(rows[0].failures.size(), 1u);
  EXPECT_EQ(rows[0].failures[0], "x03: model unavailable");
}
