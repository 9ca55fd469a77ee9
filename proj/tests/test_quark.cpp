#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctr/quark.hpp"
#include "fixture_support.hpp"
#include "oracles.hpp"

using namespace ctr;

namespace {

std::vector<RewardedSample> pool_of(const std::vector<double>& rewards) {
  std::vector<RewardedSample> pool;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    RewardedSample s;
    s.id = "s" + std::to_string(i);
    s.reward = rewards[i];
    pool.push_back(s);
  }
  return pool;
}

NextTokenDistribution dist(const std::vector<std::pair<std::string, double>>& probs) {
  NextTokenDistribution d;
  for (const auto& [t, p] : probs) d.entries.push_back({t, std::log(p)});
  return d;
}

std::vector<CtrInstance> quark_corpus() {
  return load_dataset(fixtures::path("quark/corpus.jsonl")).instances;
}

}  // namespace

TEST(Schedule, Examples) {
  EXPECT_EQ(current_reward(RewardSchedule::alternate_PR, 0), RewardKind::rougeL_recall);
  EXPECT_EQ(current_reward(RewardSchedule::alternate_PR, 3), RewardKind::rougeL_precision);
  for (std::size_t i : {0u, 1u, 7u}) EXPECT_EQ(current_reward(RewardSchedule::F1_only, i), RewardKind::rougeL_f1);
  EXPECT_EQ(current_reward(RewardSchedule::P_plus_F1, 0), RewardKind::rougeL_precision);
  EXPECT_EQ(current_reward(RewardSchedule::P_plus_F1, 1), RewardKind::rougeL_f1);
  EXPECT_EQ(current_reward(RewardSchedule::R_plus_F1, 0), RewardKind::rougeL_recall);
  EXPECT_EQ(current_reward(RewardSchedule::R_plus_F1, 1), RewardKind::rougeL_f1);
}

TEST(Schedule, AlternationNeverRepeats) {
  for (std::size_t i = 0; i < 1000; ++i) {
    EXPECT_NE(current_reward(RewardSchedule::alternate_PR, i), current_reward(RewardSchedule::alternate_PR, i + 1));
  }
}

TEST(Schedule, NamesRoundTrip) {
  for (auto s : {RewardSchedule::alternate_PR, RewardSchedule::P_plus_F1, RewardSchedule::R_plus_F1,
                 RewardSchedule::F1_only}) {
    EXPECT_EQ(parse_reward_schedule(to_string(s)), s);
  }
  EXPECT_THROW(parse_reward_schedule("ppo"), Error);
}

TEST(Reward, IdentityScoresOne) {
  const auto t = tokenize("the key clause");
  for (auto k : {RewardKind::rougeL_precision, RewardKind::rougeL_recall, RewardKind::rougeL_f1}) {
    EXPECT_EQ(reward_value(k, t, t), 1.0);
  }
}

TEST(Quantize, Example) {
  auto pool = pool_of({0.9, 0.1, 0.5, 0.7, 0.3, 0.2, 0.8, 0.6});
  const auto groups = quantize(pool, 4);
  ASSERT_EQ(groups.size(), 4u);
  const std::vector<std::vector<double>> want = {{0.9, 0.8}, {0.7, 0.6}, {0.5, 0.3}, {0.2, 0.1}};
  for (std::size_t g = 0; g < 4; ++g) {
    EXPECT_EQ(groups[g].token, reward_token(g + 1));
    EXPECT_EQ(groups[g].size, 2u);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_EQ(pool[2 * g + i].reward, want[g][i]);
      EXPECT_EQ(pool[2 * g + i].reward_token, "<RWD_" + std::to_string(g + 1) + ">");
    }
  }
}

TEST(Quantize, TiesKeepInsertionOrder) {
  auto pool = pool_of({0.5, 0.5, 0.5, 0.5});
  quantize(pool, 2);
  EXPECT_EQ(pool[0].id, "s0");
  EXPECT_EQ(pool[1].id, "s1");
  EXPECT_EQ(pool[2].id, "s2");
  EXPECT_EQ(pool[3].id, "s3");
  EXPECT_EQ(pool[1].reward_token, "<RWD_1>");
  EXPECT_EQ(pool[2].reward_token, "<RWD_2>");
}

TEST(Quantize, RemainderGoesToEarlierGroups) {
  auto pool = pool_of({1, 2, 3, 4, 5, 6, 7});
  const auto groups = quantize(pool, 3);
  EXPECT_EQ(groups[0].size, 3u);
  EXPECT_EQ(groups[1].size, 2u);
  EXPECT_EQ(groups[2].size, 2u);
  EXPECT_THROW(quantize(pool, 8), Error);
  EXPECT_EQ(QuarkConfig{}.quantile_count, 8u);
}

TEST(Quantize, PartitionLawsOnRandomPools) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 8 + rng() % 505;
    const std::size_t k = std::size_t{2} << (rng() % 3);
    std::vector<double> rewards(n);
    // coarse values so ties are common
    for (auto& r : rewards) r = std::round(u(rng) * 10) / 10;
    auto pool = pool_of(rewards);
    const auto groups = quantize(pool, k);
    std::size_t total = 0, lo = n, hi = 0;
    for (std::size_t g = 0; g < k; ++g) {
      total += groups[g].size;
      lo = std::min(lo, groups[g].size);
      hi = std::max(hi, groups[g].size);
      if (g + 1 < k) {
        EXPECT_GE(groups[g].min_reward, groups[g + 1].max_reward);
      }
    }
    EXPECT_EQ(total, n);
    EXPECT_LE(hi - lo, 1u);
  }
}

TEST(Kl, HandExampleAndIdentity) {
  const auto p = dist({{"a", 0.5}, {"b", 0.5}});
  const auto q = dist({{"a", 0.25}, {"b", 0.75}});
  EXPECT_NEAR(kl_penalty(p, q), 0.1438, 1e-4);
  EXPECT_NEAR(kl_penalty(p, q), oracle::kl({0.5, 0.5}, {0.25, 0.75}), 1e-12);
  EXPECT_NEAR(kl_penalty(p, p), 0.0, 1e-9);
}

TEST(Kl, SupportMismatchAndTruncationAreErrors) {
  const auto p = dist({{"a", 0.5}, {"b", 0.5}});
  const auto q = dist({{"a", 1.0}});
  EXPECT_THROW(kl_penalty(p, q), Error);
  auto t = p;
  t.truncated = true;
  EXPECT_THROW(kl_penalty(t, p), Error);
  // 0 * ln(0/q) contributes nothing
  EXPECT_NEAR(kl_penalty(q, p), std::log(2.0), 1e-12);
}

TEST(Kl, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng() % 8;
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sp += p[i] = u(rng);
      sq += q[i] = u(rng);
    }
    std::vector<std::pair<std::string, double>> dp, dq;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] /= sp;
      q[i] /= sq;
      dp.emplace_back(std::string(1, static_cast<char>('a' + i)), p[i]);
      dq.emplace_back(std::string(1, static_cast<char>('a' + i)), q[i]);
    }
    const double v = kl_penalty(dist(dp), dist(dq));
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(v, oracle::kl(p, q), 1e-9);
  }
}

TEST(Explore, PoolGrowsBySamplesTimesInstances) {
  auto data = quark_corpus();
  data.resize(3);
  QuarkConfig cfg;
  cfg.samples_per_instance = 1;
  const auto base = fixtures::quark_base(data);
  const auto r = explore(*base, data, cfg, 0, 5);
  EXPECT_EQ(r.samples.size(), 3u);
  EXPECT_TRUE(r.failures.empty());
  for (const auto& s : r.samples) {
    EXPECT_GE(s.reward, 0.0);
    EXPECT_LE(s.reward, 1.0);
    EXPECT_EQ(s.kind, RewardKind::rougeL_recall);
  }
  const auto again = explore(*base, data, cfg, 0, 5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(to_json(r.samples[i]), to_json(again.samples[i]));
}

TEST(Learn, BetaZeroReproducesThePool) {
  const auto base = train_ngram({"a a a b c", "c b a"});
  CountLearner learner(base);
  QuarkConfig cfg;
  cfg.kl_coefficient = 0.0;
  cfg.policy_order = 4;
  RewardedSample s;
  s.id = "z";
  s.output = "a a a";
  s.reward = 1.0;
  s.reward_token = reward_token(1);
  const auto policy = learner.learn({s}, cfg);
  LmContext ctx;
  ctx.control = reward_token(1);
  const auto c = policy->greedy_rollout(ctx, 10);
  EXPECT_EQ(c.tokens, (std::vector<std::string>{"a", "a", "a"}));
  EXPECT_TRUE(c.terminated);
}

TEST(Learn, LargeBetaRecoversTheBase) {
  const auto data = quark_corpus();
  const auto base = fixtures::quark_base(data);
  QuarkConfig cfg;
  cfg.kl_coefficient = 1e12;
  auto pool = explore(*base, data, cfg, 0, 3).samples;
  quantize(pool, cfg.quantile_count);
  CountLearner learner(base, data);
  const auto policy = learner.learn(pool, cfg);
  for (const auto& inst : data) {
    auto ctx = instance_context(inst);
    const auto want = base->next_distribution(ctx, kAllTokens);
    ctx.control = reward_token(1);
    const auto got = policy->next_distribution(ctx, kAllTokens);
    EXPECT_LT(kl_penalty(got, want), 1e-9);
  }
}

TEST(Learn, RequiresQuantizedPoolAndIsDeterministic) {
  const auto base = train_ngram({"a b c"});
  QuarkConfig cfg;
  RewardedSample s;
  s.id = "z";
  s.output = "a b";
  CountLearner l1(base);
  EXPECT_THROW(l1.learn({s}, cfg), Error);
  s.reward_token = reward_token(1);
  CountLearner l2(base), l3(base);
  LmContext ctx;
  ctx.control = reward_token(1);
  const auto a = l2.learn({s}, cfg)->next_distribution(ctx, kAllTokens);
  const auto b = l3.learn({s}, cfg)->next_distribution(ctx, kAllTokens);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    EXPECT_EQ(a.entries[i].token, b.entries[i].token);
    EXPECT_EQ(a.entries[i].logprob, b.entries[i].logprob);
  }
}

TEST(Policy, WithoutControlTokenIsTheBase) {
  const auto base = train_ngram({"a b c"});
  RewardedSample s{"z", "c c", 1.0, reward_token(1), 0, RewardKind::rougeL_f1};
  const auto policy = CountLearner(base).learn({s}, QuarkConfig{});
  const auto want = base->next_distribution(LmContext{}, kAllTokens);
  const auto got = policy->next_distribution(LmContext{}, kAllTokens);
  EXPECT_EQ(kl_penalty(got, want), 0.0);
  LmContext bad;
  bad.control = "<STYLE>";
  EXPECT_THROW(policy->next_distribution(bad, 1), Error);
}

TEST(Loop, OneIterationShape) {
  QuarkConfig cfg;
  cfg.iterations = 1;
  const auto r = fixtures::quark_run(quark_corpus(), cfg, 0);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].iteration, 1u);
  EXPECT_EQ(r.rows[0].pool_size, 12u * cfg.samples_per_instance);
  EXPECT_GE(r.rows[0].q1_min, r.rows[0].qk_max);
}

TEST(Loop, PoolPersistsAndRewardsFollowTheSchedule) {
  QuarkConfig cfg;
  cfg.iterations = 3;
  const auto r = fixtures::quark_run(quark_corpus(), cfg, 4);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    EXPECT_EQ(r.rows[i].pool_size, (i + 1) * 12 * cfg.samples_per_instance);
    EXPECT_EQ(r.rows[i].reward_kind, current_reward(cfg.reward_schedule, i));
    EXPECT_GE(r.rows[i].mean_kl, 0.0);
  }
  // the last rescoring used the final iteration's kind for every sample
  for (const auto& s : r.pool) {
    EXPECT_EQ(s.kind, r.rows.back().reward_kind);
    EXPECT_GE(s.reward, 0.0);
    EXPECT_LE(s.reward, 1.0);
  }
}

TEST(Loop, DeterministicUnderSeed) {
  QuarkConfig cfg;
  cfg.iterations = 2;
  const auto a = fixtures::quark_run(quark_corpus(), cfg, 9);
  const auto b = fixtures::quark_run(quark_corpus(), cfg, 9);
  EXPECT_EQ(a.baseline_reward, b.baseline_reward);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].mean_top_reward, b.rows[i].mean_top_reward);
    EXPECT_EQ(a.rows[i].mean_kl, b.rows[i].mean_kl);
  }
  ASSERT_EQ(a.pool.size(), b.pool.size());
  for (std::size_t i = 0; i < a.pool.size(); ++i) EXPECT_EQ(to_json(a.pool[i]), to_json(b.pool[i]));
}

TEST(Loop, ImprovesOnTheCalibratedFixture) {
  const auto cal = json::parse(read_text(fixtures::path("quark/calibration.json")));
  QuarkConfig cfg;
  cfg.iterations = cal["iterations"].get<std::size_t>();
  cfg.quantile_count = cal["quantiles"].get<std::size_t>();
  const auto r = fixtures::quark_run(quark_corpus(), cfg, cal["seed"].get<std::uint64_t>());
  EXPECT_NEAR(r.baseline_reward, cal["baseline_reward"].get<double>(), 1e-6);
  EXPECT_NEAR(r.rows.back().mean_top_reward, cal["final_reward"].get<double>(), 1e-6);
  EXPECT_GT(r.rows.back().mean_top_reward, r.baseline_reward + cal["margin"].get<double>());
}

TEST(Config, Validation) {
  QuarkConfig c;
  c.quantile_count = 1;
  EXPECT_THROW(c.validate(), Error);
  c = QuarkConfig{};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), Error);
  c = QuarkConfig{};
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), Error);
}
