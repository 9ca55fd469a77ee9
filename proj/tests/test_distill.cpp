#include <gtest/gtest.h>

#include "ctr/distill.hpp"
#include "fixture_support.hpp"

using namespace ctr;

namespace {

PromptTemplate shipped_template() {
  return load_prompt_template(CTR_DATA_DIR "/prompts/instructions.txt", CTR_DATA_DIR "/prompts/exemplars.jsonl");
}

CtrInstance oscar() { return load_dataset(fixtures::path("prompt_instance.jsonl")).instances.at(0); }

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(Prompt, ModularGolden) {
  const auto prompt = build_prompt(oscar(), shipped_template(), PromptConfig{});
  EXPECT_EQ(prompt, read_text(fixtures::path("prompt_modular_2.golden.txt")));
}

TEST(Prompt, DefaultsAreModularTwoListed) {
  const PromptConfig c;
  EXPECT_EQ(c.variant, PromptVariant::modular);
  EXPECT_EQ(c.exemplar_count, 2u);
  EXPECT_TRUE(c.list_highlights_for_instance);
}

TEST(Prompt, RegularVariantShowsOnlyAnswers) {
  const auto prompt = build_prompt(oscar(), shipped_template(), PromptConfig{PromptVariant::regular, 2, true});
  EXPECT_EQ(count(prompt, std::string(kAnswerLeadIn)), 0u);
  EXPECT_EQ(count(prompt, std::string(kCombineLeadIn)), 0u);
  EXPECT_EQ(count(prompt, "Answer: "), 2u);
  EXPECT_EQ(prompt.substr(prompt.size() - 7), "Answer:");
}

TEST(Prompt, ExemplarCountAndOrder) {
  const auto tmpl = shipped_template();
  ASSERT_GE(tmpl.exemplars.size(), 5u);
  const auto prompt = build_prompt(oscar(), tmpl, PromptConfig{PromptVariant::modular, 5, true});
  std::size_t last = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto pos = prompt.find("Example" + std::to_string(i + 1) + ":\nPassage: " + mark_highlights(tmpl.exemplars[i].instance));
    ASSERT_NE(pos, std::string::npos) << i;
    EXPECT_GT(pos, last);
    last = pos;
  }
  EXPECT_EQ(count(prompt, std::string(kAnswerLeadIn)), 5u);
  EXPECT_THROW(build_prompt(oscar(), tmpl, PromptConfig{PromptVariant::modular, 6, true}), Error);
  EXPECT_THROW(build_prompt(oscar(), tmpl, PromptConfig{PromptVariant::modular, 0, true}), Error);
}

TEST(Prompt, ListingOffStopsAtTheAnswerCue) {
  const auto prompt = build_prompt(oscar(), shipped_template(), PromptConfig{PromptVariant::modular, 2, false});
  EXPECT_EQ(prompt.substr(prompt.size() - 7), "Answer:");
  EXPECT_EQ(count(prompt, std::string(kListLeadIn)), 2u);
}

TEST(Prompt, Pure) {
  const auto tmpl = shipped_template();
  EXPECT_EQ(build_prompt(oscar(), tmpl, PromptConfig{}), build_prompt(oscar(), tmpl, PromptConfig{}));
}

TEST(Extract, Examples) {
  const auto ok = extract_answer("step 2...\nSo, the answer is:\nX.", PromptVariant::modular);
  EXPECT_EQ(ok.text, "X.");
  EXPECT_FALSE(ok.flagged);
  const auto last = extract_answer("So, the answer is: A\nSo, the answer is:\nB", PromptVariant::modular);
  EXPECT_EQ(last.text, "B");
  const auto none = extract_answer("no marker here", PromptVariant::modular);
  EXPECT_TRUE(none.flagged);
  EXPECT_EQ(none.text, "");
  EXPECT_EQ(extract_answer("  whole thing \n", PromptVariant::regular).text, "whole thing");
}

TEST(Generate, LoopbackPipelineReproducesHighlights) {
  fixtures::FakeGenerator server;
  const CompletionClient client(server.url());
  const auto data = load_dataset(fixtures::path("audit/gold.jsonl")).instances;
  const auto tmpl = shipped_template();
  std::vector<std::pair<std::string, std::string>> prompts;
  for (const auto& inst : data) prompts.emplace_back(inst.id, build_prompt(inst, tmpl, PromptConfig{}));
  const auto gens = generate_all(client, prompts, GenerationParams{}, PromptVariant::modular, 2);
  ASSERT_EQ(gens.size(), data.size());
  std::vector<std::pair<CtrInstance, std::string>> items;
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(gens[i].id, data[i].id);
    EXPECT_FALSE(gens[i].extraction.flagged);
    EXPECT_EQ(gens[i].extraction.text, concat_highlights(data[i]));
    items.emplace_back(data[i], gens[i].extraction.text);
  }
  const auto split = filter_generated(items, 1.0);
  EXPECT_EQ(split.kept.size(), data.size());
}

TEST(Generate, MissingMarkerIsFlaggedNotDropped) {
  fixtures::FakeGenerator server;
  const CompletionClient client(server.url());
  const auto g = generate_summary(client, "n", "Passage: <highlight_start>NOANSWER<highlight_end>\n", {},
                                  PromptVariant::modular);
  EXPECT_TRUE(g.extraction.flagged);
  EXPECT_FALSE(g.error.has_value());
  EXPECT_FALSE(g.completion.empty());
}

TEST(Generate, TransportFailureIsRecorded) {
  const CompletionClient client("http://127.0.0.1:1", "", RetryPolicy{2, std::chrono::milliseconds(1)});
  const auto g = generate_summary(client, "x", "prompt", {}, PromptVariant::modular);
  EXPECT_TRUE(g.error.has_value());
  EXPECT_TRUE(g.extraction.flagged);
}

TEST(Audit, HandValuesOnFixture) {
  const auto gold = load_dataset(fixtures::path("audit/gold.jsonl")).instances;
  const auto cand = load_dataset(fixtures::path("audit/candidate.jsonl")).instances;
  // a0: LCS 3 of 4 candidate / 8 gold tokens; a1: 6 of 7 / 6; a2: 1 of 6 / 7
  const std::vector<double> want = {0.5, 12.0 / 13.0, 2.0 / 13.0};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(audit_alignment(gold[i].document, gold[i].highlights, cand[i].highlights), want[i], 1e-12) << i;
  }
  const auto s = audit_dataset(gold, cand);
  EXPECT_EQ(s.matched, 3u);
  EXPECT_NEAR(s.mean_f1, 41.0 / 78.0, 1e-12);
}

TEST(Audit, IdentityAndDisjoint) {
  const std::string doc = "alpha beta gamma delta";
  EXPECT_EQ(audit_alignment(doc, {{0, 10}}, {{0, 10}}), 1.0);
  EXPECT_EQ(audit_alignment(doc, {{0, 5}}, {{11, 16}}), 0.0);
  EXPECT_EQ(audit_alignment(doc, {{0, 10}}, {{6, 16}}), audit_alignment(doc, {{6, 16}}, {{0, 10}}));
}

TEST(Audit, MissingIdsAndMismatchedDocuments) {
  auto gold = load_dataset(fixtures::path("audit/gold.jsonl")).instances;
  auto cand = load_dataset(fixtures::path("audit/candidate.jsonl")).instances;
  cand.pop_back();
  const auto s = audit_dataset(gold, cand);
  EXPECT_EQ(s.missing, std::vector<std::string>{"a2"});
  cand[0].document = "different";
  EXPECT_THROW(audit_dataset(gold, cand), ValidationError);
}

TEST(Filter, Thresholds) {
  const auto data = load_dataset(fixtures::path("audit/gold.jsonl")).instances;
  std::vector<std::pair<CtrInstance, std::string>> items = {
      {data[0], concat_highlights(data[0])}, {data[1], "Kazuo Ishiguro"}, {data[2], "unrelated words"}};
  EXPECT_EQ(filter_generated(items, 0.0).kept.size(), 3u);
  const auto strict = filter_generated(items, 1.0);
  ASSERT_EQ(strict.kept.size(), 1u);
  EXPECT_EQ(strict.kept[0].id, "a0");
  const auto mid = filter_generated(items, 0.5);
  for (const auto& s : mid.kept) EXPECT_GE(s.rougeL_f1, 0.5);
  for (const auto& s : mid.rejected) EXPECT_LT(s.rougeL_f1, 0.5);
  EXPECT_EQ(mid.kept.size() + mid.rejected.size(), 3u);
  EXPECT_THROW(filter_generated(items, 1.5), Error);
}
