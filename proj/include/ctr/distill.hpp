#pragma once

// Distillation support: few-shot prompt construction over highlight-marked
// passages, a minimal completion client, answer extraction, and the
// highlight-alignment audit used to judge generated training data.

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <future>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/error.hpp"
#include "ctr/markers.hpp"
#include "ctr/metrics.hpp"
#include "ctr/remote_lm.hpp"

namespace ctr {

enum class PromptVariant { modular, regular };

inline std::string to_string(PromptVariant v) { return v == PromptVariant::modular ? "modular" : "regular"; }

inline PromptVariant parse_prompt_variant(std::string_view s) {
  if (s == "modular") return PromptVariant::modular;
  if (s == "regular") return PromptVariant::regular;
  throw Error("unknown prompt variant: " + std::string(s));
}

inline constexpr std::string_view kListLeadIn = "Answer: The highlighted spans are:";
inline constexpr std::string_view kCombineLeadIn = "The highlights spans are combined as follows:";
inline constexpr std::string_view kAnswerLeadIn = "So, the answer is:";

/// A worked example: the passage, how its spans combine into sentences,
/// and the final reduction.
struct Exemplar {
  CtrInstance instance;
  std::vector<std::string> consolidation;
  std::string answer;
};

struct PromptConfig {
  PromptVariant variant = PromptVariant::modular;
  std::size_t exemplar_count = 2;
  bool list_highlights_for_instance = true;
};

inline json to_json(const PromptConfig& c) {
  return json{{"variant", to_string(c.variant)},
              {"exemplars", c.exemplar_count},
              {"list_highlights", c.list_highlights_for_instance}};
}

struct PromptTemplate {
  std::string instructions;
  std::vector<Exemplar> exemplars;
};

/// Exemplar JSONL: the dataset schema plus "consolidation" (array of
/// strings) and "answer" (string).
inline std::vector<Exemplar> load_exemplars(const std::string& path) {
  std::vector<Exemplar> out;
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (is_blank(lines[n])) continue;
    const std::string where = path + ":" + std::to_string(n + 1) + ": ";
    try {
      const auto j = json::parse(lines[n]);
      Exemplar ex;
      ex.instance = parse_instance(j);
      if (!j.contains("consolidation") || !j["consolidation"].is_array()) throw ValidationError("missing \"consolidation\" array");
      if (!j.contains("answer") || !j["answer"].is_string()) throw ValidationError("missing \"answer\" string");
      ex.consolidation = j["consolidation"].get<std::vector<std::string>>();
      ex.answer = j["answer"].get<std::string>();
      if (ex.consolidation.empty() || ex.answer.empty()) throw ValidationError("exemplar has an empty answer section");
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ValidationError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return out;
}

inline PromptTemplate load_prompt_template(const std::string& instructions_path, const std::string& exemplars_path) {
  PromptTemplate t;
  t.instructions = trim_utf8(read_text(instructions_path));
  t.exemplars = load_exemplars(exemplars_path);
  return t;
}

namespace detail {

inline void append_highlight_list(std::string& out, const CtrInstance& inst) {
  out += kListLeadIn;
  out += '\n';
  const auto spans = highlight_texts(inst.document, inst.highlights);
  for (std::size_t i = 0; i < spans.size(); ++i) out += " " + std::to_string(i + 1) + ". " + spans[i] + "\n";
}

}  // namespace detail

/// Instructions, then exemplars, then the marked instance. Modular exemplars
/// show listing, consolidation and the final answer; regular exemplars show
/// only the answer. With listing on (modular only), the instance's spans are
/// enumerated and the prompt stops at the consolidation lead-in.
inline std::string build_prompt(const CtrInstance& inst, const PromptTemplate& tmpl, const PromptConfig& cfg) {
  if (cfg.exemplar_count < 1) throw Error("exemplar count must be >= 1");
  if (tmpl.exemplars.size() < cfg.exemplar_count) {
    throw Error("prompt needs " + std::to_string(cfg.exemplar_count) + " exemplars but only " +
                std::to_string(tmpl.exemplars.size()) + " are available");
  }
  std::string out = tmpl.instructions;
  out += "\n\n";
  for (std::size_t e = 0; e < cfg.exemplar_count; ++e) {
    const auto& ex = tmpl.exemplars[e];
    out += "Example" + std::to_string(e + 1) + ":\n";
    out += "Passage: " + mark_highlights(ex.instance) + "\n";
    if (cfg.variant == PromptVariant::modular) {
      detail::append_highlight_list(out, ex.instance);
      out += kCombineLeadIn;
      out += '\n';
      for (const auto& line : ex.consolidation) out += line + "\n";
      out += kAnswerLeadIn;
      out += '\n';
      out += ex.answer + "\n";
    } else {
      out += "Answer: " + ex.answer + "\n";
    }
    out += '\n';
  }
  out += "Now your turn:\n";
  out += "Passage: " + mark_highlights(inst) + "\n";
  if (cfg.variant == PromptVariant::modular && cfg.list_highlights_for_instance) {
    detail::append_highlight_list(out, inst);
    out += kCombineLeadIn;
    out += '\n';
  } else {
    out += "Answer:";
  }
  return out;
}

struct Extraction {
  std::string text;
  bool flagged = false;  // answer marker missing in a modular completion
};

/// Modular completions: text after the last answer lead-in. Regular: the
/// whole completion.
inline Extraction extract_answer(std::string_view completion, PromptVariant variant) {
  if (variant == PromptVariant::regular) return {trim_utf8(completion), false};
  const auto pos = completion.rfind(kAnswerLeadIn);
  if (pos == std::string_view::npos) return {"", true};
  return {trim_utf8(completion.substr(pos + kAnswerLeadIn.size())), false};
}

struct GenerationParams {
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<long long> seed;
};

/// Minimal completion endpoint: POST {"prompt","temperature","max_tokens"}
/// returning {"text"}. The key, if any, goes out as a bearer token.
class CompletionClient {
 public:
  explicit CompletionClient(std::string url, std::string key = {}, RetryPolicy retry = {})
      : endpoint_(parse_endpoint(url)), key_(std::move(key)), retry_(retry) {}

  static CompletionClient from_env() {
    const char* url = std::getenv("CTR_GEN_URL");
    if (!url || !*url) throw Error("CTR_GEN_URL is not set");
    const char* key = std::getenv("CTR_GEN_KEY");
    return CompletionClient(url, key ? key : "");
  }

  std::string complete(const std::string& prompt, const GenerationParams& params) const {
    json body{{"prompt", prompt}, {"temperature", params.temperature}, {"max_tokens", params.max_tokens}};
    if (params.seed) body["seed"] = *params.seed;
    httplib::Headers headers;
    if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
    const auto reply = post_json(endpoint_, "", body, retry_, headers);
    if (!reply.contains("text") || !reply["text"].is_string()) throw TransportError("completion reply has no \"text\"");
    return reply["text"].get<std::string>();
  }

 private:
  Endpoint endpoint_;
  std::string key_;
  RetryPolicy retry_;
};

struct GeneratedSummary {
  std::string id;
  std::string prompt;
  std::string completion;  // raw transcript
  Extraction extraction;
  std::optional<std::string> error;
};

inline GeneratedSummary generate_summary(const CompletionClient& client, const std::string& id,
                                         const std::string& prompt, const GenerationParams& params,
                                         PromptVariant variant) {
  GeneratedSummary g;
  g.id = id;
  g.prompt = prompt;
  try {
    g.completion = client.complete(prompt, params);
    g.extraction = extract_answer(g.completion, variant);
  } catch (const TransportError& e) {
    g.error = e.what();
    g.extraction.flagged = true;
  }
  return g;
}

/// Generates for every (id, prompt) with at most `parallelism` requests in
/// flight. Output order follows input order.
inline std::vector<GeneratedSummary> generate_all(const CompletionClient& client,
                                                  const std::vector<std::pair<std::string, std::string>>& prompts,
                                                  const GenerationParams& params, PromptVariant variant,
                                                  std::size_t parallelism = 2) {
  parallelism = std::max<std::size_t>(1, parallelism);
  std::vector<GeneratedSummary> out(prompts.size());
  for (std::size_t begin = 0; begin < prompts.size(); begin += parallelism) {
    const std::size_t end = std::min(prompts.size(), begin + parallelism);
    std::vector<std::future<GeneratedSummary>> pending;
    for (std::size_t i = begin; i < end; ++i) {
      pending.push_back(std::async(std::launch::async, [&, i] {
        return generate_summary(client, prompts[i].first, prompts[i].second, params, variant);
      }));
    }
    for (std::size_t i = begin; i < end; ++i) out[i] = pending[i - begin].get();
  }
  return out;
}

// ---------------------------------------------------------------------------
// audits

/// ROUGE-L F1 between the concatenations of two highlight sets over one document.
inline double audit_alignment(const std::string& document, const std::vector<HighlightSpan>& gold,
                              const std::vector<HighlightSpan>& candidate, const TokenizerOptions& opts = {}) {
  const auto g = tokenize(concat_highlights(document, gold), opts);
  const auto c = tokenize(concat_highlights(document, candidate), opts);
  return rouge_l(c, g).f1;
}

struct AuditSummary {
  double mean_f1 = 0.0;
  std::size_t matched = 0;
  std::vector<std::string> missing;  // gold ids absent from the candidate set
};

inline AuditSummary audit_dataset(const std::vector<CtrInstance>& gold, const std::vector<CtrInstance>& candidate,
                                  const TokenizerOptions& opts = {}) {
  const auto idx = index_by_id(candidate);
  AuditSummary s;
  for (const auto& g : gold) {
    auto it = idx.find(g.id);
    if (it == idx.end()) {
      s.missing.push_back(g.id);
      continue;
    }
    if (it->second->document != g.document) throw ValidationError("document mismatch for id \"" + g.id + "\"");
    s.mean_f1 += audit_alignment(g.document, g.highlights, it->second->highlights, opts);
    ++s.matched;
  }
  if (s.matched == 0) throw Error("no ids shared between gold and candidate highlight sets");
  s.mean_f1 /= static_cast<double>(s.matched);
  return s;
}

struct ScoredGeneration {
  std::string id;
  std::string summary;
  double rougeL_f1 = 0.0;
};

struct FilterResult {
  std::vector<ScoredGeneration> kept;
  std::vector<ScoredGeneration> rejected;
};

/// Keeps generations whose ROUGE-L F1 against the concatenated highlights is
/// at least `threshold`.
inline FilterResult filter_generated(const std::vector<std::pair<CtrInstance, std::string>>& items, double threshold,
                                     const TokenizerOptions& opts = {}) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error("threshold must be in [0,1]");
  FilterResult r;
  for (const auto& [inst, summary] : items) {
    const double f1 = rouge_l(tokenize(summary, opts), tokenize(concat_highlights(inst), opts)).f1;
    ScoredGeneration s{inst.id, summary, f1};
    (f1 >= threshold ? r.kept : r.rejected).push_back(std::move(s));
  }
  return r;
}

}  // namespace ctr
