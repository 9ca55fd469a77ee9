#pragma once

// Lexical content-matching metrics: ROUGE-1/2/L, a resource-free METEOR
// variant, and micro precision/recall over annotated fact units.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/error.hpp"

namespace ctr {

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;
};

inline double harmonic_f1(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline Prf make_prf(double p, double r, bool degenerate = false) { return Prf{p, r, harmonic_f1(p, r), degenerate}; }

inline json to_json(const Prf& m) { return json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}}; }

namespace detail {

inline std::map<std::string, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<std::string, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) key.push_back('\x1f');
      key += toks[i + k];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

/// Clipped n-gram overlap. n must be 1 or 2.
inline Prf rouge_n(const TokenSeq& candidate, const TokenSeq& target, int n) {
  if (n != 1 && n != 2) throw Error("rouge_n supports n in {1,2}, got " + std::to_string(n));
  const auto un = static_cast<std::size_t>(n);
  const auto cand = detail::ngram_counts(candidate.tokens, un);
  const auto ref = detail::ngram_counts(target.tokens, un);
  std::size_t cand_total = 0;
  std::size_t ref_total = 0;
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    cand_total += c;
    if (auto it = ref.find(gram); it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& kv : ref) ref_total += kv.second;
  const double p = static_cast<double>(overlap) / static_cast<double>(std::max<std::size_t>(1, cand_total));
  const double r = static_cast<double>(overlap) / static_cast<double>(std::max<std::size_t>(1, ref_total));
  return make_prf(p, r, cand_total == 0 || ref_total == 0);
}

/// Word-level LCS length, O(|a||b|) time, O(min) memory.
inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto& outer = a.size() >= b.size() ? a : b;
  const auto& inner = a.size() >= b.size() ? b : a;
  std::vector<std::size_t> prev(inner.size() + 1, 0);
  std::vector<std::size_t> cur(inner.size() + 1, 0);
  for (const auto& x : outer) {
    for (std::size_t j = 1; j <= inner.size(); ++j) {
      cur[j] = (x == inner[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[inner.size()];
}

inline Prf rouge_l(const TokenSeq& candidate, const TokenSeq& target) {
  const std::size_t l = lcs_length(candidate.tokens, target.tokens);
  const double p = candidate.empty() ? 0.0 : static_cast<double>(l) / static_cast<double>(candidate.size());
  const double r = target.empty() ? 0.0 : static_cast<double>(l) / static_cast<double>(target.size());
  return make_prf(p, r, candidate.empty() || target.empty());
}

struct MeteorResult {
  double score = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Exact-match METEOR without synonym tables. Alignment is leftmost-greedy:
/// each candidate token, in order, takes the first unused equal target token.
/// With stem_stage set, a second pass aligns leftovers by Porter stem.
inline MeteorResult meteor_lite(const TokenSeq& candidate, const TokenSeq& target, bool stem_stage = false) {
  MeteorResult out;
  const auto& c = candidate.tokens;
  const auto& t = target.tokens;
  if (c.empty() || t.empty()) return out;

  std::vector<long> align(c.size(), -1);
  std::vector<bool> used(t.size(), false);
  auto pass = [&](auto&& key) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (align[i] >= 0) continue;
      const auto ki = key(c[i]);
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (!used[j] && key(t[j]) == ki) {
          align[i] = static_cast<long>(j);
          used[j] = true;
          break;
        }
      }
    }
  };
  pass([](const std::string& s) { return s; });
  if (stem_stage) pass([](const std::string& s) { return porter_stem(s); });

  long last = -2;
  std::size_t last_i = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (align[i] < 0) continue;
    ++out.matches;
    const bool continues = out.matches > 1 && last_i + 1 == i && last + 1 == align[i];
    if (!continues) ++out.chunks;
    last = align[i];
    last_i = i;
  }
  if (out.matches == 0) return out;

  const double m = static_cast<double>(out.matches);
  out.precision = m / static_cast<double>(c.size());
  out.recall = m / static_cast<double>(t.size());
  const double fmean = 10.0 * out.precision * out.recall / (out.recall + 9.0 * out.precision);
  const double frag = static_cast<double>(out.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  out.score = fmean * (1.0 - penalty);
  return out;
}

enum class ScoreTarget { highlights, reference };

inline std::string to_string(ScoreTarget t) { return t == ScoreTarget::highlights ? "highlights" : "reference"; }

inline ScoreTarget parse_score_target(std::string_view s) {
  if (s == "highlights") return ScoreTarget::highlights;
  if (s == "reference") return ScoreTarget::reference;
  throw Error("unknown score target: " + std::string(s));
}

struct MetricReport {
  Prf rouge1;
  Prf rouge2;
  Prf rougeL;
  Prf meteor;  // f1 slot holds the METEOR score
  ScoreTarget target = ScoreTarget::highlights;
  bool degenerate = false;
};

inline json to_json(const MetricReport& r) {
  return json{{"rouge1", to_json(r.rouge1)}, {"rouge2", to_json(r.rouge2)}, {"rougeL", to_json(r.rougeL)},
              {"meteor", to_json(r.meteor)}, {"target", to_string(r.target)}, {"degenerate", r.degenerate}};
}

inline MetricReport score_tokens(const TokenSeq& system, const TokenSeq& target, bool stem_stage = false) {
  MetricReport rep;
  rep.rouge1 = rouge_n(system, target, 1);
  rep.rouge2 = rouge_n(system, target, 2);
  rep.rougeL = rouge_l(system, target);
  const auto m = meteor_lite(system, target, stem_stage);
  rep.meteor = Prf{m.precision, m.recall, m.score, m.matches == 0};
  rep.degenerate = system.empty() || target.empty();
  return rep;
}

inline std::string target_text(const CtrInstance& instance, ScoreTarget against) {
  if (against == ScoreTarget::highlights) return concat_highlights(instance);
  if (!instance.reference) throw Error("instance \"" + instance.id + "\" has no reference summary");
  return *instance.reference;
}

/// Scores one system output against the instance's concatenated highlights
/// or its reference, tokenizing both sides with the same options.
inline MetricReport score_instance(std::string_view system, const CtrInstance& instance, ScoreTarget against,
                                   const TokenizerOptions& opts = {}) {
  const auto target = tokenize(target_text(instance, against), opts);
  auto rep = score_tokens(tokenize(system, opts), target, opts.stem);
  rep.target = against;
  return rep;
}

// ---------------------------------------------------------------------------
// fact-unit micro precision/recall

struct UnitAnnotation {
  std::string id;
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

inline Prf micro_pr(const std::vector<UnitAnnotation>& annotations) {
  if (annotations.empty()) throw Error("micro_pr needs at least one annotation");
  long tp = 0;
  long fp = 0;
  long fn = 0;
  for (const auto& a : annotations) {
    if (a.tp < 0 || a.fp < 0 || a.fn < 0) throw ValidationError("negative count in annotation \"" + a.id + "\"");
    tp += a.tp;
    fp += a.fp;
    fn += a.fn;
  }
  const bool p_zero = (tp + fp) == 0;
  const bool r_zero = (tp + fn) == 0;
  const double p = p_zero ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double r = r_zero ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  auto out = make_prf(p, r);
  out.degenerate = p_zero || r_zero || (p + r) == 0.0;
  return out;
}

inline std::vector<UnitAnnotation> load_annotations(const std::string& path) {
  std::vector<UnitAnnotation> out;
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (is_blank(lines[n])) continue;
    const std::string where = path + ":" + std::to_string(n + 1) + ": ";
    json j;
    try {
      j = json::parse(lines[n]);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + "malformed JSON: " + e.what());
    }
    for (const char* key : {"tp", "fp", "fn"}) {
      if (!j.contains(key) || !j[key].is_number_integer()) throw ValidationError(where + "missing integer \"" + key + "\"");
    }
    UnitAnnotation a;
    a.id = j.value("id", std::string{});
    a.tp = j["tp"].get<long>();
    a.fp = j["fp"].get<long>();
    a.fn = j["fn"].get<long>();
    if (a.tp < 0 || a.fp < 0 || a.fn < 0) throw ValidationError(where + "counts must be non-negative");
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace ctr
