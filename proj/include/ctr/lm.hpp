#pragma once

// Language-model contract used by the decoder and the Quark loop, plus two
// in-process implementations: an add-k n-gram model with backoff and a
// table-driven scripted model for tests and fixtures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/error.hpp"
#include "ctr/markers.hpp"

namespace ctr {

inline const std::string kEos = "</s>";
inline const std::string kBos = "<s>";

/// "<RWD_i>", i = 1 is the highest-reward quantile.
inline std::string reward_token(std::size_t quantile) { return "<RWD_" + std::to_string(quantile) + ">"; }

inline bool is_reward_token(std::string_view s) {
  if (s.size() < 7 || s.substr(0, 5) != "<RWD_" || s.back() != '>') return false;
  const auto digits = s.substr(5, s.size() - 6);
  return !digits.empty() && digits[0] != '0' &&
         std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; });
}

struct LmContext {
  std::string conditioning;
  std::vector<std::string> prefix;
  std::optional<std::string> control;

  /// Control token prefixed to the conditioning text, as a model sees it.
  std::string conditioned_text() const { return control ? *control + " " + conditioning : conditioning; }

  LmContext extended(const std::vector<std::string>& more) const {
    LmContext c = *this;
    c.prefix.insert(c.prefix.end(), more.begin(), more.end());
    return c;
  }
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;  // natural log
};

struct NextTokenDistribution {
  std::vector<TokenLogprob> entries;
  bool truncated = false;

  const TokenLogprob* find(std::string_view token) const {
    for (const auto& e : entries)
      if (e.token == token) return &e;
    return nullptr;
  }
};

inline constexpr std::size_t kAllTokens = std::numeric_limits<std::size_t>::max();

/// Sorts by logprob descending (ties: token ascending) and keeps top_k.
inline NextTokenDistribution finalize_distribution(std::vector<TokenLogprob> entries, std::size_t top_k) {
  if (top_k == 0) throw Error("top_k must be >= 1");
  std::sort(entries.begin(), entries.end(), [](const TokenLogprob& a, const TokenLogprob& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.token < b.token;
  });
  NextTokenDistribution d;
  d.truncated = entries.size() > top_k;
  if (d.truncated) entries.resize(top_k);
  d.entries = std::move(entries);
  return d;
}

struct Continuation {
  std::vector<std::string> tokens;  // EOS excluded
  bool terminated = false;          // stopped on EOS rather than the length cap
};

/// Uniform double in [0,1) from the top 53 bits of one engine draw.
inline double unit_uniform(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

/// Index drawn from softmax(logprob / temperature) over the given entries.
inline std::size_t draw_index(const std::vector<TokenLogprob>& entries, double temperature, std::mt19937_64& gen) {
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& e : entries) hi = std::max(hi, e.logprob / temperature);
  std::vector<double> w(entries.size());
  double total = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    w[i] = std::exp(entries[i].logprob / temperature - hi);
    total += w[i];
  }
  const double u = unit_uniform(gen) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return i;
  }
  return w.size() - 1;
}

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  /// Top-k next tokens for the context, including kEos when the model can stop.
  virtual NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const = 0;

  /// Appends the argmax token until EOS or max_tokens.
  virtual Continuation greedy_rollout(const LmContext& ctx, std::size_t max_tokens) const {
    Continuation out;
    LmContext cur = ctx;
    while (out.tokens.size() < max_tokens) {
      const auto d = next_distribution(cur, 1);
      if (d.entries.empty()) throw Error("model returned an empty distribution");
      const auto& best = d.entries.front().token;
      if (best == kEos) {
        out.terminated = true;
        break;
      }
      out.tokens.push_back(best);
      cur.prefix.push_back(best);
    }
    return out;
  }

  /// Ancestral sampling at the given temperature; a pure function of its arguments.
  virtual Continuation sample(const LmContext& ctx, double temperature, std::uint64_t seed,
                              std::size_t max_tokens) const {
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
    std::mt19937_64 gen(seed);
    Continuation out;
    LmContext cur = ctx;
    while (out.tokens.size() < max_tokens) {
      const auto d = next_distribution(cur, kAllTokens);
      if (d.entries.empty()) throw Error("model returned an empty distribution");
      const auto& tok = d.entries[draw_index(d.entries, temperature, gen)].token;
      if (tok == kEos) {
        out.terminated = true;
        break;
      }
      out.tokens.push_back(tok);
      cur.prefix.push_back(tok);
    }
    return out;
  }

  /// One greedy rollout per context, results in input order.
  virtual std::vector<Continuation> greedy_rollouts(const std::vector<LmContext>& contexts,
                                                    std::size_t max_tokens) const {
    std::vector<Continuation> out;
    out.reserve(contexts.size());
    for (const auto& c : contexts) out.push_back(greedy_rollout(c, max_tokens));
    return out;
  }
};

// ---------------------------------------------------------------------------
// n-gram model

struct NgramOptions {
  int order = 2;
  double k = 1.0;
  // When set, every document contributes one EOS event after its last token.
  // Otherwise EOS only receives smoothing mass.
  bool count_eos = false;
  TokenizerOptions tokenizer;
};

/// Add-k smoothed n-gram model. Histories never seen in training back off
/// to the next lower order, down to the unigram table. The conditioning text
/// is ignored; only the generated prefix matters.
class NgramModel : public LanguageModel {
 public:
  /// `extra_vocab` widens the support (and the smoothing denominator) beyond
  /// the training tokens.
  NgramModel(NgramOptions opts, std::vector<std::vector<std::string>> corpus,
             const std::set<std::string>& extra_vocab = {})
      : opts_(opts) {
    if (opts_.order < 1 || opts_.order > 6) throw Error("n-gram order must be in [1,6]");
    if (!(opts_.k > 0.0)) throw Error("add-k constant must be > 0");
    if (corpus.empty()) throw Error("cannot train an n-gram model on an empty corpus");
    tables_.resize(static_cast<std::size_t>(opts_.order));
    for (const auto& doc : corpus) add_document(doc);
    vocab_.insert(extra_vocab.begin(), extra_vocab.end());
    vocab_.insert(kEos);
  }

  const NgramOptions& options() const { return opts_; }
  const std::set<std::string>& vocabulary() const { return vocab_; }

  /// Raw count of `token` after `history` (history length = level - 1).
  double count(const std::vector<std::string>& history, const std::string& token) const {
    const auto& table = tables_.at(history.size());
    auto it = table.find(key(history));
    if (it == table.end()) return 0.0;
    auto jt = it->second.next.find(token);
    return jt == it->second.next.end() ? 0.0 : jt->second;
  }

  double history_total(const std::vector<std::string>& history) const {
    const auto& table = tables_.at(history.size());
    auto it = table.find(key(history));
    return it == table.end() ? 0.0 : it->second.total;
  }

  /// Longest usable history for the prefix: BOS-padded, backed off until seen.
  std::vector<std::string> history_for(const std::vector<std::string>& prefix) const {
    const auto n = static_cast<std::size_t>(opts_.order);
    std::vector<std::string> padded(n > 1 ? n - 1 : 0, kBos);
    padded.insert(padded.end(), prefix.begin(), prefix.end());
    for (std::size_t len = n - 1; len > 0; --len) {
      std::vector<std::string> h(padded.end() - static_cast<std::ptrdiff_t>(len), padded.end());
      if (history_total(h) > 0.0) return h;
    }
    return {};
  }

  double probability(const std::vector<std::string>& prefix, const std::string& token) const {
    const auto h = history_for(prefix);
    const double v = static_cast<double>(vocab_.size());
    return (count(h, token) + opts_.k) / (history_total(h) + opts_.k * v);
  }

  NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const override {
    const auto h = history_for(ctx.prefix);
    const double denom = history_total(h) + opts_.k * static_cast<double>(vocab_.size());
    std::vector<TokenLogprob> entries;
    entries.reserve(vocab_.size());
    for (const auto& w : vocab_) entries.push_back({w, std::log((count(h, w) + opts_.k) / denom)});
    return finalize_distribution(std::move(entries), top_k);
  }

 private:
  struct Row {
    double total = 0.0;
    std::map<std::string, double> next;
  };

  static std::string key(const std::vector<std::string>& h) { return join(h, "\x1f"); }

  void add_document(const std::vector<std::string>& doc) {
    const auto n = static_cast<std::size_t>(opts_.order);
    std::vector<std::string> padded(n > 1 ? n - 1 : 0, kBos);
    padded.insert(padded.end(), doc.begin(), doc.end());
    if (opts_.count_eos) padded.push_back(kEos);
    for (std::size_t pos = n - 1; pos < padded.size(); ++pos) {
      const auto& w = padded[pos];
      if (w != kEos) vocab_.insert(w);
      for (std::size_t len = 0; len < n; ++len) {
        std::vector<std::string> h(padded.begin() + static_cast<std::ptrdiff_t>(pos - len),
                                   padded.begin() + static_cast<std::ptrdiff_t>(pos));
        auto& row = tables_[len][key(h)];
        row.total += 1.0;
        row.next[w] += 1.0;
      }
    }
  }

  NgramOptions opts_;
  std::vector<std::map<std::string, Row>> tables_;  // index = history length
  std::set<std::string> vocab_;
};

inline std::shared_ptr<NgramModel> train_ngram(const std::vector<std::string>& texts, NgramOptions opts = {}) {
  if (texts.empty()) throw Error("cannot train an n-gram model on an empty corpus");
  if (opts.order < 1 || opts.order > 3) throw Error("n-gram order must be 1, 2 or 3");
  std::vector<std::vector<std::string>> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) docs.push_back(tokenize(t, opts.tokenizer).tokens);
  return std::make_shared<NgramModel>(opts, std::move(docs));
}

/// Source-conditioned n-gram model. The conditioning document's own counts
/// are interpolated with a corpus model:
///   P(w | h, x) = mu * P_x(w | h) + (1 - mu) * P_corpus(w | h)
/// Highlight markers in the conditioning text are stripped first. Documents
/// seen at construction are precomputed; others are fitted per call.
class DocumentNgramModel : public LanguageModel {
 public:
  DocumentNgramModel(NgramOptions opts, const std::vector<std::string>& documents, double mu = 0.9)
      : opts_(opts), mu_(mu) {
    if (!(mu_ >= 0.0 && mu_ <= 1.0)) throw Error("document weight mu must be in [0,1]");
    if (documents.empty()) throw Error("cannot train an n-gram model on an empty corpus");
    std::vector<std::vector<std::string>> docs;
    for (const auto& d : documents) docs.push_back(tokenize(d, opts_.tokenizer).tokens);
    corpus_ = std::make_shared<NgramModel>(opts_, docs);
    for (std::size_t i = 0; i < documents.size(); ++i) {
      if (!per_doc_.count(documents[i])) {
        per_doc_.emplace(documents[i], std::make_shared<NgramModel>(opts_, std::vector<std::vector<std::string>>{docs[i]}));
      }
    }
  }

  const NgramModel& corpus_model() const { return *corpus_; }
  double mu() const { return mu_; }

  NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const override {
    const auto doc_model = model_for(strip_markers(ctx.conditioning));
    std::map<std::string, double> p;
    for (const auto& e : corpus_->next_distribution(ctx, kAllTokens).entries) p[e.token] += (1.0 - mu_) * std::exp(e.logprob);
    for (const auto& e : doc_model->next_distribution(ctx, kAllTokens).entries) p[e.token] += mu_ * std::exp(e.logprob);
    std::vector<TokenLogprob> entries;
    entries.reserve(p.size());
    for (const auto& [w, pw] : p) {
      if (pw > 0.0) entries.push_back({w, std::log(pw)});
    }
    return finalize_distribution(std::move(entries), top_k);
  }

 private:
  std::shared_ptr<const NgramModel> model_for(const std::string& document) const {
    auto it = per_doc_.find(document);
    if (it != per_doc_.end()) return it->second;
    const auto toks = tokenize(document, opts_.tokenizer).tokens;
    if (toks.empty()) return corpus_;
    return std::make_shared<NgramModel>(opts_, std::vector<std::vector<std::string>>{toks});
  }

  NgramOptions opts_;
  double mu_;
  std::shared_ptr<const NgramModel> corpus_;
  std::map<std::string, std::shared_ptr<const NgramModel>> per_doc_;
};

// ---------------------------------------------------------------------------
// scripted model

/// Deterministic table model. Rows are keyed by the generated prefix joined
/// with single spaces; the row "*" answers every prefix without its own row.
class ScriptedModel : public LanguageModel {
 public:
  using Row = std::vector<std::pair<std::string, double>>;  // (token, probability)

  explicit ScriptedModel(std::map<std::string, Row> rows) {
    for (auto& [prefix, row] : rows) {
      double sum = 0.0;
      std::vector<TokenLogprob> entries;
      for (const auto& [tok, p] : row) {
        if (p < 0.0 || p > 1.0) throw ValidationError("scripted probability out of range for prefix \"" + prefix + "\"");
        sum += p;
        if (p > 0.0) entries.push_back({tok, std::log(p)});
      }
      if (std::abs(sum - 1.0) > 1e-6) {
        throw ValidationError("scripted row for prefix \"" + prefix + "\" sums to " + std::to_string(sum));
      }
      rows_.emplace(prefix, std::move(entries));
    }
  }

  /// {"": [["B", 0.6], ["A", 0.4]], "*": [["</s>", 1.0]]}
  static std::shared_ptr<ScriptedModel> from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("scripted model must be a JSON object of rows");
    std::map<std::string, Row> rows;
    for (const auto& [prefix, arr] : j.items()) {
      Row row;
      for (const auto& e : arr) row.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
      rows.emplace(prefix, std::move(row));
    }
    return std::make_shared<ScriptedModel>(std::move(rows));
  }

  NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const override {
    auto it = rows_.find(join(ctx.prefix, " "));
    if (it == rows_.end()) it = rows_.find("*");
    if (it == rows_.end()) throw Error("scripted model has no row for prefix \"" + join(ctx.prefix, " ") + "\"");
    return finalize_distribution(it->second, top_k);
  }

 private:
  std::map<std::string, std::vector<TokenLogprob>> rows_;
};

}  // namespace ctr
