#pragma once

// Reference implementations used only by tests. Each one is written from the
// metric or search definition directly, without sharing code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ctr/lm.hpp"

namespace oracle {

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) {
      num = 0;
      den = 1;
    }
    const auto g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

inline Rational add(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
inline Rational mul(Rational a, Rational b) { return {a.num * b.num, a.den * b.den}; }
inline Rational div(Rational a, Rational b) { return b.num == 0 ? Rational{} : Rational{a.num * b.den, a.den * b.num}; }

struct ExactPrf {
  Rational p, r, f;
};

inline ExactPrf make(Rational p, Rational r) {
  const Rational sum = add(p, r);
  return {p, r, sum.num == 0 ? Rational{} : div(mul(Rational{2, 1}, mul(p, r)), sum)};
}

using Seq = std::vector<std::string>;

inline std::vector<Seq> grams(const Seq& s, std::size_t n) {
  std::vector<Seq> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace_back(s.begin() + i, s.begin() + i + n);
  return out;
}

/// Clipped n-gram overlap by naive counting: each distinct candidate n-gram
/// contributes min(count in candidate, count in target).
inline ExactPrf rouge_n(const Seq& cand, const Seq& target, std::size_t n) {
  const auto c = grams(cand, n);
  const auto t = grams(target, n);
  std::int64_t overlap = 0;
  std::vector<Seq> done;
  for (const auto& g : c) {
    if (std::find(done.begin(), done.end(), g) != done.end()) continue;
    done.push_back(g);
    const auto cc = std::count(c.begin(), c.end(), g);
    const auto tc = std::count(t.begin(), t.end(), g);
    overlap += std::min(cc, tc);
  }
  const Rational p = c.empty() ? Rational{} : Rational{overlap, static_cast<std::int64_t>(c.size())};
  const Rational r = t.empty() ? Rational{} : Rational{overlap, static_cast<std::int64_t>(t.size())};
  return make(p, r);
}

inline bool is_subsequence(const Seq& sub, const Seq& of) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < of.size() && j < sub.size(); ++i) {
    if (of[i] == sub[j]) ++j;
  }
  return j == sub.size();
}

/// Longest common subsequence by enumerating every subsequence of `a`.
inline std::size_t lcs(const Seq& a, const Seq& b) {
  std::size_t best = 0;
  const std::uint32_t limit = 1u << a.size();
  for (std::uint32_t mask = 0; mask < limit; ++mask) {
    const auto bits = static_cast<std::size_t>(__builtin_popcount(mask));
    if (bits <= best) continue;
    Seq sub;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask & (1u << i)) sub.push_back(a[i]);
    if (is_subsequence(sub, b)) best = bits;
  }
  return best;
}

inline ExactPrf rouge_l(const Seq& cand, const Seq& target) {
  const auto l = static_cast<std::int64_t>(lcs(cand, target));
  const Rational p = cand.empty() ? Rational{} : Rational{l, static_cast<std::int64_t>(cand.size())};
  const Rational r = target.empty() ? Rational{} : Rational{l, static_cast<std::int64_t>(target.size())};
  return make(p, r);
}

/// Textbook beam search on summed log-probabilities. Hypotheses ending in EOS
/// are kept as complete and compete with open ones on the same score.
/// Ties: higher score, then lexicographically smaller tokens, then complete first.
inline Seq beam_search(const ctr::LanguageModel& model, const ctr::LmContext& ctx, std::size_t k, std::size_t max_len) {
  struct Hyp {
    Seq toks;
    double lp = 0.0;
    bool done = false;
  };
  auto order = [](const Hyp& a, const Hyp& b) {
    if (a.lp != b.lp) return a.lp > b.lp;
    if (a.toks != b.toks) return a.toks < b.toks;
    return a.done && !b.done;
  };
  std::vector<Hyp> beam{Hyp{}};
  for (std::size_t step = 0; step < max_len; ++step) {
    bool open = false;
    for (const auto& h : beam) open = open || !h.done;
    if (!open) break;
    std::vector<Hyp> next;
    for (const auto& h : beam) {
      if (h.done) {
        next.push_back(h);
        continue;
      }
      ctr::LmContext c = ctx;
      c.prefix = h.toks;
      auto entries = model.next_distribution(c, ctr::kAllTokens).entries;
      // per-hypothesis expansion limited to the k most likely tokens
      std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        return a.logprob != b.logprob ? a.logprob > b.logprob : a.token < b.token;
      });
      if (entries.size() > k) entries.resize(k);
      for (const auto& e : entries) {
        Hyp n = h;
        n.lp += e.logprob;
        if (e.token == ctr::kEos) {
          n.done = true;
        } else {
          n.toks.push_back(e.token);
        }
        next.push_back(std::move(n));
      }
    }
    std::sort(next.begin(), next.end(), order);
    if (next.size() > k) next.resize(k);
    beam = std::move(next);
  }
  return std::min_element(beam.begin(), beam.end(), order)->toks;
}

/// KL(p || q) in nats from the definition.
inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

}  // namespace oracle
