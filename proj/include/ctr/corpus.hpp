#pragma once

// Data model for controlled text reduction instances: a document, the
// highlighted spans inside it and an optional reference summary. Also the
// JSONL readers/writers and the word tokenizer shared by metrics and models.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctr/error.hpp"
#include "ctr/porter.hpp"
#include "ctr/unicode.hpp"

namespace ctr {

using json = nlohmann::json;

/// Half-open [start, end) range of code point offsets into a document.
struct HighlightSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start; }
  friend bool operator==(const HighlightSpan&, const HighlightSpan&) = default;
  friend auto operator<=>(const HighlightSpan&, const HighlightSpan&) = default;
};

struct CtrInstance {
  std::string id;
  std::string document;
  std::vector<HighlightSpan> highlights;
  std::optional<std::string> reference;
};

struct TokenizerOptions {
  bool lowercase = true;
  bool stem = false;

  friend bool operator==(const TokenizerOptions&, const TokenizerOptions&) = default;
};

inline json to_json(const TokenizerOptions& o) { return json{{"lowercase", o.lowercase}, {"stem", o.stem}}; }

/// Normalized word tokens with their code point offsets in the source text.
struct TokenSeq {
  std::vector<std::string> tokens;
  std::vector<std::pair<std::size_t, std::size_t>> offsets;
  TokenizerOptions normalization;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  /// Wraps already-normalized tokens (model output, test vectors). Offsets
  /// are synthesized as if the tokens were joined by single spaces.
  static TokenSeq from_tokens(std::vector<std::string> toks, TokenizerOptions opts = {}) {
    TokenSeq seq;
    std::size_t pos = 0;
    for (const auto& t : toks) {
      const std::size_t len = unicode::length(t);
      seq.offsets.emplace_back(pos, pos + len);
      pos += len + 1;
    }
    seq.tokens = std::move(toks);
    seq.normalization = opts;
    return seq;
  }
};

// ---------------------------------------------------------------------------
// spans

inline void validate_span(const HighlightSpan& s, std::size_t document_length) {
  if (s.start >= s.end) {
    throw ValidationError("span start >= end: [" + std::to_string(s.start) + "," + std::to_string(s.end) + ")");
  }
  if (s.end > document_length) {
    throw ValidationError("span out of bounds: [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                          ") for document of length " + std::to_string(document_length));
  }
}

/// Sorts spans and merges any that overlap or touch. Covered characters are
/// preserved exactly.
inline std::vector<HighlightSpan> normalize_spans(std::vector<HighlightSpan> spans) {
  std::sort(spans.begin(), spans.end());
  std::vector<HighlightSpan> out;
  out.reserve(spans.size());
  for (const auto& s : spans) {
    if (!out.empty() && s.start <= out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

inline std::u32string_view trim(std::u32string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && unicode::is_space(s[b])) ++b;
  while (e > b && unicode::is_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

inline std::string trim_utf8(std::string_view s) {
  const auto u = unicode::decode_utf8(s);
  return unicode::encode_utf8(trim(u));
}

/// Text of each highlight in document order, whitespace-trimmed per span.
inline std::vector<std::string> highlight_texts(const std::string& document, const std::vector<HighlightSpan>& spans) {
  const auto doc = unicode::decode_utf8(document);
  std::vector<std::string> out;
  for (const auto& s : normalize_spans(spans)) {
    validate_span(s, doc.size());
    auto piece = trim(std::u32string_view(doc).substr(s.start, s.length()));
    if (!piece.empty()) out.push_back(unicode::encode_utf8(piece));
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline std::string concat_highlights(const std::string& document, const std::vector<HighlightSpan>& spans) {
  return join(highlight_texts(document, spans), " ");
}

/// The highlight target x_h: highlights in document order joined by one space.
inline std::string concat_highlights(const CtrInstance& instance) {
  return concat_highlights(instance.document, instance.highlights);
}

// ---------------------------------------------------------------------------
// tokenization

inline std::string normalize_token(std::u32string_view raw, const TokenizerOptions& opts) {
  std::string tok;
  for (char32_t c : raw) unicode::append_utf8(tok, opts.lowercase ? unicode::to_lower(c) : c);
  if (opts.stem) tok = porter_stem(tok);
  return tok;
}

inline TokenSeq tokenize(std::string_view text, const TokenizerOptions& opts = {}) {
  TokenSeq seq;
  seq.normalization = opts;
  const auto u = unicode::decode_utf8(text);
  std::size_t i = 0;
  while (i < u.size()) {
    if (!unicode::is_word_char(u[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < u.size() && unicode::is_word_char(u[j])) ++j;
    seq.tokens.push_back(normalize_token(std::u32string_view(u).substr(i, j - i), opts));
    seq.offsets.emplace_back(i, j);
    i = j;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// JSONL I/O

enum class Strictness { strict, lenient };

struct LoadResult {
  std::vector<CtrInstance> instances;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;  // "line N: reason"
};

/// Parses and validates one dataset record. Spans come back normalized.
inline CtrInstance parse_instance(const json& j) {
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  if (!j.contains("id") || !j["id"].is_string()) throw ValidationError("missing string field \"id\"");
  if (!j.contains("document") || !j["document"].is_string()) throw ValidationError("missing string field \"document\"");
  if (!j.contains("highlights") || !j["highlights"].is_array()) throw ValidationError("missing array field \"highlights\"");
  CtrInstance inst;
  inst.id = j["id"].get<std::string>();
  if (inst.id.empty()) throw ValidationError("empty id");
  inst.document = j["document"].get<std::string>();
  const std::size_t doc_len = unicode::length(inst.document);
  for (const auto& pair : j["highlights"]) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() || !pair[1].is_number_integer()) {
      throw ValidationError("highlight must be a [start,end] integer pair");
    }
    const auto s = pair[0].get<long long>();
    const auto e = pair[1].get<long long>();
    if (s < 0 || e < 0) throw ValidationError("negative span offset");
    HighlightSpan span{static_cast<std::size_t>(s), static_cast<std::size_t>(e)};
    validate_span(span, doc_len);
    inst.highlights.push_back(span);
  }
  if (inst.highlights.empty()) throw ValidationError("instance has no highlights");
  inst.highlights = normalize_spans(std::move(inst.highlights));
  if (j.contains("reference") && !j["reference"].is_null()) {
    if (!j["reference"].is_string()) throw ValidationError("\"reference\" must be a string");
    inst.reference = j["reference"].get<std::string>();
  }
  return inst;
}

inline json to_json(const CtrInstance& inst) {
  json spans = json::array();
  for (const auto& s : inst.highlights) spans.push_back({s.start, s.end});
  json j{{"id", inst.id}, {"document", inst.document}, {"highlights", spans}};
  if (inst.reference) j["reference"] = *inst.reference;
  return j;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read file: " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t'; });
}

inline LoadResult parse_dataset_lines(const std::vector<std::string>& lines, Strictness strictness) {
  LoadResult result;
  std::set<std::string> seen;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (is_blank(lines[n])) continue;
    try {
      json j;
      try {
        j = json::parse(lines[n]);
      } catch (const json::parse_error& e) {
        throw ValidationError(std::string("malformed JSON: ") + e.what());
      }
      CtrInstance inst = parse_instance(j);
      if (!seen.insert(inst.id).second) throw ValidationError("duplicate id \"" + inst.id + "\"");
      result.instances.push_back(std::move(inst));
    } catch (const ValidationError& e) {
      const std::string where = "line " + std::to_string(n + 1) + ": " + e.what();
      if (strictness == Strictness::strict) throw ValidationError(where);
      ++result.skipped;
      result.skip_reasons.push_back(where);
    }
  }
  return result;
}

inline LoadResult load_dataset(const std::string& path, Strictness strictness = Strictness::strict) {
  return parse_dataset_lines(read_lines(path), strictness);
}

struct SystemOutput {
  std::string id;
  std::string output;
};

inline std::vector<SystemOutput> load_system_outputs(const std::string& path) {
  std::vector<SystemOutput> out;
  std::set<std::string> seen;
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
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("output") ||
        !j["output"].is_string()) {
      throw ValidationError(where + "expected {\"id\": string, \"output\": string}");
    }
    SystemOutput rec{j["id"].get<std::string>(), j["output"].get<std::string>()};
    if (!seen.insert(rec.id).second) throw ValidationError(where + "duplicate id \"" + rec.id + "\"");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::map<std::string, const CtrInstance*> index_by_id(const std::vector<CtrInstance>& data) {
  std::map<std::string, const CtrInstance*> idx;
  for (const auto& inst : data) idx.emplace(inst.id, &inst);
  return idx;
}

}  // namespace ctr
