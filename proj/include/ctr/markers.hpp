#pragma once

// Inline highlight markers. The marked document is both the conditioning
// text handed to language models and the passage shown in distillation
// prompts.

#include <string>
#include <string_view>
#include <vector>

#include "ctr/corpus.hpp"

namespace ctr {

inline constexpr std::string_view kHighlightStart = "<highlight_start>";
inline constexpr std::string_view kHighlightEnd = "<highlight_end>";

/// Wraps every normalized span in start/end markers. Spans are processed
/// right to left so earlier offsets stay valid while inserting.
inline std::string mark_highlights(const std::string& document, const std::vector<HighlightSpan>& spans) {
  auto doc = unicode::decode_utf8(document);
  const auto norm = normalize_spans(spans);
  const auto start = unicode::decode_utf8(kHighlightStart);
  const auto end = unicode::decode_utf8(kHighlightEnd);
  for (auto it = norm.rbegin(); it != norm.rend(); ++it) {
    validate_span(*it, doc.size());
    doc.insert(it->end, end);
    doc.insert(it->start, start);
  }
  return unicode::encode_utf8(doc);
}

inline std::string mark_highlights(const CtrInstance& instance) {
  return mark_highlights(instance.document, instance.highlights);
}

/// Removes marker pairs. Throws on unbalanced or nested markers.
inline std::string strip_markers(std::string_view marked) {
  std::string out;
  out.reserve(marked.size());
  bool open = false;
  std::size_t i = 0;
  while (i < marked.size()) {
    if (marked.substr(i, kHighlightStart.size()) == kHighlightStart) {
      if (open) throw ValidationError("nested <highlight_start> marker");
      open = true;
      i += kHighlightStart.size();
    } else if (marked.substr(i, kHighlightEnd.size()) == kHighlightEnd) {
      if (!open) throw ValidationError("<highlight_end> without matching start");
      open = false;
      i += kHighlightEnd.size();
    } else {
      out.push_back(marked[i]);
      ++i;
    }
  }
  if (open) throw ValidationError("unterminated <highlight_start> marker");
  return out;
}

}  // namespace ctr
