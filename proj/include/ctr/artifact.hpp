#pragma once

// Run artifacts: every command writes its payload plus a manifest
// (<payload>.manifest.json) holding the reproducibility header. TSV and
// markdown payloads also carry the header inline as leading '#' lines.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ctr/corpus.hpp"
#include "ctr/error.hpp"

namespace ctr {

inline constexpr const char* kEngineVersion = "0.1.0";
inline constexpr int kArtifactSchemaVersion = 1;

inline std::string fmt_fixed(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  auto s = os.str();
  if (s == "-" + std::string("0.") + std::string(static_cast<std::size_t>(precision), '0')) s.erase(0, 1);
  return s;
}

/// Writes via a temp file in the same directory and renames into place.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write file: " + tmp.string());
    out << content;
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline std::string manifest_path(const std::string& payload) { return payload + ".manifest.json"; }

struct ArtifactHeader {
  std::string kind;  // score | decode | sweep | quark | distill | audit | micro-pr
  json config;
  std::uint64_t seed = 0;
  json tokenizer;
  std::vector<std::string> argv;  // canonical command line, replayable

  json to_json() const {
    return json{{"schema_version", kArtifactSchemaVersion},
                {"engine_version", kEngineVersion},
                {"kind", kind},
                {"seed", seed},
                {"tokenizer", tokenizer},
                {"config", config},
                {"argv", argv}};
  }

  /// Inline form for TSV/markdown payloads.
  std::string comment_block() const {
    json h = to_json();
    h.erase("argv");
    return "# ctr " + kind + " " + h.dump() + "\n";
  }
};

struct Manifest {
  json header;
  std::string payload;
  std::vector<std::string> extra_payloads;
  std::vector<std::string> failures;

  json to_json() const {
    json j = header;
    j["payload"] = payload;
    j["extra_payloads"] = extra_payloads;
    j["failures"] = failures;
    return j;
  }
};

inline void write_manifest(const std::string& payload_path, const ArtifactHeader& header,
                           const std::vector<std::string>& extra_payloads = {},
                           const std::vector<std::string>& failures = {}) {
  Manifest m{header.to_json(), std::filesystem::absolute(payload_path).string(), {}, failures};
  for (const auto& p : extra_payloads) m.extra_payloads.push_back(std::filesystem::absolute(p).string());
  write_file_atomic(manifest_path(payload_path), m.to_json().dump(2) + "\n");
}

inline json read_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": malformed manifest: " + e.what());
  }
  if (!j.is_object() || !j.contains("schema_version") || !j.contains("kind")) {
    throw ValidationError(path + ": not a ctr artifact manifest");
  }
  return j;
}

/// Payload lines with '#' header lines removed.
inline std::string strip_comment_lines(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::string out;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    out += line;
    out += '\n';
  }
  return out;
}

}  // namespace ctr
