#pragma once

// Command-line surface. run_cli() parses, dispatches and maps errors to exit
// codes; the ctr binary is a thin main() around it.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctr/artifact.hpp"
#include "ctr/corpus.hpp"
#include "ctr/decoder.hpp"
#include "ctr/distill.hpp"
#include "ctr/lm.hpp"
#include "ctr/metrics.hpp"
#include "ctr/quark.hpp"
#include "ctr/remote_lm.hpp"

#ifndef CTR_DATA_DIR
#define CTR_DATA_DIR "data"
#endif

namespace ctr::cli {

namespace fs = std::filesystem;

inline std::string absolute(const std::string& p) { return p.empty() || p == "-" ? p : fs::absolute(p).string(); }

inline std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_fixed(v[i], 6);
  return s;
}

template <typename T>
std::string fmt_ints(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// shared option groups

struct TokenizerFlags {
  bool stem = false;
  bool no_lowercase = false;

  void add(CLI::App* app) {
    app->add_flag("--stem", stem, "Porter-stem tokens before matching");
    app->add_flag("--no-lowercase", no_lowercase, "keep case when matching");
  }
  TokenizerOptions options() const { return TokenizerOptions{!no_lowercase, stem}; }
  void args(std::vector<std::string>& a) const {
    if (stem) a.push_back("--stem");
    if (no_lowercase) a.push_back("--no-lowercase");
  }
};

struct ModelFlags {
  std::string kind = "ngram";
  std::string script;
  int ngram_order = 2;
  double ngram_k = 0.1;
  std::string scope = "document";
  double mu = 0.9;

  void add(CLI::App* app) {
    app->add_option("--model", kind, "ngram | remote | scripted")->check(CLI::IsMember({"ngram", "remote", "scripted"}));
    app->add_option("--script", script, "scripted model table (JSON)");
    app->add_option("--ngram-order", ngram_order, "n-gram order for the local model")->check(CLI::Range(1, 3));
    app->add_option("--ngram-k", ngram_k, "add-k smoothing constant");
    app->add_option("--ngram-scope", scope,
                    "document: corpus model mixed with the source document; instance: source document only; "
                    "corpus: one model for all")
        ->check(CLI::IsMember({"document", "instance", "corpus"}));
    app->add_option("--mu", mu, "source-document weight for --ngram-scope document")->check(CLI::Range(0.0, 1.0));
  }
  void args(std::vector<std::string>& a) const {
    a.insert(a.end(), {"--model", kind});
    if (kind == "scripted") a.insert(a.end(), {"--script", absolute(script)});
    if (kind == "ngram") {
      a.insert(a.end(), {"--ngram-order", std::to_string(ngram_order), "--ngram-k", fmt_fixed(ngram_k, 6),
                         "--ngram-scope", scope});
      if (scope == "document") a.insert(a.end(), {"--mu", fmt_fixed(mu, 6)});
    }
  }
  json to_json() const {
    json j{{"model", kind}};
    if (kind == "scripted") j["script"] = absolute(script);
    if (kind == "ngram") {
      j["ngram_order"] = ngram_order;
      j["ngram_k"] = ngram_k;
      j["ngram_scope"] = scope;
      if (scope == "document") j["mu"] = mu;
    }
    return j;
  }
};

inline NgramOptions local_ngram_options(const ModelFlags& m, const TokenizerOptions& tok) {
  NgramOptions o;
  o.order = m.ngram_order;
  o.k = m.ngram_k;
  o.count_eos = true;
  o.tokenizer = tok;
  return o;
}

/// Builds one model per instance up front; lookups are by instance id.
inline ModelProvider make_provider(const ModelFlags& m, const std::vector<CtrInstance>& data,
                                   const TokenizerOptions& tok) {
  if (m.kind == "remote") {
    std::shared_ptr<const LanguageModel> remote = RemoteModel::from_env();
    if (!remote) throw Error("--model remote requires CTR_LM_URL");
    return [remote](const CtrInstance&) { return remote; };
  }
  if (m.kind == "scripted") {
    if (m.script.empty()) throw Error("--model scripted requires --script");
    json j;
    try {
      j = json::parse(read_text(m.script));
    } catch (const json::parse_error& e) {
      throw ValidationError(m.script + ": " + e.what());
    }
    if (j.contains("models")) {
      auto models = std::make_shared<std::map<std::string, std::shared_ptr<const LanguageModel>>>();
      for (const auto& [id, rows] : j["models"].items()) models->emplace(id, ScriptedModel::from_json(rows));
      return [models](const CtrInstance& inst) -> std::shared_ptr<const LanguageModel> {
        auto it = models->find(inst.id);
        if (it == models->end()) it = models->find("*");
        if (it == models->end()) throw Error("script has no model for instance \"" + inst.id + "\"");
        return it->second;
      };
    }
    std::shared_ptr<const LanguageModel> single = ScriptedModel::from_json(j);
    return [single](const CtrInstance&) { return single; };
  }
  const auto opts = local_ngram_options(m, tok);
  if (m.scope == "document") {
    std::vector<std::string> docs;
    for (const auto& inst : data) docs.push_back(inst.document);
    std::shared_ptr<const LanguageModel> model = std::make_shared<DocumentNgramModel>(opts, docs, m.mu);
    return [model](const CtrInstance&) { return model; };
  }
  if (m.scope == "corpus") {
    std::vector<std::string> docs;
    for (const auto& inst : data) docs.push_back(inst.document);
    std::shared_ptr<const LanguageModel> model = std::make_shared<NgramModel>(opts, [&] {
      std::vector<std::vector<std::string>> toks;
      for (const auto& d : docs) toks.push_back(tokenize(d, tok).tokens);
      return toks;
    }());
    return [model](const CtrInstance&) { return model; };
  }
  auto models = std::make_shared<std::map<std::string, std::shared_ptr<const LanguageModel>>>();
  for (const auto& inst : data) {
    models->emplace(inst.id, std::make_shared<NgramModel>(opts, std::vector<std::vector<std::string>>{
                                                                    tokenize(inst.document, tok).tokens}));
  }
  return [models](const CtrInstance& inst) -> std::shared_ptr<const LanguageModel> {
    auto it = models->find(inst.id);
    if (it == models->end()) throw Error("no model trained for instance \"" + inst.id + "\"");
    return it->second;
  };
}

inline std::vector<CtrInstance> load_strict(const std::string& path) { return load_dataset(path, Strictness::strict).instances; }

// ---------------------------------------------------------------------------
// score

struct ScoreCommand {
  std::string data;
  std::string system;
  std::string against = "highlights";
  std::string format = "tsv";
  std::string out = "-";
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset JSONL")->required();
    app->add_option("--system", system, "system output JSONL {id, output}")->required();
    app->add_option("--against", against, "highlights | reference")->check(CLI::IsMember({"highlights", "reference"}));
    app->add_option("--format", format, "tsv | json | markdown")->check(CLI::IsMember({"tsv", "json", "markdown"}));
    app->add_option("--out", out, "output path ('-' for stdout)");
    tok.add(app);
  }

  std::vector<std::string> argv() const {
    std::vector<std::string> a{"score", "--data", absolute(data), "--system", absolute(system), "--against", against,
                               "--format", format};
    tok.args(a);
    return a;
  }

  int run(std::ostream& os, std::ostream& err) const {
    const auto dataset = load_strict(data);
    const auto outputs = load_system_outputs(system);
    const auto idx = index_by_id(dataset);
    const auto target = parse_score_target(against);
    const auto opts = tok.options();

    std::vector<std::pair<std::string, MetricReport>> reports;
    std::vector<std::string> unmatched;
    std::vector<std::string> failures;
    for (const auto& o : outputs) {
      auto it = idx.find(o.id);
      if (it == idx.end()) {
        unmatched.push_back(o.id);
        continue;
      }
      try {
        reports.emplace_back(o.id, score_instance(o.output, *it->second, target, opts));
      } catch (const Error& e) {
        failures.push_back(o.id + ": " + e.what());
      }
    }
    std::set<std::string> present;
    for (const auto& o : outputs) present.insert(o.id);
    std::vector<std::string> missing;
    for (const auto& inst : dataset)
      if (!present.count(inst.id)) missing.push_back(inst.id);

    if (!unmatched.empty()) err << "warning: system ids not in dataset: " << join(unmatched, ", ") << "\n";
    if (!missing.empty()) err << "warning: dataset ids without system output: " << join(missing, ", ") << "\n";
    if (reports.empty()) throw Error("no system output matches a dataset id");

    MetricReport mean;
    mean.target = target;
    auto acc = [](Prf& a, const Prf& b) {
      a.precision += b.precision;
      a.recall += b.recall;
      a.f1 += b.f1;
    };
    for (const auto& [id, r] : reports) {
      acc(mean.rouge1, r.rouge1);
      acc(mean.rouge2, r.rouge2);
      acc(mean.rougeL, r.rougeL);
      acc(mean.meteor, r.meteor);
    }
    const double n = static_cast<double>(reports.size());
    for (Prf* p : {&mean.rouge1, &mean.rouge2, &mean.rougeL, &mean.meteor}) {
      p->precision /= n;
      p->recall /= n;
      p->f1 /= n;
    }

    ArtifactHeader header{"score",
                          json{{"data", absolute(data)}, {"system", absolute(system)}, {"against", against},
                               {"format", format}},
                          0, to_json(opts), argv()};
    std::string payload;
    if (format == "tsv") {
      payload += header.comment_block();
      payload += "id\trouge1_p\trouge1_r\trouge1_f1\trouge2_p\trouge2_r\trouge2_f1\trougeL_p\trougeL_r\trougeL_f1\tmeteor_p\tmeteor_r\tmeteor\tdegenerate\n";
      auto row = [&](const std::string& id, const MetricReport& r) {
        payload += id;
        for (const Prf* p : {&r.rouge1, &r.rouge2, &r.rougeL, &r.meteor}) {
          payload += "\t" + fmt_fixed(p->precision) + "\t" + fmt_fixed(p->recall) + "\t" + fmt_fixed(p->f1);
        }
        payload += std::string("\t") + (r.degenerate ? "1" : "0") + "\n";
      };
      for (const auto& [id, r] : reports) row(id, r);
      row("MEAN", mean);
    } else if (format == "json") {
      json inst = json::array();
      for (const auto& [id, r] : reports) {
        auto j = to_json(r);
        j["id"] = id;
        inst.push_back(j);
      }
      payload = json{{"header", header.to_json()}, {"instances", inst}, {"aggregate", to_json(mean)},
                     {"missing", missing}, {"unmatched", unmatched}}
                    .dump(2) +
                "\n";
    } else {
      payload += header.comment_block();
      payload += "\n| id | R-1 | R-2 | R-L | M | BertScore |\n|---|---|---|---|---|---|\n";
      auto row = [&](const std::string& id, const MetricReport& r) {
        payload += "| " + id + " | " + fmt_fixed(100 * r.rouge1.f1, 1) + " | " + fmt_fixed(100 * r.rouge2.f1, 1) +
                   " | " + fmt_fixed(100 * r.rougeL.f1, 1) + " | " + fmt_fixed(100 * r.meteor.f1, 1) +
                   " | n/a (out of scope) |\n";
      };
      for (const auto& [id, r] : reports) row(id, r);
      row("**mean**", mean);
    }

    if (out == "-") {
      os << payload;
    } else {
      write_file_atomic(out, payload);
      ArtifactHeader h = header;
      h.config["summary"] = json{{"aggregate", to_json(mean)}, {"instances", reports.size()}};
      write_manifest(out, h, {}, failures);
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// decode

struct DecodeFlags {
  std::size_t beam = 8;
  double lambda = 1.0;
  std::size_t lookahead = 16;
  std::string g = "rougeL";
  std::size_t max_tokens = 64;
  std::size_t top_k = 0;
  bool length_normalize = false;

  void add(CLI::App* app, bool with_grid_axes) {
    if (!with_grid_axes) {
      app->add_option("--beam", beam, "beam size k")->check(CLI::PositiveNumber);
      app->add_option("--lambda", lambda, "lookahead weight")->check(CLI::NonNegativeNumber);
      app->add_option("--lookahead", lookahead, "rollout length l");
      app->add_option("--g", g, "rougeL | meteor")->check(CLI::IsMember({"rougeL", "meteor"}));
    }
    app->add_option("--max-tokens", max_tokens, "maximum output tokens")->check(CLI::PositiveNumber);
    app->add_option("--top-k", top_k, "expansions per hypothesis (default: beam size)");
    app->add_flag("--length-normalize", length_normalize, "length-normalize log-probabilities");
  }

  DecoderConfig config(const TokenizerOptions& tok) const {
    DecoderConfig c;
    c.beam_size = beam;
    c.lambda = lambda;
    c.lookahead = lookahead;
    c.g_metric = parse_g_metric(g);
    c.max_output_tokens = max_tokens;
    c.expand_top_k = top_k;
    c.length_normalize_logprob = length_normalize;
    c.tokenizer = tok;
    return c;
  }
};

struct DecodeCommand {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  ModelFlags model;
  DecodeFlags dec;
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset JSONL")->required();
    app->add_option("--out", out, "system output JSONL; trace goes to <out>.trace.jsonl")->required();
    app->add_option("--seed", seed, "root seed (recorded; decoding is deterministic)");
    model.add(app);
    dec.add(app, false);
    tok.add(app);
  }

  std::vector<std::string> argv() const {
    std::vector<std::string> a{"decode", "--data", absolute(data), "--seed", std::to_string(seed)};
    model.args(a);
    a.insert(a.end(), {"--beam", std::to_string(dec.beam), "--lambda", fmt_fixed(dec.lambda, 6), "--lookahead",
                       std::to_string(dec.lookahead), "--g", dec.g, "--max-tokens", std::to_string(dec.max_tokens),
                       "--top-k", std::to_string(dec.top_k)});
    if (dec.length_normalize) a.push_back("--length-normalize");
    tok.args(a);
    return a;
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto dataset = load_strict(data);
    const auto opts = tok.options();
    const auto cfg = dec.config(opts);
    const auto provider = make_provider(model, dataset, opts);
    std::string outputs;
    std::string trace;
    std::vector<std::string> failures;
    for (const auto& inst : dataset) {
      try {
        const auto res = decode(*provider(inst), inst, cfg);
        outputs += json{{"id", inst.id}, {"output", res.text}}.dump() + "\n";
        for (const auto& st : res.trace) {
          auto j = to_json(st);
          j["id"] = inst.id;
          trace += j.dump() + "\n";
        }
      } catch (const std::exception& e) {
        failures.push_back(inst.id + ": " + e.what());
      }
    }
    write_file_atomic(out, outputs);
    const std::string trace_path = out + ".trace.jsonl";
    write_file_atomic(trace_path, trace);
    json config = to_json(cfg);
    config["data"] = absolute(data);
    config["model"] = model.to_json();
    config["summary"] = json{{"decoded", dataset.size() - failures.size()}, {"failed", failures.size()}};
    write_manifest(out, ArtifactHeader{"decode", config, seed, to_json(opts), argv()}, {trace_path}, failures);
    os << "decoded " << dataset.size() - failures.size() << "/" << dataset.size() << " instances -> " << out << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// sweep

inline const char* kSweepColumns = "k\tlambda\tl\tg_metric\trouge1_f1\trouge2_f1\trougeL_f1\tmeteor\truntime_ms\n";

struct SweepCommand {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::string beams = "2,4,6,8";
  std::string lambdas = "0,1";
  std::string lookaheads = "16";
  std::string g_metrics = "rougeL";
  ModelFlags model;
  DecodeFlags dec;
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset JSONL")->required();
    app->add_option("--out", out, "sweep TSV")->required();
    app->add_option("--seed", seed, "root seed (recorded)");
    app->add_option("--beams", beams, "comma-separated beam sizes");
    app->add_option("--lambdas", lambdas, "comma-separated lambda values");
    app->add_option("--lookaheads", lookaheads, "comma-separated rollout lengths");
    app->add_option("--g-metrics", g_metrics, "comma-separated g metrics (rougeL, meteor)");
    model.add(app);
    dec.add(app, true);
    tok.add(app);
  }

  SweepGrid grid() const {
    SweepGrid g;
    g.beams.clear();
    g.lambdas.clear();
    g.lookaheads.clear();
    g.metrics.clear();
    for (const auto& s : split_csv(beams)) g.beams.push_back(std::stoul(s));
    for (const auto& s : split_csv(lambdas)) g.lambdas.push_back(std::stod(s));
    for (const auto& s : split_csv(lookaheads)) g.lookaheads.push_back(std::stoul(s));
    for (const auto& s : split_csv(g_metrics)) g.metrics.push_back(parse_g_metric(s));
    return g;
  }

  std::vector<std::string> argv() const {
    const auto g = grid();
    std::vector<std::string> metrics;
    for (auto m : g.metrics) metrics.push_back(to_string(m));
    std::vector<std::string> a{"sweep", "--data", absolute(data), "--seed", std::to_string(seed), "--beams",
                               fmt_ints(g.beams), "--lambdas", fmt_list(g.lambdas), "--lookaheads",
                               fmt_ints(g.lookaheads), "--g-metrics", join(metrics, ",")};
    model.args(a);
    a.insert(a.end(), {"--max-tokens", std::to_string(dec.max_tokens), "--top-k", std::to_string(dec.top_k)});
    if (dec.length_normalize) a.push_back("--length-normalize");
    tok.args(a);
    return a;
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto dataset = load_strict(data);
    const auto opts = tok.options();
    const auto g = grid();
    const auto rows = sweep(make_provider(model, dataset, opts), dataset, dec.config(opts), g);

    json config{{"data", absolute(data)}, {"model", model.to_json()}, {"beams", g.beams}, {"lambdas", g.lambdas},
                {"lookaheads", g.lookaheads}, {"g_metrics", split_csv(g_metrics)}, {"max_tokens", dec.max_tokens},
                {"top_k", dec.top_k}, {"length_normalize", dec.length_normalize}};
    ArtifactHeader header{"sweep", config, seed, to_json(opts), argv()};
    std::string payload = header.comment_block();
    payload += kSweepColumns;
    std::vector<std::string> failures;
    json summary = json::array();
    for (const auto& r : rows) {
      payload += std::to_string(r.config.beam_size) + "\t" + fmt_fixed(r.config.lambda, 4) + "\t" +
                 std::to_string(r.config.lookahead) + "\t" + to_string(r.config.g_metric) + "\t" +
                 fmt_fixed(r.rouge1_f1) + "\t" + fmt_fixed(r.rouge2_f1) + "\t" + fmt_fixed(r.rougeL_f1) + "\t" +
                 fmt_fixed(r.meteor) + "\t" + fmt_fixed(r.runtime_ms, 1) + "\n";
      for (const auto& f : r.failures) failures.push_back("k=" + std::to_string(r.config.beam_size) + " lambda=" +
                                                          fmt_fixed(r.config.lambda, 4) + " " + f);
      summary.push_back({{"k", r.config.beam_size}, {"lambda", r.config.lambda}, {"l", r.config.lookahead},
                         {"g_metric", to_string(r.config.g_metric)}, {"rouge1_f1", r.rouge1_f1},
                         {"rouge2_f1", r.rouge2_f1}, {"rougeL_f1", r.rougeL_f1}, {"meteor", r.meteor}});
    }
    write_file_atomic(out, payload);
    header.config["summary"] = summary;
    write_manifest(out, header, {}, failures);
    os << rows.size() << " sweep cells -> " << out << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// quark

inline const char* kQuarkColumns = "iteration\treward_kind\tpool_size\tmean_top_reward\tmean_kl\tq1_min\tqK_max\n";

struct QuarkCommand {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t iterations = 5;
  std::size_t quantiles = 8;
  std::string reward = "alternate-pr";
  std::size_t samples_per_instance = 4;
  double temperature = 1.0;
  double beta = 0.25;
  std::size_t max_tokens = 32;
  int ngram_order = 2;
  double ngram_k = 0.1;
  double mu = 0.9;
  int policy_order = 3;
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "training dataset JSONL")->required();
    app->add_option("--out", out, "iteration report TSV; pool export goes to <out>.pool.jsonl")->required();
    app->add_option("--seed", seed, "root seed");
    app->add_option("--iterations", iterations, "explore/quantize/learn cycles")->check(CLI::PositiveNumber);
    app->add_option("--quantiles", quantiles, "number of reward quantiles K")->check(CLI::Range(2, 1000));
    app->add_option("--reward", reward, "alternate-pr | p-f1 | r-f1 | f1 (comma-separated to compare)");
    app->add_option("--samples-per-instance", samples_per_instance, "samples per instance per iteration")
        ->check(CLI::PositiveNumber);
    app->add_option("--temperature", temperature, "sampling temperature")->check(CLI::PositiveNumber);
    app->add_option("--beta", beta, "KL-penalty weight (base-model interpolation)")->check(CLI::NonNegativeNumber);
    app->add_option("--max-tokens", max_tokens, "maximum sampled tokens")->check(CLI::PositiveNumber);
    app->add_option("--ngram-order", ngram_order, "base n-gram order")->check(CLI::Range(1, 3));
    app->add_option("--ngram-k", ngram_k, "base add-k constant");
    app->add_option("--mu", mu, "weight of the source document in the base model")->check(CLI::Range(0.0, 1.0));
    app->add_option("--policy-order", policy_order, "order of the learned per-token tables")->check(CLI::Range(1, 6));
    tok.add(app);
  }

  std::vector<std::string> argv() const {
    std::vector<std::string> a{"quark", "--data", absolute(data), "--seed", std::to_string(seed), "--iterations",
                               std::to_string(iterations), "--quantiles", std::to_string(quantiles), "--reward",
                               reward, "--samples-per-instance", std::to_string(samples_per_instance),
                               "--temperature", fmt_fixed(temperature, 6), "--beta", fmt_fixed(beta, 6),
                               "--max-tokens", std::to_string(max_tokens), "--ngram-order",
                               std::to_string(ngram_order), "--ngram-k", fmt_fixed(ngram_k, 6), "--mu", fmt_fixed(mu, 6),
                               "--policy-order", std::to_string(policy_order)};
    tok.args(a);
    return a;
  }

  QuarkConfig config(RewardSchedule schedule) const {
    QuarkConfig c;
    c.quantile_count = quantiles;
    c.samples_per_instance = samples_per_instance;
    c.temperature = temperature;
    c.kl_coefficient = beta;
    c.iterations = iterations;
    c.reward_schedule = schedule;
    c.max_tokens = max_tokens;
    c.policy_order = policy_order;
    c.tokenizer = tok.options();
    return c;
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto dataset = load_strict(data);
    const auto opts = tok.options();
    std::vector<RewardSchedule> schedules;
    for (const auto& s : split_csv(reward)) schedules.push_back(parse_reward_schedule(s));
    if (schedules.empty()) throw Error("--reward needs at least one schedule");
    const bool multi = schedules.size() > 1;

    NgramOptions base_opts;
    base_opts.order = ngram_order;
    base_opts.k = ngram_k;
    base_opts.count_eos = true;
    base_opts.tokenizer = opts;
    std::vector<std::string> docs;
    for (const auto& inst : dataset) docs.push_back(inst.document);
    const auto base = std::make_shared<const DocumentNgramModel>(base_opts, docs, mu);

    json cfg_json = to_json(config(schedules.front()));
    cfg_json["reward"] = reward;
    cfg_json["data"] = absolute(data);
    cfg_json["ngram_order"] = ngram_order;
    cfg_json["ngram_k"] = ngram_k;
    cfg_json["mu"] = mu;
    ArtifactHeader header{"quark", cfg_json, seed, to_json(opts), argv()};

    std::string payload = header.comment_block();
    std::string pool;
    std::vector<std::string> failures;
    json summary = json::array();
    payload += multi ? std::string("schedule\t") + kQuarkColumns : std::string(kQuarkColumns);
    for (auto schedule : schedules) {
      CountLearner learner(base, dataset);
      const auto rep = run_loop(dataset, config(schedule), base, learner, seed);
      payload += "# " + to_string(schedule) + " baseline_reward=" + fmt_fixed(rep.baseline_reward) + "\n";
      for (const auto& r : rep.rows) {
        if (multi) payload += to_string(schedule) + "\t";
        payload += std::to_string(r.iteration) + "\t" + to_string(r.reward_kind) + "\t" + std::to_string(r.pool_size) +
                   "\t" + fmt_fixed(r.mean_top_reward) + "\t" + fmt_fixed(r.mean_kl) + "\t" + fmt_fixed(r.q1_min) +
                   "\t" + fmt_fixed(r.qk_max) + "\n";
        summary.push_back({{"schedule", to_string(schedule)}, {"iteration", r.iteration},
                           {"reward_kind", to_string(r.reward_kind)}, {"pool_size", r.pool_size},
                           {"mean_top_reward", r.mean_top_reward}, {"mean_kl", r.mean_kl},
                           {"baseline_reward", rep.baseline_reward}});
      }
      for (const auto& s : rep.pool) {
        auto j = to_json(s);
        if (multi) j["schedule"] = to_string(schedule);
        pool += j.dump() + "\n";
      }
      failures.insert(failures.end(), rep.failures.begin(), rep.failures.end());
    }
    write_file_atomic(out, payload);
    const std::string pool_path = out + ".pool.jsonl";
    write_file_atomic(pool_path, pool);
    header.config["summary"] = summary;
    write_manifest(out, header, {pool_path}, failures);
    os << "quark report -> " << out << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// distill

struct DistillCommand {
  std::string data;
  std::string out;
  std::string variant = "modular";
  std::size_t exemplars = 2;
  bool list_highlights = true;
  double threshold = 0.0;
  std::string instructions = CTR_DATA_DIR "/prompts/instructions.txt";
  std::string exemplar_file = CTR_DATA_DIR "/prompts/exemplars.jsonl";
  double temperature = 0.0;
  int max_tokens = 512;
  std::size_t parallel = 2;
  bool dry_run = false;
  std::uint64_t seed = 0;
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset JSONL with silver highlights")->required();
    app->add_option("--out", out, "generated dataset JSONL")->required();
    app->add_option("--variant", variant, "modular | regular")->check(CLI::IsMember({"modular", "regular"}));
    app->add_option("--exemplars", exemplars, "number of in-context exemplars")->check(CLI::PositiveNumber);
    app->add_flag("--list-highlights,!--no-list-highlights", list_highlights,
                  "pre-fill the highlight listing step for the instance");
    app->add_option("--threshold", threshold, "minimum ROUGE-L F1 vs highlights to keep a generation")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--instructions", instructions, "instruction text file");
    app->add_option("--exemplar-file", exemplar_file, "exemplar JSONL");
    app->add_option("--temperature", temperature, "generation temperature");
    app->add_option("--gen-max-tokens", max_tokens, "generation token budget");
    app->add_option("--parallel", parallel, "requests in flight")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed, "recorded and forwarded to the endpoint");
    app->add_flag("--dry-run", dry_run, "write prompts to <out>.prompts.jsonl without calling the endpoint");
    tok.add(app);
  }

  std::vector<std::string> argv() const {
    std::vector<std::string> a{"distill", "--data", absolute(data), "--variant", variant, "--exemplars",
                               std::to_string(exemplars), list_highlights ? "--list-highlights" : "--no-list-highlights",
                               "--threshold", fmt_fixed(threshold, 6), "--instructions", absolute(instructions),
                               "--exemplar-file", absolute(exemplar_file), "--temperature", fmt_fixed(temperature, 6),
                               "--gen-max-tokens", std::to_string(max_tokens), "--parallel", std::to_string(parallel),
                               "--seed", std::to_string(seed)};
    if (dry_run) a.push_back("--dry-run");
    tok.args(a);
    return a;
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto dataset = load_strict(data);
    const auto opts = tok.options();
    const auto tmpl = load_prompt_template(instructions, exemplar_file);
    const PromptConfig pc{parse_prompt_variant(variant), exemplars, list_highlights};
    std::vector<std::pair<std::string, std::string>> prompts;
    for (const auto& inst : dataset) prompts.emplace_back(inst.id, build_prompt(inst, tmpl, pc));

    json config = to_json(pc);
    config["data"] = absolute(data);
    config["threshold"] = threshold;
    config["temperature"] = temperature;
    config["max_tokens"] = max_tokens;
    ArtifactHeader header{"distill", config, seed, to_json(opts), argv()};

    const std::string prompts_path = out + ".prompts.jsonl";
    std::string prompt_lines;
    for (const auto& [id, p] : prompts) prompt_lines += json{{"id", id}, {"prompt", p}}.dump() + "\n";
    write_file_atomic(prompts_path, prompt_lines);
    if (dry_run) {
      write_file_atomic(out, "");
      write_manifest(out, header, {prompts_path});
      os << prompts.size() << " prompts -> " << prompts_path << "\n";
      return 0;
    }

    const auto client = CompletionClient::from_env();
    GenerationParams params;
    params.temperature = temperature;
    params.max_tokens = max_tokens;
    params.seed = static_cast<long long>(seed);
    const auto gens = generate_all(client, prompts, params, pc.variant, parallel);

    std::vector<std::pair<CtrInstance, std::string>> extracted;
    std::string transcripts;
    std::vector<std::string> failures;
    std::map<std::string, bool> flagged;
    for (std::size_t i = 0; i < gens.size(); ++i) {
      const auto& g = gens[i];
      json t{{"id", g.id}, {"prompt", g.prompt}, {"completion", g.completion}, {"flagged", g.extraction.flagged}};
      if (g.error) {
        t["error"] = *g.error;
        failures.push_back(g.id + ": " + *g.error);
      }
      transcripts += t.dump() + "\n";
      flagged[g.id] = g.extraction.flagged;
      if (!g.extraction.flagged) extracted.emplace_back(dataset[i], g.extraction.text);
    }
    const auto split = filter_generated(extracted, threshold, opts);
    std::map<std::string, double> scores;
    std::set<std::string> kept_ids;
    for (const auto& s : split.kept) {
      scores[s.id] = s.rougeL_f1;
      kept_ids.insert(s.id);
    }
    for (const auto& s : split.rejected) scores[s.id] = s.rougeL_f1;

    std::string generated;
    std::string rejected;
    std::string audit;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto& inst = dataset[i];
      json a{{"id", inst.id}, {"flagged", flagged[inst.id]}};
      if (auto it = scores.find(inst.id); it != scores.end()) {
        a["rougeL_f1_vs_highlights"] = it->second;
        a["kept"] = kept_ids.count(inst.id) > 0;
        CtrInstance copy = inst;
        copy.reference = gens[i].extraction.text;
        (kept_ids.count(inst.id) ? generated : rejected) += to_json(copy).dump() + "\n";
      } else {
        a["rougeL_f1_vs_highlights"] = nullptr;
        a["kept"] = false;
      }
      audit += a.dump() + "\n";
    }
    const std::string audit_path = out + ".audit.jsonl";
    const std::string rejected_path = out + ".rejected.jsonl";
    const std::string transcript_path = out + ".transcripts.jsonl";
    write_file_atomic(out, generated);
    write_file_atomic(audit_path, audit);
    write_file_atomic(rejected_path, rejected);
    write_file_atomic(transcript_path, transcripts);
    header.config["summary"] = json{{"kept", split.kept.size()}, {"rejected", split.rejected.size()},
                                    {"flagged", dataset.size() - extracted.size()}};
    write_manifest(out, header, {audit_path, rejected_path, transcript_path, prompts_path}, failures);
    os << "kept " << split.kept.size() << ", rejected " << split.rejected.size() << ", flagged "
       << dataset.size() - extracted.size() << " -> " << out << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// audit

struct AuditCommand {
  std::string gold;
  std::vector<std::string> candidates;
  std::string out = "-";
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--gold", gold, "dataset JSONL with reference highlights")->required();
    app->add_option("--candidate", candidates, "dataset JSONL with candidate highlights (repeatable)")->required();
    app->add_option("--out", out, "TSV output ('-' for stdout)");
    tok.add(app);
  }

  std::vector<std::string> argv() const {
    std::vector<std::string> a{"audit", "--gold", absolute(gold)};
    for (const auto& c : candidates) a.insert(a.end(), {"--candidate", absolute(c)});
    tok.args(a);
    return a;
  }

  int run(std::ostream& os, std::ostream& err) const {
    const auto g = load_strict(gold);
    const auto opts = tok.options();
    json cfg{{"gold", absolute(gold)}, {"candidates", json::array()}};
    for (const auto& c : candidates) cfg["candidates"].push_back(absolute(c));
    ArtifactHeader header{"audit", cfg, 0, to_json(opts), argv()};
    std::string payload = header.comment_block() + "candidate\tmatched\tmean_rougeL_f1\n";
    json summary = json::array();
    for (const auto& c : candidates) {
      const auto s = audit_dataset(g, load_strict(c), opts);
      if (!s.missing.empty()) err << "warning: " << c << " lacks ids: " << join(s.missing, ", ") << "\n";
      payload += absolute(c) + "\t" + std::to_string(s.matched) + "\t" + fmt_fixed(s.mean_f1) + "\n";
      summary.push_back({{"candidate", absolute(c)}, {"matched", s.matched}, {"mean_rougeL_f1", s.mean_f1}});
    }
    if (out == "-") {
      os << payload;
    } else {
      write_file_atomic(out, payload);
      header.config["summary"] = summary;
      write_manifest(out, header);
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// micro-pr

struct MicroPrCommand {
  std::string annotations;

  void add(CLI::App* app) {
    app->add_option("--annotations", annotations, "JSONL {id, tp, fp, fn}")->required();
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto r = micro_pr(load_annotations(annotations));
    os << "precision\trecall\tf1\tdegenerate\n"
       << fmt_fixed(r.precision) << "\t" << fmt_fixed(r.recall) << "\t" << fmt_fixed(r.f1) << "\t"
       << (r.degenerate ? 1 : 0) << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// report

inline std::string provenance(const json& m) {
  json cfg = m.value("config", json::object());
  cfg.erase("summary");
  return "- kind: " + m["kind"].get<std::string>() + "\n- engine: " + m.value("engine_version", std::string("?")) +
         ", schema " + m["schema_version"].dump() + "\n- seed: " + m.value("seed", json(0)).dump() +
         "\n- tokenizer: " + m.value("tokenizer", json::object()).dump() + "\n- config: `" + cfg.dump() + "`\n";
}

/// Consolidated markdown over run manifests. All artifacts must share the
/// engine's schema version.
inline std::string build_report(const std::vector<std::string>& manifest_paths) {
  if (manifest_paths.empty()) throw Error("report needs at least one artifact");
  std::vector<json> manifests;
  for (const auto& p : manifest_paths) manifests.push_back(read_manifest(p));
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    const auto v = manifests[i]["schema_version"];
    if (i > 0 && v != manifests[0]["schema_version"]) {
      throw Error("schema version mismatch: " + manifests[0]["schema_version"].dump() + " (" + manifest_paths[0] +
                  ") vs " + v.dump() + " (" + manifest_paths[i] + ")");
    }
    if (v != kArtifactSchemaVersion) {
      throw Error("schema version mismatch: artifact " + manifest_paths[i] + " has " + v.dump() + ", engine expects " +
                  std::to_string(kArtifactSchemaVersion));
    }
  }

  std::string md = "# CTR run report\n";
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    const auto& m = manifests[i];
    const auto kind = m["kind"].get<std::string>();
    const auto summary = m["config"].value("summary", json());
    md += "\n## " + kind + ": " + fs::path(m.value("payload", std::string())).filename().string() + "\n\n";
    md += provenance(m) + "\n";
    if (kind == "score") {
      const auto& a = summary.at("aggregate");
      md += "| target | n | R-1 | R-2 | R-L | M | BertScore |\n|---|---|---|---|---|---|---|\n";
      md += "| " + m["config"].value("against", std::string()) + " | " + summary.at("instances").dump() + " | " +
            fmt_fixed(100 * a["rouge1"]["f1"].get<double>(), 1) + " | " +
            fmt_fixed(100 * a["rouge2"]["f1"].get<double>(), 1) + " | " +
            fmt_fixed(100 * a["rougeL"]["f1"].get<double>(), 1) + " | " +
            fmt_fixed(100 * a["meteor"]["f1"].get<double>(), 1) + " | n/a (out of scope) |\n";
    } else if (kind == "sweep") {
      md += "| k | lambda | l | g | R-1 | R-2 | R-L | M |\n|---|---|---|---|---|---|---|---|\n";
      for (const auto& r : summary) {
        md += "| " + r["k"].dump() + " | " + fmt_fixed(r["lambda"].get<double>(), 2) + " | " + r["l"].dump() + " | " +
              r["g_metric"].get<std::string>() + " | " + fmt_fixed(100 * r["rouge1_f1"].get<double>(), 1) + " | " +
              fmt_fixed(100 * r["rouge2_f1"].get<double>(), 1) + " | " +
              fmt_fixed(100 * r["rougeL_f1"].get<double>(), 1) + " | " + fmt_fixed(100 * r["meteor"].get<double>(), 1) +
              " |\n";
      }
    } else if (kind == "quark") {
      md += "| schedule | iteration | reward | pool | mean top reward | mean KL | baseline |\n|---|---|---|---|---|---|---|\n";
      for (const auto& r : summary) {
        md += "| " + r["schedule"].get<std::string>() + " | " + r["iteration"].dump() + " | " +
              r["reward_kind"].get<std::string>() + " | " + r["pool_size"].dump() + " | " +
              fmt_fixed(r["mean_top_reward"].get<double>(), 4) + " | " + fmt_fixed(r["mean_kl"].get<double>(), 4) +
              " | " + fmt_fixed(r["baseline_reward"].get<double>(), 4) + " |\n";
      }
    } else if (kind == "audit") {
      md += "| candidate | matched | mean ROUGE-L F1 |\n|---|---|---|\n";
      for (const auto& r : summary) {
        md += "| " + fs::path(r["candidate"].get<std::string>()).filename().string() + " | " + r["matched"].dump() +
              " | " + fmt_fixed(100 * r["mean_rougeL_f1"].get<double>(), 1) + " |\n";
      }
    } else {
      md += "```\n" + summary.dump(2) + "\n```\n";
    }
    const auto failures = m.value("failures", json::array());
    if (!failures.empty()) md += "\n" + std::to_string(failures.size()) + " recorded failure(s).\n";
  }
  return md;
}

// ---------------------------------------------------------------------------
// entry point

inline int run_cli(std::vector<std::string> args, std::ostream& os, std::ostream& err);

inline int replay(const std::string& manifest, const std::string& out, std::ostream& os, std::ostream& err) {
  const auto m = read_manifest(manifest);
  if (!m.contains("argv") || m["argv"].empty()) throw Error(manifest + ": artifact has no replayable command line");
  auto args = m["argv"].get<std::vector<std::string>>();
  args.insert(args.end(), {"--out", out});
  return run_cli(std::move(args), os, err);
}

struct ServeCommand {
  std::string data;
  std::string host = "127.0.0.1";
  int port = 8080;
  int ngram_order = 2;
  double ngram_k = 0.1;
  double mu = 0.9;
  TokenizerFlags tok;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset whose documents train the served n-gram model")->required();
    app->add_option("--mu", mu, "source-document weight")->check(CLI::Range(0.0, 1.0));
    app->add_option("--host", host, "bind address");
    app->add_option("--port", port, "port");
    app->add_option("--ngram-order", ngram_order, "n-gram order")->check(CLI::Range(1, 3));
    app->add_option("--ngram-k", ngram_k, "add-k constant");
    tok.add(app);
  }

  int run(std::ostream& os, std::ostream&) const {
    const auto dataset = load_strict(data);
    std::vector<std::string> docs;
    for (const auto& inst : dataset) docs.push_back(inst.document);
    NgramOptions o;
    o.order = ngram_order;
    o.k = ngram_k;
    o.count_eos = true;
    o.tokenizer = tok.options();
    std::shared_ptr<const LanguageModel> model = std::make_shared<DocumentNgramModel>(o, docs, mu);
    httplib::Server server;
    mount_model(server, model);
    os << "serving n-gram model on http://" << host << ":" << port << "\n" << std::flush;
    if (!server.listen(host, port)) throw Error("could not listen on " + host + ":" + std::to_string(port));
    return 0;
  }
};

inline int run_cli(std::vector<std::string> args, std::ostream& os, std::ostream& err) {
  CLI::App app{"Controlled text reduction engine: scoring, lookahead decoding, Quark loops, distillation", "ctr"};
  app.set_version_flag("--version", kEngineVersion);
  app.require_subcommand(1);

  ScoreCommand score;
  DecodeCommand dec;
  SweepCommand sw;
  QuarkCommand quark;
  DistillCommand distill;
  AuditCommand audit;
  MicroPrCommand micro;
  ServeCommand serve;
  std::vector<std::string> report_inputs;
  std::string report_out = "-";
  std::string replay_manifest;
  std::string replay_out;

  score.add(app.add_subcommand("score", "score system outputs against highlights or references"));
  dec.add(app.add_subcommand("decode", "highlight-sensitive lookahead decoding"));
  sw.add(app.add_subcommand("sweep", "full-factorial decoding sweep"));
  quark.add(app.add_subcommand("quark", "run the reward-quantized training loop"));
  distill.add(app.add_subcommand("distill", "build distillation prompts and generate silver summaries"));
  audit.add(app.add_subcommand("audit", "ROUGE-L alignment between highlight sets"));
  micro.add(app.add_subcommand("micro-pr", "micro precision/recall over fact-unit annotations"));
  serve.add(app.add_subcommand("serve-lm", "serve a local n-gram model over the remote LM protocol"));
  auto* rep = app.add_subcommand("report", "consolidate run artifacts into markdown");
  rep->add_option("artifacts", report_inputs, "artifact manifests (*.manifest.json)")->required();
  rep->add_option("--out", report_out, "markdown output ('-' for stdout)");
  auto* rp = app.add_subcommand("replay", "re-run a command from its artifact manifest");
  rp->add_option("manifest", replay_manifest, "artifact manifest")->required();
  rp->add_option("--out", replay_out, "new payload path")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    return app.exit(e, os, err);
  }

  try {
    if (app.got_subcommand("score")) return score.run(os, err);
    if (app.got_subcommand("decode")) return dec.run(os, err);
    if (app.got_subcommand("sweep")) return sw.run(os, err);
    if (app.got_subcommand("quark")) return quark.run(os, err);
    if (app.got_subcommand("distill")) return distill.run(os, err);
    if (app.got_subcommand("audit")) return audit.run(os, err);
    if (app.got_subcommand("micro-pr")) return micro.run(os, err);
    if (app.got_subcommand("serve-lm")) return serve.run(os, err);
    if (app.got_subcommand("report")) {
      const auto md = build_report(report_inputs);
      if (report_out == "-") {
        os << md;
      } else {
        write_file_atomic(report_out, md);
      }
      return 0;
    }
    if (app.got_subcommand("replay")) return replay(replay_manifest, replay_out, os, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace ctr::cli
