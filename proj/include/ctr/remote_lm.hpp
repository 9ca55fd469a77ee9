#pragma once

// HTTP language model: a client speaking the /v1/logprobs and /v1/rollout
// protocol, and a server exposing any in-process LanguageModel over it.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <future>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>

#include "ctr/error.hpp"
#include "ctr/lm.hpp"

namespace ctr {

struct Endpoint {
  std::string base;         // scheme://host[:port]
  std::string path_prefix;  // "" or "/something"
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw Error("endpoint URL must include a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  Endpoint ep;
  ep.base = url.substr(0, slash);
  if (slash != std::string::npos) {
    ep.path_prefix = url.substr(slash);
    while (!ep.path_prefix.empty() && ep.path_prefix.back() == '/') ep.path_prefix.pop_back();
  }
  return ep;
}

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{50};
};

/// POSTs a JSON body, retrying transport failures and 5xx replies with
/// exponential backoff. 4xx replies are not retried.
inline json post_json(const Endpoint& ep, const std::string& path, const json& body, const RetryPolicy& retry = {},
                      const httplib::Headers& headers = {}) {
  std::string last_error;
  auto backoff = retry.initial_backoff;
  for (int attempt = 1; attempt <= retry.attempts; ++attempt) {
    httplib::Client cli(ep.base);
    cli.set_connection_timeout(5, 0);
    cli.set_read_timeout(120, 0);
    std::string target = ep.path_prefix + path;
    if (target.empty()) target = "/";
    auto res = cli.Post(target, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw TransportError(ep.base + ep.path_prefix + path + ": malformed JSON reply: " + e.what());
      }
    }
    if (res) {
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
      if (res->status >= 400 && res->status < 500) break;
    } else {
      last_error = httplib::to_string(res.error());
    }
    if (attempt < retry.attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw TransportError(ep.base + ep.path_prefix + path + ": " + last_error);
}

inline json control_json(const LmContext& ctx) { return ctx.control ? json(*ctx.control) : json(nullptr); }

/// Client for a remote model. Token strings travel as-is, so a subword
/// server can interoperate by returning its own tokens.
class RemoteModel : public LanguageModel {
 public:
  explicit RemoteModel(std::string url, std::size_t max_in_flight = 4, RetryPolicy retry = {})
      : endpoint_(parse_endpoint(url)), max_in_flight_(std::max<std::size_t>(1, max_in_flight)), retry_(retry) {}

  /// Endpoint from CTR_LM_URL, or nullptr when the variable is unset.
  static std::shared_ptr<RemoteModel> from_env() {
    const char* url = std::getenv("CTR_LM_URL");
    if (!url || !*url) return nullptr;
    return std::make_shared<RemoteModel>(url);
  }

  NextTokenDistribution next_distribution(const LmContext& ctx, std::size_t top_k) const override {
    if (top_k == 0) throw Error("top_k must be >= 1");
    const long long k = top_k == kAllTokens ? 0 : static_cast<long long>(top_k);
    json body{{"context", ctx.conditioning}, {"prefix", ctx.prefix}, {"control", control_json(ctx)}, {"top_k", k}};
    const auto reply = post_json(endpoint_, "/v1/logprobs", body, retry_);
    NextTokenDistribution d;
    try {
      for (const auto& e : reply.at("entries")) d.entries.push_back({e.at("token").get<std::string>(), e.at("logprob").get<double>()});
      d.truncated = reply.at("truncated").get<bool>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("unexpected /v1/logprobs reply: ") + e.what());
    }
    if (d.entries.empty()) throw Error("remote model returned an empty vocabulary");
    return d;
  }

  Continuation greedy_rollout(const LmContext& ctx, std::size_t max_tokens) const override {
    return rollout(ctx, max_tokens, "greedy", 1.0, 0);
  }

  Continuation sample(const LmContext& ctx, double temperature, std::uint64_t seed,
                      std::size_t max_tokens) const override {
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
    return rollout(ctx, max_tokens, "sample", temperature, seed);
  }

  std::vector<Continuation> greedy_rollouts(const std::vector<LmContext>& contexts,
                                            std::size_t max_tokens) const override {
    std::vector<Continuation> out(contexts.size());
    for (std::size_t begin = 0; begin < contexts.size(); begin += max_in_flight_) {
      const std::size_t end = std::min(contexts.size(), begin + max_in_flight_);
      std::vector<std::future<Continuation>> pending;
      for (std::size_t i = begin; i < end; ++i) {
        pending.push_back(std::async(std::launch::async, [this, &contexts, i, max_tokens] {
          return greedy_rollout(contexts[i], max_tokens);
        }));
      }
      for (std::size_t i = begin; i < end; ++i) out[i] = pending[i - begin].get();
    }
    return out;
  }

 private:
  Continuation rollout(const LmContext& ctx, std::size_t max_tokens, const char* mode, double temperature,
                       std::uint64_t seed) const {
    json body{{"context", ctx.conditioning}, {"prefix", ctx.prefix},   {"control", control_json(ctx)},
              {"max_tokens", max_tokens},    {"mode", mode},           {"temperature", temperature},
              {"seed", seed}};
    const auto reply = post_json(endpoint_, "/v1/rollout", body, retry_);
    Continuation c;
    try {
      c.tokens = reply.at("tokens").get<std::vector<std::string>>();
      c.terminated = reply.at("terminated").get<bool>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("unexpected /v1/rollout reply: ") + e.what());
    }
    return c;
  }

  Endpoint endpoint_;
  std::size_t max_in_flight_;
  RetryPolicy retry_;
};

inline LmContext context_from_request(const json& req) {
  LmContext ctx;
  ctx.conditioning = req.at("context").get<std::string>();
  ctx.prefix = req.at("prefix").get<std::vector<std::string>>();
  if (req.contains("control") && !req["control"].is_null()) {
    auto control = req["control"].get<std::string>();
    if (!is_reward_token(control)) throw ValidationError("unknown control token: " + control);
    ctx.control = std::move(control);
  }
  return ctx;
}

/// Registers the two protocol routes on `server`, answering from `model`.
inline void mount_model(httplib::Server& server, std::shared_ptr<const LanguageModel> model) {
  auto guarded = [](std::function<json(const json&)> fn) {
    return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
      try {
        res.set_content(fn(json::parse(req.body)).dump(), "application/json");
      } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      } catch (const ValidationError& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      }
    };
  };

  server.Post("/v1/logprobs", guarded([model](const json& req) {
                const auto ctx = context_from_request(req);
                const auto k = req.at("top_k").get<long long>();
                if (k < 0) throw ValidationError("top_k must be >= 1");
                const auto d = model->next_distribution(ctx, k == 0 ? kAllTokens : static_cast<std::size_t>(k));
                json entries = json::array();
                for (const auto& e : d.entries) entries.push_back({{"token", e.token}, {"logprob", e.logprob}});
                return json{{"entries", entries}, {"truncated", d.truncated}};
              }));

  server.Post("/v1/rollout", guarded([model](const json& req) {
                const auto ctx = context_from_request(req);
                const auto max_tokens = req.at("max_tokens").get<std::size_t>();
                const auto mode = req.value("mode", std::string("greedy"));
                Continuation c;
                if (mode == "greedy") {
                  c = model->greedy_rollout(ctx, max_tokens);
                } else if (mode == "sample") {
                  c = model->sample(ctx, req.at("temperature").get<double>(), req.at("seed").get<std::uint64_t>(),
                                    max_tokens);
                } else {
                  throw ValidationError("unknown rollout mode: " + mode);
                }
                return json{{"tokens", c.tokens}, {"terminated", c.terminated}};
              }));
}

/// Serves `model` on a background thread bound to an ephemeral local port.
/// Stops and joins on destruction.
class LoopbackServer {
 public:
  explicit LoopbackServer(std::shared_ptr<const LanguageModel> model, const std::string& host = "127.0.0.1") {
    mount_model(server_, std::move(model));
    port_ = server_.bind_to_any_port(host);
    if (port_ <= 0) throw Error("could not bind a loopback port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    url_ = "http://" + host + ":" + std::to_string(port_);
  }
  ~LoopbackServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  LoopbackServer(const LoopbackServer&) = delete;
  LoopbackServer& operator=(const LoopbackServer&) = delete;

  const std::string& url() const { return url_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::string url_;
};

}  // namespace ctr
