#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "crop/common.hpp"
#include "crop/model.hpp"

namespace crop {

// ---------------------------------------------------------------------------
// Requests and token accounting
// ---------------------------------------------------------------------------

struct ChatRequest {
  std::string system;
  std::string user;
  BackendProfile profile;
};

/// Whitespace-delimited word count. Used only when the backend reports no
/// usage data; backend-reported counts always win.
inline std::int64_t count_tokens_fallback(std::string_view text) {
  std::int64_t words = 0;
  bool in_word = false;
  for (char c : text) {
    bool space = is_space_char(c);
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

// ---------------------------------------------------------------------------
// Mock scripts: ordered substring rules over the user message, first match
// wins, fall through to the default reply.
// ---------------------------------------------------------------------------

struct MockRule {
  std::string match;
  std::string response;
  std::optional<std::int64_t> completion_tokens;
  std::int64_t delay_ms = 0;
};

struct MockScript {
  std::vector<MockRule> rules;
  std::optional<MockRule> fallback;

  static MockScript from_json(const json& j) {
    MockScript script;
    if (!j.is_object()) throw ConfigError("mock script root must be a JSON object");
    auto parse_rule = [](const json& rj, bool require_match) {
      MockRule rule;
      if (require_match) {
        if (!rj.contains("match")) throw ConfigError("mock rule missing 'match'");
        rule.match = rj.at("match").get<std::string>();
      }
      if (!rj.contains("response")) throw ConfigError("mock rule missing 'response'");
      rule.response = rj.at("response").get<std::string>();
      if (rj.contains("completion_tokens")) {
        rule.completion_tokens = rj.at("completion_tokens").get<std::int64_t>();
      }
      rule.delay_ms = rj.value("delay_ms", std::int64_t{0});
      return rule;
    };
    if (j.contains("rules")) {
      for (const auto& rj : j.at("rules")) script.rules.push_back(parse_rule(rj, true));
    }
    if (j.contains("default")) {
      script.fallback = parse_rule(j.at("default"), false);
    }
    return script;
  }

  static MockScript load_file(const std::filesystem::path& path) {
    try {
      return from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& ex) {
      throw ConfigError("cannot parse mock script " + path.string() + ": " + ex.what());
    }
  }

  const MockRule* find(std::string_view user) const {
    for (const auto& rule : rules) {
      if (user.find(rule.match) != std::string_view::npos) return &rule;
    }
    return fallback ? &*fallback : nullptr;
  }
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

struct GatewaySettings {
  int retry_cap = 3;
  int max_in_flight = 4;
  std::int64_t timeout_ms = 30000;
  std::int64_t backoff_base_ms = 250;

  static GatewaySettings from_env() {
    GatewaySettings s;
    if (const char* v = std::getenv("CROP_HTTP_TIMEOUT_MS")) {
      s.timeout_ms = std::strtoll(v, nullptr, 10);
      if (s.timeout_ms <= 0) throw ConfigError("CROP_HTTP_TIMEOUT_MS must be > 0");
    }
    return s;
  }
};

struct EndpointStats {
  std::int64_t requests = 0;   // logical complete() calls
  std::int64_t attempts = 0;   // wire attempts including retries
  std::int64_t retries = 0;
  int max_in_flight_seen = 0;
};

struct TranscriptEntry {
  std::string endpoint;
  std::string system;
  std::string user;
  std::string response;
  std::int64_t completion_tokens = 0;
};

class Gateway {
 public:
  virtual ~Gateway() = default;
  virtual ModelOutput complete(const ChatRequest& req) = 0;
};

class LlmGateway final : public Gateway {
 public:
  explicit LlmGateway(GatewaySettings settings = GatewaySettings::from_env())
      : settings_(settings) {}

  ModelOutput complete(const ChatRequest& req) override {
    if (trim_view(req.user).empty()) throw Error("chat request user message must be non-empty");
    Endpoint& ep = endpoint(req.profile.endpoint_url);
    InFlightGuard guard(ep, settings_.max_in_flight);
    {
      std::lock_guard<std::mutex> lock(stats_mutex_);
      stats_[req.profile.endpoint_url].requests++;
    }
    auto started = std::chrono::steady_clock::now();
    ModelOutput out = is_mock_endpoint(req.profile.endpoint_url)
                          ? complete_mock(req)
                          : complete_http(req);
    out.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - started)
                         .count();
    record_transcript(req, out);
    return out;
  }

  EndpointStats stats(const std::string& endpoint_url) const {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    auto it = stats_.find(endpoint_url);
    return it == stats_.end() ? EndpointStats{} : it->second;
  }

  void set_record_transcript(bool on) {
    std::lock_guard<std::mutex> lock(transcript_mutex_);
    record_transcript_ = on;
  }

  std::vector<TranscriptEntry> transcript() const {
    std::lock_guard<std::mutex> lock(transcript_mutex_);
    return transcript_;
  }

  const GatewaySettings& settings() const { return settings_; }

 private:
  // Per-endpoint in-flight limiter; the one synchronized hot path.
  struct Endpoint {
    std::mutex mutex;
    std::condition_variable cv;
    int in_flight = 0;
  };

  class InFlightGuard {
   public:
    InFlightGuard(Endpoint& ep, int limit) : ep_(ep) {
      std::unique_lock<std::mutex> lock(ep_.mutex);
      ep_.cv.wait(lock, [&] { return ep_.in_flight < limit; });
      ep_.in_flight++;
    }
    ~InFlightGuard() {
      {
        std::lock_guard<std::mutex> lock(ep_.mutex);
        ep_.in_flight--;
      }
      ep_.cv.notify_one();
    }

   private:
    Endpoint& ep_;
  };

  Endpoint& endpoint(const std::string& url) {
    std::lock_guard<std::mutex> lock(endpoints_mutex_);
    auto& ptr = endpoints_[url];
    if (!ptr) ptr = std::make_unique<Endpoint>();
    return *ptr;
  }

  void note_in_flight(const std::string& url, int current) {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    auto& s = stats_[url];
    if (current > s.max_in_flight_seen) s.max_in_flight_seen = current;
  }

  void bump_attempt(const std::string& url, bool is_retry) {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    auto& s = stats_[url];
    s.attempts++;
    if (is_retry) s.retries++;
  }

  void record_transcript(const ChatRequest& req, const ModelOutput& out) {
    std::lock_guard<std::mutex> lock(transcript_mutex_);
    if (!record_transcript_) return;
    transcript_.push_back(TranscriptEntry{req.profile.endpoint_url, req.system,
                                          req.user, out.text,
                                          out.completion_tokens});
  }

  ModelOutput complete_mock(const ChatRequest& req) {
    const std::string path = req.profile.endpoint_url.substr(5);
    const MockScript* script = nullptr;
    {
      std::lock_guard<std::mutex> lock(scripts_mutex_);
      auto it = scripts_.find(path);
      if (it == scripts_.end()) {
        it = scripts_.emplace(path, MockScript::load_file(path)).first;
      }
      script = &it->second;
    }
    {
      Endpoint& ep = endpoint(req.profile.endpoint_url);
      std::lock_guard<std::mutex> lock(ep.mutex);
      note_in_flight(req.profile.endpoint_url, ep.in_flight);
    }
    bump_attempt(req.profile.endpoint_url, false);
    const MockRule* rule = script->find(req.user);
    if (!rule) {
      throw MalformedResponse("mock script has no matching rule and no default: " + path);
    }
    if (rule->delay_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(rule->delay_ms));
    }
    ModelOutput out;
    out.text = rule->response;
    out.completion_tokens = rule->completion_tokens
                                ? *rule->completion_tokens
                                : count_tokens_fallback(rule->response);
    return out;
  }

  struct ParsedUrl {
    std::string origin;  // scheme://host[:port]
    std::string base;    // path prefix, possibly empty
  };

  static ParsedUrl parse_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("not an absolute URL: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl p;
    if (path_start == std::string::npos) {
      p.origin = url;
    } else {
      p.origin = url.substr(0, path_start);
      p.base = url.substr(path_start);
      while (!p.base.empty() && p.base.back() == '/') p.base.pop_back();
    }
    return p;
  }

  static bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
  }

  ModelOutput complete_http(const ChatRequest& req) {
    std::string bearer;
    if (!req.profile.auth_env_var.empty()) {
      const char* token = std::getenv(req.profile.auth_env_var.c_str());
      if (!token || *token == '\0') {
        throw AuthError("auth env var not set: " + req.profile.auth_env_var);
      }
      bearer = token;
    }

    json body{{"model", req.profile.model_name},
              {"temperature", req.profile.temperature},
              {"max_tokens", req.profile.max_output_tokens}};
    json messages = json::array();
    if (!req.system.empty()) {
      messages.push_back(json{{"role", "system"}, {"content", req.system}});
    }
    messages.push_back(json{{"role", "user"}, {"content", req.user}});
    body["messages"] = messages;
    const std::string payload = body.dump();

    const ParsedUrl url = parse_url(req.profile.endpoint_url);
    const std::string route = url.base + "/chat/completions";

    int attempts_left = 1 + settings_.retry_cap;
    int attempt = 0;
    std::string last_failure;
    while (attempts_left-- > 0) {
      if (attempt > 0) {
        auto delay = std::chrono::milliseconds(settings_.backoff_base_ms << (attempt - 1));
        std::this_thread::sleep_for(delay);
      }
      bump_attempt(req.profile.endpoint_url, attempt > 0);
      {
        Endpoint& ep = endpoint(req.profile.endpoint_url);
        std::lock_guard<std::mutex> lock(ep.mutex);
        note_in_flight(req.profile.endpoint_url, ep.in_flight);
      }
      ++attempt;

      httplib::Client client(url.origin);
      client.set_connection_timeout(settings_.timeout_ms / 1000,
                                    (settings_.timeout_ms % 1000) * 1000);
      client.set_read_timeout(settings_.timeout_ms / 1000, (settings_.timeout_ms % 1000) * 1000);
      client.set_write_timeout(settings_.timeout_ms / 1000, (settings_.timeout_ms % 1000) * 1000);
      httplib::Headers headers;
      if (!bearer.empty()) headers.emplace("Authorization", "Bearer " + bearer);

      auto res = client.Post(route, headers, payload, "application/json");
      if (!res) {
        last_failure = "connection failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 401 || res->status == 403) {
        throw AuthError("endpoint denied credentials (HTTP " +
                        std::to_string(res->status) + ")");
      }
      if (retryable_status(res->status)) {
        last_failure = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
      }
      return parse_completion_body(res->body);
    }
    throw TransportError("request failed after " + std::to_string(attempt) +
                         " attempts (" + last_failure + ")");
  }

  static ModelOutput parse_completion_body(const std::string& body) {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::exception&) {
      throw MalformedResponse("endpoint reply is not JSON");
    }
    if (!j.contains("choices") || !j.at("choices").is_array() || j.at("choices").empty()) {
      throw MalformedResponse("endpoint reply lacks choices");
    }
    const json& choice = j.at("choices").at(0);
    if (!choice.contains("message") || !choice.at("message").contains("content") ||
        !choice.at("message").at("content").is_string()) {
      throw MalformedResponse("endpoint reply lacks message text");
    }
    ModelOutput out;
    out.text = choice.at("message").at("content").get<std::string>();
    if (j.contains("usage") && j.at("usage").is_object() &&
        j.at("usage").contains("completion_tokens")) {
      out.completion_tokens = j.at("usage").at("completion_tokens").get<std::int64_t>();
      if (out.completion_tokens < 0) throw MalformedResponse("negative completion_tokens");
    } else {
      out.completion_tokens = count_tokens_fallback(out.text);
    }
    return out;
  }

  GatewaySettings settings_;
  mutable std::mutex stats_mutex_;
  std::map<std::string, EndpointStats> stats_;
  std::mutex endpoints_mutex_;
  std::map<std::string, std::unique_ptr<Endpoint>> endpoints_;
  std::mutex scripts_mutex_;
  std::map<std::string, MockScript> scripts_;
  mutable std::mutex transcript_mutex_;
  bool record_transcript_ = false;
  std::vector<TranscriptEntry> transcript_;
};

}  // namespace crop
