#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crop/common.hpp"

namespace crop {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Task and gold answers
// ---------------------------------------------------------------------------

enum class TaskKind { numeric, choice_index };

inline std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::numeric ? "numeric" : "choice-index";
}

// Kind-tagged gold label. Numeric golds are kept as canonical decimal
// strings so comparison stays exact; indices are zero-based integers.
class GoldAnswer {
 public:
  static GoldAnswer numeric(std::string_view raw) {
    auto canon = canonical_decimal(raw);
    if (!canon) throw Error("not a decimal gold value: '" + std::string(raw) + "'");
    GoldAnswer g;
    g.kind_ = TaskKind::numeric;
    g.decimal_ = std::move(*canon);
    return g;
  }

  static GoldAnswer index(std::int64_t i) {
    if (i < 0) throw Error("option index must be non-negative");
    GoldAnswer g;
    g.kind_ = TaskKind::choice_index;
    g.index_ = i;
    return g;
  }

  TaskKind kind() const { return kind_; }

  const std::string& decimal() const {
    if (kind_ != TaskKind::numeric) throw KindMismatch("gold is not numeric");
    return decimal_;
  }

  std::int64_t option_index() const {
    if (kind_ != TaskKind::choice_index) throw KindMismatch("gold is not an index");
    return index_;
  }

  std::string to_string() const {
    return kind_ == TaskKind::numeric ? decimal_ : std::to_string(index_);
  }

  bool operator==(const GoldAnswer& other) const {
    if (kind_ != other.kind_) return false;
    return kind_ == TaskKind::numeric ? decimal_ == other.decimal_
                                      : index_ == other.index_;
  }

 private:
  GoldAnswer() = default;
  TaskKind kind_ = TaskKind::numeric;
  std::string decimal_;
  std::int64_t index_ = -1;
};

// ---------------------------------------------------------------------------
// Core value objects
// ---------------------------------------------------------------------------

// The learnable system prompt plus provenance.
struct PromptParameter {
  std::string text;
  int iteration_born = 0;
  std::optional<std::string> parent_hash;

  static PromptParameter make(std::string text, int iteration_born = 0,
                              std::optional<std::string> parent_hash = std::nullopt) {
    if (trim_view(text).empty()) throw Error("prompt text must be non-empty");
    return PromptParameter{std::move(text), iteration_born, std::move(parent_hash)};
  }
};

inline std::string content_hash(const PromptParameter& p) {
  return fnv1a64_hex(p.text);
}

struct LabeledExample {
  std::string query;
  GoldAnswer gold;
  TaskKind task_kind;

  static LabeledExample make(std::string query, GoldAnswer gold) {
    TaskKind kind = gold.kind();
    return LabeledExample{std::move(query), std::move(gold), kind};
  }
};

struct ModelOutput {
  std::string text;
  std::int64_t completion_tokens = 0;
  std::int64_t latency_ms = 0;
};

// Task critique plus optional brevity critique; `combined` is the two
// joined by a single line feed (just the task critique when the brevity
// side was gated off).
struct GradientBundle {
  std::string task_gradient;
  std::optional<std::string> reg_gradient;
  std::string combined;

  static GradientBundle make(std::string task, std::optional<std::string> reg) {
    GradientBundle b;
    b.combined = reg ? task + "\n" + *reg : task;
    b.task_gradient = std::move(task);
    b.reg_gradient = std::move(reg);
    return b;
  }
};

// One optimization step: the evaluated prompt and its batch statistics.
struct IterationRecord {
  int iteration = 0;
  PromptParameter prompt;
  std::int64_t correct_count = 0;
  std::int64_t total_output_tokens = 0;
  std::int64_t batch_size = 0;
  double accuracy = 0.0;
  double avg_length = 0.0;
  double l_norm = 0.0;
  double score = 0.0;

  static IterationRecord make(int iteration, PromptParameter prompt,
                              std::int64_t correct_count,
                              std::int64_t total_output_tokens,
                              std::int64_t batch_size, double lambda,
                              double cot_reference_length) {
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (cot_reference_length <= 0.0) throw Error("CoT reference length must be > 0");
    IterationRecord r;
    r.iteration = iteration;
    r.prompt = std::move(prompt);
    r.correct_count = correct_count;
    r.total_output_tokens = total_output_tokens;
    r.batch_size = batch_size;
    r.accuracy = static_cast<double>(correct_count) / static_cast<double>(batch_size);
    r.avg_length =
        static_cast<double>(total_output_tokens) / static_cast<double>(batch_size);
    r.l_norm = r.avg_length / cot_reference_length;
    r.score = r.accuracy - lambda * r.l_norm;
    return r;
  }
};

// ---------------------------------------------------------------------------
// Backend configuration
// ---------------------------------------------------------------------------

enum class Role { target, evaluator, optimizer };

inline std::string_view to_string(Role role) {
  switch (role) {
    case Role::target: return "target";
    case Role::evaluator: return "evaluator";
    case Role::optimizer: return "optimizer";
  }
  return "target";
}

inline Role role_from_string(std::string_view s) {
  if (s == "target") return Role::target;
  if (s == "evaluator") return Role::evaluator;
  if (s == "optimizer") return Role::optimizer;
  throw ConfigError("unknown role: '" + std::string(s) + "'");
}

inline bool is_mock_endpoint(std::string_view url) {
  return url.rfind("mock:", 0) == 0;
}

struct BackendProfile {
  std::string endpoint_url;
  std::string model_name;
  double temperature = 0.0;
  std::int64_t max_output_tokens = 1024;
  Role role = Role::target;
  std::string auth_env_var;

  void validate() const {
    bool absolute = endpoint_url.rfind("http://", 0) == 0 ||
                    endpoint_url.rfind("https://", 0) == 0;
    if (!absolute && !is_mock_endpoint(endpoint_url)) {
      throw ConfigError("endpoint_url must be an absolute URL or 'mock:<script>': " +
                        endpoint_url);
    }
    if (model_name.empty()) throw ConfigError("model_name must be non-empty");
    if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
    if (max_output_tokens < 1) throw ConfigError("max_output_tokens must be >= 1");
  }
};

inline double default_temperature(Role role) {
  return role == Role::optimizer ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Run configuration. File keys are fixed; unknown keys are rejected so a
// typo cannot silently fall back to a default.
// ---------------------------------------------------------------------------

struct RunConfig {
  double lambda = 0.2;
  std::int64_t batch_size = 1;
  std::int64_t max_iterations = 1;
  std::int64_t reg_threshold_tokens = 30;
  std::optional<double> cot_reference_length;
  std::int64_t seed = 0;
  std::vector<BackendProfile> backends;

  const BackendProfile& backend(Role role) const {
    for (const auto& b : backends) {
      if (b.role == role) return b;
    }
    throw ConfigError("no backend configured for role '" +
                      std::string(to_string(role)) + "'");
  }

  void validate() const {
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
    if (reg_threshold_tokens < 0) throw ConfigError("reg_threshold_tokens must be >= 0");
    if (cot_reference_length && *cot_reference_length <= 0.0) {
      throw ConfigError("cot_reference_length must be > 0 when present");
    }
    if (backends.size() != 3) {
      throw ConfigError("config requires exactly three backends (target, evaluator, optimizer)");
    }
    int seen[3] = {0, 0, 0};
    for (const auto& b : backends) {
      b.validate();
      seen[static_cast<int>(b.role)]++;
    }
    if (seen[0] != 1 || seen[1] != 1 || seen[2] != 1) {
      throw ConfigError("config requires one backend per role");
    }
  }

  json to_json() const {
    json backends_json = json::array();
    for (const auto& b : backends) {
      backends_json.push_back(json{{"endpoint_url", b.endpoint_url},
                                   {"model_name", b.model_name},
                                   {"temperature", b.temperature},
                                   {"max_output_tokens", b.max_output_tokens},
                                   {"role", std::string(to_string(b.role))},
                                   {"auth_env_var", b.auth_env_var}});
    }
    json j{{"lambda", lambda},
           {"batch_size", batch_size},
           {"max_iterations", max_iterations},
           {"reg_threshold_tokens", reg_threshold_tokens},
           {"seed", seed},
           {"backends", backends_json}};
    j["cot_reference_length"] =
        cot_reference_length ? json(*cot_reference_length) : json(nullptr);
    return j;
  }

  static RunConfig from_json(const json& j) {
    static const char* top_keys[] = {"lambda",
                                     "batch_size",
                                     "max_iterations",
                                     "reg_threshold_tokens",
                                     "cot_reference_length",
                                     "seed",
                                     "backends"};
    static const char* backend_keys[] = {"endpoint_url",    "model_name",
                                         "temperature",     "max_output_tokens",
                                         "role",            "auth_env_var"};
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& item : j.items()) {
      bool known = false;
      for (const char* k : top_keys) known = known || item.key() == k;
      if (!known) throw ConfigError("unknown config key: '" + item.key() + "'");
    }

    RunConfig cfg;
    cfg.lambda = j.value("lambda", 0.2);
    if (!j.contains("batch_size")) throw ConfigError("config missing 'batch_size'");
    cfg.batch_size = j.at("batch_size").get<std::int64_t>();
    if (!j.contains("max_iterations")) throw ConfigError("config missing 'max_iterations'");
    cfg.max_iterations = j.at("max_iterations").get<std::int64_t>();
    cfg.reg_threshold_tokens = j.value("reg_threshold_tokens", std::int64_t{30});
    if (j.contains("cot_reference_length") && !j.at("cot_reference_length").is_null()) {
      cfg.cot_reference_length = j.at("cot_reference_length").get<double>();
    }
    if (!j.contains("seed")) throw ConfigError("config missing 'seed'");
    cfg.seed = j.at("seed").get<std::int64_t>();

    if (!j.contains("backends") || !j.at("backends").is_array()) {
      throw ConfigError("config missing 'backends' array");
    }
    for (const auto& bj : j.at("backends")) {
      if (!bj.is_object()) throw ConfigError("backend entry must be an object");
      for (const auto& item : bj.items()) {
        bool known = false;
        for (const char* k : backend_keys) known = known || item.key() == k;
        if (!known) throw ConfigError("unknown backend key: '" + item.key() + "'");
      }
      BackendProfile b;
      if (!bj.contains("endpoint_url")) throw ConfigError("backend missing 'endpoint_url'");
      b.endpoint_url = bj.at("endpoint_url").get<std::string>();
      if (!bj.contains("model_name")) throw ConfigError("backend missing 'model_name'");
      b.model_name = bj.at("model_name").get<std::string>();
      if (!bj.contains("role")) throw ConfigError("backend missing 'role'");
      b.role = role_from_string(bj.at("role").get<std::string>());
      b.temperature = bj.value("temperature", default_temperature(b.role));
      b.max_output_tokens = bj.value("max_output_tokens", std::int64_t{1024});
      b.auth_env_var = bj.value("auth_env_var", std::string{});
      cfg.backends.push_back(std::move(b));
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig load_file(const std::filesystem::path& path) {
    json j;
    try {
      j = json::parse(read_text_file(path));
    } catch (const json::exception& ex) {
      throw ConfigError("cannot parse config " + path.string() + ": " + ex.what());
    }
    return from_json(j);
  }

  // Hash over the canonical serialization; checkpoints use it to refuse
  // resuming under a different configuration.
  std::string hash() const { return fnv1a64_hex(to_json().dump()); }
};

}  // namespace crop
