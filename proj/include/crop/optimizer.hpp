#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crop/common.hpp"
#include "crop/datasets.hpp"
#include "crop/evaluators.hpp"
#include "crop/gateway.hpp"
#include "crop/model.hpp"

namespace crop {

// Rendered into the REGULARIZATION_FEEDBACK block when the length gate
// skipped the example; the template always carries the block.
inline constexpr std::string_view kNoRegFeedback =
    "(none — output under length threshold)";

inline constexpr std::uint64_t kBatchSampleStream = 0x5a;

// ---------------------------------------------------------------------------
// Optimizer update template: a preamble, one conversation block per batch
// example (in batch order), and a postamble with the reply-format contract.
// ---------------------------------------------------------------------------

struct OptimizerTemplate {
  std::string preamble;
  std::string per_example;
  std::string postamble;

  static OptimizerTemplate load(const std::filesystem::path& path) {
    std::string raw = read_text_file(path);
    OptimizerTemplate t;
    std::string* section = nullptr;
    std::vector<std::string> lines;
    bool before_first_marker = true;
    auto flush = [&]() {
      if (!section) return;
      std::string joined;
      for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i > 0) joined += '\n';
        joined += lines[i];
      }
      *section = std::move(joined);
      lines.clear();
    };
    for (auto line : split_lines(raw)) {
      std::string_view sv = line;
      if (!sv.empty() && sv.back() == '\r') sv.remove_suffix(1);
      if (sv == "<<<PREAMBLE>>>" || sv == "<<<PER_EXAMPLE>>>" || sv == "<<<POSTAMBLE>>>") {
        flush();
        before_first_marker = false;
        section = sv == "<<<PREAMBLE>>>" ? &t.preamble
                  : sv == "<<<PER_EXAMPLE>>>" ? &t.per_example
                                              : &t.postamble;
        continue;
      }
      if (before_first_marker) {
        if (!sv.empty() && sv.front() != '#') {
          throw FormatError(path.string() + ": content before first section marker");
        }
        continue;
      }
      lines.push_back(std::string(sv));
    }
    // Trailing blank line from the file's final newline is not content.
    if (!lines.empty() && lines.back().empty()) lines.pop_back();
    flush();
    if (t.preamble.empty() || t.per_example.empty() || t.postamble.empty()) {
      throw FormatError(path.string() + ": template needs PREAMBLE, PER_EXAMPLE, POSTAMBLE");
    }
    return t;
  }

  std::string hash() const {
    return fnv1a64_hex(preamble + "\x1f" + per_example + "\x1f" + postamble);
  }
};

struct ConversationBlock {
  std::string question;
  std::string response;
  std::string feedback;
  std::string regularization_feedback;
};

inline std::string render_optimizer_request(const OptimizerTemplate& t,
                                            const std::string& current_prompt,
                                            std::span<const ConversationBlock> blocks) {
  std::string out =
      render_template(t.preamble, {{"prompt", current_prompt}});
  for (const auto& block : blocks) {
    out += "\n\n";
    out += render_template(t.per_example,
                           {{"prompt", current_prompt},
                            {"question", block.question},
                            {"response", block.response},
                            {"feedback", block.feedback},
                            {"regularization_feedback", block.regularization_feedback}});
  }
  out += "\n\n";
  out += render_template(t.postamble, {});
  return out;
}

// Recovers exactly the span between the IMPROVED_VARIABLE tags. Leading or
// trailing prose around the tags is tolerated; a nested opening tag inside
// the span, a missing tag, or tags out of order is a parse error.
inline std::string parse_improved_variable(std::string_view reply) {
  constexpr std::string_view open = "<IMPROVED_VARIABLE>";
  constexpr std::string_view close = "</IMPROVED_VARIABLE>";
  std::size_t begin = reply.find(open);
  if (begin == std::string_view::npos) {
    throw OptimizerParseError("optimizer reply has no <IMPROVED_VARIABLE> tag");
  }
  std::size_t content = begin + open.size();
  std::size_t end = reply.find(close, content);
  if (end == std::string_view::npos) {
    throw OptimizerParseError("optimizer reply has no closing </IMPROVED_VARIABLE> tag");
  }
  std::string_view span = reply.substr(content, end - content);
  if (span.find(open) != std::string_view::npos) {
    throw OptimizerParseError("optimizer reply nests IMPROVED_VARIABLE tags");
  }
  return std::string(span);
}

// ---------------------------------------------------------------------------
// Loop state
// ---------------------------------------------------------------------------

struct OptimizerState {
  PromptParameter current_prompt;
  PromptParameter best_prompt;
  double best_score = -std::numeric_limits<double>::infinity();
  bool has_best = false;
  std::vector<IterationRecord> history;
  std::int64_t rng_seed = 0;
  int next_iteration = 1;
  std::vector<std::string> events;

  static OptimizerState initial(PromptParameter p0, std::int64_t seed) {
    OptimizerState s;
    s.current_prompt = p0;
    s.best_prompt = std::move(p0);
    s.rng_seed = seed;
    return s;
  }
};

struct Templates {
  GradientTemplates gradients;
  OptimizerTemplate optimizer;

  static Templates load(const std::filesystem::path& fixtures_dir) {
    Templates t;
    t.gradients = GradientTemplates::load(fixtures_dir / "gradients");
    t.optimizer = OptimizerTemplate::load(fixtures_dir / "optimizer" / "update.txt");
    return t;
  }

  json fixture_hashes() const {
    return json{{"gradient_accuracy", fnv1a64_hex(gradients.accuracy)},
                {"gradient_regularization", fnv1a64_hex(gradients.regularization)},
                {"optimizer_update", optimizer.hash()}};
  }
};

// ---------------------------------------------------------------------------
// One iteration: forward passes, gradients, scoring, best-prompt update,
// then the meta-optimizer step.
// ---------------------------------------------------------------------------

struct IterationOptions {
  // When set, the record's statistics come from rescoring the current
  // prompt on this split instead of the train batch (validation-level
  // selection); gradients still come from the batch.
  const std::vector<LabeledExample>* rescore_split = nullptr;
};

namespace detail {

struct ForwardResult {
  ModelOutput output;
  bool matched = false;
};

inline ForwardResult forward_and_match(const PromptParameter& prompt,
                                       const LabeledExample& ex, Gateway& gateway,
                                       const BackendProfile& target) {
  ChatRequest req;
  req.system = prompt.text;
  req.user = ex.query;
  req.profile = target;
  ForwardResult r;
  r.output = gateway.complete(req);
  auto extraction = extract_answer(r.output, ex.task_kind);
  r.matched = exact_match(extraction, ex.gold);
  return r;
}

}  // namespace detail

inline IterationRecord run_iteration(OptimizerState& state,
                                     std::span<const LabeledExample> batch,
                                     const RunConfig& cfg, const Templates& templates,
                                     Gateway& gateway,
                                     const IterationOptions& options = {}) {
  if (batch.empty()) throw Error("iteration batch must be non-empty");
  if (!cfg.cot_reference_length) {
    throw Error("cot_reference_length must be set before scoring (measure it first)");
  }
  const int t = state.next_iteration;
  const BackendProfile& target = cfg.backend(Role::target);
  const BackendProfile& evaluator = cfg.backend(Role::evaluator);
  const BackendProfile& optimizer = cfg.backend(Role::optimizer);

  std::int64_t correct = 0;
  std::int64_t total_tokens = 0;
  std::vector<ConversationBlock> blocks;
  blocks.reserve(batch.size());

  for (const auto& ex : batch) {
    auto fwd = detail::forward_and_match(state.current_prompt, ex, gateway, target);
    correct += fwd.matched ? 1 : 0;
    total_tokens += fwd.output.completion_tokens;

    std::string g_task = task_gradient(state.current_prompt, ex, fwd.output,
                                       fwd.matched, templates.gradients, gateway,
                                       evaluator);
    std::optional<std::string> g_reg =
        reg_gradient(state.current_prompt, ex, fwd.output, cfg.reg_threshold_tokens,
                     templates.gradients, gateway, evaluator);
    GradientBundle bundle = GradientBundle::make(std::move(g_task), std::move(g_reg));

    ConversationBlock block;
    block.question = ex.query;
    block.response = fwd.output.text;
    block.feedback = bundle.task_gradient;
    block.regularization_feedback =
        bundle.reg_gradient ? *bundle.reg_gradient : std::string(kNoRegFeedback);
    blocks.push_back(std::move(block));
  }

  std::int64_t stat_correct = correct;
  std::int64_t stat_tokens = total_tokens;
  std::int64_t stat_count = static_cast<std::int64_t>(batch.size());
  if (options.rescore_split && !options.rescore_split->empty()) {
    stat_correct = 0;
    stat_tokens = 0;
    for (const auto& ex : *options.rescore_split) {
      auto fwd = detail::forward_and_match(state.current_prompt, ex, gateway, target);
      stat_correct += fwd.matched ? 1 : 0;
      stat_tokens += fwd.output.completion_tokens;
    }
    stat_count = static_cast<std::int64_t>(options.rescore_split->size());
  }

  IterationRecord record =
      IterationRecord::make(t, state.current_prompt, stat_correct, stat_tokens,
                            stat_count, cfg.lambda, *cfg.cot_reference_length);

  // Strict improvement only; ties keep the earliest prompt.
  if (!state.has_best || record.score > state.best_score) {
    state.best_score = record.score;
    state.best_prompt = state.current_prompt;
    state.has_best = true;
  }

  ChatRequest opt_req;
  opt_req.user = render_optimizer_request(templates.optimizer,
                                          state.current_prompt.text, blocks);
  opt_req.profile = optimizer;

  std::optional<std::string> next_text;
  for (int attempt = 0; attempt < 2 && !next_text; ++attempt) {
    try {
      std::string span = parse_improved_variable(gateway.complete(opt_req).text);
      std::string trimmed = trim(span);
      if (trimmed.empty()) throw OptimizerParseError("improved variable is empty");
      next_text = std::move(trimmed);
    } catch (const OptimizerParseError&) {
      if (attempt == 1) {
        state.events.push_back("iteration " + std::to_string(t) +
                               ": optimizer reply unparsable after retry; prompt kept");
      }
    }
  }

  if (next_text) {
    state.current_prompt = PromptParameter::make(
        std::move(*next_text), t, content_hash(state.current_prompt));
  }
  state.next_iteration = t + 1;
  state.history.push_back(record);
  return record;
}

// ---------------------------------------------------------------------------
// CoT reference measurement (the L_norm denominator)
// ---------------------------------------------------------------------------

inline double measure_cot_reference(const RunConfig& cfg,
                                    std::span<const LabeledExample> validation,
                                    const std::string& cot_prompt_text,
                                    Gateway& gateway) {
  if (cfg.cot_reference_length) {
    throw Error("cot_reference_length already provided; measurement skipped upstream");
  }
  if (validation.empty()) throw Error("validation split is empty; cannot measure CoT reference");
  const BackendProfile& target = cfg.backend(Role::target);
  std::int64_t total = 0;
  for (const auto& ex : validation) {
    ChatRequest req;
    req.system = cot_prompt_text;
    req.user = ex.query;
    req.profile = target;
    total += gateway.complete(req).completion_tokens;
  }
  return static_cast<double>(total) / static_cast<double>(validation.size());
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointSchema = "crop-checkpoint-v1";

inline json prompt_to_json(const PromptParameter& p) {
  json j{{"text", p.text}, {"iteration_born", p.iteration_born}};
  j["parent_hash"] = p.parent_hash ? json(*p.parent_hash) : json(nullptr);
  return j;
}

inline PromptParameter prompt_from_json(const json& j) {
  std::optional<std::string> parent;
  if (j.contains("parent_hash") && !j.at("parent_hash").is_null()) {
    parent = j.at("parent_hash").get<std::string>();
  }
  return PromptParameter::make(j.at("text").get<std::string>(),
                               j.at("iteration_born").get<int>(), std::move(parent));
}

inline json record_to_json(const IterationRecord& r) {
  return json{{"iteration", r.iteration},
              {"prompt", prompt_to_json(r.prompt)},
              {"correct_count", r.correct_count},
              {"total_output_tokens", r.total_output_tokens},
              {"batch_size", r.batch_size},
              {"accuracy", r.accuracy},
              {"avg_length", r.avg_length},
              {"l_norm", r.l_norm},
              {"score", r.score}};
}

inline IterationRecord record_from_json(const json& j) {
  IterationRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.prompt = prompt_from_json(j.at("prompt"));
  r.correct_count = j.at("correct_count").get<std::int64_t>();
  r.total_output_tokens = j.at("total_output_tokens").get<std::int64_t>();
  r.batch_size = j.at("batch_size").get<std::int64_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.avg_length = j.at("avg_length").get<double>();
  r.l_norm = j.at("l_norm").get<double>();
  r.score = j.at("score").get<double>();
  return r;
}

struct Checkpoint {
  RunConfig config;
  OptimizerState state;
  json fixture_hashes;
  json dataset_provenance;

  json to_json() const {
    json history = json::array();
    for (const auto& r : state.history) history.push_back(record_to_json(r));
    json st{{"current_prompt", prompt_to_json(state.current_prompt)},
            {"best_prompt", prompt_to_json(state.best_prompt)},
            {"best_score", state.has_best ? json(state.best_score) : json(nullptr)},
            {"next_iteration", state.next_iteration},
            {"rng_seed", state.rng_seed}};
    return json{{"schema", std::string(kCheckpointSchema)},
                {"config", config.to_json()},
                {"config_hash", config.hash()},
                {"fixture_hashes", fixture_hashes},
                {"dataset_provenance", dataset_provenance},
                {"state", st},
                {"history", history},
                {"events", state.events}};
  }

  static Checkpoint from_json(const json& j) {
    if (!j.contains("schema") || j.at("schema").get<std::string>() != kCheckpointSchema) {
      throw Error("unrecognized checkpoint schema");
    }
    Checkpoint c;
    c.config = RunConfig::from_json(j.at("config"));
    if (j.at("config_hash").get<std::string>() != c.config.hash()) {
      throw Error("checkpoint config hash mismatch; refusing to resume");
    }
    c.fixture_hashes = j.at("fixture_hashes");
    c.dataset_provenance = j.value("dataset_provenance", json::array());
    const json& st = j.at("state");
    c.state.current_prompt = prompt_from_json(st.at("current_prompt"));
    c.state.best_prompt = prompt_from_json(st.at("best_prompt"));
    if (!st.at("best_score").is_null()) {
      c.state.best_score = st.at("best_score").get<double>();
      c.state.has_best = true;
    }
    c.state.next_iteration = st.at("next_iteration").get<int>();
    c.state.rng_seed = st.at("rng_seed").get<std::int64_t>();
    for (const auto& rj : j.at("history")) {
      c.state.history.push_back(record_from_json(rj));
    }
    for (const auto& ej : j.value("events", json::array())) {
      c.state.events.push_back(ej.get<std::string>());
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Full run driver
// ---------------------------------------------------------------------------

struct RunOptions {
  PromptParameter initial_prompt;
  std::filesystem::path run_dir;
  bool resume = false;
  bool select_on_validation = false;
};

inline std::vector<LabeledExample> sample_batch(const std::vector<LabeledExample>& train,
                                                std::int64_t batch_size,
                                                std::int64_t seed, int iteration) {
  auto indices = sample_indices(
      train.size(), static_cast<std::size_t>(batch_size),
      mix_seed(static_cast<std::uint64_t>(seed),
               kBatchSampleStream ^ static_cast<std::uint64_t>(iteration)));
  std::vector<LabeledExample> batch;
  batch.reserve(indices.size());
  for (auto i : indices) batch.push_back(train[i]);
  return batch;
}

inline void write_run_files(const std::filesystem::path& run_dir,
                            const Checkpoint& checkpoint) {
  json history = json::array();
  for (const auto& r : checkpoint.state.history) history.push_back(record_to_json(r));
  write_text_file(run_dir / "state.json", checkpoint.to_json().dump(2) + "\n");
  write_text_file(run_dir / "history.json", history.dump(2) + "\n");
  write_text_file(run_dir / "best_prompt.txt", checkpoint.state.best_prompt.text);
}

inline OptimizerState run(const RunConfig& cfg, const DatasetBundle& dataset,
                          const Templates& templates, Gateway& gateway,
                          const RunOptions& options) {
  cfg.validate();
  if (!cfg.cot_reference_length) {
    throw Error("run() requires cot_reference_length (measure or configure it first)");
  }
  if (dataset.train.empty()) throw Error("dataset train split is empty");
  std::filesystem::create_directories(options.run_dir);

  json provenance = json::array();
  for (const auto& src : dataset.provenance) {
    provenance.push_back(json{{"path", src.path},
                              {"content_hash", src.content_hash},
                              {"records", src.records}});
  }

  Checkpoint checkpoint;
  if (options.resume) {
    const auto path = options.run_dir / "state.json";
    if (!std::filesystem::exists(path)) {
      throw MissingRun("no checkpoint to resume at " + path.string());
    }
    checkpoint = Checkpoint::from_json(json::parse(read_text_file(path)));
    if (checkpoint.config.hash() != cfg.hash()) {
      throw Error("resume config differs from checkpointed config");
    }
    if (checkpoint.fixture_hashes != templates.fixture_hashes()) {
      throw Error("resume fixture hashes differ from checkpointed fixtures");
    }
  } else {
    checkpoint.config = cfg;
    checkpoint.state = OptimizerState::initial(options.initial_prompt, cfg.seed);
    checkpoint.fixture_hashes = templates.fixture_hashes();
    checkpoint.dataset_provenance = provenance;
  }

  IterationOptions iter_options;
  if (options.select_on_validation) {
    if (dataset.validation.empty()) {
      throw Error("validation selection requested but validation split is empty");
    }
    iter_options.rescore_split = &dataset.validation;
  }

  for (int t = checkpoint.state.next_iteration;
       t <= static_cast<int>(cfg.max_iterations); ++t) {
    auto batch = sample_batch(dataset.train, cfg.batch_size, cfg.seed, t);
    run_iteration(checkpoint.state, batch, cfg, templates, gateway, iter_options);
    write_run_files(options.run_dir, checkpoint);
  }
  return checkpoint.state;
}

}  // namespace crop
