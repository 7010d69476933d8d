#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crop/common.hpp"
#include "crop/evaluators.hpp"
#include "crop/gateway.hpp"
#include "crop/model.hpp"

namespace crop {

// ---------------------------------------------------------------------------
// Baseline prompt library, loaded from the shipped fixture files.
// ---------------------------------------------------------------------------

struct BaselineSpec {
  std::string id;
  std::string prompt_text;
};

class BaselineLibrary {
 public:
  static BaselineLibrary load(const std::filesystem::path& fixtures_dir) {
    BaselineLibrary lib;
    const auto dir = fixtures_dir / "baselines";
    for (const char* id : {"no_reasoning", "cot", "be_concise", "only_num", "use_abbrev"}) {
      lib.specs_.push_back(
          BaselineSpec{id, load_template_file(dir / (std::string(id) + ".txt"))});
    }
    lib.n_tokens_template_ = load_template_file(dir / "n_tokens.txt");
    return lib;
  }

  const std::vector<BaselineSpec>& specs() const { return specs_; }

  const BaselineSpec& spec(std::string_view id) const {
    for (const auto& s : specs_) {
      if (s.id == id) return s;
    }
    throw ConfigError("unknown baseline id: '" + std::string(id) + "'");
  }

  // "Do not use more than N words." with N substituted. Present in the
  // library but excluded from the default report set.
  BaselineSpec n_tokens(std::int64_t n) const {
    std::string text = n_tokens_template_;
    const std::string token = " N ";
    auto pos = text.find(token);
    if (pos == std::string::npos) throw Error("n_tokens fixture lacks the N slot");
    text.replace(pos, token.size(), " " + std::to_string(n) + " ");
    return BaselineSpec{"n_tokens_" + std::to_string(n), std::move(text)};
  }

  static BaselineSpec fixed_prompt(std::string id, std::string text) {
    return BaselineSpec{std::move(id), std::move(text)};
  }

  // The headline comparison set; static token-limit prompts are
  // intentionally left out of it.
  std::vector<BaselineSpec> default_report_set() const { return specs_; }

 private:
  std::vector<BaselineSpec> specs_;
  std::string n_tokens_template_;
};

// The TextGrad baseline is this engine with the brevity evaluator gated
// off and selection by accuracy alone.
inline RunConfig textgrad_config(RunConfig cfg) {
  cfg.lambda = 0.0;
  cfg.reg_threshold_tokens = std::numeric_limits<std::int64_t>::max();
  return cfg;
}

// ---------------------------------------------------------------------------
// Prompt evaluation over a split
// ---------------------------------------------------------------------------

struct EvalRecord {
  std::int64_t index = 0;
  bool found = false;
  bool correct = false;
  std::int64_t completion_tokens = 0;
  std::string extracted;
  std::string gold;
};

struct EvalSummary {
  double accuracy = 0.0;
  double avg_tokens = 0.0;
  std::int64_t count = 0;
};

inline json eval_record_to_json(const EvalRecord& r) {
  return json{{"index", r.index},
              {"found", r.found},
              {"correct", r.correct},
              {"completion_tokens", r.completion_tokens},
              {"extracted", r.extracted},
              {"gold", r.gold}};
}

inline EvalRecord eval_record_from_json(const json& j) {
  EvalRecord r;
  r.index = j.at("index").get<std::int64_t>();
  r.found = j.at("found").get<bool>();
  r.correct = j.at("correct").get<bool>();
  r.completion_tokens = j.at("completion_tokens").get<std::int64_t>();
  r.extracted = j.at("extracted").get<std::string>();
  r.gold = j.at("gold").get<std::string>();
  return r;
}

inline EvalSummary summarize(std::span<const EvalRecord> records) {
  EvalSummary s;
  s.count = static_cast<std::int64_t>(records.size());
  if (records.empty()) return s;
  std::int64_t correct = 0;
  std::int64_t tokens = 0;
  for (const auto& r : records) {
    correct += r.correct ? 1 : 0;
    tokens += r.completion_tokens;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(s.count);
  s.avg_tokens = static_cast<double>(tokens) / static_cast<double>(s.count);
  return s;
}

// Runs the target model over the split in order. When records_path is
// given, each record is appended as soon as it exists, and a rerun picks
// up after the last checkpointed record instead of starting over.
inline EvalSummary evaluate_prompt(const std::string& prompt_text,
                                   std::span<const LabeledExample> split,
                                   const BackendProfile& target, Gateway& gateway,
                                   std::vector<EvalRecord>* out_records = nullptr,
                                   const std::optional<std::filesystem::path>&
                                       records_path = std::nullopt) {
  if (split.empty()) throw Error("evaluation split must be non-empty");

  std::vector<EvalRecord> records;
  if (records_path && std::filesystem::exists(*records_path)) {
    const std::string existing = read_text_file(*records_path);
    for (auto line : split_lines(existing)) {
      if (trim_view(line).empty()) continue;
      records.push_back(eval_record_from_json(json::parse(line)));
    }
    if (records.size() > split.size()) {
      throw Error("existing records exceed split size; wrong records file?");
    }
  }

  std::ofstream sink;
  if (records_path) {
    sink.open(*records_path, std::ios::binary | std::ios::app);
    if (!sink) throw Error("cannot open records file: " + records_path->string());
  }

  for (std::size_t i = records.size(); i < split.size(); ++i) {
    const auto& ex = split[i];
    ChatRequest req;
    req.system = prompt_text;
    req.user = ex.query;
    req.profile = target;
    ModelOutput out = gateway.complete(req);
    auto extraction = extract_answer(out, ex.task_kind);

    EvalRecord rec;
    rec.index = static_cast<std::int64_t>(i);
    rec.found = extraction.found;
    rec.correct = exact_match(extraction, ex.gold);
    rec.completion_tokens = out.completion_tokens;
    rec.extracted = extraction.found ? extraction.parsed->to_string() : "";
    rec.gold = ex.gold.to_string();
    if (records_path) {
      sink << eval_record_to_json(rec).dump() << '\n';
      sink.flush();
    }
    records.push_back(std::move(rec));
  }

  EvalSummary summary = summarize(records);
  if (out_records) *out_records = std::move(records);
  return summary;
}

// ---------------------------------------------------------------------------
// Token reduction metric
// ---------------------------------------------------------------------------

inline double token_reduction(double baseline_avg, double candidate_avg) {
  if (baseline_avg <= 0.0) {
    throw DivisionByZero("token_reduction requires a positive baseline average");
  }
  return 100.0 * (baseline_avg - candidate_avg) / baseline_avg;
}

/// Rounded to one decimal, the form reports print.
inline double round_one_decimal(double value) {
  return std::round(value * 10.0) / 10.0;
}

}  // namespace crop
