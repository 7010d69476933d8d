#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "crop/common.hpp"
#include "crop/gateway.hpp"
#include "crop/model.hpp"

namespace crop {

// ---------------------------------------------------------------------------
// Answer extraction and exact match
// ---------------------------------------------------------------------------

struct ExtractionResult {
  std::string raw_line;
  std::optional<GoldAnswer> parsed;
  bool found = false;
};

// Scans lines bottom-up for the "Answer:" prefix (case-sensitive, optional
// surrounding whitespace). A missing or unparsable answer is found=false,
// never an exception: downstream it simply scores as wrong.
inline ExtractionResult extract_answer(std::string_view text, TaskKind kind) {
  ExtractionResult result;
  auto lines = split_lines(text);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    std::string_view line = *it;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::string_view trimmed = trim_view(line);
    constexpr std::string_view prefix = "Answer:";
    if (trimmed.rfind(prefix, 0) != 0) continue;

    result.raw_line = std::string(trimmed);
    std::string_view value = trim_view(trimmed.substr(prefix.size()));
    value = trim_view(strip_trailing_punct(value));
    if (kind == TaskKind::numeric) {
      if (auto canon = canonical_decimal(value)) {
        result.parsed = GoldAnswer::numeric(*canon);
        result.found = true;
      }
    } else {
      if (auto idx = parse_option_index(value)) {
        result.parsed = GoldAnswer::index(*idx);
        result.found = true;
      }
    }
    return result;
  }
  return result;
}

inline ExtractionResult extract_answer(const ModelOutput& out, TaskKind kind) {
  return extract_answer(out.text, kind);
}

inline bool exact_match(const ExtractionResult& pred, const GoldAnswer& gold) {
  if (!pred.found) return false;
  if (pred.parsed->kind() != gold.kind()) {
    throw KindMismatch("prediction kind does not match gold kind");
  }
  return *pred.parsed == gold;
}

// ---------------------------------------------------------------------------
// Template rendering. Placeholders are {lower_snake_case} spans; anything
// else inside braces is literal text.
// ---------------------------------------------------------------------------

inline bool is_placeholder_name(std::string_view name) {
  if (name.empty()) return false;
  for (char c : name) {
    if (!((c >= 'a' && c <= 'z') || c == '_')) return false;
  }
  return true;
}

inline std::string render_template(std::string_view tmpl,
                                   const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        std::string name(tmpl.substr(i + 1, close - i - 1));
        if (is_placeholder_name(name)) {
          auto it = values.find(name);
          if (it == values.end()) throw Error("unbound template placeholder {" + name + "}");
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

// Template with every placeholder blanked; the byte-fidelity reference
// that rendered requests are checked against.
inline std::string template_skeleton(std::string_view tmpl) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos &&
          is_placeholder_name(tmpl.substr(i + 1, close - i - 1))) {
        i = close + 1;
        continue;
      }
    }
    out += tmpl[i++];
  }
  return out;
}

// Fixture files may carry a leading block of '#' comment lines (binding
// notes); the template body below it is kept byte-exact.
inline std::string load_template_file(const std::filesystem::path& path) {
  std::string raw = read_text_file(path);
  std::size_t start = 0;
  while (start < raw.size() && raw[start] == '#') {
    std::size_t nl = raw.find('\n', start);
    if (nl == std::string::npos) {
      start = raw.size();
      break;
    }
    start = nl + 1;
  }
  std::string body = raw.substr(start);
  if (!body.empty() && body.back() == '\n') body.pop_back();
  return body;
}

struct GradientTemplates {
  std::string accuracy;
  std::string regularization;

  static GradientTemplates load(const std::filesystem::path& dir) {
    GradientTemplates t;
    t.accuracy = load_template_file(dir / "accuracy.txt");
    t.regularization = load_template_file(dir / "regularization.txt");
    return t;
  }
};

inline std::string render_accuracy_request(const GradientTemplates& templates,
                                           const std::string& question,
                                           const std::string& gold,
                                           const std::string& function_output,
                                           const std::string& response) {
  return render_template(templates.accuracy, {{"question", question},
                                              {"gold", gold},
                                              {"function_output", function_output},
                                              {"response", response}});
}

inline std::string render_regularization_request(const GradientTemplates& templates,
                                                 const std::string& prompt,
                                                 const std::string& question,
                                                 const std::string& response) {
  return render_template(templates.regularization, {{"prompt", prompt},
                                                    {"question", question},
                                                    {"response", response}});
}

// ---------------------------------------------------------------------------
// Gradient operations
// ---------------------------------------------------------------------------

inline std::string match_verdict(bool matched, const GoldAnswer& gold) {
  return matched ? std::string("correct")
                 : "incorrect (expected: " + gold.to_string() + ")";
}

/// Accuracy critique from the evaluator model (the task gradient).
inline std::string task_gradient(const PromptParameter& prompt,
                                 const LabeledExample& example,
                                 const ModelOutput& output, bool matched,
                                 const GradientTemplates& templates,
                                 Gateway& gateway,
                                 const BackendProfile& evaluator) {
  (void)prompt;  // the accuracy template critiques the response, not the prompt
  ChatRequest req;
  req.user = render_accuracy_request(templates, example.query,
                                     example.gold.to_string(),
                                     match_verdict(matched, example.gold),
                                     output.text);
  req.profile = evaluator;
  return gateway.complete(req).text;
}

/// Brevity critique, produced only when the output exceeds the length
/// threshold. The boundary is inclusive-skip: a count equal to the
/// threshold produces no gradient.
inline std::optional<std::string> reg_gradient(const PromptParameter& prompt,
                                               const LabeledExample& example,
                                               const ModelOutput& output,
                                               std::int64_t threshold_tokens,
                                               const GradientTemplates& templates,
                                               Gateway& gateway,
                                               const BackendProfile& evaluator) {
  if (threshold_tokens < 0) throw Error("regularization threshold must be >= 0");
  if (output.completion_tokens <= threshold_tokens) return std::nullopt;
  ChatRequest req;
  req.user = render_regularization_request(templates, prompt.text, example.query,
                                           output.text);
  req.profile = evaluator;
  return gateway.complete(req).text;
}

}  // namespace crop
