#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "crop/baselines.hpp"
#include "crop/common.hpp"
#include "crop/optimizer.hpp"

namespace crop {

// ---------------------------------------------------------------------------
// Run directory contents
// ---------------------------------------------------------------------------

struct EvalRun {
  std::string run_dir;
  std::string model;
  std::string dataset;
  std::string prompt_id;
  std::string split;
  json header;  // seed, fixture hashes, effective settings, provenance
  std::vector<EvalRecord> records;
  EvalSummary cached;
};

struct OptimizeRun {
  std::string run_dir;
  std::vector<IterationRecord> history;
};

// Loads an evaluation run and recomputes its summary from the per-example
// records; the cached summary is only trusted after it agrees to 1e-9.
inline EvalRun load_eval_run(const std::filesystem::path& dir) {
  const auto summary_path = dir / "eval_summary.json";
  const auto records_path = dir / "eval_records.jsonl";
  if (!std::filesystem::exists(summary_path) || !std::filesystem::exists(records_path)) {
    throw MissingRun("no evaluation run at " + dir.string());
  }
  EvalRun run;
  run.run_dir = dir.string();
  json summary = json::parse(read_text_file(summary_path));
  run.model = summary.value("model", "");
  run.dataset = summary.value("dataset", "");
  run.prompt_id = summary.value("prompt_id", "");
  run.split = summary.value("split", "");
  run.header = summary;
  run.cached.accuracy = summary.at("accuracy").get<double>();
  run.cached.avg_tokens = summary.at("avg_tokens").get<double>();
  run.cached.count = summary.at("count").get<std::int64_t>();

  const std::string records_text = read_text_file(records_path);
  for (auto line : split_lines(records_text)) {
    if (trim_view(line).empty()) continue;
    run.records.push_back(eval_record_from_json(json::parse(line)));
  }

  EvalSummary recomputed = summarize(run.records);
  if (recomputed.count != run.cached.count ||
      std::abs(recomputed.accuracy - run.cached.accuracy) > 1e-9 ||
      std::abs(recomputed.avg_tokens - run.cached.avg_tokens) > 1e-9) {
    throw Error("cached summary disagrees with per-example records in " + dir.string());
  }
  run.cached = recomputed;
  return run;
}

inline std::optional<OptimizeRun> try_load_optimize_run(const std::filesystem::path& dir) {
  const auto history_path = dir / "history.json";
  if (!std::filesystem::exists(history_path)) return std::nullopt;
  OptimizeRun run;
  run.run_dir = dir.string();
  for (const auto& rj : json::parse(read_text_file(history_path))) {
    run.history.push_back(record_from_json(rj));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string dataset;
  std::string prompt_id;
  double accuracy_pct = 0.0;
  double avg_tokens = 0.0;
  std::optional<double> reduction_vs_cot_pct;
  std::int64_t count = 0;
};

inline std::vector<ReportRow> build_report_rows(const std::vector<EvalRun>& runs) {
  std::vector<ReportRow> rows;
  std::map<std::pair<std::string, std::string>, double> cot_avg;
  for (const auto& run : runs) {
    if (run.prompt_id == "cot") cot_avg[{run.model, run.dataset}] = run.cached.avg_tokens;
  }
  for (const auto& run : runs) {
    ReportRow row;
    row.model = run.model;
    row.dataset = run.dataset;
    row.prompt_id = run.prompt_id;
    row.accuracy_pct = 100.0 * run.cached.accuracy;
    row.avg_tokens = run.cached.avg_tokens;
    row.count = run.cached.count;
    auto it = cot_avg.find({run.model, run.dataset});
    if (it != cot_avg.end() && run.prompt_id != "cot") {
      row.reduction_vs_cot_pct =
          round_one_decimal(token_reduction(it->second, run.cached.avg_tokens));
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.model, a.dataset, a.prompt_id) <
           std::tie(b.model, b.dataset, b.prompt_id);
  });
  return rows;
}

// ---------------------------------------------------------------------------
// CSV (RFC-4180 quoting; the round trip back to rows is exercised in tests)
// ---------------------------------------------------------------------------

inline std::string csv_escape(const std::string& field) {
  bool needs_quotes = field.find_first_of(",\"\n") != std::string::npos;
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::vector<std::string> csv_parse_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          current += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        current += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else {
      current += c;
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline std::string report_rows_to_csv(const std::vector<ReportRow>& rows) {
  std::string out = "model,dataset,prompt_id,accuracy_pct,avg_tokens,reduction_vs_cot_pct,count\n";
  for (const auto& r : rows) {
    out += csv_escape(r.model) + ",";
    out += csv_escape(r.dataset) + ",";
    out += csv_escape(r.prompt_id) + ",";
    out += format_double(r.accuracy_pct) + ",";
    out += format_double(r.avg_tokens) + ",";
    out += (r.reduction_vs_cot_pct ? format_double(*r.reduction_vs_cot_pct) : "") + ",";
    out += std::to_string(r.count) + "\n";
  }
  return out;
}

inline std::vector<ReportRow> report_rows_from_csv(const std::string& csv) {
  std::vector<ReportRow> rows;
  bool header = true;
  for (auto line : split_lines(csv)) {
    if (trim_view(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    auto fields = csv_parse_line(std::string(line));
    if (fields.size() != 7) throw FormatError("report csv row needs 7 fields");
    ReportRow row;
    row.model = fields[0];
    row.dataset = fields[1];
    row.prompt_id = fields[2];
    row.accuracy_pct = std::stod(fields[3]);
    row.avg_tokens = std::stod(fields[4]);
    if (!fields[5].empty()) row.reduction_vs_cot_pct = std::stod(fields[5]);
    row.count = std::stoll(fields[6]);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json report_rows_to_json(const std::vector<ReportRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json j{{"model", r.model},
           {"dataset", r.dataset},
           {"prompt_id", r.prompt_id},
           {"accuracy_pct", r.accuracy_pct},
           {"avg_tokens", r.avg_tokens},
           {"count", r.count}};
    j["reduction_vs_cot_pct"] =
        r.reduction_vs_cot_pct ? json(*r.reduction_vs_cot_pct) : json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::vector<ReportRow> report_rows_from_json(const json& arr) {
  std::vector<ReportRow> rows;
  for (const auto& j : arr) {
    ReportRow row;
    row.model = j.at("model").get<std::string>();
    row.dataset = j.at("dataset").get<std::string>();
    row.prompt_id = j.at("prompt_id").get<std::string>();
    row.accuracy_pct = j.at("accuracy_pct").get<double>();
    row.avg_tokens = j.at("avg_tokens").get<double>();
    row.count = j.at("count").get<std::int64_t>();
    if (!j.at("reduction_vs_cot_pct").is_null()) {
      row.reduction_vs_cot_pct = j.at("reduction_vs_cot_pct").get<double>();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Per-iteration (t, accuracy, avg_length, score) series for plotting.
inline std::string series_to_csv(const std::vector<OptimizeRun>& runs) {
  std::string out = "run,iteration,accuracy,avg_length,score\n";
  for (const auto& run : runs) {
    for (const auto& r : run.history) {
      out += csv_escape(run.run_dir) + ",";
      out += std::to_string(r.iteration) + ",";
      out += format_double(r.accuracy) + ",";
      out += format_double(r.avg_length) + ",";
      out += format_double(r.score) + "\n";
    }
  }
  return out;
}

}  // namespace crop
