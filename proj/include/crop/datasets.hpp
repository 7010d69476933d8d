#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crop/common.hpp"
#include "crop/model.hpp"

namespace crop {

enum class DatasetName { gsm8k, bbh_object_counting, logiqa };

inline std::string_view to_string(DatasetName name) {
  switch (name) {
    case DatasetName::gsm8k: return "gsm8k";
    case DatasetName::bbh_object_counting: return "bbh_object_counting";
    case DatasetName::logiqa: return "logiqa";
  }
  return "gsm8k";
}

inline DatasetName dataset_from_string(std::string_view s) {
  if (s == "gsm8k") return DatasetName::gsm8k;
  if (s == "bbh_object_counting") return DatasetName::bbh_object_counting;
  if (s == "logiqa") return DatasetName::logiqa;
  throw ConfigError("unknown dataset: '" + std::string(s) + "'");
}

struct SourceFile {
  std::string path;
  std::string content_hash;
  std::size_t records = 0;
};

struct DatasetBundle {
  DatasetName name = DatasetName::gsm8k;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
  std::vector<LabeledExample> test;
  std::vector<SourceFile> provenance;
  std::size_t duplicates_dropped = 0;
};

struct DatasetPaths {
  std::optional<std::string> train;
  std::optional<std::string> validation;
  std::optional<std::string> test;
  std::optional<std::string> all;  // single-file datasets (BBH)
};

// ---------------------------------------------------------------------------
// Canonical JSONL: {"query": str, "gold": {"kind": "numeric"|"index",
// "value": ...}}. Numeric values are canonical decimal strings so the
// round trip never goes through floating point.
// ---------------------------------------------------------------------------

inline json example_to_canonical_json(const LabeledExample& ex) {
  json gold;
  if (ex.gold.kind() == TaskKind::numeric) {
    gold = json{{"kind", "numeric"}, {"value", ex.gold.decimal()}};
  } else {
    gold = json{{"kind", "index"}, {"value", ex.gold.option_index()}};
  }
  return json{{"query", ex.query}, {"gold", gold}};
}

inline LabeledExample example_from_canonical_json(const json& j) {
  if (!j.contains("query") || !j.contains("gold")) {
    throw FormatError("canonical record needs 'query' and 'gold'");
  }
  const json& gold = j.at("gold");
  std::string kind = gold.at("kind").get<std::string>();
  if (kind == "numeric") {
    return LabeledExample::make(j.at("query").get<std::string>(),
                                GoldAnswer::numeric(gold.at("value").get<std::string>()));
  }
  if (kind == "index") {
    return LabeledExample::make(j.at("query").get<std::string>(),
                                GoldAnswer::index(gold.at("value").get<std::int64_t>()));
  }
  throw FormatError("unknown gold kind: '" + kind + "'");
}

inline std::string example_content_hash(const LabeledExample& ex) {
  return fnv1a64_hex(example_to_canonical_json(ex).dump());
}

inline void save_canonical_jsonl(const std::vector<LabeledExample>& examples,
                                 const std::filesystem::path& path) {
  std::string out;
  for (const auto& ex : examples) {
    out += example_to_canonical_json(ex).dump();
    out += '\n';
  }
  write_text_file(path, out);
}

inline std::vector<LabeledExample> load_canonical_jsonl(
    const std::filesystem::path& path) {
  std::string raw = read_text_file(path);
  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  for (auto line : split_lines(raw)) {
    ++line_no;
    if (trim_view(line).empty()) continue;
    try {
      out.push_back(example_from_canonical_json(json::parse(line)));
    } catch (const json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Source-format adapters
// ---------------------------------------------------------------------------

// Official format: {"question": ..., "answer": "...reasoning... #### 42"}.
// The gold is the final numeric after the last "####" delimiter.
inline LabeledExample parse_gsm8k_record(const json& j, const std::string& where) {
  if (!j.contains("question") || !j.contains("answer")) {
    throw FormatError(where + ": gsm8k record needs 'question' and 'answer'");
  }
  std::string answer = j.at("answer").get<std::string>();
  std::size_t delim = answer.rfind("####");
  if (delim == std::string::npos) {
    throw MissingGold(where + ": no '####' gold delimiter in answer");
  }
  std::string_view tail = trim_view(std::string_view(answer).substr(delim + 4));
  auto canon = canonical_decimal(tail);
  if (!canon) throw MissingGold(where + ": value after '####' is not a decimal");
  return LabeledExample::make(j.at("question").get<std::string>(),
                              GoldAnswer::numeric(*canon));
}

// BBH task format: {"input": ..., "target": "6"} (target may be a JSON int).
inline LabeledExample parse_bbh_record(const json& j, const std::string& where) {
  if (!j.contains("input") || !j.contains("target")) {
    throw FormatError(where + ": bbh record needs 'input' and 'target'");
  }
  std::string target = j.at("target").is_string()
                           ? j.at("target").get<std::string>()
                           : j.at("target").dump();
  auto canon = canonical_decimal(target);
  if (!canon || canon->find('.') != std::string::npos) {
    throw MissingGold(where + ": target is not an integer");
  }
  return LabeledExample::make(j.at("input").get<std::string>(),
                              GoldAnswer::numeric(*canon));
}

// LogiQA record: context (optional), question, options, and a zero-based
// answer index under "answer", "label", or "correct_option". The query
// enumerates the options as "0. <opt>" lines to match the zero-based
// answer contract.
inline LabeledExample parse_logiqa_record(const json& j, const std::string& where) {
  std::string question;
  if (j.contains("question")) {
    question = j.at("question").get<std::string>();
  } else if (j.contains("query")) {
    question = j.at("query").get<std::string>();
  } else {
    throw FormatError(where + ": logiqa record needs 'question'");
  }
  if (!j.contains("options") || !j.at("options").is_array() || j.at("options").size() < 2) {
    throw FormatError(where + ": logiqa record needs an 'options' array");
  }
  std::optional<std::int64_t> answer;
  for (const char* key : {"answer", "label", "correct_option"}) {
    if (j.contains(key) && j.at(key).is_number_integer()) {
      answer = j.at(key).get<std::int64_t>();
      break;
    }
  }
  if (!answer) throw MissingGold(where + ": no answer index field");
  const auto option_count = static_cast<std::int64_t>(j.at("options").size());
  if (*answer < 0 || *answer >= option_count) {
    throw FormatError(where + ": answer index out of range");
  }

  std::string query;
  if (j.contains("context")) {
    std::string context = j.at("context").get<std::string>();
    if (!trim_view(context).empty()) {
      query += context;
      query += '\n';
    }
  }
  query += question;
  std::int64_t i = 0;
  for (const auto& opt : j.at("options")) {
    query += '\n';
    query += std::to_string(i++);
    query += ". ";
    query += opt.get<std::string>();
  }
  return LabeledExample::make(std::move(query), GoldAnswer::index(*answer));
}

inline std::vector<LabeledExample> load_source_jsonl(
    DatasetName name, const std::filesystem::path& path, SourceFile& meta) {
  std::string raw = read_text_file(path);
  meta.path = path.string();
  meta.content_hash = fnv1a64_hex(raw);

  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  for (auto line : split_lines(raw)) {
    ++line_no;
    if (trim_view(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw FormatError(where + ": " + ex.what());
    }
    switch (name) {
      case DatasetName::gsm8k: out.push_back(parse_gsm8k_record(j, where)); break;
      case DatasetName::bbh_object_counting: out.push_back(parse_bbh_record(j, where)); break;
      case DatasetName::logiqa: out.push_back(parse_logiqa_record(j, where)); break;
    }
  }
  if (out.empty()) throw FormatError(path.string() + ": no records");
  meta.records = out.size();
  return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

// RNG stream tags, one per independent sampling site.
inline constexpr std::uint64_t kBbhSplitStream = 0xb1;
inline constexpr std::uint64_t kGsm8kValStream = 0xa2;

// Seeded shuffle, then a contiguous 25/25/50 cut with floor rounding on
// the first two cuts; the remainder goes to test.
inline std::tuple<std::vector<LabeledExample>, std::vector<LabeledExample>,
                  std::vector<LabeledExample>>
split_bbh(std::vector<LabeledExample> examples, std::uint64_t seed) {
  if (examples.size() < 4) {
    throw TooFewExamples("bbh split needs at least 4 examples, got " +
                         std::to_string(examples.size()));
  }
  deterministic_shuffle(examples, mix_seed(seed, kBbhSplitStream));
  const std::size_t n = examples.size();
  const std::size_t n_train = n / 4;
  const std::size_t n_val = n / 4;
  std::vector<LabeledExample> train(examples.begin(), examples.begin() + n_train);
  std::vector<LabeledExample> validation(examples.begin() + n_train,
                                         examples.begin() + n_train + n_val);
  std::vector<LabeledExample> test(examples.begin() + n_train + n_val, examples.end());
  return {std::move(train), std::move(validation), std::move(test)};
}

// Drops exact duplicates (by canonical content hash) inside and across
// splits so the disjointness invariant holds; eval splits win collisions.
inline std::size_t dedupe_splits(DatasetBundle& bundle) {
  std::unordered_set<std::string> seen;
  std::size_t dropped = 0;
  auto filter = [&](std::vector<LabeledExample>& split) {
    std::vector<LabeledExample> kept;
    kept.reserve(split.size());
    for (auto& ex : split) {
      if (seen.insert(example_content_hash(ex)).second) {
        kept.push_back(std::move(ex));
      } else {
        ++dropped;
      }
    }
    split = std::move(kept);
  };
  filter(bundle.test);
  filter(bundle.validation);
  filter(bundle.train);
  return dropped;
}

struct LoadOptions {
  std::uint64_t seed = 0;
  // GSM8K ships no official validation split; this fraction is carved from
  // the tail of a seeded shuffle of train.
  double gsm8k_validation_fraction = 0.1;
};

inline DatasetBundle load(DatasetName name, const DatasetPaths& paths,
                          const LoadOptions& options = {}) {
  DatasetBundle bundle;
  bundle.name = name;

  auto read = [&](const std::string& path) {
    SourceFile meta;
    auto examples = load_source_jsonl(name, path, meta);
    bundle.provenance.push_back(std::move(meta));
    return examples;
  };

  switch (name) {
    case DatasetName::gsm8k: {
      if (!paths.train) throw ConfigError("gsm8k requires a train file");
      auto train = read(*paths.train);
      if (paths.test) bundle.test = read(*paths.test);
      if (paths.validation) {
        bundle.validation = read(*paths.validation);
        bundle.train = std::move(train);
      } else {
        auto order = sample_indices(train.size(), train.size(),
                                    mix_seed(options.seed, kGsm8kValStream));
        std::size_t n_val = static_cast<std::size_t>(
            static_cast<double>(train.size()) * options.gsm8k_validation_fraction);
        std::unordered_set<std::size_t> val_idx(order.begin(),
                                                order.begin() + static_cast<long>(n_val));
        for (std::size_t i = 0; i < train.size(); ++i) {
          (val_idx.count(i) ? bundle.validation : bundle.train)
              .push_back(std::move(train[i]));
        }
      }
      break;
    }
    case DatasetName::bbh_object_counting: {
      if (!paths.all) throw ConfigError("bbh_object_counting requires a single data file");
      auto examples = read(*paths.all);
      std::unordered_set<std::string> seen;
      std::vector<LabeledExample> unique;
      for (auto& ex : examples) {
        if (seen.insert(example_content_hash(ex)).second) unique.push_back(std::move(ex));
        else bundle.duplicates_dropped++;
      }
      std::tie(bundle.train, bundle.validation, bundle.test) =
          split_bbh(std::move(unique), options.seed);
      break;
    }
    case DatasetName::logiqa: {
      if (!paths.train || !paths.validation || !paths.test) {
        throw ConfigError("logiqa requires train, validation, and test files");
      }
      bundle.train = read(*paths.train);
      bundle.validation = read(*paths.validation);
      bundle.test = read(*paths.test);
      break;
    }
  }

  bundle.duplicates_dropped += dedupe_splits(bundle);
  return bundle;
}

}  // namespace crop
