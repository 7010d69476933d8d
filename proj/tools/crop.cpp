// crop — cost-regularized prompt optimization CLI.
//
// Subcommands: optimize, evaluate, baseline, report, sweep-lambda, resume.
// Run `crop --help` for flags.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crop/crop.hpp"

namespace fs = std::filesystem;
using crop::json;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<std::int64_t> seed_override;
  std::string mock_script;
  bool dry_run = false;
  std::string fixtures_dir = "fixtures";
};

struct DatasetArgs {
  std::string name;
  std::string train;
  std::string validation;
  std::string test;
  std::string data;  // single-file datasets (BBH)
  double val_fraction = 0.1;
};

void add_dataset_flags(CLI::App* cmd, DatasetArgs& args) {
  cmd->add_option("--dataset", args.name, "Dataset: gsm8k, bbh_object_counting, logiqa")
      ->required();
  cmd->add_option("--train", args.train, "Train split JSONL");
  cmd->add_option("--validation", args.validation, "Validation split JSONL");
  cmd->add_option("--test", args.test, "Test split JSONL");
  cmd->add_option("--data", args.data, "Single data file (BBH 25/25/50 split)");
  cmd->add_option("--val-fraction", args.val_fraction,
                  "Fraction of train carved into validation when the dataset has "
                  "no official validation split (gsm8k)");
}

crop::DatasetPaths to_paths(const DatasetArgs& args) {
  crop::DatasetPaths paths;
  if (!args.train.empty()) paths.train = args.train;
  if (!args.validation.empty()) paths.validation = args.validation;
  if (!args.test.empty()) paths.test = args.test;
  if (!args.data.empty()) paths.all = args.data;
  return paths;
}

crop::DatasetBundle load_bundle(const DatasetArgs& args, std::int64_t seed) {
  crop::LoadOptions options;
  options.seed = static_cast<std::uint64_t>(seed);
  options.gsm8k_validation_fraction = args.val_fraction;
  return crop::load(crop::dataset_from_string(args.name), to_paths(args), options);
}

crop::RunConfig load_config(const GlobalArgs& global) {
  if (global.config_path.empty()) throw crop::ConfigError("--config is required");
  crop::RunConfig cfg = crop::RunConfig::load_file(global.config_path);
  if (global.seed_override) cfg.seed = *global.seed_override;
  if (!global.mock_script.empty()) {
    for (auto& backend : cfg.backends) {
      backend.endpoint_url = "mock:" + global.mock_script;
      backend.auth_env_var.clear();
    }
  }
  cfg.validate();
  return cfg;
}

const std::vector<crop::LabeledExample>& pick_split(const crop::DatasetBundle& bundle,
                                                    const std::string& split) {
  if (split == "train") return bundle.train;
  if (split == "validation") return bundle.validation;
  if (split == "test") return bundle.test;
  throw crop::ConfigError("unknown split: '" + split + "'");
}

json provenance_json(const crop::DatasetBundle& bundle) {
  json arr = json::array();
  for (const auto& src : bundle.provenance) {
    arr.push_back(json{{"path", src.path},
                       {"content_hash", src.content_hash},
                       {"records", src.records}});
  }
  return arr;
}

std::string format_lambda(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lambda);
  return buf;
}

// Every command prints its resolved settings before touching a backend,
// and --dry-run stops right after this.
json effective_settings(const crop::RunConfig& cfg, const DatasetArgs& dataset,
                        const GlobalArgs& global, const crop::Templates& templates,
                        const crop::DatasetBundle& bundle) {
  return json{{"config", cfg.to_json()},
              {"config_hash", cfg.hash()},
              {"dataset", dataset.name},
              {"dataset_provenance", provenance_json(bundle)},
              {"splits",
               json{{"train", bundle.train.size()},
                    {"validation", bundle.validation.size()},
                    {"test", bundle.test.size()}}},
              {"fixtures_dir", global.fixtures_dir},
              {"fixture_hashes", templates.fixture_hashes()}};
}

void write_eval_run(const fs::path& run_dir, const std::string& model,
                    const std::string& dataset, const std::string& prompt_id,
                    const std::string& prompt_text, const std::string& split,
                    const crop::RunConfig& cfg, const crop::EvalSummary& summary,
                    const json& provenance, const json& fixture_hashes) {
  json header{{"model", model},
              {"dataset", dataset},
              {"prompt_id", prompt_id},
              {"prompt_hash", crop::fnv1a64_hex(prompt_text)},
              {"split", split},
              {"seed", cfg.seed},
              {"config", cfg.to_json()},
              {"fixture_hashes", fixture_hashes},
              {"dataset_provenance", provenance},
              {"accuracy", summary.accuracy},
              {"avg_tokens", summary.avg_tokens},
              {"count", summary.count}};
  crop::write_text_file(run_dir / "eval_summary.json", header.dump(2) + "\n");
  crop::write_text_file(run_dir / "prompt.txt", prompt_text);
}

crop::EvalSummary evaluate_into_dir(const fs::path& run_dir, const std::string& model,
                                    const std::string& dataset,
                                    const std::string& prompt_id,
                                    const std::string& prompt_text,
                                    const std::string& split_name,
                                    const std::vector<crop::LabeledExample>& split,
                                    const crop::RunConfig& cfg, crop::Gateway& gateway,
                                    const json& provenance, const json& fixture_hashes) {
  fs::create_directories(run_dir);
  auto summary = crop::evaluate_prompt(prompt_text, split, cfg.backend(crop::Role::target),
                                       gateway, nullptr, run_dir / "eval_records.jsonl");
  write_eval_run(run_dir, model, dataset, prompt_id, prompt_text, split_name, cfg, summary,
                 provenance, fixture_hashes);
  return summary;
}

// ---------------------------------------------------------------------------
// optimize / resume
// ---------------------------------------------------------------------------

struct OptimizeArgs {
  DatasetArgs dataset;
  std::string run_dir;
  std::string initial_prompt_file;
  bool select_on_validation = false;
  bool textgrad = false;
};

int finish_optimize(const crop::OptimizerState& state, const fs::path& run_dir) {
  std::ostringstream os;
  os.precision(10);
  os << state.best_score;
  std::cout << "S_best=" << os.str() << "\n";
  std::cout << "best_prompt=" << (run_dir / "best_prompt.txt").string() << "\n";
  return 0;
}

int cmd_optimize(const GlobalArgs& global, const OptimizeArgs& args) {
  crop::RunConfig cfg = load_config(global);
  if (args.textgrad) cfg = crop::textgrad_config(cfg);
  auto bundle = load_bundle(args.dataset, cfg.seed);
  auto templates = crop::Templates::load(global.fixtures_dir);

  std::string initial_path = args.initial_prompt_file.empty()
                                 ? (fs::path(global.fixtures_dir) / "initial" /
                                    (args.dataset.name + ".txt"))
                                       .string()
                                 : args.initial_prompt_file;
  auto initial = crop::PromptParameter::make(crop::load_template_file(initial_path));

  json settings = effective_settings(cfg, args.dataset, global, templates, bundle);
  settings["initial_prompt"] = initial_path;
  settings["run_dir"] = args.run_dir;
  settings["select_on_validation"] = args.select_on_validation;
  std::cout << settings.dump(2) << "\n";
  if (global.dry_run) return 0;

  crop::LlmGateway gateway;
  if (!cfg.cot_reference_length) {
    std::string cot_text = crop::load_template_file(
        fs::path(global.fixtures_dir) / "baselines" / "cot.txt");
    cfg.cot_reference_length =
        crop::measure_cot_reference(cfg, bundle.validation, cot_text, gateway);
    std::cout << "measured cot_reference_length=" << *cfg.cot_reference_length << "\n";
  }

  fs::create_directories(args.run_dir);
  json meta{{"dataset", args.dataset.name},
            {"paths",
             json{{"train", args.dataset.train},
                  {"validation", args.dataset.validation},
                  {"test", args.dataset.test},
                  {"data", args.dataset.data}}},
            {"val_fraction", args.dataset.val_fraction},
            {"fixtures_dir", global.fixtures_dir},
            {"initial_prompt", initial_path},
            {"select_on_validation", args.select_on_validation},
            {"mock_script", global.mock_script}};
  crop::write_text_file(fs::path(args.run_dir) / "run_meta.json", meta.dump(2) + "\n");

  crop::RunOptions options;
  options.initial_prompt = initial;
  options.run_dir = args.run_dir;
  options.select_on_validation = args.select_on_validation;
  auto state = crop::run(cfg, bundle, templates, gateway, options);
  return finish_optimize(state, args.run_dir);
}

int cmd_resume(const GlobalArgs& global, const std::string& run_dir) {
  const fs::path dir(run_dir);
  if (!fs::exists(dir / "state.json") || !fs::exists(dir / "run_meta.json")) {
    throw crop::MissingRun("no resumable run at " + run_dir);
  }
  json meta = json::parse(crop::read_text_file(dir / "run_meta.json"));
  auto checkpoint =
      crop::Checkpoint::from_json(json::parse(crop::read_text_file(dir / "state.json")));
  crop::RunConfig cfg = checkpoint.config;

  DatasetArgs dataset;
  dataset.name = meta.at("dataset").get<std::string>();
  dataset.train = meta.at("paths").value("train", "");
  dataset.validation = meta.at("paths").value("validation", "");
  dataset.test = meta.at("paths").value("test", "");
  dataset.data = meta.at("paths").value("data", "");
  dataset.val_fraction = meta.value("val_fraction", 0.1);
  auto bundle = load_bundle(dataset, cfg.seed);

  std::string fixtures = meta.value("fixtures_dir", global.fixtures_dir);
  auto templates = crop::Templates::load(fixtures);

  crop::RunOptions options;
  options.initial_prompt = crop::PromptParameter::make(
      crop::load_template_file(meta.at("initial_prompt").get<std::string>()));
  options.run_dir = dir;
  options.resume = true;
  options.select_on_validation = meta.value("select_on_validation", false);
  crop::LlmGateway gateway;
  auto state = crop::run(cfg, bundle, templates, gateway, options);
  return finish_optimize(state, dir);
}

// ---------------------------------------------------------------------------
// evaluate / baseline
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  DatasetArgs dataset;
  std::string run_dir;
  std::string split = "test";
  std::string prompt_file;
  std::string baseline_id;
  std::string prompt_id;
};

int cmd_evaluate(const GlobalArgs& global, const EvaluateArgs& args) {
  crop::RunConfig cfg = load_config(global);
  auto bundle = load_bundle(args.dataset, cfg.seed);
  auto templates = crop::Templates::load(global.fixtures_dir);

  std::string prompt_text;
  std::string prompt_id = args.prompt_id;
  if (!args.prompt_file.empty()) {
    prompt_text = crop::load_template_file(args.prompt_file);
    if (prompt_id.empty()) prompt_id = fs::path(args.prompt_file).stem().string();
  } else if (!args.baseline_id.empty()) {
    auto lib = crop::BaselineLibrary::load(global.fixtures_dir);
    const auto& spec = lib.spec(args.baseline_id);
    prompt_text = spec.prompt_text;
    if (prompt_id.empty()) prompt_id = spec.id;
  } else {
    throw crop::ConfigError("evaluate needs --prompt-file or --baseline");
  }

  json settings = effective_settings(cfg, args.dataset, global, templates, bundle);
  settings["prompt_id"] = prompt_id;
  settings["split"] = args.split;
  std::cout << settings.dump(2) << "\n";
  if (global.dry_run) return 0;

  crop::LlmGateway gateway;
  const auto& split = pick_split(bundle, args.split);
  auto summary = evaluate_into_dir(args.run_dir, cfg.backend(crop::Role::target).model_name,
                                   args.dataset.name, prompt_id, prompt_text, args.split,
                                   split, cfg, gateway, provenance_json(bundle),
                                   templates.fixture_hashes());
  std::cout << "accuracy=" << summary.accuracy << " avg_tokens=" << summary.avg_tokens
            << " count=" << summary.count << "\n";
  return 0;
}

struct BaselineArgs {
  DatasetArgs dataset;
  std::string run_dir;
  std::string split = "test";
  std::vector<std::string> ids;
  std::optional<std::int64_t> n_tokens;
};

int cmd_baseline(const GlobalArgs& global, const BaselineArgs& args) {
  crop::RunConfig cfg = load_config(global);
  auto bundle = load_bundle(args.dataset, cfg.seed);
  auto templates = crop::Templates::load(global.fixtures_dir);
  auto lib = crop::BaselineLibrary::load(global.fixtures_dir);

  std::vector<crop::BaselineSpec> specs;
  if (args.ids.empty()) {
    specs = lib.default_report_set();
  } else {
    for (const auto& id : args.ids) specs.push_back(lib.spec(id));
  }
  if (args.n_tokens) specs.push_back(lib.n_tokens(*args.n_tokens));

  json settings = effective_settings(cfg, args.dataset, global, templates, bundle);
  json id_list = json::array();
  for (const auto& s : specs) id_list.push_back(s.id);
  settings["baselines"] = id_list;
  settings["split"] = args.split;
  std::cout << settings.dump(2) << "\n";
  if (global.dry_run) return 0;

  crop::LlmGateway gateway;
  const auto& split = pick_split(bundle, args.split);
  for (const auto& spec : specs) {
    auto summary = evaluate_into_dir(
        fs::path(args.run_dir) / spec.id, cfg.backend(crop::Role::target).model_name,
        args.dataset.name, spec.id, spec.prompt_text, args.split, split, cfg, gateway,
        provenance_json(bundle), templates.fixture_hashes());
    std::cout << spec.id << ": accuracy=" << summary.accuracy
              << " avg_tokens=" << summary.avg_tokens << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(const std::string& out_dir, const std::vector<std::string>& run_dirs) {
  std::vector<crop::EvalRun> eval_runs;
  std::vector<crop::OptimizeRun> optimize_runs;
  for (const auto& dir : run_dirs) {
    bool loaded = false;
    if (fs::exists(fs::path(dir) / "eval_summary.json")) {
      eval_runs.push_back(crop::load_eval_run(dir));
      loaded = true;
    }
    if (auto run = crop::try_load_optimize_run(dir)) {
      optimize_runs.push_back(std::move(*run));
      loaded = true;
    }
    if (!loaded) throw crop::MissingRun("no evaluation or optimize run at " + dir);
  }

  auto rows = crop::build_report_rows(eval_runs);
  fs::create_directories(out_dir);
  crop::write_text_file(fs::path(out_dir) / "report.csv", crop::report_rows_to_csv(rows));

  json headers = json::array();
  for (const auto& run : eval_runs) headers.push_back(run.header);
  json report{{"rows", crop::report_rows_to_json(rows)}, {"runs", headers}};
  crop::write_text_file(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  crop::write_text_file(fs::path(out_dir) / "series.csv",
                        crop::series_to_csv(optimize_runs));

  // Header block, then one line per row.
  std::cout << "# runs=" << eval_runs.size() << " series=" << optimize_runs.size() << "\n";
  for (const auto& run : eval_runs) {
    std::string provenance;
    for (const auto& src : run.header.value("dataset_provenance", json::array())) {
      if (!provenance.empty()) provenance += ",";
      provenance += src.value("content_hash", "");
    }
    std::cout << "# " << run.run_dir << " model=" << run.model
              << " dataset=" << run.dataset << " prompt=" << run.prompt_id
              << " split=" << run.split << " seed=" << run.header.value("seed", 0)
              << " provenance=" << provenance << "\n";
  }
  bool any_reduction = false;
  for (const auto& r : rows) any_reduction = any_reduction || r.reduction_vs_cot_pct.has_value();
  std::printf("%-18s %-22s %-14s %10s %12s", "model", "dataset", "prompt", "acc_pct",
              "avg_tokens");
  if (any_reduction) std::printf(" %14s", "reduction_pct");
  std::printf("\n");
  for (const auto& r : rows) {
    std::printf("%-18s %-22s %-14s %10.1f %12.1f", r.model.c_str(), r.dataset.c_str(),
                r.prompt_id.c_str(), r.accuracy_pct, r.avg_tokens);
    if (any_reduction) {
      if (r.reduction_vs_cot_pct) std::printf(" %14.1f", *r.reduction_vs_cot_pct);
      else std::printf(" %14s", "");
    }
    std::printf("\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sweep-lambda
// ---------------------------------------------------------------------------

struct SweepArgs {
  DatasetArgs dataset;
  std::string run_dir;
  std::vector<double> lambdas{0.01, 0.05, 0.1, 0.2, 0.5};
  std::string initial_prompt_file;
};

int cmd_sweep_lambda(const GlobalArgs& global, const SweepArgs& args) {
  if (args.lambdas.empty()) throw crop::ConfigError("sweep needs at least one lambda");
  std::set<double> unique(args.lambdas.begin(), args.lambdas.end());
  if (unique.size() != args.lambdas.size()) {
    throw crop::ConfigError("duplicate lambda values in sweep list");
  }

  crop::RunConfig base_cfg = load_config(global);
  auto bundle = load_bundle(args.dataset, base_cfg.seed);
  auto templates = crop::Templates::load(global.fixtures_dir);

  std::string initial_path = args.initial_prompt_file.empty()
                                 ? (fs::path(global.fixtures_dir) / "initial" /
                                    (args.dataset.name + ".txt"))
                                       .string()
                                 : args.initial_prompt_file;
  auto initial = crop::PromptParameter::make(crop::load_template_file(initial_path));

  json settings = effective_settings(base_cfg, args.dataset, global, templates, bundle);
  settings["lambdas"] = args.lambdas;
  std::cout << settings.dump(2) << "\n";
  if (global.dry_run) return 0;

  crop::LlmGateway gateway;
  if (!base_cfg.cot_reference_length) {
    std::string cot_text = crop::load_template_file(
        fs::path(global.fixtures_dir) / "baselines" / "cot.txt");
    base_cfg.cot_reference_length =
        crop::measure_cot_reference(base_cfg, bundle.validation, cot_text, gateway);
  }

  json summary = json::array();
  std::size_t failures = 0;
  for (double lambda : args.lambdas) {
    crop::RunConfig cfg = base_cfg;
    cfg.lambda = lambda;
    fs::path dir = fs::path(args.run_dir) / ("lambda_" + format_lambda(lambda));
    try {
      crop::RunOptions options;
      options.initial_prompt = initial;
      options.run_dir = dir;
      auto state = crop::run(cfg, bundle, templates, gateway, options);

      // Rank by validation-level composite score of the selected prompt.
      auto val = crop::evaluate_prompt(state.best_prompt.text, bundle.validation,
                                       cfg.backend(crop::Role::target), gateway);
      double s_val = val.accuracy - lambda * (val.avg_tokens / *cfg.cot_reference_length);
      summary.push_back(json{{"lambda", lambda},
                             {"run_dir", dir.string()},
                             {"validation_accuracy", val.accuracy},
                             {"validation_avg_tokens", val.avg_tokens},
                             {"validation_score", s_val},
                             {"batch_best_score", state.best_score},
                             {"best_prompt", state.best_prompt.text}});
    } catch (const std::exception& ex) {
      ++failures;
      summary.push_back(json{{"lambda", lambda}, {"error", ex.what()}});
    }
  }

  std::sort(summary.begin(), summary.end(), [](const json& a, const json& b) {
    double sa = a.value("validation_score", -1e300);
    double sb = b.value("validation_score", -1e300);
    return sa > sb;
  });
  fs::create_directories(args.run_dir);
  crop::write_text_file(fs::path(args.run_dir) / "sweep_summary.json",
                        summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return failures == args.lambdas.size() ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CROP: cost-regularized optimization of prompts"};
  app.require_subcommand(1);

  GlobalArgs global;
  app.add_option("--config", global.config_path, "Run configuration JSON")
      ->envname("CROP_CONFIG");
  app.add_option("--seed", global.seed_override, "Override the config seed");
  app.add_option("--mock", global.mock_script,
                 "Route every backend to this mock script JSON");
  app.add_flag("--dry-run", global.dry_run,
               "Validate and print effective settings, make no backend calls");
  app.add_option("--fixtures", global.fixtures_dir, "Prompt fixture directory");

  OptimizeArgs optimize_args;
  auto* optimize = app.add_subcommand("optimize", "Run the optimization loop");
  add_dataset_flags(optimize, optimize_args.dataset);
  optimize->add_option("--run-dir", optimize_args.run_dir, "Output directory")->required();
  optimize->add_option("--initial-prompt", optimize_args.initial_prompt_file,
                       "Initial system prompt file (default: fixtures/initial/<dataset>.txt)");
  optimize->add_flag("--select-on-validation", optimize_args.select_on_validation,
                     "Score candidates on the full validation split instead of the batch");
  optimize->add_flag("--textgrad", optimize_args.textgrad,
                     "TextGrad baseline mode: no length penalty, accuracy-only selection");

  std::string resume_dir;
  auto* resume = app.add_subcommand("resume", "Resume an optimization run");
  resume->add_option("--run-dir", resume_dir, "Run directory with state.json")->required();

  EvaluateArgs evaluate_args;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate one prompt on a split");
  add_dataset_flags(evaluate, evaluate_args.dataset);
  evaluate->add_option("--run-dir", evaluate_args.run_dir, "Output directory")->required();
  evaluate->add_option("--split", evaluate_args.split, "train, validation, or test");
  evaluate->add_option("--prompt-file", evaluate_args.prompt_file, "Prompt text file");
  evaluate->add_option("--baseline", evaluate_args.baseline_id, "Baseline prompt id");
  evaluate->add_option("--id", evaluate_args.prompt_id, "Row label for reports");

  BaselineArgs baseline_args;
  auto* baseline = app.add_subcommand("baseline", "Run the baseline suite on a split");
  add_dataset_flags(baseline, baseline_args.dataset);
  baseline->add_option("--run-dir", baseline_args.run_dir, "Output directory")->required();
  baseline->add_option("--split", baseline_args.split, "train, validation, or test");
  baseline->add_option("--ids", baseline_args.ids, "Baseline ids (default: report set)");
  baseline->add_option("--n-tokens", baseline_args.n_tokens,
                       "Also run the N-word budget prompt with this N");

  std::string report_out = "report";
  std::vector<std::string> report_dirs;
  auto* report = app.add_subcommand("report", "Build tables from run directories");
  report->add_option("--out", report_out, "Output directory for report files");
  report->add_option("runs", report_dirs, "Run directories")->required();

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep-lambda", "Grid-search lambda");
  add_dataset_flags(sweep, sweep_args.dataset);
  sweep->add_option("--run-dir", sweep_args.run_dir, "Output directory")->required();
  sweep->add_option("--lambdas", sweep_args.lambdas,
                    "Lambda grid (default: 0.01 0.05 0.1 0.2 0.5)");
  sweep->add_option("--initial-prompt", sweep_args.initial_prompt_file,
                    "Initial system prompt file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (optimize->parsed()) return cmd_optimize(global, optimize_args);
    if (resume->parsed()) return cmd_resume(global, resume_dir);
    if (evaluate->parsed()) return cmd_evaluate(global, evaluate_args);
    if (baseline->parsed()) return cmd_baseline(global, baseline_args);
    if (report->parsed()) return cmd_report(report_out, report_dirs);
    if (sweep->parsed()) return cmd_sweep_lambda(global, sweep_args);
  } catch (const crop::AuthError& ex) {
    std::cerr << json{{"error", "AuthError"}, {"message", ex.what()}}.dump() << "\n";
    return 2;
  } catch (const crop::Error& ex) {
    std::cerr << json{{"error", "Error"}, {"message", ex.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << json{{"error", "Unexpected"}, {"message", ex.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
