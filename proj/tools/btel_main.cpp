// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: one subcommand per pipeline stage plus ad-hoc
// translation, diagnostics, and report regeneration.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "btel/experiment.hpp"

namespace {

using namespace btel;
using nlohmann::json;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed_override = -1;
  int members_override = -1;
  int rounds_override = -1;
};

ExperimentConfig resolve_config(const CommonArgs& args) {
  json doc = json::object();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw IoError("cannot open config '" + args.config_path + "'");
    try {
      in >> doc;
    } catch (const json::exception& e) {
      throw ConfigError("config '" + args.config_path +
                        "' is not valid JSON: " + e.what());
    }
  }
  if (args.seed_override >= 0)
    doc["seed"] = static_cast<std::uint64_t>(args.seed_override);
  if (args.members_override > 0) doc["pool"]["members"] = args.members_override;
  if (args.rounds_override >= 0) doc["rounds"]["count"] = args.rounds_override;
  if (!args.out_dir.empty()) doc["out_dir"] = args.out_dir;
  return parse_experiment_config(doc);
}

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("--config", args.config_path, "experiment config JSON");
  auto* out = cmd->add_option("--out", args.out_dir, "experiment directory");
  if (out_required) out->required();
  cmd->add_option("--seed", args.seed_override, "override the global seed");
  cmd->add_option("--members", args.members_override, "override pool size");
  cmd->add_option("--rounds", args.rounds_override, "override round count");
}

void print_scores(const std::vector<ScoreRecord>& records) {
  std::printf("system,direction,metric,split,round,value,seed\n");
  for (const auto& rec : records)
    std::printf("%s,%s,%s,%s,%lld,%.6f,%llu\n", rec.system_id.c_str(),
                rec.direction.label().c_str(), rec.metric.c_str(),
                rec.split.c_str(), static_cast<long long>(rec.round), rec.value,
                static_cast<unsigned long long>(rec.seed));
}

Direction parse_direction(const std::string& text) {
  const auto arrow = text.find("->");
  if (arrow == std::string::npos)
    throw ConfigError("direction must look like SRC->TGT, got '" + text + "'");
  return Direction{text.substr(0, arrow), text.substr(arrow + 2)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale ensemble back-translation laboratory"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string stage_name;
  std::string system_id = "member-0";
  std::string split = "valid";
  std::int64_t round = 0;
  std::string direction_text = "A->B";
  std::string input_path;
  int n_samples = 64;

  auto* run = app.add_subcommand("run", "run the full pipeline");
  add_common(run, args, false);
  run->add_option("--stage", stage_name,
                  "run one stage: gen-data | base-train | train-ensemble | "
                  "baseline | evaluate | select");

  auto* gen = app.add_subcommand("gen-data", "generate world, corpora, vocab");
  add_common(gen, args, false);

  auto* train_single =
      app.add_subcommand("train-single", "base-train every pool member");
  add_common(train_single, args, false);

  auto* train_ensemble =
      app.add_subcommand("train-ensemble", "ensemble self-training rounds");
  add_common(train_ensemble, args, false);

  auto* baseline =
      app.add_subcommand("baseline", "matched single-model continuation");
  add_common(baseline, args, false);

  auto* evaluate = app.add_subcommand("evaluate", "re-score a saved system");
  add_common(evaluate, args, false);
  evaluate->add_option("--system", system_id,
                       "member-<i> | ensemble | baseline");
  evaluate->add_option("--split", split, "valid | test");
  evaluate->add_option("--round", round, "round index of the scoring stream");

  auto* diagnose = app.add_subcommand("diagnose", "collapse diagnostics");
  add_common(diagnose, args, false);
  diagnose->add_option("--system", system_id,
                       "member-<i> | baseline | stub-identity | stub-constant "
                       "| stub-oracle");
  diagnose->add_option("--direction", direction_text, "e.g. A->B");
  diagnose->add_option("-n,--samples", n_samples, "sentences to decode");

  auto* translate = app.add_subcommand("translate", "decode input lines");
  add_common(translate, args, false);
  translate->add_option("--system", system_id,
                        "member-<i> | ensemble | baseline");
  translate->add_option("--direction", direction_text, "e.g. A->B");
  translate->add_option("--input", input_path,
                        "newline-delimited sentences (default: stdin)");

  auto* report =
      app.add_subcommand("report", "regenerate summary.csv from the metrics log");
  report->add_option("--out", args.out_dir, "experiment directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      const auto dir = std::filesystem::path(args.out_dir);
      const auto records = read_logged_scores(dir / "metrics.jsonl");
      write_summary_csv(dir / "summary.csv", records);
      std::printf("%s\n", (dir / "summary.csv").c_str());
      return 0;
    }

    ExperimentConfig cfg = resolve_config(args);
    ExperimentRunner runner(cfg, args.out_dir.empty() ? cfg.out_dir
                                                      : args.out_dir);

    if (run->parsed()) {
      if (stage_name.empty()) {
        runner.run_all();
      } else if (stage_name == "gen-data") {
        runner.gen_data();
      } else if (stage_name == "base-train") {
        runner.base_train();
      } else if (stage_name == "train-ensemble") {
        runner.ensemble_rounds();
      } else if (stage_name == "baseline") {
        runner.control_baseline();
      } else if (stage_name == "evaluate") {
        runner.final_eval();
      } else if (stage_name == "select") {
        runner.select();
      } else {
        throw ConfigError("unknown stage '" + stage_name + "'");
      }
      std::printf("%s\n", runner.dir().c_str());
    } else if (gen->parsed()) {
      runner.gen_data();
      std::printf("%s\n", runner.dir().c_str());
    } else if (train_single->parsed()) {
      runner.base_train();
      std::printf("%s\n", runner.dir().c_str());
    } else if (train_ensemble->parsed()) {
      runner.ensemble_rounds();
      std::printf("%s\n", runner.dir().c_str());
    } else if (baseline->parsed()) {
      runner.control_baseline();
      std::printf("%s\n", runner.dir().c_str());
    } else if (evaluate->parsed()) {
      print_scores(runner.evaluate_stage(system_id, split, round));
    } else if (diagnose->parsed()) {
      const CollapseReport rep =
          runner.diagnose(system_id, parse_direction(direction_text), n_samples);
      std::printf("system=%s direction=%s n=%d\n", system_id.c_str(),
                  direction_text.c_str(), rep.sample_size);
      std::printf("copying_rate=%.4f\n", rep.copying_rate);
      std::printf("constancy_score=%.4f\n", rep.constancy_score);
      std::printf("distinct_output_ratio=%.4f\n", rep.distinct_output_ratio);
      std::printf("target_language_rate=%.4f\n", rep.target_language_rate);
    } else if (translate->parsed()) {
      const Direction dir = parse_direction(direction_text);
      std::istream* in = &std::cin;
      std::ifstream file;
      if (!input_path.empty()) {
        file.open(input_path);
        if (!file) throw IoError("cannot open '" + input_path + "'");
        in = &file;
      }
      auto loaded = runner.load_system(system_id);
      DecodeConfig cfg = runner.config().eval_decode;
      cfg.rng_seed = substream(runner.config().seed, "translate");
      std::string line;
      std::int64_t index = 0;
      while (std::getline(*in, line)) {
        if (line.empty()) continue;
        std::printf("%s\n",
                    loaded.system->translate(line, dir, cfg, index).c_str());
        ++index;
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
