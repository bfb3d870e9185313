// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "btel/corpus.hpp"
#include "btel/diagnostics.hpp"
#include "btel/training.hpp"

namespace btel {

// stderr logging gated by BTEL_LOG_LEVEL in {error, info, debug}.
enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };
LogLevel log_level();
void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "experiment";

  SyntheticWorldSpec world;  // seeds baked during resolution
  Direction primary{"A", "B"};

  int members = 3;
  std::vector<LanguageId> auxiliary_languages;

  int train_sentences = 4000;
  int valid_pairs = 200;
  int test_pairs = 200;

  ModelConfig model;  // vocab_size filled after the vocabulary is built

  std::int64_t mono_steps = 200;
  std::int64_t mixed_steps = 400;
  std::int64_t pure_bt_steps = 1400;
  int batch_size = 16;
  double bt_ratio = 0.98;
  bool uniform_direction_schedule = false;

  double initial_lr = 3e-4;
  std::vector<std::int64_t> halving_steps;  // baked during resolution

  int rounds = 2;
  std::int64_t round_steps = 500;
  int round_batch_size = 16;
  int sentences_per_direction = 2000;
  bool baseline_enabled = true;

  DecodeConfig train_decode;  // BT self-generation and pseudo generation
  DecodeConfig eval_decode;   // scoring runs

  std::vector<std::string> metrics = {"chrf", "bleu"};
  ChrfConfig chrf;
  int diagnostics_samples = 64;

  std::int64_t total_base_steps() const {
    return mono_steps + mixed_steps + pure_bt_steps;
  }
  void validate() const;  // throws ConfigError naming the offending field
};

// Parses + resolves a config document: defaults applied, derived seeds and
// lr milestones baked in. The resolved snapshot fully determines every
// downstream artifact.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);
nlohmann::json resolved_config_json(const ExperimentConfig& cfg);

// Append-only JSONL metrics log; one JSON object per line, single
// serialized appender.
class MetricsLogger {
 public:
  MetricsLogger(const std::filesystem::path& path, std::string run_id);
  void log(const std::string& kind, nlohmann::json payload);

 private:
  std::ofstream out_;
  std::mutex mutex_;
  std::string run_id_;
};

// Reads score records back out of a metrics log (for summary.csv and for
// recompute-vs-logged checks). Missing file yields an empty list.
std::vector<ScoreRecord> read_logged_scores(const std::filesystem::path& metrics_path);
void write_summary_csv(const std::filesystem::path& csv_path,
                       const std::vector<ScoreRecord>& records);

// Orchestrates gen-data -> base-train -> ensemble rounds -> control
// baseline -> final evaluation -> selection against one experiment
// directory. Stages are independently re-runnable; completed stages leave
// stages/<name>.done markers and aborted ones stages/<name>.failed.
class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig cfg, std::filesystem::path out_dir);

  void run_all();
  void gen_data();
  void base_train();
  void ensemble_rounds();
  void control_baseline();
  void final_eval();
  void select();

  // Re-scores a system ("member-<i>", "ensemble", "baseline") exactly as
  // the pipeline did; used by the evaluate subcommand.
  std::vector<ScoreRecord> evaluate_stage(const std::string& system_id,
                                          const std::string& split,
                                          std::int64_t round);

  // A saved system plus the scoring-stream identity it was logged under.
  struct LoadedSystem {
    std::vector<Model> models;  // keeps the members alive
    std::unique_ptr<TranslationSystem> system;
    std::uint64_t eval_root = 0;
    std::string stream_id;
  };
  // system_id: member-<i> | ensemble | baseline | stub-identity |
  // stub-constant | stub-oracle. `which` picks base or final member
  // checkpoints ("auto" prefers final when present).
  LoadedSystem load_system(const std::string& system_id,
                           const std::string& which = "auto");

  CollapseReport diagnose(const std::string& system_id, const Direction& dir,
                          int n);

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return cfg_; }
  std::string run_id() const { return run_id_; }

  // Loaded lazily from the experiment directory.
  const SyntheticWorld& world();
  const Vocabulary& vocab();
  const TrainCorpora& corpora();
  EvalSet eval_set(const Direction& dir, Split split);

  Model load_member(int index, const std::string& which);  // "base" | "final"
  Model load_baseline();
  std::filesystem::path checkpoint_path(const std::string& member_dir,
                                        const std::string& phase,
                                        std::int64_t step) const;

 private:
  void write_marker(const std::string& stage, bool ok,
                    const std::string& detail = "");
  bool stage_done(const std::string& stage) const;
  void run_stage(const std::string& stage, void (ExperimentRunner::*fn)());
  MetricsLogger& metrics();
  nlohmann::json state();
  void save_state(const nlohmann::json& s);
  std::vector<double> log_pool_scores(const ModelPool& pool,
                                      std::int64_t round,
                                      std::uint64_t eval_root,
                                      const std::string& baseline_alias = "");

  ExperimentConfig cfg_;
  std::filesystem::path dir_;
  std::string run_id_;
  std::optional<SyntheticWorld> world_;
  std::optional<Vocabulary> vocab_;
  std::optional<TrainCorpora> corpora_;
  std::optional<MetricsLogger> metrics_;
};

// Convenience wrapper: resolve the config, run every stage, return the
// experiment directory.
std::filesystem::path run_experiment(const ExperimentConfig& cfg);

}  // namespace btel
