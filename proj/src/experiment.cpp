// SPDX-License-Identifier: Apache-2.0
#include "btel/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "btel/parallel.hpp"

namespace btel {

namespace fs = std::filesystem;
using nlohmann::json;

LogLevel log_level() {
  if (const char* env = std::getenv("BTEL_LOG_LEVEL")) {
    const std::string v = env;
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    if (v == "error") return LogLevel::kError;
  }
  return LogLevel::kInfo;
}

namespace {
void log_at(LogLevel level, const char* tag, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level()))
    std::cerr << "[btel " << tag << "] " << msg << "\n";
}
}  // namespace

void log_error(const std::string& msg) { log_at(LogLevel::kError, "error", msg); }
void log_info(const std::string& msg) { log_at(LogLevel::kInfo, "info", msg); }
void log_debug(const std::string& msg) { log_at(LogLevel::kDebug, "debug", msg); }

void ExperimentConfig::validate() const {
  try {
    world.validate();
  } catch (const InvalidSpec& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  auto has_language = [&](const LanguageId& id) {
    for (const auto& l : world.languages)
      if (l.id == id) return true;
    return false;
  };
  if (!has_language(primary.src))
    throw ConfigError("primary_pair[0]: language '" + primary.src +
                      "' not in world.languages");
  if (!has_language(primary.tgt))
    throw ConfigError("primary_pair[1]: language '" + primary.tgt +
                      "' not in world.languages");
  if (primary.src == primary.tgt)
    throw ConfigError("primary_pair: languages must differ");
  if (members < 1) throw ConfigError("pool.members: must be >= 1");
  if (static_cast<int>(auxiliary_languages.size()) < members)
    throw ConfigError("pool.auxiliary_languages: need at least " +
                      std::to_string(members) + " entries");
  for (std::size_t i = 0; i < auxiliary_languages.size(); ++i) {
    const auto& aux = auxiliary_languages[i];
    const std::string field = "pool.auxiliary_languages[" + std::to_string(i) + "]";
    if (!has_language(aux))
      throw ConfigError(field + ": language '" + aux + "' not in world.languages");
    if (aux == primary.src || aux == primary.tgt)
      throw ConfigError(field + ": auxiliary language equals a primary language");
    for (std::size_t j = 0; j < i; ++j)
      if (auxiliary_languages[j] == aux)
        throw ConfigError(field + ": duplicate auxiliary language '" + aux + "'");
  }
  if (train_sentences < 1) throw ConfigError("corpus.train_sentences: must be >= 1");
  if (valid_pairs < 1) throw ConfigError("corpus.valid_pairs: must be >= 1");
  if (test_pairs < 1) throw ConfigError("corpus.test_pairs: must be >= 1");
  try {
    ModelConfig probe = model;
    probe.vocab_size = 8;  // unknown until the vocabulary is built
    probe.validate();
  } catch (const InvalidConfig& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  // Worst-case pair example: pseudo-source capped at 2*len+8 plus the real
  // sentence and four structural tokens.
  const int worst = 3 * world.max_sentence_len + 11;
  if (worst > model.max_context)
    throw ConfigError("model.max_context: " + std::to_string(model.max_context) +
                      " cannot hold worst-case training example of length " +
                      std::to_string(worst) +
                      " (reduce world.sentence_length_range)");
  if (mono_steps < 0 || mixed_steps < 0 || pure_bt_steps < 0)
    throw ConfigError("phases.*.steps: must be >= 0");
  if (batch_size < 1) throw ConfigError("phases.batch_size: must be >= 1");
  if (bt_ratio < 0.0 || bt_ratio > 1.0)
    throw ConfigError("phases.mixed.bt_ratio: must be in [0, 1]");
  if (bt_ratio < 0.90 || bt_ratio > 0.98)
    log_info("phases.mixed.bt_ratio " + std::to_string(bt_ratio) +
             " is outside the recommended [0.90, 0.98] range");
  if (!(initial_lr > 0)) throw ConfigError("lr.initial: must be > 0");
  for (std::size_t i = 1; i < halving_steps.size(); ++i)
    if (halving_steps[i] <= halving_steps[i - 1])
      throw ConfigError("lr.halving_steps: must be strictly increasing");
  if (rounds < 0) throw ConfigError("rounds.count: must be >= 0");
  if (round_steps < 0) throw ConfigError("rounds.steps: must be >= 0");
  if (round_batch_size < 1) throw ConfigError("rounds.batch_size: must be >= 1");
  if (sentences_per_direction < 0)
    throw ConfigError("rounds.sentences_per_direction: must be >= 0");
  try {
    train_decode.validate();
    eval_decode.validate();
  } catch (const InvalidConfig& e) {
    throw ConfigError(std::string("decode: ") + e.what());
  }
  for (const auto& m : metrics)
    if (m != "chrf" && m != "bleu")
      throw ConfigError("eval.metrics: unknown metric '" + m + "'");
  if (diagnostics_samples < 2)
    throw ConfigError("eval.diagnostics_samples: must be >= 2");
}

namespace {

OrderTransform transform_from_name(const std::string& name) {
  if (name == "identity") return OrderTransform::kIdentity;
  if (name == "reverse") return OrderTransform::kReverse;
  if (name == "rotate") return OrderTransform::kRotate;
  throw ConfigError("world.languages[].order_transform: unknown transform '" +
                    name + "'");
}

const char* transform_name(OrderTransform t) {
  switch (t) {
    case OrderTransform::kIdentity: return "identity";
    case OrderTransform::kReverse: return "reverse";
    case OrderTransform::kRotate: return "rotate";
  }
  return "identity";
}

std::vector<LanguageSpec> default_languages(int members) {
  std::vector<LanguageSpec> langs;
  langs.push_back({"A", 0, OrderTransform::kIdentity, 0});
  langs.push_back({"B", 0, OrderTransform::kReverse, 0});
  const OrderTransform cycle[3] = {OrderTransform::kRotate,
                                   OrderTransform::kIdentity,
                                   OrderTransform::kRotate};
  for (int i = 0; i < std::max(members, 3); ++i) {
    LanguageSpec aux;
    aux.id = "C" + std::to_string(i + 1);
    aux.transform = cycle[i % 3];
    aux.rotate_k = 1 + i % 3;
    langs.push_back(aux);
  }
  return langs;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc) {
  ExperimentConfig cfg;
  try {
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.out_dir = doc.value("out_dir", cfg.out_dir);

    if (doc.contains("pool")) {
      const auto& pool = doc.at("pool");
      cfg.members = pool.value("members", cfg.members);
      if (pool.contains("auxiliary_languages"))
        cfg.auxiliary_languages =
            pool.at("auxiliary_languages").get<std::vector<std::string>>();
    }

    if (doc.contains("world")) {
      const auto& w = doc.at("world");
      cfg.world.base_vocab_size = w.value("base_vocab_size", 60);
      if (w.contains("sentence_length_range")) {
        const auto& r = w.at("sentence_length_range");
        cfg.world.min_sentence_len = r.at(0).get<int>();
        cfg.world.max_sentence_len = r.at(1).get<int>();
      }
      if (w.contains("grammar_seed") && !w.at("grammar_seed").is_null())
        cfg.world.grammar_seed = w.at("grammar_seed").get<std::uint64_t>();
      else
        cfg.world.grammar_seed = substream(cfg.seed, "world/grammar-root");
      if (w.contains("languages")) {
        for (const auto& lj : w.at("languages")) {
          LanguageSpec lang;
          lang.id = lj.at("id").get<std::string>();
          lang.transform =
              transform_from_name(lj.value("order_transform", "identity"));
          lang.rotate_k = lj.value("rotate_k", 1);
          if (lj.contains("substitution_seed") &&
              !lj.at("substitution_seed").is_null())
            lang.substitution_seed = lj.at("substitution_seed").get<std::uint64_t>();
          cfg.world.languages.push_back(lang);
        }
      }
    } else {
      cfg.world.grammar_seed = substream(cfg.seed, "world/grammar-root");
    }
    if (cfg.world.languages.empty())
      cfg.world.languages = default_languages(cfg.members);
    for (std::size_t i = 0; i < cfg.world.languages.size(); ++i)
      if (cfg.world.languages[i].substitution_seed == 0)
        cfg.world.languages[i].substitution_seed =
            substream(cfg.seed, "world/sub", i);

    if (doc.contains("primary_pair")) {
      cfg.primary.src = doc.at("primary_pair").at(0).get<std::string>();
      cfg.primary.tgt = doc.at("primary_pair").at(1).get<std::string>();
    }
    if (cfg.auxiliary_languages.empty())
      for (const auto& l : cfg.world.languages)
        if (l.id != cfg.primary.src && l.id != cfg.primary.tgt)
          cfg.auxiliary_languages.push_back(l.id);

    if (doc.contains("corpus")) {
      const auto& c = doc.at("corpus");
      cfg.train_sentences = c.value("train_sentences", cfg.train_sentences);
      cfg.valid_pairs = c.value("valid_pairs", cfg.valid_pairs);
      cfg.test_pairs = c.value("test_pairs", cfg.test_pairs);
    }

    if (doc.contains("model")) {
      const auto& m = doc.at("model");
      cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
      cfg.model.d_model = m.value("d_model", cfg.model.d_model);
      cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
      cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
      cfg.model.max_context = m.value("max_context", cfg.model.max_context);
    }

    if (doc.contains("phases")) {
      const auto& p = doc.at("phases");
      cfg.batch_size = p.value("batch_size", cfg.batch_size);
      if (p.contains("monolingual"))
        cfg.mono_steps = p.at("monolingual").value("steps", cfg.mono_steps);
      if (p.contains("mixed")) {
        cfg.mixed_steps = p.at("mixed").value("steps", cfg.mixed_steps);
        cfg.bt_ratio = p.at("mixed").value("bt_ratio", cfg.bt_ratio);
      }
      if (p.contains("pure_bt"))
        cfg.pure_bt_steps = p.at("pure_bt").value("steps", cfg.pure_bt_steps);
    }
    if (doc.contains("direction_schedule")) {
      const std::string s = doc.at("direction_schedule").get<std::string>();
      if (s == "uniform") cfg.uniform_direction_schedule = true;
      else if (s != "round_robin")
        throw ConfigError("direction_schedule: must be round_robin or uniform");
    }

    if (doc.contains("lr")) {
      const auto& l = doc.at("lr");
      cfg.initial_lr = l.value("initial", cfg.initial_lr);
      if (l.contains("halving_steps") && !l.at("halving_steps").is_null())
        cfg.halving_steps =
            l.at("halving_steps").get<std::vector<std::int64_t>>();
    }
    if (cfg.halving_steps.empty() && cfg.total_base_steps() > 0) {
      // Paper schedule shape (two halvings at 10% and 20% of the run),
      // scaled to the configured run length.
      const std::int64_t total = cfg.total_base_steps();
      const std::int64_t h1 = std::max<std::int64_t>(1, total / 10);
      const std::int64_t h2 = std::max<std::int64_t>(h1 + 1, total / 5);
      cfg.halving_steps = {h1, h2};
    }

    if (doc.contains("rounds")) {
      const auto& r = doc.at("rounds");
      cfg.rounds = r.value("count", cfg.rounds);
      cfg.round_steps = r.value("steps", cfg.round_steps);
      cfg.round_batch_size = r.value("batch_size", cfg.batch_size);
      cfg.sentences_per_direction =
          r.value("sentences_per_direction", cfg.sentences_per_direction);
    } else {
      cfg.round_batch_size = cfg.batch_size;
    }
    if (doc.contains("baseline"))
      cfg.baseline_enabled = doc.at("baseline").value("enabled", true);

    if (doc.contains("decode")) {
      const auto& d = doc.at("decode");
      cfg.train_decode.temperature = d.value("temperature", 0.1);
      cfg.train_decode.greedy = d.value("greedy", false);
      cfg.train_decode.max_new_tokens = d.value("max_new_tokens", 64);
      cfg.eval_decode = cfg.train_decode;
      if (d.contains("eval_greedy"))
        cfg.eval_decode.greedy = d.at("eval_greedy").get<bool>();
    }

    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      if (e.contains("metrics"))
        cfg.metrics = e.at("metrics").get<std::vector<std::string>>();
      cfg.chrf.max_order = e.value("chrf_order", cfg.chrf.max_order);
      cfg.chrf.beta = e.value("chrf_beta", cfg.chrf.beta);
      cfg.diagnostics_samples =
          e.value("diagnostics_samples", cfg.diagnostics_samples);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config document: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

json resolved_config_json(const ExperimentConfig& cfg) {
  json langs = json::array();
  for (const auto& l : cfg.world.languages) {
    json lj = {{"id", l.id},
               {"substitution_seed", l.substitution_seed},
               {"order_transform", transform_name(l.transform)}};
    if (l.transform == OrderTransform::kRotate) lj["rotate_k"] = l.rotate_k;
    langs.push_back(lj);
  }
  return json{
      {"schema_version", 1},
      {"seed", cfg.seed},
      {"out_dir", cfg.out_dir},
      {"world",
       {{"base_vocab_size", cfg.world.base_vocab_size},
        {"sentence_length_range",
         {cfg.world.min_sentence_len, cfg.world.max_sentence_len}},
        {"grammar_seed", cfg.world.grammar_seed},
        {"languages", langs}}},
      {"primary_pair", {cfg.primary.src, cfg.primary.tgt}},
      {"pool",
       {{"members", cfg.members},
        {"auxiliary_languages", cfg.auxiliary_languages}}},
      {"corpus",
       {{"train_sentences", cfg.train_sentences},
        {"valid_pairs", cfg.valid_pairs},
        {"test_pairs", cfg.test_pairs}}},
      {"model",
       {{"n_layers", cfg.model.n_layers},
        {"d_model", cfg.model.d_model},
        {"n_heads", cfg.model.n_heads},
        {"d_ff", cfg.model.d_ff},
        {"max_context", cfg.model.max_context}}},
      {"phases",
       {{"batch_size", cfg.batch_size},
        {"monolingual", {{"steps", cfg.mono_steps}}},
        {"mixed", {{"steps", cfg.mixed_steps}, {"bt_ratio", cfg.bt_ratio}}},
        {"pure_bt", {{"steps", cfg.pure_bt_steps}}}}},
      {"direction_schedule",
       cfg.uniform_direction_schedule ? "uniform" : "round_robin"},
      {"lr", {{"initial", cfg.initial_lr}, {"halving_steps", cfg.halving_steps}}},
      {"rounds",
       {{"count", cfg.rounds},
        {"steps", cfg.round_steps},
        {"batch_size", cfg.round_batch_size},
        {"sentences_per_direction", cfg.sentences_per_direction}}},
      {"baseline", {{"enabled", cfg.baseline_enabled}}},
      {"decode",
       {{"temperature", cfg.train_decode.temperature},
        {"greedy", cfg.train_decode.greedy},
        {"eval_greedy", cfg.eval_decode.greedy},
        {"max_new_tokens", cfg.train_decode.max_new_tokens}}},
      {"eval",
       {{"metrics", cfg.metrics},
        {"chrf_order", cfg.chrf.max_order},
        {"chrf_beta", cfg.chrf.beta},
        {"diagnostics_samples", cfg.diagnostics_samples}}}};
}

MetricsLogger::MetricsLogger(const fs::path& path, std::string run_id)
    : run_id_(std::move(run_id)) {
  fs::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics log '" + path.string() + "'");
}

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace

void MetricsLogger::log(const std::string& kind, json payload) {
  static const std::vector<std::string> kKinds = {
      "phase_report", "round_report", "score", "collapse_report", "ttest"};
  if (std::find(kKinds.begin(), kKinds.end(), kind) == kKinds.end())
    throw InvalidConfig("unknown metrics record kind '" + kind + "'");
  const json record = {{"kind", kind},
                       {"timestamp", iso_timestamp()},
                       {"run_id", run_id_},
                       {"schema_version", 1},
                       {"payload", std::move(payload)}};
  std::lock_guard<std::mutex> lock(mutex_);
  out_ << record.dump() << "\n";
  out_.flush();
}

std::vector<ScoreRecord> read_logged_scores(const fs::path& metrics_path) {
  std::vector<ScoreRecord> out;
  std::ifstream in(metrics_path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json record = json::parse(line);
    if (record.at("kind") != "score") continue;
    const json& p = record.at("payload");
    ScoreRecord rec;
    rec.metric = p.at("metric").get<std::string>();
    rec.value = p.at("value").get<double>();
    rec.direction.src = p.at("direction_src").get<std::string>();
    rec.direction.tgt = p.at("direction_tgt").get<std::string>();
    rec.system_id = p.at("system").get<std::string>();
    rec.split = p.at("split").get<std::string>();
    rec.round = p.at("round").get<std::int64_t>();
    rec.seed = std::stoull(p.at("seed").get<std::string>());
    out.push_back(std::move(rec));
  }
  return out;
}

void write_summary_csv(const fs::path& csv_path,
                       const std::vector<ScoreRecord>& records) {
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + csv_path.string() + "'");
  out << "system,direction,metric,split,round,value,seed\n";
  char value_buf[32];
  for (const auto& rec : records) {
    std::snprintf(value_buf, sizeof(value_buf), "%.6f", rec.value);
    out << rec.system_id << ',' << rec.direction.label() << ',' << rec.metric
        << ',' << rec.split << ',' << rec.round << ',' << value_buf << ','
        << rec.seed << "\n";
  }
}

ExperimentRunner::ExperimentRunner(ExperimentConfig cfg, fs::path out_dir)
    : cfg_(std::move(cfg)), dir_(std::move(out_dir)) {
  fs::create_directories(dir_);
  fs::create_directories(dir_ / "stages");
  fs::create_directories(dir_ / "data");
  fs::create_directories(dir_ / "checkpoints");
  const std::string resolved = resolved_config_json(cfg_).dump(2);
  run_id_ = [&] {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(resolved)));
    return std::string(buf);
  }();
  std::ofstream out(dir_ / "config.resolved.json", std::ios::trunc);
  out << resolved << "\n";
}

MetricsLogger& ExperimentRunner::metrics() {
  if (!metrics_) metrics_.emplace(dir_ / "metrics.jsonl", run_id_);
  return *metrics_;
}

const SyntheticWorld& ExperimentRunner::world() {
  if (!world_) world_ = SyntheticWorld::build(cfg_.world);
  return *world_;
}

const Vocabulary& ExperimentRunner::vocab() {
  if (!vocab_) {
    const fs::path path = dir_ / "vocab.json";
    std::ifstream in(path);
    if (!in) throw IoError("missing '" + path.string() + "' (run gen-data first)");
    std::stringstream buf;
    buf << in.rdbuf();
    vocab_ = Vocabulary::from_json(buf.str());
  }
  return *vocab_;
}

const TrainCorpora& ExperimentRunner::corpora() {
  if (!corpora_) {
    TrainCorpora c;
    const Vocabulary& v = vocab();
    for (const auto& lang : world().language_ids()) {
      const fs::path path = dir_ / "data" / ("corpus-" + lang + "-train.txt");
      const MonolingualCorpus corpus =
          load_plaintext(path.string(), lang, Split::kTrain);
      std::vector<TokenSeq> tokenized;
      tokenized.reserve(corpus.sentences.size());
      for (const auto& s : corpus.sentences) tokenized.push_back(v.tokenize(s));
      c[lang] = std::move(tokenized);
    }
    corpora_ = std::move(c);
  }
  return *corpora_;
}

EvalSet ExperimentRunner::eval_set(const Direction& dir, Split split) {
  const fs::path path =
      dir_ / "data" /
      ("eval-" + dir.src + "-" + dir.tgt + "-" + split_name(split) + ".tsv");
  std::ifstream in(path);
  if (!in) throw IoError("missing '" + path.string() + "' (run gen-data first)");
  EvalSet set;
  set.direction = dir;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError("malformed eval pair in '" + path.string() + "'");
    set.pairs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return set;
}

fs::path ExperimentRunner::checkpoint_path(const std::string& member_dir,
                                           const std::string& phase,
                                           std::int64_t step) const {
  return dir_ / "checkpoints" / member_dir /
         ("phase-" + phase + "-step-" + std::to_string(step) + ".ckpt");
}

json ExperimentRunner::state() {
  std::ifstream in(dir_ / "state.json");
  if (!in) return json::object();
  json s;
  in >> s;
  return s;
}

void ExperimentRunner::save_state(const json& s) {
  std::ofstream out(dir_ / "state.json", std::ios::trunc);
  out << s.dump(2) << "\n";
}

void ExperimentRunner::write_marker(const std::string& stage, bool ok,
                                    const std::string& detail) {
  const fs::path path = dir_ / "stages" / (stage + (ok ? ".done" : ".failed"));
  std::ofstream out(path, std::ios::trunc);
  out << run_id_ << "\n";
  if (!detail.empty()) out << detail << "\n";
  if (ok) fs::remove(dir_ / "stages" / (stage + ".failed"));
}

bool ExperimentRunner::stage_done(const std::string& stage) const {
  return fs::exists(dir_ / "stages" / (stage + ".done"));
}

void ExperimentRunner::run_stage(const std::string& stage,
                                 void (ExperimentRunner::*fn)()) {
  if (stage_done(stage)) {
    log_info("stage " + stage + " already done, skipping");
    return;
  }
  log_info("stage " + stage + " starting");
  try {
    (this->*fn)();
  } catch (const std::exception& e) {
    write_marker(stage, false, e.what());
    throw Error("stage " + stage + " failed: " + e.what());
  }
  write_marker(stage, true);
  write_summary_csv(dir_ / "summary.csv", read_logged_scores(dir_ / "metrics.jsonl"));
  log_info("stage " + stage + " done");
}

void ExperimentRunner::run_all() {
  run_stage("gen-data", &ExperimentRunner::gen_data);
  run_stage("base-train", &ExperimentRunner::base_train);
  run_stage("train-ensemble", &ExperimentRunner::ensemble_rounds);
  if (cfg_.baseline_enabled)
    run_stage("baseline", &ExperimentRunner::control_baseline);
  run_stage("evaluate", &ExperimentRunner::final_eval);
  run_stage("select", &ExperimentRunner::select);
}

void ExperimentRunner::gen_data() {
  const SyntheticWorld& w = world();
  std::ofstream world_out(dir_ / "data" / "world.json", std::ios::trunc);
  world_out << resolved_config_json(cfg_)["world"].dump(2) << "\n";

  std::vector<MonolingualCorpus> train;
  for (const auto& lang : w.language_ids()) {
    MonolingualCorpus corpus = w.sample_monolingual(
        lang, cfg_.train_sentences, Split::kTrain, substream(cfg_.seed, "corpus"));
    std::ofstream out(dir_ / "data" / ("corpus-" + lang + "-train.txt"),
                      std::ios::trunc);
    for (const auto& s : corpus.sentences) out << s << "\n";
    train.push_back(std::move(corpus));
  }
  vocab_ = Vocabulary::build(train, w.language_ids());
  std::ofstream vocab_out(dir_ / "vocab.json", std::ios::trunc);
  vocab_out << vocab_->to_json() << "\n";

  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  for (const Direction& dir : {cfg_.primary, reverse}) {
    for (const Split split : {Split::kValid, Split::kTest}) {
      const int n = split == Split::kValid ? cfg_.valid_pairs : cfg_.test_pairs;
      const EvalSet set =
          w.make_eval_set(dir, n, split, substream(cfg_.seed, "corpus"));
      std::ofstream out(dir_ / "data" /
                            ("eval-" + dir.src + "-" + dir.tgt + "-" +
                             std::string(split_name(split)) + ".tsv"),
                        std::ios::trunc);
      for (const auto& [src, ref] : set.pairs) out << src << "\t" << ref << "\n";
    }
  }
}

namespace {

struct MemberOutputs {
  std::vector<PhaseReport> reports;
  CollapseReport collapse;
  std::string final_path;
};

}  // namespace

void ExperimentRunner::base_train() {
  const Vocabulary& v = vocab();
  const TrainCorpora& data = corpora();
  ModelConfig model_cfg = cfg_.model;
  model_cfg.vocab_size = v.size();

  const LrSchedule sched{cfg_.initial_lr, cfg_.halving_steps};
  std::vector<MemberOutputs> outputs(static_cast<std::size_t>(cfg_.members));

  parallel_for(cfg_.members, [&](std::int64_t i) {
    ModelConfig mc = model_cfg;
    mc.init_seed = substream(cfg_.seed, "init", static_cast<std::uint64_t>(i));
    Model model = make_model(mc, v.content_hash());
    const std::string member_dir = "member-" + std::to_string(i);
    fs::create_directories(dir_ / "checkpoints" / member_dir);
    const DirectionSet dirs{cfg_.primary.src, cfg_.primary.tgt,
                            cfg_.auxiliary_languages[static_cast<std::size_t>(i)]};
    CheckpointMeta meta;
    meta.config = mc;
    meta.vocab_hash = v.content_hash();
    meta.seed = cfg_.seed;
    meta.phase = "init";
    meta.step = 0;
    save_checkpoint(model, meta, checkpoint_path(member_dir, "init", 0).string());

    auto& out = outputs[static_cast<std::size_t>(i)];
    const Phase phases[3] = {Phase::kMonolingual, Phase::kMixed, Phase::kPureBt};
    const std::int64_t steps[3] = {cfg_.mono_steps, cfg_.mixed_steps,
                                   cfg_.pure_bt_steps};
    for (int p = 0; p < 3; ++p) {
      PhaseConfig pc;
      pc.phase = phases[p];
      pc.steps = steps[p];
      pc.batch_size = cfg_.batch_size;
      pc.bt_ratio = cfg_.bt_ratio;
      pc.bt_decode = cfg_.train_decode;
      pc.uniform_direction_schedule = cfg_.uniform_direction_schedule;
      PhaseReport report =
          run_phase(model, v, data, dirs, pc, sched,
                    substream(cfg_.seed, "train", static_cast<std::uint64_t>(i),
                              static_cast<std::uint64_t>(p)));
      meta.phase = report.phase;
      meta.step = model.opt.step_count;
      const fs::path ckpt =
          checkpoint_path(member_dir, report.phase, model.opt.step_count);
      save_checkpoint(model, meta, ckpt.string());
      out.final_path = fs::relative(ckpt, dir_).string();
      out.reports.push_back(std::move(report));
    }
    const EnsembleSystem system(Ensemble::of(model), v,
                                "member-" + std::to_string(i));
    out.collapse = collapse_report(
        system, world(), cfg_.primary, cfg_.diagnostics_samples, cfg_.eval_decode,
        substream(cfg_.seed, "diagnostics", static_cast<std::uint64_t>(i)));
  });

  json base_paths = json::array();
  for (int i = 0; i < cfg_.members; ++i) {
    const auto& out = outputs[static_cast<std::size_t>(i)];
    for (const auto& report : out.reports) {
      metrics().log("phase_report",
                    {{"member", i},
                     {"phase", report.phase},
                     {"steps", report.steps},
                     {"batch_size", report.batch_size},
                     {"mean_loss", report.mean_loss},
                     {"step_losses", report.step_losses},
                     {"dropped", report.dropped},
                     {"mono_examples", report.mono_examples},
                     {"bt_examples", report.bt_examples},
                     {"random_pair_examples", report.random_pair_examples},
                     {"optimizer_steps_begin", report.optimizer_steps_begin},
                     {"optimizer_steps_end", report.optimizer_steps_end}});
    }
    metrics().log("collapse_report",
                  {{"system", "member-" + std::to_string(i)},
                   {"direction", cfg_.primary.label()},
                   {"copying_rate", out.collapse.copying_rate},
                   {"constancy_score", out.collapse.constancy_score},
                   {"distinct_output_ratio", out.collapse.distinct_output_ratio},
                   {"target_language_rate", out.collapse.target_language_rate},
                   {"sample_size", out.collapse.sample_size}});
    base_paths.push_back(out.final_path);
  }
  json s = state();
  s["base_checkpoints"] = base_paths;
  save_state(s);
}

Model ExperimentRunner::load_member(int index, const std::string& which) {
  const json s = state();
  const std::string key =
      which == "base" ? "base_checkpoints" : "final_checkpoints";
  if (!s.contains(key))
    throw IoError("experiment state lacks " + key + " (run earlier stages)");
  const auto paths = s.at(key);
  if (index < 0 || index >= static_cast<int>(paths.size()))
    throw ConfigError("no member " + std::to_string(index));
  auto [model, meta] =
      load_checkpoint((dir_ / paths[static_cast<std::size_t>(index)]
                                  .get<std::string>()).string());
  if (model.vocab_hash != vocab().content_hash())
    throw VocabHashMismatch("checkpoint was built against a different vocabulary");
  return std::move(model);
}

Model ExperimentRunner::load_baseline() {
  const json s = state();
  if (!s.contains("baseline_checkpoint"))
    throw IoError("experiment state lacks baseline_checkpoint");
  auto [model, meta] = load_checkpoint(
      (dir_ / s.at("baseline_checkpoint").get<std::string>()).string());
  if (model.vocab_hash != vocab().content_hash())
    throw VocabHashMismatch("checkpoint was built against a different vocabulary");
  return std::move(model);
}

std::vector<double> ExperimentRunner::log_pool_scores(
    const ModelPool& pool, std::int64_t round, std::uint64_t eval_root,
    const std::string& baseline_alias) {
  const Vocabulary& v = vocab();
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  const EvalSet valid_fwd = eval_set(cfg_.primary, Split::kValid);
  const EvalSet valid_rev = eval_set(reverse, Split::kValid);

  std::vector<double> means;
  auto score_system = [&](const TranslationSystem& system,
                          const std::string& logged_id) {
    double total = 0.0;
    for (const EvalSet* set : {&valid_fwd, &valid_rev}) {
      DecodeConfig cfg = cfg_.eval_decode;
      cfg.rng_seed = eval_stream_seed(eval_root, system.id(), "valid", round,
                                      set->direction.label());
      EvalContext ctx{"valid", round, cfg.rng_seed};
      const auto records =
          evaluate_system(system, *set, cfg, {"chrf"}, ctx, cfg_.chrf);
      for (const auto& rec : records) {
        metrics().log("score", {{"metric", rec.metric},
                                {"value", rec.value},
                                {"direction_src", rec.direction.src},
                                {"direction_tgt", rec.direction.tgt},
                                {"system", logged_id},
                                {"split", rec.split},
                                {"round", rec.round},
                                {"seed", std::to_string(rec.seed)}});
        if (rec.metric == "chrf") total += rec.value;
      }
    }
    return total / 2.0;
  };

  for (int i = 0; i < pool.size(); ++i) {
    const std::string id = "member-" + std::to_string(i);
    const EnsembleSystem system(Ensemble::of(pool.members[static_cast<std::size_t>(i)].model),
                                v, id);
    means.push_back(score_system(system, baseline_alias.empty() ? id : baseline_alias));
  }
  if (baseline_alias.empty() && pool.size() > 1) {
    Ensemble ens;
    for (const auto& m : pool.members) ens.members.push_back(&m.model);
    const EnsembleSystem system(ens, v, "ensemble");
    means.push_back(score_system(system, "ensemble"));
  }
  return means;
}

void ExperimentRunner::ensemble_rounds() {
  const Vocabulary& v = vocab();
  const TrainCorpora& data = corpora();
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};

  ModelPool pool;
  for (int i = 0; i < cfg_.members; ++i) {
    PoolMember member;
    member.model = load_member(i, "base");
    member.directions = {cfg_.primary.src, cfg_.primary.tgt,
                         cfg_.auxiliary_languages[static_cast<std::size_t>(i)]};
    pool.members.push_back(std::move(member));
  }

  const std::uint64_t eval_root = substream(cfg_.seed, "eval");
  // Round 0: pre-ensemble validation (selection point for the control arm).
  const std::vector<double> round0 = log_pool_scores(pool, 0, eval_root);
  std::size_t best_pre = 0;
  for (std::size_t i = 1; i < pool.members.size(); ++i)
    if (round0[i] > round0[best_pre]) best_pre = i;

  Algorithm1Config alg;
  alg.rounds = cfg_.rounds;
  alg.steps_per_round = cfg_.round_steps;
  alg.batch_size = cfg_.round_batch_size;
  alg.sentences_per_direction = cfg_.sentences_per_direction;
  alg.generation_decode = cfg_.train_decode;
  alg.eval_decode = cfg_.eval_decode;
  // Rounds continue at the paper's post-halving rate: initial/4, constant.
  alg.continuation_lr = LrSchedule{cfg_.initial_lr / 4.0, {}};
  alg.eval_seed_root = eval_root;

  const EvalSet valid_fwd = eval_set(cfg_.primary, Split::kValid);
  const EvalSet valid_rev = eval_set(reverse, Split::kValid);
  const auto reports = run_algorithm1(pool, v, data, cfg_.primary, valid_fwd,
                                      valid_rev, alg,
                                      substream(cfg_.seed, "alg1"));
  for (const auto& report : reports) {
    metrics().log("round_report",
                  {{"arm", "ensemble"},
                   {"round", report.round},
                   {"pseudo_pairs", report.pseudo_pairs},
                   {"member_val_chrf", report.member_val_chrf},
                   {"member_mean_loss", report.member_mean_loss},
                   {"member_optimizer_steps", report.member_optimizer_steps},
                   {"ensemble_val_chrf", report.ensemble_val_chrf}});
  }

  json final_paths = json::array();
  for (int i = 0; i < cfg_.members; ++i) {
    Model& model = pool.members[static_cast<std::size_t>(i)].model;
    const std::string member_dir = "member-" + std::to_string(i);
    CheckpointMeta meta;
    meta.config = model.config;
    meta.vocab_hash = model.vocab_hash;
    meta.seed = cfg_.seed;
    meta.phase = "round-" + std::to_string(cfg_.rounds);
    meta.step = model.opt.step_count;
    const fs::path ckpt =
        checkpoint_path(member_dir, meta.phase, model.opt.step_count);
    save_checkpoint(model, meta, ckpt.string());
    final_paths.push_back(fs::relative(ckpt, dir_).string());
  }
  json s = state();
  s["final_checkpoints"] = final_paths;
  s["best_pre_ensemble"] = best_pre;
  s["round0_member_valid_chrf"] = round0;
  save_state(s);
}

void ExperimentRunner::control_baseline() {
  const Vocabulary& v = vocab();
  const TrainCorpora& data = corpora();
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  const json s0 = state();
  if (!s0.contains("best_pre_ensemble"))
    throw IoError("run train-ensemble before baseline");
  const int best_pre = s0.at("best_pre_ensemble").get<int>();

  Model model = load_member(best_pre, "base");
  Algorithm1Config alg;
  alg.rounds = cfg_.rounds;
  alg.steps_per_round = cfg_.round_steps;
  alg.batch_size = cfg_.round_batch_size;
  alg.sentences_per_direction = cfg_.sentences_per_direction;
  alg.generation_decode = cfg_.train_decode;
  alg.eval_decode = cfg_.eval_decode;
  alg.continuation_lr = LrSchedule{cfg_.initial_lr / 4.0, {}};
  alg.eval_seed_root = substream(cfg_.seed, "eval-baseline");

  const EvalSet valid_fwd = eval_set(cfg_.primary, Split::kValid);
  const EvalSet valid_rev = eval_set(reverse, Split::kValid);
  const auto reports =
      run_matched_single_baseline(model, v, data, cfg_.primary, valid_fwd,
                                  valid_rev, alg, substream(cfg_.seed, "baseline"));
  for (const auto& report : reports) {
    metrics().log("round_report",
                  {{"arm", "baseline"},
                   {"round", report.round},
                   {"pseudo_pairs", report.pseudo_pairs},
                   {"member_val_chrf", report.member_val_chrf},
                   {"member_mean_loss", report.member_mean_loss},
                   {"member_optimizer_steps", report.member_optimizer_steps},
                   {"ensemble_val_chrf", report.ensemble_val_chrf}});
  }

  fs::create_directories(dir_ / "checkpoints" / "baseline");
  CheckpointMeta meta;
  meta.config = model.config;
  meta.vocab_hash = model.vocab_hash;
  meta.seed = cfg_.seed;
  meta.phase = "control-round-" + std::to_string(cfg_.rounds);
  meta.step = model.opt.step_count;
  const fs::path ckpt =
      checkpoint_path("baseline", meta.phase, model.opt.step_count);
  save_checkpoint(model, meta, ckpt.string());
  json s = state();
  s["baseline_checkpoint"] = fs::relative(ckpt, dir_).string();
  s["baseline_source_member"] = best_pre;
  save_state(s);
}

void ExperimentRunner::final_eval() {
  const Vocabulary& v = vocab();
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  const std::uint64_t eval_root = substream(cfg_.seed, "eval");

  ModelPool pool;
  for (int i = 0; i < cfg_.members; ++i) {
    PoolMember member;
    member.model = load_member(i, "final");
    pool.members.push_back(std::move(member));
  }

  auto score_on_test = [&](const TranslationSystem& system,
                           const std::string& logged_id, std::uint64_t root) {
    for (const Direction& dir : {cfg_.primary, reverse}) {
      const EvalSet set = eval_set(dir, Split::kTest);
      DecodeConfig cfg = cfg_.eval_decode;
      cfg.rng_seed =
          eval_stream_seed(root, system.id(), "test", cfg_.rounds, dir.label());
      EvalContext ctx{"test", cfg_.rounds, cfg.rng_seed};
      const auto records =
          evaluate_system(system, set, cfg, cfg_.metrics, ctx, cfg_.chrf);
      for (const auto& rec : records)
        metrics().log("score", {{"metric", rec.metric},
                                {"value", rec.value},
                                {"direction_src", rec.direction.src},
                                {"direction_tgt", rec.direction.tgt},
                                {"system", logged_id},
                                {"split", rec.split},
                                {"round", rec.round},
                                {"seed", std::to_string(rec.seed)}});
    }
  };

  for (int i = 0; i < cfg_.members; ++i) {
    const std::string id = "member-" + std::to_string(i);
    const EnsembleSystem system(
        Ensemble::of(pool.members[static_cast<std::size_t>(i)].model), v, id);
    score_on_test(system, id, eval_root);
  }
  if (cfg_.members > 1) {
    Ensemble ens;
    for (const auto& m : pool.members) ens.members.push_back(&m.model);
    const EnsembleSystem system(ens, v, "ensemble");
    score_on_test(system, "ensemble", eval_root);
  }
  if (cfg_.baseline_enabled && state().contains("baseline_checkpoint")) {
    Model baseline = load_baseline();
    const EnsembleSystem system(Ensemble::of(baseline), v, "member-0");
    score_on_test(system, "baseline", substream(cfg_.seed, "eval-baseline"));
  }

  // Member-paired significance of the post-vs-pre validation change.
  const json s = state();
  if (cfg_.members >= 2 && s.contains("round0_member_valid_chrf")) {
    const auto round0 =
        s.at("round0_member_valid_chrf").get<std::vector<double>>();
    // Reuse the logged round-report means instead of re-decoding.
    std::ifstream in(dir_ / "metrics.jsonl");
    std::string line;
    std::vector<double> last_means;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json rec = json::parse(line);
      if (rec.at("kind") == "round_report" &&
          rec.at("payload").value("arm", "") == "ensemble")
        last_means =
            rec.at("payload").at("member_val_chrf").get<std::vector<double>>();
    }
    if (last_means.size() == round0.size()) {
      std::vector<double> diffs;
      for (std::size_t i = 0; i < round0.size(); ++i)
        diffs.push_back(last_means[i] - round0[i]);
      try {
        const TTestResult t = paired_t_test(diffs);
        metrics().log("ttest", {{"what", "member_valid_chrf_post_minus_pre"},
                                {"t", t.t},
                                {"p", t.p},
                                {"df", t.df},
                                {"mean_diff", t.mean_diff},
                                {"p_clamped", t.p_clamped}});
      } catch (const Error& e) {
        log_info(std::string("skipping t-test: ") + e.what());
      }
    }
  }
}

void ExperimentRunner::select() {
  const Vocabulary& v = vocab();
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  ModelPool pool;
  for (int i = 0; i < cfg_.members; ++i) {
    PoolMember member;
    member.model = load_member(i, "final");
    pool.members.push_back(std::move(member));
  }
  const EvalSet valid_fwd = eval_set(cfg_.primary, Split::kValid);
  const EvalSet valid_rev = eval_set(reverse, Split::kValid);
  const std::uint64_t eval_root = substream(cfg_.seed, "eval");
  const std::vector<double> scores =
      pool_validation_chrf(pool, v, valid_fwd, valid_rev, cfg_.eval_decode,
                           eval_root, cfg_.rounds);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;

  json s = state();
  s["best_post_ensemble"] = best;
  s["final_member_valid_chrf"] = scores;
  save_state(s);
  json selection = {{"best_member", best},
                    {"validation_chrf", scores},
                    {"checkpoint", s.at("final_checkpoints")[best]}};
  std::ofstream out(dir_ / "best-model.json", std::ios::trunc);
  out << selection.dump(2) << "\n";
  log_info("selected member " + std::to_string(best) + " for deployment");
}

ExperimentRunner::LoadedSystem ExperimentRunner::load_system(
    const std::string& system_id, const std::string& which) {
  LoadedSystem loaded;
  loaded.eval_root = substream(cfg_.seed, "eval");
  loaded.stream_id = system_id;
  const auto member_kind = [&]() -> std::string {
    if (which != "auto") return which;
    return state().contains("final_checkpoints") ? "final" : "base";
  };
  if (system_id == "stub-identity") {
    loaded.system = std::make_unique<IdentityStubSystem>();
  } else if (system_id == "stub-constant") {
    const auto sample = world().sample_monolingual(
        cfg_.primary.tgt, 1, Split::kTrain, substream(cfg_.seed, "corpus"));
    loaded.system = std::make_unique<ConstantStubSystem>(sample.sentences.front());
  } else if (system_id == "stub-oracle") {
    loaded.system = std::make_unique<OracleStubSystem>(world());
  } else if (system_id == "ensemble") {
    for (int i = 0; i < cfg_.members; ++i)
      loaded.models.push_back(load_member(i, member_kind()));
    Ensemble ens;
    for (const auto& m : loaded.models) ens.members.push_back(&m);
    loaded.system = std::make_unique<EnsembleSystem>(ens, vocab(), "ensemble");
  } else if (system_id == "baseline") {
    loaded.models.push_back(load_baseline());
    loaded.system = std::make_unique<EnsembleSystem>(
        Ensemble::of(loaded.models.front()), vocab(), "member-0");
    loaded.eval_root = substream(cfg_.seed, "eval-baseline");
    loaded.stream_id = "member-0";
  } else if (system_id.rfind("member-", 0) == 0) {
    const int idx = std::stoi(system_id.substr(7));
    loaded.models.push_back(load_member(idx, member_kind()));
    loaded.system = std::make_unique<EnsembleSystem>(
        Ensemble::of(loaded.models.front()), vocab(), system_id);
  } else {
    throw ConfigError("unknown system '" + system_id + "'");
  }
  return loaded;
}

std::vector<ScoreRecord> ExperimentRunner::evaluate_stage(
    const std::string& system_id, const std::string& split, std::int64_t round) {
  const Direction reverse{cfg_.primary.tgt, cfg_.primary.src};
  const Split sp = split_from_name(split);
  LoadedSystem loaded =
      load_system(system_id, round == 0 && system_id != "baseline" &&
                                  system_id != "ensemble"
                              ? "base"
                              : "auto");
  std::vector<ScoreRecord> records;
  for (const Direction& dir : {cfg_.primary, reverse}) {
    const EvalSet set = eval_set(dir, sp);
    DecodeConfig cfg = cfg_.eval_decode;
    cfg.rng_seed = eval_stream_seed(loaded.eval_root, loaded.stream_id, split,
                                    round, dir.label());
    EvalContext ctx{split, round, cfg.rng_seed};
    const auto recs =
        evaluate_system(*loaded.system, set, cfg, cfg_.metrics, ctx, cfg_.chrf);
    for (auto rec : recs) {
      rec.system_id = system_id;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

CollapseReport ExperimentRunner::diagnose(const std::string& system_id,
                                          const Direction& dir, int n) {
  const SyntheticWorld& w = world();
  LoadedSystem loaded = load_system(system_id);
  const CollapseReport report =
      collapse_report(*loaded.system, w, dir, n, cfg_.eval_decode,
                      substream(cfg_.seed, "diagnostics/cli"));
  metrics().log("collapse_report",
                {{"system", system_id},
                 {"direction", dir.label()},
                 {"copying_rate", report.copying_rate},
                 {"constancy_score", report.constancy_score},
                 {"distinct_output_ratio", report.distinct_output_ratio},
                 {"target_language_rate", report.target_language_rate},
                 {"sample_size", report.sample_size}});
  return report;
}

std::filesystem::path run_experiment(const ExperimentConfig& cfg) {
  ExperimentRunner runner(cfg, cfg.out_dir);
  runner.run_all();
  return runner.dir();
}

}  // namespace btel
