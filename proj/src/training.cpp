// SPDX-License-Identifier: Apache-2.0
#include "btel/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "btel/parallel.hpp"

namespace btel {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kMonolingual: return "monolingual";
    case Phase::kMixed: return "mixed";
    case Phase::kPureBt: return "pure_bt";
  }
  return "mixed";
}

void PhaseConfig::validate() const {
  if (steps < 0) throw InvalidConfig("phase steps must be >= 0");
  if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
  if (bt_ratio < 0.0 || bt_ratio > 1.0)
    throw InvalidConfig("bt_ratio must be in [0, 1]");
}

TrainingExample make_mono_example(const Vocabulary& vocab,
                                  const LanguageId& lang,
                                  const TokenSeq& sentence) {
  TrainingExample ex;
  ex.provenance = Provenance::kMono;
  ex.tokens.reserve(sentence.size() + 3);
  ex.tokens.push_back(Vocabulary::kBos);
  ex.tokens.push_back(vocab.tag(lang));
  ex.tokens.insert(ex.tokens.end(), sentence.begin(), sentence.end());
  ex.tokens.push_back(Vocabulary::kEos);
  ex.mask.assign(ex.tokens.size(), 1);
  ex.mask[0] = 0;
  ex.mask[1] = 0;
  return ex;
}

TrainingExample make_pair_example(const Vocabulary& vocab, const Direction& dir,
                                  const TokenSeq& src_span,
                                  const TokenSeq& tgt_span,
                                  Provenance provenance) {
  TrainingExample ex;
  ex.provenance = provenance;
  ex.tokens.reserve(src_span.size() + tgt_span.size() + 4);
  ex.tokens.push_back(Vocabulary::kBos);
  ex.tokens.push_back(vocab.tag(dir.src));
  ex.tokens.insert(ex.tokens.end(), src_span.begin(), src_span.end());
  ex.tokens.push_back(vocab.tag(dir.tgt));
  ex.tokens.insert(ex.tokens.end(), tgt_span.begin(), tgt_span.end());
  ex.tokens.push_back(Vocabulary::kEos);
  ex.mask.assign(ex.tokens.size(), 0);
  for (std::size_t i = 3 + src_span.size(); i < ex.tokens.size(); ++i)
    ex.mask[i] = 1;
  return ex;
}

std::optional<TrainingExample> make_bt_example_with_source(
    const Vocabulary& vocab, const Direction& dir, const TokenSeq& x_hat,
    const TokenSeq& y, int max_context) {
  TrainingExample ex = make_pair_example(vocab, dir, x_hat, y, Provenance::kBt);
  if (static_cast<int>(ex.tokens.size()) - 1 > max_context) return std::nullopt;
  return ex;
}

std::optional<TrainingExample> make_bt_example(const Ensemble& generator,
                                               const PromptTemplate& tpl,
                                               const Direction& dir,
                                               const TokenSeq& y,
                                               const DecodeConfig& decode_cfg) {
  // Pseudo-source for X->Y training comes from decoding y through Y->X.
  const Direction reverse{dir.tgt, dir.src};
  TokenSeq x_hat;
  try {
    x_hat = translate_tokens(generator, tpl, reverse, y, decode_cfg);
  } catch (const ContextOverflow&) {
    return std::nullopt;
  }
  return make_bt_example_with_source(tpl.vocab(), dir, x_hat, y,
                                     generator.config().max_context);
}

TrainingExample make_random_pair_example(const Vocabulary& vocab,
                                         const TokenSeq& x, const TokenSeq& y,
                                         const Direction& dir) {
  return make_pair_example(vocab, dir, x, y, Provenance::kRandomPair);
}

TrainingExample make_pseudo_example(const Vocabulary& vocab,
                                    const PseudoPair& pair) {
  return make_pair_example(vocab, pair.direction, pair.source,
                           pair.pseudo_target, Provenance::kPseudoParallel);
}

ParsedPairExample parse_pair_example(const Vocabulary& vocab,
                                     const TrainingExample& example) {
  const TokenSeq& t = example.tokens;
  if (t.size() < 4 || t.front() != Vocabulary::kBos ||
      t.back() != Vocabulary::kEos)
    throw ShapeMismatch("pair example must be BOS ... EOS");
  const int specials = vocab.num_specials();
  auto is_tag = [&](TokenId id) { return id >= 4 && id < specials; };
  if (!is_tag(t[1])) throw ShapeMismatch("missing source tag");
  ParsedPairExample parsed;
  parsed.src_tag = t[1];
  std::size_t i = 2;
  while (i + 1 < t.size() && !is_tag(t[i])) {
    parsed.src_span.push_back(t[i]);
    ++i;
  }
  if (i + 1 >= t.size() || !is_tag(t[i]))
    throw ShapeMismatch("missing target tag");
  parsed.tgt_tag = t[i];
  ++i;
  while (i + 1 < t.size()) {
    if (is_tag(t[i])) throw ShapeMismatch("unexpected tag inside target span");
    parsed.tgt_span.push_back(t[i]);
    ++i;
  }
  // Mask must cover exactly tgt_span + EOS.
  if (example.mask.size() != t.size())
    throw ShapeMismatch("mask length mismatch");
  const std::size_t tgt_begin = 3 + parsed.src_span.size();
  for (std::size_t k = 0; k < t.size(); ++k) {
    const bool expected = k >= tgt_begin;
    if (static_cast<bool>(example.mask[k]) != expected)
      throw ShapeMismatch("mask does not match the target span");
  }
  return parsed;
}

namespace {

struct TrainScratch {
  Activations<float> acts;
  ParamBuffer<double> grads;
  std::vector<double> dlogits;
};

double train_batch(Model& model, const std::vector<TrainingExample>& batch,
                   const LrSchedule& sched, TrainScratch& scratch) {
  scratch.grads.data.assign(param_count(model.config), 0.0);
  double loss_sum = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const TrainingExample& ex : batch) {
    if (ex.tokens.size() < 2) throw ShapeMismatch("training example too short");
    TokenSeq inputs(ex.tokens.begin(), ex.tokens.end() - 1);
    TokenSeq targets(ex.tokens.begin() + 1, ex.tokens.end());
    LossMask mask(ex.mask.begin() + 1, ex.mask.end());
    forward(model.config, model.params, inputs, scratch.acts);
    loss_sum += masked_nll(model.config, scratch.acts.logits, targets, mask,
                           &scratch.dlogits, inv_b);
    backward(model.config, model.params, scratch.acts, inputs, scratch.dlogits,
             scratch.grads);
  }
  adam_step(model.params, model.opt, scratch.grads, sched);
  return loss_sum * inv_b;
}

}  // namespace

PhaseReport run_phase(Model& model, const Vocabulary& vocab,
                      const TrainCorpora& corpora,
                      const DirectionSet& directions, const PhaseConfig& cfg,
                      const LrSchedule& sched, std::uint64_t seed) {
  cfg.validate();
  sched.validate();
  for (const auto& lang : directions.languages())
    if (corpora.find(lang) == corpora.end() || corpora.at(lang).empty())
      throw InvalidConfig("no training corpus for language '" + lang + "'");

  PhaseReport report;
  report.phase = phase_name(cfg.phase);
  report.steps = cfg.steps;
  report.batch_size = cfg.batch_size;
  report.optimizer_steps_begin = model.opt.step_count;
  report.optimizer_steps_end = model.opt.step_count;
  if (cfg.steps == 0) return report;

  const PromptTemplate tpl(vocab);
  const auto langs = directions.languages();
  const auto dirs = directions.directions();
  const double bt_ratio = cfg.phase == Phase::kPureBt ? 1.0 : cfg.bt_ratio;

  Rng rng_sentences(substream(seed, "phase/sentences"));
  Rng rng_coin(substream(seed, "phase/coin"));
  Rng rng_dir(substream(seed, "phase/direction"));
  TrainScratch scratch;
  std::vector<TrainingExample> batch;
  std::int64_t counter = 0;

  auto draw = [&](const LanguageId& lang) -> const TokenSeq& {
    const auto& sentences = corpora.at(lang);
    return sentences[rng_sentences.uniform_index(sentences.size())];
  };

  double loss_total = 0.0;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < cfg.batch_size) {
      if (cfg.phase == Phase::kMonolingual) {
        const LanguageId& lang = langs[static_cast<std::size_t>(counter % 3)];
        batch.push_back(make_mono_example(vocab, lang, draw(lang)));
        ++report.mono_examples;
      } else {
        const Direction& dir =
            cfg.uniform_direction_schedule
                ? dirs[rng_dir.uniform_index(6)]
                : dirs[static_cast<std::size_t>(counter % 6)];
        ++report.direction_examples[dir.label()];
        const bool use_bt = bt_ratio >= 1.0 || rng_coin.uniform() < bt_ratio;
        if (use_bt) {
          DecodeConfig gen_cfg = cfg.bt_decode;
          bool built = false;
          for (int attempt = 0; attempt < 20 && !built; ++attempt) {
            gen_cfg.rng_seed =
                substream(seed, "phase/decode",
                          static_cast<std::uint64_t>(counter),
                          static_cast<std::uint64_t>(attempt));
            auto ex = make_bt_example(Ensemble::of(model), tpl, dir,
                                      draw(dir.tgt), gen_cfg);
            if (ex.has_value()) {
              batch.push_back(std::move(*ex));
              ++report.bt_examples;
              built = true;
            } else {
              ++report.dropped;
            }
          }
          if (!built) {
            batch.push_back(make_random_pair_example(vocab, draw(dir.src),
                                                     draw(dir.tgt), dir));
            ++report.random_pair_examples;
          }
        } else {
          batch.push_back(make_random_pair_example(vocab, draw(dir.src),
                                                   draw(dir.tgt), dir));
          ++report.random_pair_examples;
        }
      }
      ++counter;
    }
    const double loss = train_batch(model, batch, sched, scratch);
    report.step_losses.push_back(loss);
    loss_total += loss;
  }
  report.mean_loss = loss_total / static_cast<double>(cfg.steps);
  report.optimizer_steps_end = model.opt.step_count;
  return report;
}

PseudoParallelSet generate_pseudo_parallel(const Ensemble& ensemble,
                                           const Vocabulary& vocab,
                                           const TrainCorpora& corpora,
                                           const Direction& primary,
                                           int n_per_direction,
                                           const DecodeConfig& decode_cfg,
                                           std::int64_t round_k,
                                           std::uint64_t seed) {
  ensemble.validate();
  if (n_per_direction < 0)
    throw InvalidConfig("n_per_direction must be >= 0");
  PseudoParallelSet set;
  if (n_per_direction == 0) return set;
  const PromptTemplate tpl(vocab);
  const Direction dirs[2] = {primary, {primary.tgt, primary.src}};
  for (int d = 0; d < 2; ++d) {
    const Direction& dir = dirs[d];
    const auto it = corpora.find(dir.src);
    if (it == corpora.end() || it->second.empty())
      throw InvalidConfig("no training corpus for language '" + dir.src + "'");
    const auto& sentences = it->second;
    Rng rng(substream(seed, "pseudo/sources",
                      static_cast<std::uint64_t>(round_k),
                      static_cast<std::uint64_t>(d)));
    std::vector<PseudoPair> pairs(static_cast<std::size_t>(n_per_direction));
    for (int i = 0; i < n_per_direction; ++i) {
      pairs[static_cast<std::size_t>(i)].direction = dir;
      pairs[static_cast<std::size_t>(i)].round = round_k;
      pairs[static_cast<std::size_t>(i)].source =
          sentences[rng.uniform_index(sentences.size())];
    }
    const std::uint64_t decode_base =
        substream(seed, "pseudo/decode", static_cast<std::uint64_t>(round_k),
                  static_cast<std::uint64_t>(d));
    parallel_for(n_per_direction, [&](std::int64_t i) {
      DecodeConfig cfg = decode_cfg;
      cfg.rng_seed =
          substream(decode_base, "sentence", static_cast<std::uint64_t>(i));
      pairs[static_cast<std::size_t>(i)].pseudo_target = translate_tokens(
          ensemble, tpl, dir, pairs[static_cast<std::size_t>(i)].source, cfg);
    });
    set.pairs.insert(set.pairs.end(), std::make_move_iterator(pairs.begin()),
                     std::make_move_iterator(pairs.end()));
  }
  return set;
}

PhaseReport train_on_pseudo(Model& model, const Vocabulary& vocab,
                            const PseudoParallelSet& set, std::int64_t steps,
                            int batch_size, const LrSchedule& sched,
                            std::uint64_t seed) {
  if (set.pairs.empty()) throw EmptyDataset("pseudo-parallel set is empty");
  if (steps < 0) throw InvalidConfig("steps must be >= 0");
  if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
  sched.validate();

  PhaseReport report;
  report.phase = "pseudo";
  report.steps = steps;
  report.batch_size = batch_size;
  report.optimizer_steps_begin = model.opt.step_count;
  report.optimizer_steps_end = model.opt.step_count;
  if (steps == 0) return report;

  std::vector<std::size_t> order(set.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces an initial shuffle
  std::uint64_t epoch = 0;
  TrainScratch scratch;
  std::vector<TrainingExample> batch;
  double loss_total = 0.0;
  for (std::int64_t step = 0; step < steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < batch_size) {
      if (cursor >= order.size()) {
        Rng rng(substream(seed, "shuffle", epoch++));
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[rng.uniform_index(i)]);
        cursor = 0;
      }
      const TrainingExample ex =
          make_pseudo_example(vocab, set.pairs[order[cursor++]]);
      if (static_cast<int>(ex.tokens.size()) - 1 > model.config.max_context) {
        ++report.dropped;
        continue;
      }
      batch.push_back(std::move(ex));
      ++report.pseudo_examples;
    }
    const double loss = train_batch(model, batch, sched, scratch);
    report.step_losses.push_back(loss);
    loss_total += loss;
  }
  report.mean_loss = loss_total / static_cast<double>(steps);
  report.optimizer_steps_end = model.opt.step_count;
  return report;
}

std::uint64_t eval_stream_seed(std::uint64_t root, const std::string& system_id,
                               const std::string& split, std::int64_t round,
                               const std::string& direction_label) {
  return substream(substream(root, "eval"),
                   system_id + "/" + split + "/" + direction_label,
                   static_cast<std::uint64_t>(round + 1));
}

namespace {

double system_mean_chrf(const TranslationSystem& system,
                        const EvalSet& fwd, const EvalSet& rev,
                        const DecodeConfig& eval_decode,
                        std::uint64_t eval_seed_root, std::int64_t round) {
  double total = 0.0;
  for (const EvalSet* set : {&fwd, &rev}) {
    DecodeConfig cfg = eval_decode;
    cfg.rng_seed = eval_stream_seed(eval_seed_root, system.id(), "valid", round,
                                    set->direction.label());
    EvalContext ctx;
    ctx.split = "valid";
    ctx.round = round;
    ctx.seed = cfg.rng_seed;
    const auto records = evaluate_system(system, *set, cfg, {"chrf"}, ctx);
    total += records.front().value;
  }
  return total / 2.0;
}

Ensemble pool_ensemble(const ModelPool& pool) {
  Ensemble ens;
  for (const auto& member : pool.members) ens.members.push_back(&member.model);
  return ens;
}

}  // namespace

std::vector<double> pool_validation_chrf(const ModelPool& pool,
                                         const Vocabulary& vocab,
                                         const EvalSet& valid_fwd,
                                         const EvalSet& valid_rev,
                                         const DecodeConfig& eval_decode,
                                         std::uint64_t eval_seed_root,
                                         std::int64_t round) {
  if (pool.members.empty()) throw EmptyEnsemble("empty model pool");
  std::vector<double> scores(pool.members.size(), 0.0);
  for (std::size_t i = 0; i < pool.members.size(); ++i) {
    const EnsembleSystem system(Ensemble::of(pool.members[i].model), vocab,
                                "member-" + std::to_string(i));
    scores[i] = system_mean_chrf(system, valid_fwd, valid_rev, eval_decode,
                                 eval_seed_root, round);
  }
  return scores;
}

double ensemble_validation_chrf(const ModelPool& pool, const Vocabulary& vocab,
                                const EvalSet& valid_fwd,
                                const EvalSet& valid_rev,
                                const DecodeConfig& eval_decode,
                                std::uint64_t eval_seed_root,
                                std::int64_t round) {
  const EnsembleSystem system(pool_ensemble(pool), vocab, "ensemble");
  return system_mean_chrf(system, valid_fwd, valid_rev, eval_decode,
                          eval_seed_root, round);
}

std::vector<RoundReport> run_algorithm1(ModelPool& pool,
                                        const Vocabulary& vocab,
                                        const TrainCorpora& corpora,
                                        const Direction& primary,
                                        const EvalSet& valid_fwd,
                                        const EvalSet& valid_rev,
                                        const Algorithm1Config& cfg,
                                        std::uint64_t seed) {
  if (pool.members.empty()) throw EmptyEnsemble("empty model pool");
  std::vector<RoundReport> reports;
  for (int r = 1; r <= cfg.rounds; ++r) {
    const PseudoParallelSet pseudo = generate_pseudo_parallel(
        pool_ensemble(pool), vocab, corpora, primary,
        cfg.sentences_per_direction, cfg.generation_decode, r,
        substream(seed, "alg1/generate", static_cast<std::uint64_t>(r)));

    // Generation is complete before any member trains on the shared set.
    RoundReport report;
    report.round = r;
    report.pseudo_pairs = static_cast<std::int64_t>(pseudo.pairs.size());
    report.member_mean_loss.assign(pool.members.size(), 0.0);
    report.member_optimizer_steps.assign(pool.members.size(), 0);
    parallel_for(static_cast<std::int64_t>(pool.members.size()),
                 [&](std::int64_t i) {
                   const PhaseReport rep = train_on_pseudo(
                       pool.members[static_cast<std::size_t>(i)].model, vocab,
                       pseudo, cfg.steps_per_round, cfg.batch_size,
                       cfg.continuation_lr,
                       substream(seed, "alg1/train",
                                 static_cast<std::uint64_t>(r),
                                 static_cast<std::uint64_t>(i)));
                   report.member_mean_loss[static_cast<std::size_t>(i)] =
                       rep.mean_loss;
                   report.member_optimizer_steps[static_cast<std::size_t>(i)] =
                       rep.optimizer_steps_end;
                 });
    report.member_val_chrf =
        pool_validation_chrf(pool, vocab, valid_fwd, valid_rev, cfg.eval_decode,
                             cfg.eval_seed_root, r);
    for (std::size_t i = 0; i < pool.members.size(); ++i)
      pool.members[i].val_chrf_history.push_back(report.member_val_chrf[i]);
    report.ensemble_val_chrf =
        ensemble_validation_chrf(pool, vocab, valid_fwd, valid_rev,
                                 cfg.eval_decode, cfg.eval_seed_root, r);
    reports.push_back(std::move(report));
  }
  return reports;
}

std::size_t select_best_model(const ModelPool& pool, const Vocabulary& vocab,
                              const EvalSet& valid_fwd, const EvalSet& valid_rev,
                              const DecodeConfig& eval_decode,
                              std::uint64_t eval_seed_root,
                              std::int64_t round) {
  const std::vector<double> scores = pool_validation_chrf(
      pool, vocab, valid_fwd, valid_rev, eval_decode, eval_seed_root, round);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::size_t select_best_system(const std::vector<const TranslationSystem*>& systems,
                               const EvalSet& valid_fwd, const EvalSet& valid_rev,
                               const DecodeConfig& eval_decode,
                               std::uint64_t eval_seed_root, std::int64_t round) {
  if (systems.empty()) throw EmptyEnsemble("no systems to select from");
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const double score = system_mean_chrf(*systems[i], valid_fwd, valid_rev,
                                          eval_decode, eval_seed_root, round);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

std::vector<RoundReport> run_matched_single_baseline(Model& model,
                                                     const Vocabulary& vocab,
                                                     const TrainCorpora& corpora,
                                                     const Direction& primary,
                                                     const EvalSet& valid_fwd,
                                                     const EvalSet& valid_rev,
                                                     const Algorithm1Config& cfg,
                                                     std::uint64_t seed) {
  ModelPool pool;
  pool.members.push_back(PoolMember{std::move(model), {}, {}});
  auto reports =
      run_algorithm1(pool, vocab, corpora, primary, valid_fwd, valid_rev, cfg, seed);
  model = std::move(pool.members.front().model);
  return reports;
}

}  // namespace btel
