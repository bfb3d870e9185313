// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "btel/corpus.hpp"
#include "btel/decoding.hpp"
#include "btel/eval.hpp"
#include "btel/model.hpp"

namespace btel {

// Primary pair (A, B) plus one auxiliary language per model; training
// round-robins over all six directed directions.
struct DirectionSet {
  LanguageId a, b, aux;

  std::array<Direction, 6> directions() const {
    return {Direction{a, b}, Direction{b, a}, Direction{b, aux},
            Direction{aux, b}, Direction{aux, a}, Direction{a, aux}};
  }
  std::array<LanguageId, 3> languages() const { return {a, b, aux}; }
};

enum class Phase { kMonolingual, kMixed, kPureBt };
const char* phase_name(Phase p);

struct PhaseConfig {
  Phase phase = Phase::kMixed;
  std::int64_t steps = 0;
  int batch_size = 16;
  double bt_ratio = 0.98;     // mixed phase; pure_bt behaves as 1.0
  DecodeConfig bt_decode;     // self-generation settings
  bool uniform_direction_schedule = false;

  void validate() const;
};

enum class Provenance { kMono, kBt, kRandomPair, kPseudoParallel };

struct TrainingExample {
  TokenSeq tokens;
  LossMask mask;  // same length as tokens; true only on the supervised span
  Provenance provenance = Provenance::kMono;
};

struct PseudoPair {
  Direction direction;
  TokenSeq source;         // drawn from the training split
  TokenSeq pseudo_target;  // ensemble-decoded
  std::int64_t round = 0;
};

struct PseudoParallelSet {
  std::vector<PseudoPair> pairs;
};

// Tokenized training-split sentences per language.
using TrainCorpora = std::map<LanguageId, std::vector<TokenSeq>>;

// [BOS, TAG(lang), sentence..., EOS]; loss on sentence+EOS only.
TrainingExample make_mono_example(const Vocabulary& vocab,
                                  const LanguageId& lang,
                                  const TokenSeq& sentence);

// Shared pair layout [BOS, TAG(dir.src), src_span..., TAG(dir.tgt),
// tgt_span..., EOS] with loss on tgt_span+EOS.
TrainingExample make_pair_example(const Vocabulary& vocab, const Direction& dir,
                                  const TokenSeq& src_span,
                                  const TokenSeq& tgt_span,
                                  Provenance provenance);

// Back-translation for direction X->Y: decodes a pseudo-source x_hat from
// y (generator runs Y->X), then supervises the reconstruction of y.
// Returns nullopt when the assembled example exceeds max_context (callers
// count the drop).
std::optional<TrainingExample> make_bt_example(const Ensemble& generator,
                                               const PromptTemplate& tpl,
                                               const Direction& dir,
                                               const TokenSeq& y,
                                               const DecodeConfig& decode_cfg);

// Assembly step of the above with the pseudo-source already in hand (any
// generator, including fixed stubs).
std::optional<TrainingExample> make_bt_example_with_source(
    const Vocabulary& vocab, const Direction& dir, const TokenSeq& x_hat,
    const TokenSeq& y, int max_context);

TrainingExample make_random_pair_example(const Vocabulary& vocab,
                                         const TokenSeq& x, const TokenSeq& y,
                                         const Direction& dir);

TrainingExample make_pseudo_example(const Vocabulary& vocab,
                                    const PseudoPair& pair);

// Inverse of the pair layout; throws ShapeMismatch when the example does
// not parse (format-totality checks).
struct ParsedPairExample {
  TokenId src_tag = 0;
  TokenId tgt_tag = 0;
  TokenSeq src_span;
  TokenSeq tgt_span;
};
ParsedPairExample parse_pair_example(const Vocabulary& vocab,
                                     const TrainingExample& example);

struct PhaseReport {
  std::string phase;
  std::int64_t steps = 0;
  int batch_size = 0;
  double mean_loss = 0.0;
  std::vector<double> step_losses;
  std::int64_t dropped = 0;
  std::int64_t mono_examples = 0;
  std::int64_t bt_examples = 0;
  std::int64_t random_pair_examples = 0;
  std::int64_t pseudo_examples = 0;
  std::map<std::string, std::int64_t> direction_examples;
  std::int64_t optimizer_steps_begin = 0;
  std::int64_t optimizer_steps_end = 0;
};

// One curriculum phase. Monolingual: language-tagged causal LM over the
// member's three languages, round-robin. Mixed / pure BT: per example a
// directed direction is scheduled (round-robin over the six, or uniform
// when configured); with probability bt_ratio the example is built by
// back-translation through the model being trained, otherwise from a
// randomized sentence pair. One optimizer step per batch.
PhaseReport run_phase(Model& model, const Vocabulary& vocab,
                      const TrainCorpora& corpora,
                      const DirectionSet& directions, const PhaseConfig& cfg,
                      const LrSchedule& sched, std::uint64_t seed);

// Ensemble-decodes n fresh source sentences per direction of the primary
// pair (A->B and B->A); output order equals input index order.
PseudoParallelSet generate_pseudo_parallel(const Ensemble& ensemble,
                                           const Vocabulary& vocab,
                                           const TrainCorpora& corpora,
                                           const Direction& primary,
                                           int n_per_direction,
                                           const DecodeConfig& decode_cfg,
                                           std::int64_t round_k,
                                           std::uint64_t seed);

PhaseReport train_on_pseudo(Model& model, const Vocabulary& vocab,
                            const PseudoParallelSet& set, std::int64_t steps,
                            int batch_size, const LrSchedule& sched,
                            std::uint64_t seed);

struct PoolMember {
  Model model;
  DirectionSet directions;
  std::vector<double> val_chrf_history;  // one entry per ensemble round
};

struct ModelPool {
  std::vector<PoolMember> members;
  int size() const { return static_cast<int>(members.size()); }
};

struct RoundReport {
  std::int64_t round = 0;
  std::int64_t pseudo_pairs = 0;
  std::vector<double> member_val_chrf;
  std::vector<double> member_mean_loss;
  std::vector<std::int64_t> member_optimizer_steps;  // cumulative
  double ensemble_val_chrf = 0.0;
};

struct Algorithm1Config {
  int rounds = 2;
  std::int64_t steps_per_round = 500;
  int batch_size = 16;
  int sentences_per_direction = 2000;
  DecodeConfig generation_decode;  // pseudo-target generation
  DecodeConfig eval_decode;        // per-round validation scoring
  LrSchedule continuation_lr;
  std::uint64_t eval_seed_root = 0;
};

// Validation scores (mean chrF over both directions) per member; ordering
// follows pool order.
std::vector<double> pool_validation_chrf(const ModelPool& pool,
                                         const Vocabulary& vocab,
                                         const EvalSet& valid_fwd,
                                         const EvalSet& valid_rev,
                                         const DecodeConfig& eval_decode,
                                         std::uint64_t eval_seed_root,
                                         std::int64_t round);

double ensemble_validation_chrf(const ModelPool& pool, const Vocabulary& vocab,
                                const EvalSet& valid_fwd,
                                const EvalSet& valid_rev,
                                const DecodeConfig& eval_decode,
                                std::uint64_t eval_seed_root,
                                std::int64_t round);

// Iterative ensemble self-training: per round, all members jointly
// generate a shared pseudo-parallel set for the primary pair, then every
// member trains on it (generation completes before any member trains).
std::vector<RoundReport> run_algorithm1(ModelPool& pool,
                                        const Vocabulary& vocab,
                                        const TrainCorpora& corpora,
                                        const Direction& primary,
                                        const EvalSet& valid_fwd,
                                        const EvalSet& valid_rev,
                                        const Algorithm1Config& cfg,
                                        std::uint64_t seed);

// Argmax of mean validation chrF across both directions; ties break to
// the lowest member index.
std::size_t select_best_model(const ModelPool& pool, const Vocabulary& vocab,
                              const EvalSet& valid_fwd, const EvalSet& valid_rev,
                              const DecodeConfig& eval_decode,
                              std::uint64_t eval_seed_root, std::int64_t round);

// Same selection rule over arbitrary systems (stubs included).
std::size_t select_best_system(const std::vector<const TranslationSystem*>& systems,
                               const EvalSet& valid_fwd, const EvalSet& valid_rev,
                               const DecodeConfig& eval_decode,
                               std::uint64_t eval_seed_root, std::int64_t round);

// Matched single-model continuation: identical pipeline with a pool of
// one, so step counts match the ensemble arm per member exactly.
std::vector<RoundReport> run_matched_single_baseline(Model& model,
                                                     const Vocabulary& vocab,
                                                     const TrainCorpora& corpora,
                                                     const Direction& primary,
                                                     const EvalSet& valid_fwd,
                                                     const EvalSet& valid_rev,
                                                     const Algorithm1Config& cfg,
                                                     std::uint64_t seed);

// Canonical stream id for scoring runs, shared by the pipeline and the
// standalone evaluate command so logged scores can be recomputed exactly.
std::uint64_t eval_stream_seed(std::uint64_t root, const std::string& system_id,
                               const std::string& split, std::int64_t round,
                               const std::string& direction_label);

}  // namespace btel
