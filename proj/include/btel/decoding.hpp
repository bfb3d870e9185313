// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "btel/corpus.hpp"
#include "btel/model.hpp"

namespace btel {

// Prompt layouts ("<Tag><Sentence>" and "<src tag><src sent><tgt tag>")
// over a fixed vocabulary's tag tokens.
class PromptTemplate {
 public:
  explicit PromptTemplate(const Vocabulary& vocab) : vocab_(&vocab) {}
  TokenId bos() const { return Vocabulary::kBos; }
  TokenId eos() const { return Vocabulary::kEos; }
  TokenId tag(const LanguageId& lang) const { return vocab_->tag(lang); }
  const Vocabulary& vocab() const { return *vocab_; }

 private:
  const Vocabulary* vocab_;
};

// [BOS, TAG(src), src tokens..., TAG(tgt)]; generation continues after the
// target tag.
TokenSeq build_translation_prompt(const PromptTemplate& tpl,
                                  const LanguageId& src_lang,
                                  const LanguageId& tgt_lang,
                                  const TokenSeq& src_tokens);

struct DecodeConfig {
  double temperature = 0.1;
  int max_new_tokens = 64;
  bool greedy = false;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Ordered list of member models; aggregation always runs in member-index
// order with a binary64 accumulator, so greedy output is invariant under
// member permutation (up to identical logit permutation).
struct Ensemble {
  std::vector<const Model*> members;

  static Ensemble of(const Model& single) { return Ensemble{{&single}}; }
  int size() const { return static_cast<int>(members.size()); }
  void validate() const;  // EmptyEnsemble, VocabHashMismatch
  const ModelConfig& config() const { return members.front()->config; }
};

// Arithmetic mean of per-vocab logit vectors, member order, binary64.
std::vector<double> ensemble_average_logits(
    const std::vector<std::vector<float>>& member_logits);

std::vector<double> tempered_softmax(const std::vector<double>& logits,
                                     double temperature);

// Argmax with ties broken toward the lowest token id.
TokenId argmax_token(const std::vector<double>& values);

// Token-level ensemble decoding: every member scores the identical prefix,
// logits are averaged, tempered, and the next token is chosen greedily or
// by seeded categorical sampling. Stops at EOS (excluded from the result)
// or after max_new_tokens.
TokenSeq decode(const Ensemble& ensemble, const TokenSeq& prompt,
                const DecodeConfig& cfg);

// Translation of one tokenized sentence: builds the prompt and caps
// generation at min(2 * source length + 8, cfg.max_new_tokens, remaining
// context). Throws ContextOverflow when the prompt itself does not fit.
TokenSeq translate_tokens(const Ensemble& ensemble, const PromptTemplate& tpl,
                          const Direction& dir, const TokenSeq& src_tokens,
                          const DecodeConfig& cfg);

// Sentence-in / sentence-out systems: ensembles, single members, and the
// stub systems used by diagnostics and tests all sit behind this.
class TranslationSystem {
 public:
  virtual ~TranslationSystem() = default;
  virtual std::string id() const = 0;
  // sentence_index keys the per-sentence rng substream.
  virtual std::string translate(const std::string& src, const Direction& dir,
                                const DecodeConfig& cfg,
                                std::int64_t sentence_index) const = 0;
};

class EnsembleSystem : public TranslationSystem {
 public:
  EnsembleSystem(Ensemble ensemble, const Vocabulary& vocab, std::string id)
      : ensemble_(std::move(ensemble)), tpl_(vocab), id_(std::move(id)) {
    ensemble_.validate();
    if (!ensemble_.members.empty() &&
        ensemble_.members.front()->vocab_hash != vocab.content_hash())
      throw VocabHashMismatch("ensemble members built against a different vocabulary");
  }

  std::string id() const override { return id_; }
  std::string translate(const std::string& src, const Direction& dir,
                        const DecodeConfig& cfg,
                        std::int64_t sentence_index) const override;

 private:
  Ensemble ensemble_;
  PromptTemplate tpl_;
  std::string id_;
};

}  // namespace btel
