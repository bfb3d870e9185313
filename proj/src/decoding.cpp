// SPDX-License-Identifier: Apache-2.0
#include "btel/decoding.hpp"

#include <algorithm>
#include <cmath>

#include "btel/rng.hpp"

namespace btel {

TokenSeq build_translation_prompt(const PromptTemplate& tpl,
                                  const LanguageId& src_lang,
                                  const LanguageId& tgt_lang,
                                  const TokenSeq& src_tokens) {
  TokenSeq prompt;
  prompt.reserve(src_tokens.size() + 3);
  prompt.push_back(tpl.bos());
  prompt.push_back(tpl.tag(src_lang));
  prompt.insert(prompt.end(), src_tokens.begin(), src_tokens.end());
  prompt.push_back(tpl.tag(tgt_lang));
  return prompt;
}

void DecodeConfig::validate() const {
  if (!(temperature > 0)) throw InvalidConfig("temperature must be > 0");
  if (max_new_tokens < 1) throw InvalidConfig("max_new_tokens must be >= 1");
}

void Ensemble::validate() const {
  if (members.empty()) throw EmptyEnsemble("ensemble has no members");
  const std::uint64_t hash = members.front()->vocab_hash;
  const int vocab = members.front()->config.vocab_size;
  for (const Model* m : members) {
    if (m->vocab_hash != hash)
      throw VocabHashMismatch("ensemble members disagree on vocabulary hash");
    if (m->config.vocab_size != vocab)
      throw ShapeMismatch("ensemble members disagree on vocab_size");
  }
}

std::vector<double> ensemble_average_logits(
    const std::vector<std::vector<float>>& member_logits) {
  if (member_logits.empty()) throw EmptyEnsemble("no logit vectors to average");
  const std::size_t v = member_logits.front().size();
  for (const auto& z : member_logits)
    if (z.size() != v) throw ShapeMismatch("logit vectors differ in length");
  std::vector<double> out(v, 0.0);
  for (const auto& z : member_logits)
    for (std::size_t i = 0; i < v; ++i) out[i] += static_cast<double>(z[i]);
  const double inv_n = 1.0 / static_cast<double>(member_logits.size());
  for (double& x : out) x *= inv_n;
  return out;
}

std::vector<double> tempered_softmax(const std::vector<double>& logits,
                                     double temperature) {
  std::vector<double> p(logits.size());
  double maxl = -1e300;
  for (double z : logits) maxl = std::max(maxl, z / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - maxl);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

TokenId argmax_token(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<TokenId>(best);
}

TokenSeq decode(const Ensemble& ensemble, const TokenSeq& prompt,
                const DecodeConfig& cfg) {
  ensemble.validate();
  cfg.validate();
  if (prompt.empty()) throw ShapeMismatch("decode needs a non-empty prompt");
  int min_context = ensemble.members.front()->config.max_context;
  for (const Model* m : ensemble.members)
    min_context = std::min(min_context, m->config.max_context);
  if (static_cast<int>(prompt.size()) + cfg.max_new_tokens > min_context)
    throw ContextOverflow("prompt length " + std::to_string(prompt.size()) +
                          " + max_new_tokens " +
                          std::to_string(cfg.max_new_tokens) +
                          " exceeds max_context " + std::to_string(min_context));

  const int n = ensemble.size();
  std::vector<KvCache<float>> caches(static_cast<std::size_t>(n));
  std::vector<std::vector<float>> logits(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    caches[static_cast<std::size_t>(i)].reset(ensemble.members[static_cast<std::size_t>(i)]->config);

  for (TokenId tok : prompt)
    for (int i = 0; i < n; ++i)
      forward_next(ensemble.members[static_cast<std::size_t>(i)]->config,
                   ensemble.members[static_cast<std::size_t>(i)]->params,
                   caches[static_cast<std::size_t>(i)], tok,
                   logits[static_cast<std::size_t>(i)]);

  Rng rng(cfg.rng_seed);
  TokenSeq out;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const std::vector<double> z = ensemble_average_logits(logits);
    TokenId next;
    if (cfg.greedy) {
      next = argmax_token(z);
    } else {
      const std::vector<double> p = tempered_softmax(z, cfg.temperature);
      const double u = rng.uniform();
      double cum = 0.0;
      std::size_t pick = p.size() - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        cum += p[i];
        if (u < cum) {
          pick = i;
          break;
        }
      }
      next = static_cast<TokenId>(pick);
    }
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    if (step + 1 == cfg.max_new_tokens) break;
    for (int i = 0; i < n; ++i)
      forward_next(ensemble.members[static_cast<std::size_t>(i)]->config,
                   ensemble.members[static_cast<std::size_t>(i)]->params,
                   caches[static_cast<std::size_t>(i)], next,
                   logits[static_cast<std::size_t>(i)]);
  }
  return out;
}

TokenSeq translate_tokens(const Ensemble& ensemble, const PromptTemplate& tpl,
                          const Direction& dir, const TokenSeq& src_tokens,
                          const DecodeConfig& cfg) {
  ensemble.validate();
  const TokenSeq prompt = build_translation_prompt(tpl, dir.src, dir.tgt, src_tokens);
  int min_context = ensemble.members.front()->config.max_context;
  for (const Model* m : ensemble.members)
    min_context = std::min(min_context, m->config.max_context);
  const int budget = min_context - static_cast<int>(prompt.size());
  if (budget < 1)
    throw ContextOverflow("translation prompt leaves no room to generate");
  DecodeConfig eff = cfg;
  eff.max_new_tokens = std::min(
      {2 * static_cast<int>(src_tokens.size()) + 8, cfg.max_new_tokens, budget});
  return decode(ensemble, prompt, eff);
}

std::string EnsembleSystem::translate(const std::string& src,
                                      const Direction& dir,
                                      const DecodeConfig& cfg,
                                      std::int64_t sentence_index) const {
  DecodeConfig per_sentence = cfg;
  per_sentence.rng_seed = substream(cfg.rng_seed, "decode/sentence",
                                    static_cast<std::uint64_t>(sentence_index));
  const TokenSeq out = translate_tokens(ensemble_, tpl_, dir,
                                        tpl_.vocab().tokenize(src), per_sentence);
  return tpl_.vocab().detokenize(out);
}

}  // namespace btel
