// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "btel/errors.hpp"

namespace btel {

using LanguageId = std::string;
using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

struct Direction {
  LanguageId src;
  LanguageId tgt;
  bool operator==(const Direction&) const = default;
  std::string label() const { return src + "->" + tgt; }
};

enum class Split { kTrain, kValid, kTest };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

enum class OrderTransform { kIdentity, kReverse, kRotate };

struct LanguageSpec {
  LanguageId id;
  std::uint64_t substitution_seed = 0;
  OrderTransform transform = OrderTransform::kIdentity;
  int rotate_k = 0;  // used when transform == kRotate
};

struct SyntheticWorldSpec {
  int base_vocab_size = 60;
  int min_sentence_len = 3;
  int max_sentence_len = 9;
  std::uint64_t grammar_seed = 0;
  std::vector<LanguageSpec> languages;

  void validate() const;  // throws InvalidSpec
};

struct MonolingualCorpus {
  LanguageId language;
  Split split = Split::kTrain;
  std::vector<std::string> sentences;
};

struct EvalSet {
  Direction direction;
  std::vector<std::pair<std::string, std::string>> pairs;  // (source, reference)
};

// A family of languages defined as invertible transforms (word-substitution
// cipher plus word-order transform) of a common base language. The base
// language is an order-1 Markov chain over base word ids; every language
// renders the same base sentences through its own cipher, so exact
// translation oracles exist for every pair. Surface vocabularies are
// pairwise disjoint across languages.
class SyntheticWorld {
 public:
  static SyntheticWorld build(const SyntheticWorldSpec& spec);

  const SyntheticWorldSpec& spec() const { return spec_; }

  // Exact oracle: invert the source cipher, apply the target cipher.
  // Used for references and diagnostics only, never as training signal.
  std::string oracle_translate(const std::string& sentence,
                               const LanguageId& src,
                               const LanguageId& tgt) const;

  MonolingualCorpus sample_monolingual(const LanguageId& lang, int n,
                                       Split split, std::uint64_t seed) const;

  EvalSet make_eval_set(const Direction& dir, int n_pairs, Split split,
                        std::uint64_t seed) const;

  const std::vector<std::string>& surface_vocab(const LanguageId& lang) const;

  // Token-level language attribution; empty when the word belongs to no
  // language (total on in-world surface words).
  std::optional<LanguageId> language_of_word(const std::string& word) const;

  std::vector<LanguageId> language_ids() const;

 private:
  SyntheticWorldSpec spec_;
  std::vector<double> initial_;                 // [V]
  std::vector<double> transition_;              // [V, V] row-major
  std::map<LanguageId, std::vector<std::string>> surface_;   // base id -> word
  std::map<LanguageId, std::unordered_map<std::string, int>> inverse_;
  std::unordered_map<std::string, LanguageId> word_language_;

  const LanguageSpec& language_spec(const LanguageId& lang) const;
  std::vector<int> sample_base_sentence(class Rng& rng) const;
  std::string render(const std::vector<int>& base, const LanguageId& lang) const;
  std::vector<int> unrender(const std::string& sentence,
                            const LanguageId& lang) const;
  std::vector<std::vector<int>> sample_split_sentences(int n, Split split,
                                                       std::uint64_t seed) const;
};

// Word-level vocabulary with fixed special ids. Token ids are dense in
// [0, V): PAD=0, BOS=1, EOS=2, UNK=3, then one tag token per language,
// then words ranked by (frequency desc, word asc).
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;

  static Vocabulary build(const std::vector<MonolingualCorpus>& corpora,
                          const std::vector<LanguageId>& tag_languages);

  int size() const { return static_cast<int>(words_.size()); }
  int num_specials() const { return 4 + static_cast<int>(tag_order_.size()); }

  TokenId tag(const LanguageId& lang) const;  // throws UnknownLanguage
  bool is_special(TokenId id) const { return id < num_specials(); }

  TokenSeq tokenize(const std::string& sentence) const;
  std::string detokenize(const TokenSeq& tokens) const;

  const std::string& word(TokenId id) const;
  std::optional<TokenId> lookup(const std::string& word) const;

  // Stable digest of the full (word, id) content; checkpoints carry it so
  // decoding with a foreign vocabulary is rejected.
  std::uint64_t content_hash() const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

 private:
  std::vector<std::string> words_;  // index = token id
  std::unordered_map<std::string, TokenId> index_;
  std::vector<LanguageId> tag_order_;
};

// Splits on whitespace; multiple spaces collapse.
std::vector<std::string> split_words(const std::string& sentence);
std::string join_words(const std::vector<std::string>& words);

// Newline-delimited UTF-8 sentences; blank lines dropped, order kept.
MonolingualCorpus load_plaintext(const std::string& path,
                                 const LanguageId& lang, Split split);

}  // namespace btel
