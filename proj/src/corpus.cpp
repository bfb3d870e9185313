// SPDX-License-Identifier: Apache-2.0
#include "btel/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "btel/rng.hpp"

namespace btel {

namespace {

constexpr double kChainDirichletAlpha = 0.3;
constexpr int kSplitBuckets = 20;  // 18 train / 1 valid / 1 test

int split_bucket(Split s) {
  switch (s) {
    case Split::kTrain: return -1;  // buckets 0..17
    case Split::kValid: return 18;
    case Split::kTest: return 19;
  }
  return -1;
}

bool in_split(const std::vector<int>& base, Split split) {
  std::uint64_t h = 1469598103934665603ull;
  for (int id : base) {
    h ^= static_cast<std::uint64_t>(id) + 1;
    h *= 1099511628211ull;
    h = splitmix64(h);
  }
  const int bucket = static_cast<int>(h % kSplitBuckets);
  if (split == Split::kTrain) return bucket < 18;
  return bucket == split_bucket(split);
}

std::string make_surface_word(Rng& rng) {
  const int len = static_cast<int>(rng.uniform_int(4, 7));
  std::string w(static_cast<std::size_t>(len), 'a');
  for (char& c : w) c = static_cast<char>('a' + rng.uniform_index(26));
  return w;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw InvalidSpec("unknown split '" + name + "'");
}

void SyntheticWorldSpec::validate() const {
  if (base_vocab_size < 20)
    throw InvalidSpec("base_vocab_size must be >= 20, got " +
                      std::to_string(base_vocab_size));
  if (min_sentence_len < 1)
    throw InvalidSpec("min sentence length must be >= 1");
  if (max_sentence_len < min_sentence_len)
    throw InvalidSpec("sentence_length_range is empty");
  if (languages.empty()) throw InvalidSpec("world needs at least one language");
  std::set<LanguageId> seen;
  for (const auto& lang : languages) {
    if (lang.id.empty()) throw InvalidSpec("empty language id");
    if (!seen.insert(lang.id).second)
      throw InvalidSpec("duplicate language id '" + lang.id + "'");
    if (lang.transform == OrderTransform::kRotate && lang.rotate_k < 0)
      throw InvalidSpec("rotate_k must be >= 0 for language '" + lang.id + "'");
  }
}

SyntheticWorld SyntheticWorld::build(const SyntheticWorldSpec& spec) {
  spec.validate();
  SyntheticWorld world;
  world.spec_ = spec;

  const int v = spec.base_vocab_size;
  Rng grammar(substream(spec.grammar_seed, "world/grammar"));
  world.initial_.resize(static_cast<std::size_t>(v));
  grammar.dirichlet(kChainDirichletAlpha, world.initial_);
  world.transition_.resize(static_cast<std::size_t>(v) * v);
  std::vector<double> row(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) {
    grammar.dirichlet(kChainDirichletAlpha, row);
    std::copy(row.begin(), row.end(),
              world.transition_.begin() + static_cast<std::size_t>(i) * v);
  }

  // Surface words: per-language seeded streams, rejection keeps the union
  // of all languages' vocabularies collision-free.
  std::unordered_set<std::string> used;
  for (const auto& lang : spec.languages) {
    Rng words(substream(lang.substitution_seed, "world/substitution"));
    std::vector<std::string> surface;
    surface.reserve(static_cast<std::size_t>(v));
    while (static_cast<int>(surface.size()) < v) {
      std::string w = make_surface_word(words);
      if (!used.insert(w).second) continue;
      world.word_language_[w] = lang.id;
      world.inverse_[lang.id][w] = static_cast<int>(surface.size());
      surface.push_back(std::move(w));
    }
    world.surface_[lang.id] = std::move(surface);
  }
  return world;
}

const LanguageSpec& SyntheticWorld::language_spec(const LanguageId& lang) const {
  for (const auto& l : spec_.languages)
    if (l.id == lang) return l;
  throw UnknownLanguage("no language '" + lang + "' in world");
}

std::vector<LanguageId> SyntheticWorld::language_ids() const {
  std::vector<LanguageId> out;
  out.reserve(spec_.languages.size());
  for (const auto& l : spec_.languages) out.push_back(l.id);
  return out;
}

const std::vector<std::string>& SyntheticWorld::surface_vocab(
    const LanguageId& lang) const {
  auto it = surface_.find(lang);
  if (it == surface_.end())
    throw UnknownLanguage("no language '" + lang + "' in world");
  return it->second;
}

std::optional<LanguageId> SyntheticWorld::language_of_word(
    const std::string& word) const {
  auto it = word_language_.find(word);
  if (it == word_language_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> SyntheticWorld::sample_base_sentence(Rng& rng) const {
  const int len = static_cast<int>(
      rng.uniform_int(spec_.min_sentence_len, spec_.max_sentence_len));
  const int v = spec_.base_vocab_size;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(len));
  double u = rng.uniform();
  double cum = 0.0;
  int cur = v - 1;
  for (int i = 0; i < v; ++i) {
    cum += initial_[static_cast<std::size_t>(i)];
    if (u < cum) {
      cur = i;
      break;
    }
  }
  out.push_back(cur);
  for (int t = 1; t < len; ++t) {
    const double* p = transition_.data() + static_cast<std::size_t>(cur) * v;
    u = rng.uniform();
    cum = 0.0;
    int next = v - 1;
    for (int i = 0; i < v; ++i) {
      cum += p[i];
      if (u < cum) {
        next = i;
        break;
      }
    }
    out.push_back(next);
    cur = next;
  }
  return out;
}

std::string SyntheticWorld::render(const std::vector<int>& base,
                                   const LanguageId& lang) const {
  const LanguageSpec& ls = language_spec(lang);
  std::vector<int> ordered = base;
  switch (ls.transform) {
    case OrderTransform::kIdentity:
      break;
    case OrderTransform::kReverse:
      std::reverse(ordered.begin(), ordered.end());
      break;
    case OrderTransform::kRotate: {
      if (!ordered.empty()) {
        const int k = ls.rotate_k % static_cast<int>(ordered.size());
        std::rotate(ordered.begin(), ordered.begin() + k, ordered.end());
      }
      break;
    }
  }
  const auto& surface = surface_.at(lang);
  std::vector<std::string> words;
  words.reserve(ordered.size());
  for (int id : ordered) words.push_back(surface[static_cast<std::size_t>(id)]);
  return join_words(words);
}

std::vector<int> SyntheticWorld::unrender(const std::string& sentence,
                                          const LanguageId& lang) const {
  const LanguageSpec& ls = language_spec(lang);
  const auto& inv = inverse_.at(lang);
  std::vector<int> ids;
  for (const auto& w : split_words(sentence)) {
    auto it = inv.find(w);
    if (it == inv.end())
      throw UnknownWord("'" + w + "' is not a word of language '" + lang + "'");
    ids.push_back(it->second);
  }
  switch (ls.transform) {
    case OrderTransform::kIdentity:
      break;
    case OrderTransform::kReverse:
      std::reverse(ids.begin(), ids.end());
      break;
    case OrderTransform::kRotate: {
      if (!ids.empty()) {
        const int k = ls.rotate_k % static_cast<int>(ids.size());
        std::rotate(ids.begin(), ids.end() - k, ids.end());
      }
      break;
    }
  }
  return ids;
}

std::string SyntheticWorld::oracle_translate(const std::string& sentence,
                                             const LanguageId& src,
                                             const LanguageId& tgt) const {
  return render(unrender(sentence, src), tgt);
}

std::vector<std::vector<int>> SyntheticWorld::sample_split_sentences(
    int n, Split split, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    std::vector<int> base = sample_base_sentence(rng);
    if (!in_split(base, split)) continue;
    out.push_back(std::move(base));
  }
  return out;
}

MonolingualCorpus SyntheticWorld::sample_monolingual(const LanguageId& lang,
                                                     int n, Split split,
                                                     std::uint64_t seed) const {
  if (n < 1) throw InvalidSpec("sample_monolingual needs n >= 1");
  language_spec(lang);  // validates the language
  MonolingualCorpus corpus;
  corpus.language = lang;
  corpus.split = split;
  for (const auto& base : sample_split_sentences(
           n, split, substream(seed, "corpus/sample", fnv1a64(lang),
                               static_cast<std::uint64_t>(split_bucket(split) + 2))))
    corpus.sentences.push_back(render(base, lang));
  return corpus;
}

EvalSet SyntheticWorld::make_eval_set(const Direction& dir, int n_pairs,
                                      Split split, std::uint64_t seed) const {
  if (n_pairs < 1) throw InvalidSpec("make_eval_set needs n_pairs >= 1");
  EvalSet set;
  set.direction = dir;
  for (const auto& base : sample_split_sentences(
           n_pairs, split,
           substream(seed, "corpus/eval", fnv1a64(dir.label()),
                     static_cast<std::uint64_t>(split_bucket(split) + 2))))
    set.pairs.emplace_back(render(base, dir.src), render(base, dir.tgt));
  return set;
}

Vocabulary Vocabulary::build(const std::vector<MonolingualCorpus>& corpora,
                             const std::vector<LanguageId>& tag_languages) {
  Vocabulary v;
  v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& lang : tag_languages) {
    v.tag_order_.push_back(lang);
    v.words_.push_back(lang + " version:");
  }
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& corpus : corpora)
    for (const auto& sentence : corpus.sentences)
      for (const auto& word : split_words(sentence)) ++counts[word];
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(),
                                                           counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (auto& [word, count] : ranked) v.words_.push_back(word);
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    v.index_[v.words_[i]] = static_cast<TokenId>(i);
  return v;
}

TokenId Vocabulary::tag(const LanguageId& lang) const {
  for (std::size_t i = 0; i < tag_order_.size(); ++i)
    if (tag_order_[i] == lang) return static_cast<TokenId>(4 + i);
  throw UnknownLanguage("no tag token for language '" + lang + "'");
}

TokenSeq Vocabulary::tokenize(const std::string& sentence) const {
  TokenSeq out;
  for (const auto& word : split_words(sentence)) {
    auto it = index_.find(word);
    out.push_back(it == index_.end() ? kUnk : it->second);
  }
  return out;
}

std::string Vocabulary::detokenize(const TokenSeq& tokens) const {
  std::vector<std::string> words;
  words.reserve(tokens.size());
  for (TokenId id : tokens) words.push_back(word(id));
  return join_words(words);
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || id >= size())
    throw ShapeMismatch("token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::lookup(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Vocabulary::content_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  mix(std::to_string(tag_order_.size()));
  for (const auto& w : words_) mix(w);
  return h;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  j["tags"] = tag_order_;
  j["words"] = std::vector<std::string>(words_.begin() + num_specials(),
                                        words_.end());
  return j.dump(2);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Vocabulary v;
  v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& tag : j.at("tags")) {
    v.tag_order_.push_back(tag.get<std::string>());
    v.words_.push_back(tag.get<std::string>() + " version:");
  }
  for (const auto& w : j.at("words"))
    v.words_.push_back(w.get<std::string>());
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    v.index_[v.words_[i]] = static_cast<TokenId>(i);
  return v;
}

std::vector<std::string> split_words(const std::string& sentence) {
  std::vector<std::string> out;
  std::istringstream in(sentence);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

namespace {

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    if (c < 0x80) extra = 0;
    else if ((c & 0xe0) == 0xc0) extra = 1;
    else if ((c & 0xf0) == 0xe0) extra = 2;
    else if ((c & 0xf8) == 0xf0) extra = 3;
    else return false;
    if (i + extra >= s.size()) return false;  // truncated sequence
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) return false;
    i += extra + 1;
  }
  return true;
}

}  // namespace

MonolingualCorpus load_plaintext(const std::string& path,
                                 const LanguageId& lang, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  MonolingualCorpus corpus;
  corpus.language = lang;
  corpus.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line))
      throw EncodingError(path + ":" + std::to_string(lineno) +
                          " is not valid UTF-8");
    // trim
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t");
    corpus.sentences.push_back(line.substr(b, e - b + 1));
  }
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return corpus;
}

}  // namespace btel
