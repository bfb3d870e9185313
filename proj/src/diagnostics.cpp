// SPDX-License-Identifier: Apache-2.0
#include "btel/diagnostics.hpp"

#include <set>

#include "btel/eval.hpp"
#include "btel/parallel.hpp"

namespace btel {

double copying_rate(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.empty()) throw EmptyInput("copying_rate needs at least one pair");
  std::int64_t copied = 0;
  for (const auto& [input, output] : pairs)
    if (split_words(input) == split_words(output)) ++copied;
  return static_cast<double>(copied) / static_cast<double>(pairs.size());
}

std::pair<double, double> constancy_score(
    const std::vector<std::string>& outputs) {
  if (outputs.size() < 2)
    throw InsufficientSamples("constancy_score needs >= 2 outputs");
  std::set<std::string> distinct;
  std::vector<std::string> normalized;
  normalized.reserve(outputs.size());
  for (const auto& s : outputs) {
    normalized.push_back(join_words(split_words(s)));
    distinct.insert(normalized.back());
  }
  double similarity_sum = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < normalized.size(); ++i)
    for (std::size_t j = i + 1; j < normalized.size(); ++j) {
      // chrF with beta != 1 is role-asymmetric; pairs here are unordered,
      // so average both orders to keep the score permutation-invariant.
      similarity_sum +=
          normalized[i] == normalized[j]
              ? 1.0
              : (chrf_sentence(normalized[i], normalized[j]) +
                 chrf_sentence(normalized[j], normalized[i])) /
                    200.0;
      ++pairs;
    }
  const double constancy = similarity_sum / static_cast<double>(pairs);
  const double distinct_ratio = static_cast<double>(distinct.size()) /
                                static_cast<double>(outputs.size());
  return {constancy, distinct_ratio};
}

double target_language_rate(const std::vector<std::string>& outputs,
                            const SyntheticWorld& world,
                            const LanguageId& tgt) {
  world.surface_vocab(tgt);  // validates the language
  std::int64_t in_target = 0, countable = 0;
  for (const auto& sentence : outputs) {
    for (const auto& word : split_words(sentence)) {
      // Specials rendered by detokenize ("<unk>", tags) have no language.
      const auto lang = world.language_of_word(word);
      if (!lang.has_value() && (word.front() == '<' || word == "version:"))
        continue;
      ++countable;
      if (lang.has_value() && *lang == tgt) ++in_target;
    }
  }
  if (countable == 0) return 0.0;
  return static_cast<double>(in_target) / static_cast<double>(countable);
}

CollapseReport collapse_report(const TranslationSystem& system,
                               const SyntheticWorld& world,
                               const Direction& dir, int n,
                               const DecodeConfig& decode_cfg,
                               std::uint64_t sample_seed) {
  if (n < 2) throw InsufficientSamples("collapse_report needs n >= 2");
  const MonolingualCorpus sources = world.sample_monolingual(
      dir.src, n, Split::kTrain, substream(sample_seed, "diagnostics/sources"));
  DecodeConfig cfg = decode_cfg;
  cfg.greedy = true;
  std::vector<std::string> outputs(sources.sentences.size());
  parallel_for(static_cast<std::int64_t>(sources.sentences.size()),
               [&](std::int64_t i) {
                 outputs[static_cast<std::size_t>(i)] = system.translate(
                     sources.sentences[static_cast<std::size_t>(i)], dir, cfg, i);
               });
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i)
    pairs.emplace_back(sources.sentences[i], outputs[i]);

  CollapseReport report;
  report.sample_size = n;
  report.copying_rate = copying_rate(pairs);
  const auto [constancy, distinct_ratio] = constancy_score(outputs);
  report.constancy_score = constancy;
  report.distinct_output_ratio = distinct_ratio;
  report.target_language_rate = target_language_rate(outputs, world, dir.tgt);
  return report;
}

}  // namespace btel
