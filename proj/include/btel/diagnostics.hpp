// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "btel/corpus.hpp"
#include "btel/decoding.hpp"

namespace btel {

// Detectors for the two degenerate fixed points of back-translation
// self-training: copying (output == input) and constant output (output
// independent of input). Disjoint surface vocabularies make both exactly
// measurable, along with target-language fidelity.
struct CollapseReport {
  double copying_rate = 0.0;
  double constancy_score = 0.0;
  double distinct_output_ratio = 0.0;
  double target_language_rate = 0.0;
  int sample_size = 0;
};

// Fraction of pairs whose output equals the input token-for-token after
// whitespace normalization.
double copying_rate(
    const std::vector<std::pair<std::string, std::string>>& pairs);

// (constancy, distinct_ratio): constancy is the mean pairwise chrF among
// outputs of distinct inputs (scaled to [0,1]); identical strings count
// as similarity 1 even when empty. distinct_ratio = #distinct / #outputs.
std::pair<double, double> constancy_score(
    const std::vector<std::string>& outputs);

// Fraction of non-special output tokens drawn from the target language's
// surface vocabulary. Outputs with no countable tokens score 0.
double target_language_rate(const std::vector<std::string>& outputs,
                            const SyntheticWorld& world,
                            const LanguageId& tgt);

// Decodes n training-split sentences greedily (sampling noise is excluded
// from collapse detection by design) and assembles all statistics.
CollapseReport collapse_report(const TranslationSystem& system,
                               const SyntheticWorld& world,
                               const Direction& dir, int n,
                               const DecodeConfig& decode_cfg,
                               std::uint64_t sample_seed = 0);

// Reference behaviors for exercising the detectors: the two collapse
// modes and the exact oracle.
class IdentityStubSystem : public TranslationSystem {
 public:
  std::string id() const override { return "stub-identity"; }
  std::string translate(const std::string& src, const Direction&,
                        const DecodeConfig&, std::int64_t) const override {
    return src;
  }
};

class ConstantStubSystem : public TranslationSystem {
 public:
  explicit ConstantStubSystem(std::string constant)
      : constant_(std::move(constant)) {}
  std::string id() const override { return "stub-constant"; }
  std::string translate(const std::string&, const Direction&,
                        const DecodeConfig&, std::int64_t) const override {
    return constant_;
  }

 private:
  std::string constant_;
};

class OracleStubSystem : public TranslationSystem {
 public:
  explicit OracleStubSystem(const SyntheticWorld& world) : world_(&world) {}
  std::string id() const override { return "stub-oracle"; }
  std::string translate(const std::string& src, const Direction& dir,
                        const DecodeConfig&, std::int64_t) const override {
    return world_->oracle_translate(src, dir.src, dir.tgt);
  }

 private:
  const SyntheticWorld* world_;
};

}  // namespace btel
