// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "btel/corpus.hpp"
#include "btel/decoding.hpp"

namespace btel {

struct ChrfConfig {
  int max_order = 6;
  double beta = 2.0;

  void validate() const;
};

// Fixed to the usual reporting signature: orders 1-4, exponential
// smoothing on zero counts, 13a-style tokenization, mixed case, no
// effective-order fallback.
struct BleuConfig {
  int max_order = 4;
};

// Corpus chrF: character n-grams (whitespace excluded) pooled over the
// corpus per order, F_beta per order, arithmetic mean over orders whose
// pooled reference count is nonzero, x100. Works on a single pair as a
// corpus of one.
double chrf_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs,
                   const ChrfConfig& cfg = {});
double chrf_sentence(const std::string& hyp, const std::string& ref,
                     const ChrfConfig& cfg = {});

double bleu_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs,
                   const BleuConfig& cfg = {});

// 13a-style word tokenization: unicode dashes/quotes normalized,
// punctuation split from adjacent non-punctuation.
std::vector<std::string> tokenize_13a(const std::string& sentence);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::int64_t df = 0;
  double mean_diff = 0.0;
  bool p_clamped = false;  // true when p fell below the 1e-12 tail floor
};

// Two-sided paired t-test on precomputed differences (sample sd, n-1).
TTestResult paired_t_test(const std::vector<double>& diffs);

// Two-sided tail probability of Student's t with df degrees of freedom,
// via the regularized incomplete beta (|err| < 1e-8).
double student_t_two_sided_p(double t, std::int64_t df);

struct ScoreRecord {
  std::string metric;
  double value = 0.0;   // [0, 100]
  Direction direction;
  std::string system_id;
  std::string split;
  std::int64_t round = -1;
  std::uint64_t seed = 0;
};

struct EvalContext {
  std::string split = "valid";
  std::int64_t round = -1;
  std::uint64_t seed = 0;
};

// Decodes every source in the eval set and scores hypotheses against the
// references with each requested metric ("chrf", "bleu").
std::vector<ScoreRecord> evaluate_system(const TranslationSystem& system,
                                         const EvalSet& eval_set,
                                         const DecodeConfig& decode_cfg,
                                         const std::vector<std::string>& metrics,
                                         const EvalContext& ctx = {},
                                         const ChrfConfig& chrf_cfg = {},
                                         const BleuConfig& bleu_cfg = {});

}  // namespace btel
