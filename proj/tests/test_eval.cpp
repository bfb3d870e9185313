// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "btel/diagnostics.hpp"
#include "btel/eval.hpp"
#include "btel/rng.hpp"

using namespace btel;

namespace {

// Independent brute-force chrF oracle: plain std::map n-gram counting over
// whitespace-stripped byte strings (test corpus is ASCII).
double chrf_oracle(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs, int max_order = 6,
                   double beta = 2.0) {
  auto strip = [](const std::string& s) {
    std::string out;
    for (char c : s)
      if (c != ' ' && c != '\t') out += c;
    return out;
  };
  auto grams = [](const std::string& s, int n) {
    std::map<std::string, long> counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
      ++counts[s.substr(i, static_cast<std::size_t>(n))];
    return counts;
  };
  const double b2 = beta * beta;
  double f_sum = 0.0;
  int valid = 0;
  long any_hyp = 0;
  for (int n = 1; n <= max_order; ++n) {
    long tp = 0, hyp_total = 0, ref_total = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      const auto h = grams(strip(hyps[s]), n);
      const auto r = grams(strip(refs[s]), n);
      for (const auto& [g, c] : h) {
        hyp_total += c;
        const auto it = r.find(g);
        if (it != r.end()) tp += std::min(c, it->second);
      }
      for (const auto& [g, c] : r) ref_total += c;
    }
    any_hyp += hyp_total;
    if (ref_total == 0) continue;
    ++valid;
    const double prec = hyp_total > 0 ? double(tp) / double(hyp_total) : 0.0;
    const double rec = double(tp) / double(ref_total);
    const double denom = b2 * prec + rec;
    f_sum += denom > 0 ? (1 + b2) * prec * rec / denom : 0.0;
  }
  if (valid == 0) return any_hyp == 0 ? 100.0 : 0.0;
  return 100.0 * f_sum / valid;
}

// Independent BLEU oracle: clipped counts via std::map, explicit brevity
// penalty and exponential smoothing.
double bleu_oracle(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs) {
  auto grams = [](const std::vector<std::string>& words, int n) {
    std::map<std::vector<std::string>, long> counts;
    if (static_cast<int>(words.size()) >= n)
      for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i)
        ++counts[std::vector<std::string>(words.begin() + i,
                                          words.begin() + i + n)];
    return counts;
  };
  long correct[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = tokenize_13a(hyps[s]);
    const auto r = tokenize_13a(refs[s]);
    hyp_len += static_cast<long>(h.size());
    ref_len += static_cast<long>(r.size());
    for (int n = 1; n <= 4; ++n) {
      const auto hg = grams(h, n);
      const auto rg = grams(r, n);
      for (const auto& [g, c] : hg) {
        total[n - 1] += c;
        const auto it = rg.find(g);
        if (it != rg.end()) correct[n - 1] += std::min(c, it->second);
      }
    }
  }
  double logsum = 0.0, smooth = 1.0;
  for (int n = 0; n < 4; ++n) {
    const double denom = double(std::max<long>(total[n], 1));
    double p;
    if (correct[n] > 0) {
      p = double(correct[n]) / denom;
    } else {
      smooth *= 2.0;
      p = 1.0 / (smooth * denom);
    }
    logsum += std::log(p);
  }
  double bp = 1.0;
  if (hyp_len == 0) bp = 0.0;
  else if (hyp_len < ref_len) bp = std::exp(1.0 - double(ref_len) / double(hyp_len));
  return 100.0 * bp * std::exp(logsum / 4.0);
}

std::string random_short_string(Rng& rng, bool allow_empty = true) {
  const int len = static_cast<int>(rng.uniform_index(allow_empty ? 13 : 12)) +
                  (allow_empty ? 0 : 1);
  const std::string alphabet = "abcdef ";
  std::string out;
  for (int i = 0; i < len; ++i)
    out += alphabet[rng.uniform_index(alphabet.size())];
  return out;
}

}  // namespace

TEST_CASE("chrF basics") {
  CHECK(chrf_sentence("abcdef", "abcdef") == 100.0);
  CHECK(chrf_sentence("a", "a") == 100.0);
  CHECK(chrf_corpus({"the cat sat", "on the mat"},
                    {"the cat sat", "on the mat"}) == 100.0);
  CHECK(chrf_sentence("ab", "cd") == 0.0);
  CHECK(chrf_sentence("", "") == 100.0);
  CHECK(chrf_sentence("abc", "") == 0.0);
  CHECK(chrf_sentence("", "abc") == 0.0);
  CHECK_THROWS_AS(chrf_corpus({}, {}), EmptyCorpus);
  CHECK_THROWS_AS(chrf_corpus({"a"}, {"a", "b"}), LengthMismatch);
}

TEST_CASE("chrF matches the brute-force oracle") {
  SUBCASE("cat vs cap") {
    const double got = chrf_sentence("cat", "cap");
    const double expect = chrf_oracle({"cat"}, {"cap"});
    CHECK(std::fabs(got - expect) < 1e-9);
    // orders 1..3 carry F = 2/3, 1/2, 0
    CHECK(got == doctest::Approx(100.0 * (2.0 / 3 + 0.5) / 3).epsilon(1e-12));
  }
  SUBCASE("whitespace is excluded from n-grams") {
    CHECK(chrf_sentence("ab cd", "abcd") == 100.0);
  }
  SUBCASE("200 random short-string pairs") {
    Rng rng(2024);
    for (int i = 0; i < 200; ++i) {
      const std::string hyp = random_short_string(rng);
      const std::string ref = random_short_string(rng);
      const double got = chrf_sentence(hyp, ref);
      const double expect = chrf_oracle({hyp}, {ref});
      CHECK(std::fabs(got - expect) < 1e-9);
      CHECK(got >= 0.0);
      CHECK(got <= 100.0);
    }
  }
  SUBCASE("corpus-level pooling, multiple sentences") {
    Rng rng(2025);
    std::vector<std::string> hyps, refs;
    for (int i = 0; i < 25; ++i) {
      hyps.push_back(random_short_string(rng));
      refs.push_back(random_short_string(rng));
    }
    CHECK(std::fabs(chrf_corpus(hyps, refs) - chrf_oracle(hyps, refs)) < 1e-9);
  }
}

TEST_CASE("13a-style tokenization") {
  CHECK(tokenize_13a("a b") == std::vector<std::string>{"a", "b"});
  CHECK(tokenize_13a("a,b") == std::vector<std::string>{"a", ",", "b"});
  CHECK(tokenize_13a("don't") == std::vector<std::string>{"don", "'", "t"});
  CHECK(tokenize_13a("a—b") == std::vector<std::string>{"a", "-", "b"});
  CHECK(tokenize_13a("“quoted”") ==
        std::vector<std::string>{"\"", "quoted", "\""});
  CHECK(tokenize_13a("") == std::vector<std::string>{});
}

TEST_CASE("BLEU") {
  SUBCASE("identity is exactly 100") {
    CHECK(bleu_corpus({"the cat sat on the mat"}, {"the cat sat on the mat"}) ==
          100.0);
    CHECK(bleu_corpus({"a b c d", "e f g h"}, {"a b c d", "e f g h"}) == 100.0);
  }
  SUBCASE("short hypothesis: BP < 1, matches the oracle") {
    const std::vector<std::string> hyps = {"the cat sat"};
    const std::vector<std::string> refs = {"the cat sat on the mat today"};
    const double got = bleu_corpus(hyps, refs);
    CHECK(got < 100.0);
    CHECK(got > 0.0);
    CHECK(std::fabs(got - bleu_oracle(hyps, refs)) < 1e-9);
  }
  SUBCASE("empty hypothesis scores zero") {
    CHECK(bleu_corpus({""}, {"some reference text"}) ==
          doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("random pairs match the oracle") {
    Rng rng(77);
    for (int i = 0; i < 100; ++i) {
      const std::string hyp = random_short_string(rng);
      const std::string ref = random_short_string(rng);
      CHECK(std::fabs(bleu_corpus({hyp}, {ref}) - bleu_oracle({hyp}, {ref})) <
            1e-9);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(bleu_corpus({}, {}), EmptyCorpus);
    CHECK_THROWS_AS(bleu_corpus({"a"}, {}), LengthMismatch);
  }
}

TEST_CASE("paired t-test") {
  SUBCASE("closed-form example") {
    const TTestResult r = paired_t_test({1.0, 2.0, 3.0});
    CHECK(r.t == doctest::Approx(2.0 * std::sqrt(3.0)).epsilon(1e-12));
    CHECK(r.df == 2);
    CHECK(r.mean_diff == doctest::Approx(2.0));
    CHECK(r.p == doctest::Approx(0.0741799).epsilon(1e-5));
    CHECK_FALSE(r.p_clamped);
  }
  SUBCASE("degenerate variance") {
    CHECK_THROWS_AS(paired_t_test({0.0, 0.0, 0.0}), DegenerateVariance);
    CHECK_THROWS_AS(paired_t_test({2.5, 2.5}), DegenerateVariance);
  }
  SUBCASE("too few samples") {
    CHECK_THROWS_AS(paired_t_test({1.0}), InsufficientSamples);
  }
  SUBCASE("sign symmetry") {
    const std::vector<double> d = {0.3, 1.1, -0.2, 0.8, 0.4};
    std::vector<double> neg;
    for (double x : d) neg.push_back(-x);
    const TTestResult r1 = paired_t_test(d);
    const TTestResult r2 = paired_t_test(neg);
    CHECK(r1.t == doctest::Approx(-r2.t).epsilon(1e-12));
    CHECK(r1.p == doctest::Approx(r2.p).epsilon(1e-12));
    CHECK(r1.df == r2.df);
  }
  SUBCASE("tail reference values") {
    // Matched-pair counts of the reporting format this mirrors: nine pairs
    // from one direction (df 8), eighteen pooled (df 17).
    CHECK(student_t_two_sided_p(6.44, 8) == doctest::Approx(2.0042e-4).epsilon(1e-3));
    CHECK(student_t_two_sided_p(4.64, 8) == doctest::Approx(1.6662e-3).epsilon(1e-3));
    CHECK(student_t_two_sided_p(6.18, 17) == doctest::Approx(1.0079e-5).epsilon(1e-3));
    CHECK(student_t_two_sided_p(3.4641016, 2) ==
          doctest::Approx(0.0741799).epsilon(1e-6));
  }
  SUBCASE("extreme tails clamp and flag") {
    std::vector<double> d;
    for (int i = 0; i < 40; ++i) d.push_back(10.0 + 0.001 * i);
    const TTestResult r = paired_t_test(d);
    CHECK(r.p == 1e-12);
    CHECK(r.p_clamped);
  }
}

TEST_CASE("evaluate_system") {
  SyntheticWorldSpec spec;
  spec.base_vocab_size = 24;
  spec.min_sentence_len = 2;
  spec.max_sentence_len = 5;
  spec.grammar_seed = 4;
  spec.languages = {{"A", 1, OrderTransform::kIdentity, 0},
                    {"B", 2, OrderTransform::kReverse, 0}};
  const SyntheticWorld world = SyntheticWorld::build(spec);
  const EvalSet set = world.make_eval_set({"A", "B"}, 30, Split::kValid, 6);
  DecodeConfig cfg;

  SUBCASE("oracle stub scores chrF 100") {
    const OracleStubSystem oracle(world);
    const auto records = evaluate_system(oracle, set, cfg, {"chrf", "bleu"});
    REQUIRE(records.size() == 2);
    CHECK(records[0].metric == "chrf");
    CHECK(records[0].value == 100.0);
    CHECK(records[1].metric == "bleu");
    CHECK(records[1].value == 100.0);
    CHECK(records[0].system_id == "stub-oracle");
  }
  SUBCASE("constant stub scores below 100 and equals direct recomputation") {
    const std::string constant = world.surface_vocab("B")[0];
    const ConstantStubSystem stub(constant);
    const auto records = evaluate_system(stub, set, cfg, {"chrf"});
    CHECK(records[0].value < 100.0);
    std::vector<std::string> hyps(set.pairs.size(), constant), refs;
    for (const auto& [src, ref] : set.pairs) refs.push_back(ref);
    CHECK(records[0].value == doctest::Approx(chrf_corpus(hyps, refs)).epsilon(1e-12));
  }
  SUBCASE("empty eval set") {
    EvalSet empty;
    empty.direction = {"A", "B"};
    const OracleStubSystem oracle(world);
    CHECK_THROWS_AS(evaluate_system(oracle, empty, cfg, {"chrf"}), EmptyEvalSet);
  }
  SUBCASE("unknown metric") {
    const OracleStubSystem oracle(world);
    CHECK_THROWS_AS(evaluate_system(oracle, set, cfg, {"comet"}), InvalidConfig);
  }
}
