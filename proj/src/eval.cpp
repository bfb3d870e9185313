// SPDX-License-Identifier: Apache-2.0
#include "btel/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>

#include "btel/parallel.hpp"

namespace btel {

void ChrfConfig::validate() const {
  if (max_order < 1) throw InvalidConfig("chrF order must be >= 1");
  if (!(beta > 0)) throw InvalidConfig("chrF beta must be > 0");
}

namespace {

std::u32string decode_utf8(const std::string& s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    std::size_t extra = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xe0) == 0xc0) {
      cp = c & 0x1f;
      extra = 1;
    } else if ((c & 0xf0) == 0xe0) {
      cp = c & 0x0f;
      extra = 2;
    } else if ((c & 0xf8) == 0xf0) {
      cp = c & 0x07;
      extra = 3;
    } else {
      cp = 0xfffd;  // stray byte
    }
    for (std::size_t k = 1; k <= extra && i + k < s.size(); ++k)
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3f);
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
  return out;
}

bool is_space_cp(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == 0x00a0;
}

using NgramCounts = std::unordered_map<std::u32string, std::int64_t>;

void count_char_ngrams(const std::u32string& chars, int order, NgramCounts& out) {
  if (static_cast<int>(chars.size()) < order) return;
  for (std::size_t i = 0; i + order <= chars.size(); ++i)
    ++out[chars.substr(i, static_cast<std::size_t>(order))];
}

std::u32string strip_whitespace(const std::string& sentence) {
  std::u32string chars;
  for (char32_t c : decode_utf8(sentence))
    if (!is_space_cp(c)) chars.push_back(c);
  return chars;
}

}  // namespace

double chrf_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs,
                   const ChrfConfig& cfg) {
  cfg.validate();
  if (hyps.empty()) throw EmptyCorpus("chrF needs at least one sentence pair");
  if (hyps.size() != refs.size())
    throw LengthMismatch("chrF hypothesis/reference count mismatch");

  const int orders = cfg.max_order;
  std::vector<std::int64_t> tp(static_cast<std::size_t>(orders), 0);
  std::vector<std::int64_t> hyp_total(static_cast<std::size_t>(orders), 0);
  std::vector<std::int64_t> ref_total(static_cast<std::size_t>(orders), 0);

  NgramCounts hyp_counts, ref_counts;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const std::u32string h = strip_whitespace(hyps[s]);
    const std::u32string r = strip_whitespace(refs[s]);
    for (int n = 1; n <= orders; ++n) {
      hyp_counts.clear();
      ref_counts.clear();
      count_char_ngrams(h, n, hyp_counts);
      count_char_ngrams(r, n, ref_counts);
      for (const auto& [gram, count] : hyp_counts) {
        hyp_total[static_cast<std::size_t>(n - 1)] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          tp[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
      }
      for (const auto& [gram, count] : ref_counts)
        ref_total[static_cast<std::size_t>(n - 1)] += count;
    }
  }

  const double b2 = cfg.beta * cfg.beta;
  double f_sum = 0.0;
  int valid_orders = 0;
  std::int64_t any_hyp = 0;
  for (int n = 0; n < orders; ++n) {
    any_hyp += hyp_total[static_cast<std::size_t>(n)];
    if (ref_total[static_cast<std::size_t>(n)] == 0) continue;  // order unseen in refs
    ++valid_orders;
    const double matches = static_cast<double>(tp[static_cast<std::size_t>(n)]);
    const double prec = hyp_total[static_cast<std::size_t>(n)] > 0
                            ? matches / static_cast<double>(hyp_total[static_cast<std::size_t>(n)])
                            : 0.0;
    const double rec = matches / static_cast<double>(ref_total[static_cast<std::size_t>(n)]);
    const double denom = b2 * prec + rec;
    f_sum += denom > 0 ? (1.0 + b2) * prec * rec / denom : 0.0;
  }
  if (valid_orders == 0) {
    // Reference corpus has no characters: identical (also empty) hypothesis
    // corpus scores 100, anything else 0.
    return any_hyp == 0 ? 100.0 : 0.0;
  }
  return 100.0 * f_sum / static_cast<double>(valid_orders);
}

double chrf_sentence(const std::string& hyp, const std::string& ref,
                     const ChrfConfig& cfg) {
  return chrf_corpus(std::vector<std::string>{hyp},
                     std::vector<std::string>{ref}, cfg);
}

std::vector<std::string> tokenize_13a(const std::string& sentence) {
  std::u32string norm;
  for (char32_t c : decode_utf8(sentence)) {
    switch (c) {
      case 0x2010: case 0x2011: case 0x2012: case 0x2013:
      case 0x2014: case 0x2015: case 0x2212:
        norm.push_back(U'-');
        break;
      case 0x2018: case 0x2019: case 0x201a: case 0x2032:
        norm.push_back(U'\'');
        break;
      case 0x201c: case 0x201d: case 0x201e: case 0x2033:
        norm.push_back(U'"');
        break;
      case 0x00a0:
        norm.push_back(U' ');
        break;
      default:
        norm.push_back(c);
    }
  }
  auto is_punct = [](char32_t c) {
    if (c > 0x7f) return false;
    const char ch = static_cast<char>(c);
    return std::ispunct(static_cast<unsigned char>(ch)) != 0;
  };
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (char32_t c : norm) {
    if (is_space_cp(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      tokens.push_back(encode_utf8(c));
    } else {
      cur += encode_utf8(c);
    }
  }
  flush();
  return tokens;
}

double bleu_corpus(const std::vector<std::string>& hyps,
                   const std::vector<std::string>& refs,
                   const BleuConfig& cfg) {
  if (hyps.empty()) throw EmptyCorpus("BLEU needs at least one sentence pair");
  if (hyps.size() != refs.size())
    throw LengthMismatch("BLEU hypothesis/reference count mismatch");
  const int orders = cfg.max_order;

  std::vector<std::int64_t> correct(static_cast<std::size_t>(orders), 0);
  std::vector<std::int64_t> total(static_cast<std::size_t>(orders), 0);
  std::int64_t hyp_len = 0, ref_len = 0;

  using WordNgramCounts = std::unordered_map<std::string, std::int64_t>;
  WordNgramCounts hyp_counts, ref_counts;
  auto count_word_ngrams = [](const std::vector<std::string>& words, int n,
                              WordNgramCounts& out) {
    if (static_cast<int>(words.size()) < n) return;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
      std::string key;
      for (int k = 0; k < n; ++k) {
        key += words[i + static_cast<std::size_t>(k)];
        key += '\x1f';
      }
      ++out[key];
    }
  };

  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const std::vector<std::string> h = tokenize_13a(hyps[s]);
    const std::vector<std::string> r = tokenize_13a(refs[s]);
    hyp_len += static_cast<std::int64_t>(h.size());
    ref_len += static_cast<std::int64_t>(r.size());
    for (int n = 1; n <= orders; ++n) {
      hyp_counts.clear();
      ref_counts.clear();
      count_word_ngrams(h, n, hyp_counts);
      count_word_ngrams(r, n, ref_counts);
      for (const auto& [gram, count] : hyp_counts) {
        total[static_cast<std::size_t>(n - 1)] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          correct[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }

  // Exponential smoothing: each zero-match order halves the running
  // smoothing numerator. Orders the hypothesis cannot realize smooth
  // against a unit denominator.
  double log_prec_sum = 0.0;
  double smooth = 1.0;
  for (int n = 0; n < orders; ++n) {
    const double denom =
        static_cast<double>(std::max<std::int64_t>(total[static_cast<std::size_t>(n)], 1));
    double p;
    if (correct[static_cast<std::size_t>(n)] > 0) {
      p = static_cast<double>(correct[static_cast<std::size_t>(n)]) / denom;
    } else {
      smooth *= 2.0;
      p = 1.0 / (smooth * denom);
    }
    log_prec_sum += std::log(p);
  }
  double bp = 1.0;
  if (hyp_len == 0) {
    bp = 0.0;
  } else if (hyp_len < ref_len) {
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  }
  return 100.0 * bp * std::exp(log_prec_sum / static_cast<double>(orders));
}

namespace {

// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

double reg_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_two_sided_p(double t, std::int64_t df) {
  if (df < 1) throw InsufficientData("t distribution needs df >= 1");
  const double v = static_cast<double>(df);
  const double x = v / (v + t * t);
  return reg_incomplete_beta(v / 2.0, 0.5, x);
}

TTestResult paired_t_test(const std::vector<double>& diffs) {
  const std::size_t n = diffs.size();
  if (n < 2) throw InsufficientSamples("paired t-test needs n >= 2");
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diffs) {
    const double c = d - mean;
    ss += c * c;
  }
  if (ss == 0.0)
    throw DegenerateVariance("all paired differences are identical");
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult result;
  result.df = static_cast<std::int64_t>(n) - 1;
  result.mean_diff = mean;
  result.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  result.p = student_t_two_sided_p(result.t, result.df);
  if (result.p < 1e-12) {
    result.p = 1e-12;
    result.p_clamped = true;
  }
  return result;
}

std::vector<ScoreRecord> evaluate_system(const TranslationSystem& system,
                                         const EvalSet& eval_set,
                                         const DecodeConfig& decode_cfg,
                                         const std::vector<std::string>& metrics,
                                         const EvalContext& ctx,
                                         const ChrfConfig& chrf_cfg,
                                         const BleuConfig& bleu_cfg) {
  if (eval_set.pairs.empty()) throw EmptyEvalSet("evaluation set is empty");
  const std::size_t n = eval_set.pairs.size();
  std::vector<std::string> hyps(n), refs(n);
  parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t i) {
    const auto& [src, ref] = eval_set.pairs[static_cast<std::size_t>(i)];
    hyps[static_cast<std::size_t>(i)] =
        system.translate(src, eval_set.direction, decode_cfg, i);
    refs[static_cast<std::size_t>(i)] = ref;
  });
  std::vector<ScoreRecord> records;
  for (const auto& metric : metrics) {
    ScoreRecord rec;
    rec.metric = metric;
    rec.direction = eval_set.direction;
    rec.system_id = system.id();
    rec.split = ctx.split;
    rec.round = ctx.round;
    rec.seed = ctx.seed;
    if (metric == "chrf") {
      rec.value = chrf_corpus(hyps, refs, chrf_cfg);
    } else if (metric == "bleu") {
      rec.value = bleu_corpus(hyps, refs, bleu_cfg);
    } else {
      throw InvalidConfig("unknown metric '" + metric + "'");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace btel
