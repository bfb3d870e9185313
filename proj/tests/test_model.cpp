// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "btel/model.hpp"
#include "support/fd_oracle.hpp"

using namespace btel;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_context = 16;
  cfg.vocab_size = 24;
  cfg.init_seed = seed;
  return cfg;
}

TokenSeq random_tokens(const ModelConfig& cfg, int n, std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq out;
  for (int i = 0; i < n; ++i)
    out.push_back(static_cast<TokenId>(
        rng.uniform_index(static_cast<std::uint64_t>(cfg.vocab_size))));
  return out;
}

// Max relative disagreement between analytic gradients and the central
// finite-difference oracle, the whole network instantiated in binary64.
double gradcheck_max_rel_err(const ModelConfig& cfg, int seq_len,
                             std::uint64_t seed, double epsilon = 1e-3) {
  ParamBuffer<double> params;
  init_params(cfg, params);
  const TokenSeq inputs = random_tokens(cfg, seq_len, seed);
  const TokenSeq targets = random_tokens(cfg, seq_len, seed + 1);
  LossMask mask(static_cast<std::size_t>(seq_len), 1);
  mask[0] = 0;  // keep at least one masked and one unmasked position

  Activations<double> acts;
  std::vector<double> dlogits;
  forward(cfg, params, inputs, acts);
  masked_nll(cfg, acts.logits, targets, mask, &dlogits);
  ParamBuffer<double> grads;
  grads.data.assign(param_count(cfg), 0.0);
  backward(cfg, params, acts, inputs, dlogits, grads);

  auto loss_at = [&](ParamBuffer<double>& p) {
    Activations<double> a;
    forward(cfg, p, inputs, a);
    return masked_nll(cfg, a.logits, targets, mask, nullptr);
  };
  double max_rel = 0.0;
  for (std::size_t i = 0; i < params.data.size(); ++i) {
    const double saved = params.data[i];
    const double fd = btel_test::fd_gradient(
        [&](double x) {
          params.data[i] = x;
          const double loss = loss_at(params);
          params.data[i] = saved;
          return loss;
        },
        saved, epsilon);
    max_rel = std::max(max_rel, btel_test::guarded_rel_err(grads.data[i], fd));
  }
  return max_rel;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.head_dim() == 8);
  cfg.d_model = 65;
  cfg.n_heads = 4;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
  cfg = tiny_config();
  cfg.vocab_size = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
}

TEST_CASE("initialization is deterministic and scaled") {
  const ModelConfig cfg = tiny_config(7);
  ParamBuffer<float> p1, p2;
  init_params(cfg, p1);
  init_params(cfg, p2);
  CHECK(p1.data == p2.data);
  CHECK(p1.data.size() == param_count(cfg));

  ModelConfig other = cfg;
  other.init_seed = 8;
  ParamBuffer<float> p3;
  init_params(other, p3);
  CHECK(p1.data != p3.data);

  // layernorm gains start at one, biases at zero
  for (const auto& t : tensor_layout(cfg)) {
    if (t.name.find("ln") == std::string::npos) continue;
    const float expect = t.name.back() == 'g' ? 1.0f : 0.0f;
    for (std::size_t i = 0; i < t.size(); ++i)
      CHECK(p1.data[t.offset + i] == expect);
  }
}

TEST_CASE("forward logits") {
  const ModelConfig cfg = tiny_config(3);
  ParamBuffer<float> params;
  init_params(cfg, params);
  const TokenSeq tokens = random_tokens(cfg, 10, 77);
  Activations<float> acts;
  forward(cfg, params, tokens, acts);
  CHECK(acts.logits.size() ==
        static_cast<std::size_t>(10) * static_cast<std::size_t>(cfg.vocab_size));
  for (float v : acts.logits) CHECK(std::isfinite(v));

  SUBCASE("empty input is rejected") {
    CHECK_THROWS_AS(forward(cfg, params, TokenSeq{}, acts), ShapeMismatch);
  }
  SUBCASE("context overflow") {
    CHECK_THROWS_AS(forward(cfg, params, random_tokens(cfg, 17, 1), acts),
                    ContextOverflow);
  }
  SUBCASE("causality: suffix perturbation leaves prefix logits unchanged") {
    Activations<float> base, perturbed;
    forward(cfg, params, tokens, base);
    TokenSeq changed = tokens;
    changed[7] = (changed[7] + 1) % cfg.vocab_size;
    forward(cfg, params, changed, perturbed);
    for (int t = 0; t < 7; ++t)
      for (int v = 0; v < cfg.vocab_size; ++v) {
        const std::size_t idx =
            static_cast<std::size_t>(t) * cfg.vocab_size + v;
        CHECK(base.logits[idx] == perturbed.logits[idx]);
      }
  }
  SUBCASE("appending a token leaves earlier logits bit-identical") {
    Activations<float> shorter, longer;
    TokenSeq extended = tokens;
    extended.push_back(3);
    forward(cfg, params, tokens, shorter);
    forward(cfg, params, extended, longer);
    for (std::size_t i = 0; i < shorter.logits.size(); ++i)
      CHECK(shorter.logits[i] == longer.logits[i]);
  }
  SUBCASE("incremental decoding matches the full forward pass bit-exactly") {
    KvCache<float> cache;
    cache.reset(cfg);
    std::vector<float> step_logits;
    for (std::size_t t = 0; t < tokens.size(); ++t)
      forward_next(cfg, params, cache, tokens[t], step_logits);
    const std::size_t last = (tokens.size() - 1) *
                             static_cast<std::size_t>(cfg.vocab_size);
    for (int v = 0; v < cfg.vocab_size; ++v)
      CHECK(step_logits[static_cast<std::size_t>(v)] ==
            acts.logits[last + static_cast<std::size_t>(v)]);
  }
}

TEST_CASE("masked negative log likelihood") {
  const ModelConfig cfg = [] {
    ModelConfig c = tiny_config();
    c.vocab_size = 8;
    return c;
  }();

  SUBCASE("uniform logits, one unmasked position") {
    std::vector<float> logits(8, 0.25f);  // any constant row is uniform
    const TokenSeq targets = {5};
    const LossMask mask = {1};
    const double loss = masked_nll(cfg, logits, targets, mask, nullptr);
    CHECK(loss == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  }
  SUBCASE("all positions masked") {
    std::vector<float> logits(16, 0.0f);
    CHECK_THROWS_AS(
        masked_nll(cfg, logits, TokenSeq{1, 2}, LossMask{0, 0}, nullptr),
        EmptyLossMask);
  }
  SUBCASE("mask length must match targets") {
    std::vector<float> logits(8, 0.0f);
    CHECK_THROWS_AS(masked_nll(cfg, logits, TokenSeq{1}, LossMask{1, 0}, nullptr),
                    ShapeMismatch);
  }
  SUBCASE("gradient against finite differences on the logits") {
    Rng rng(9);
    const int t_len = 5;
    std::vector<double> logits(static_cast<std::size_t>(t_len) * 8);
    for (auto& v : logits) v = rng.gaussian();
    const TokenSeq targets = {1, 7, 0, 3, 3};
    const LossMask mask = {1, 0, 1, 1, 0};
    std::vector<double> dlogits;
    ModelConfig dcfg = cfg;
    masked_nll(dcfg, logits, targets, mask, &dlogits);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double eps = 1e-3;
      const double saved = logits[i];
      logits[i] = saved + eps;
      const double lp = masked_nll(dcfg, logits, targets, mask, nullptr);
      logits[i] = saved - eps;
      const double lm = masked_nll(dcfg, logits, targets, mask, nullptr);
      logits[i] = saved;
      const double fd = (lp - lm) / (2 * eps);
      const double denom = std::max({std::fabs(fd), std::fabs(dlogits[i]), 1e-8});
      CHECK(std::fabs(fd - dlogits[i]) / denom < 1e-4);
    }
  }
  SUBCASE("changing targets at masked positions changes nothing") {
    Rng rng(10);
    std::vector<float> logits(24);
    for (auto& v : logits) v = static_cast<float>(rng.gaussian());
    const LossMask mask = {1, 0, 1};
    TokenSeq targets = {1, 2, 3};
    std::vector<double> d1, d2;
    const double l1 = masked_nll(cfg, logits, targets, mask, &d1);
    targets[1] = 7;
    const double l2 = masked_nll(cfg, logits, targets, mask, &d2);
    CHECK(l1 == l2);
    CHECK(d1 == d2);
  }
}

TEST_CASE("analytic gradients match finite differences (binary64)") {
  const double err1 = gradcheck_max_rel_err(tiny_config(21), 12, 501);
  CHECK(err1 < 1e-4);
  ModelConfig wide = tiny_config(22);
  wide.n_layers = 1;
  wide.d_model = 8;
  wide.n_heads = 2;
  wide.d_ff = 16;
  wide.vocab_size = 12;
  const double err2 = gradcheck_max_rel_err(wide, 9, 502);
  CHECK(err2 < 1e-4);
}

TEST_CASE("learning-rate schedule") {
  const LrSchedule sched{4e-6, {2000, 4000}};
  CHECK(sched.lr_at(0) == doctest::Approx(4e-6).epsilon(1e-12));
  CHECK(sched.lr_at(1999) == doctest::Approx(4e-6).epsilon(1e-12));
  CHECK(sched.lr_at(2000) == doctest::Approx(2e-6).epsilon(1e-12));
  CHECK(sched.lr_at(3999) == doctest::Approx(2e-6).epsilon(1e-12));
  CHECK(sched.lr_at(4000) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(sched.lr_at(1000000) == doctest::Approx(1e-6).epsilon(1e-12));

  LrSchedule bad{1e-3, {10, 10}};
  CHECK_THROWS_AS(bad.validate(), InvalidConfig);
}

TEST_CASE("adam step") {
  SUBCASE("single scalar matches the hand-computed update") {
    ParamBuffer<float> p;
    p.data = {1.0f};
    AdamState<float> opt;
    opt.reset(1);
    ParamBuffer<double> g;
    g.data = {0.5};
    const LrSchedule sched{1e-2, {}};
    adam_step(p, opt, g, sched);
    // From zero moments: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    const double expect = 1.0 - 1e-2 * 0.5 / (0.5 + 1e-8);
    CHECK(p.data[0] == doctest::Approx(expect).epsilon(1e-7));
    CHECK(opt.step_count == 1);
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    const ModelConfig cfg = tiny_config(4);
    Model model = make_model(cfg, 0);
    const auto before = model.params.data;
    ParamBuffer<double> g;
    g.data.assign(param_count(cfg), 0.0);
    adam_step(model.params, model.opt, g, LrSchedule{1e-3, {}});
    CHECK(model.params.data == before);
    CHECK(model.opt.step_count == 1);
  }
  SUBCASE("non-finite gradients are rejected") {
    ParamBuffer<float> p;
    p.data = {1.0f};
    AdamState<float> opt;
    opt.reset(1);
    ParamBuffer<double> g;
    g.data = {std::nan("")};
    CHECK_THROWS_AS(adam_step(p, opt, g, LrSchedule{1e-3, {}}),
                    NonFiniteGradient);
  }
  SUBCASE("shape mismatch") {
    ParamBuffer<float> p;
    p.data = {1.0f, 2.0f};
    AdamState<float> opt;
    opt.reset(2);
    ParamBuffer<double> g;
    g.data = {0.1};
    CHECK_THROWS_AS(adam_step(p, opt, g, LrSchedule{1e-3, {}}), ShapeMismatch);
  }
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg = tiny_config(5);
  Model model = make_model(cfg, 0xabcdef);
  // give the optimizer some state
  ParamBuffer<double> g;
  g.data.assign(param_count(cfg), 0.01);
  adam_step(model.params, model.opt, g, LrSchedule{1e-3, {}});

  CheckpointMeta meta;
  meta.config = cfg;
  meta.vocab_hash = model.vocab_hash;
  meta.phase = "mixed";
  meta.step = model.opt.step_count;
  meta.seed = 99;
  const std::string path = "test_model_ckpt.bin";
  save_checkpoint(model, meta, path);
  const auto [loaded, loaded_meta] = load_checkpoint(path);
  CHECK(loaded.params.data == model.params.data);
  CHECK(loaded.opt.m == model.opt.m);
  CHECK(loaded.opt.v == model.opt.v);
  CHECK(loaded.opt.step_count == model.opt.step_count);
  CHECK(loaded.vocab_hash == model.vocab_hash);
  CHECK(loaded_meta.phase == "mixed");
  CHECK(loaded_meta.seed == 99);
  CHECK(loaded_meta.config.d_model == cfg.d_model);

  SUBCASE("corrupted magic bytes") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatVersionMismatch);
  }
  SUBCASE("truncated file") {
    std::ofstream f("test_model_short.bin", std::ios::binary | std::ios::trunc);
    f << "BTEL";
    f.close();
    CHECK_THROWS_AS(load_checkpoint("test_model_short.bin"), IoError);
    std::remove("test_model_short.bin");
  }
  std::remove(path.c_str());
}
