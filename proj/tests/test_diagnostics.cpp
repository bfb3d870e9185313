// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <set>

#include "btel/diagnostics.hpp"

using namespace btel;

namespace {

SyntheticWorld diag_world() {
  SyntheticWorldSpec spec;
  spec.base_vocab_size = 30;
  spec.min_sentence_len = 2;
  spec.max_sentence_len = 6;
  spec.grammar_seed = 15;
  spec.languages = {{"A", 1, OrderTransform::kIdentity, 0},
                    {"B", 2, OrderTransform::kReverse, 0}};
  return SyntheticWorld::build(spec);
}

}  // namespace

TEST_CASE("copying rate") {
  using Pairs = std::vector<std::pair<std::string, std::string>>;
  CHECK(copying_rate(Pairs{{"a b", "a b"}, {"c", "c"}}) == 1.0);
  CHECK(copying_rate(Pairs{{"a b", "b a"}, {"c", "d"}}) == 0.0);
  Pairs half;
  for (int i = 0; i < 5; ++i) half.push_back({"x y", "x y"});
  for (int i = 0; i < 5; ++i) half.push_back({"x y", "y x"});
  CHECK(copying_rate(half) == 0.5);
  // whitespace-normalized comparison
  CHECK(copying_rate(Pairs{{"a  b", " a b "}}) == 1.0);
  CHECK_THROWS_AS(copying_rate({}), EmptyInput);
}

TEST_CASE("constancy score") {
  SUBCASE("identical outputs") {
    const auto [constancy, distinct] =
        constancy_score({"same words", "same words", "same words", "same words"});
    CHECK(constancy == 1.0);
    CHECK(distinct == doctest::Approx(0.25));
  }
  SUBCASE("identical empty outputs still count as constant") {
    const auto [constancy, distinct] = constancy_score({"", "", ""});
    CHECK(constancy == 1.0);
    CHECK(distinct == doctest::Approx(1.0 / 3));
  }
  SUBCASE("character-disjoint outputs") {
    const auto [constancy, distinct] = constancy_score({"aaa", "bbb", "ccc"});
    CHECK(constancy == 0.0);
    CHECK(distinct == 1.0);
  }
  SUBCASE("permutation invariance") {
    const std::vector<std::string> outputs = {"ka ru", "mi to", "ka ru", "zuv"};
    std::vector<std::string> shuffled = {"zuv", "ka ru", "mi to", "ka ru"};
    const auto a = constancy_score(outputs);
    const auto b = constancy_score(shuffled);
    CHECK(a.first == doctest::Approx(b.first).epsilon(1e-12));
    CHECK(a.second == doctest::Approx(b.second).epsilon(1e-12));
  }
  SUBCASE("oracle outputs of distinct inputs stay distinct") {
    const SyntheticWorld world = diag_world();
    const auto corpus = world.sample_monolingual("A", 100, Split::kTrain, 31);
    std::vector<std::string> outputs;
    std::set<std::string> distinct_inputs;
    for (const auto& s : corpus.sentences) {
      if (!distinct_inputs.insert(s).second) continue;
      outputs.push_back(world.oracle_translate(s, "A", "B"));
    }
    const auto [constancy, distinct] = constancy_score(outputs);
    CHECK(distinct == 1.0);
    CHECK(constancy < 0.9);
  }
  SUBCASE("needs at least two outputs") {
    CHECK_THROWS_AS(constancy_score({"only one"}), InsufficientSamples);
  }
}

TEST_CASE("target language rate") {
  const SyntheticWorld world = diag_world();
  const auto& va = world.surface_vocab("A");
  const auto& vb = world.surface_vocab("B");

  CHECK(target_language_rate({vb[0] + " " + vb[1]}, world, "B") == 1.0);
  CHECK(target_language_rate({va[0] + " " + va[1]}, world, "B") == 0.0);
  CHECK(target_language_rate({va[0] + " " + vb[0]}, world, "B") == 0.5);
  CHECK(target_language_rate({""}, world, "B") == 0.0);
  // detokenized specials are excluded from the count
  CHECK(target_language_rate({vb[0] + " <unk>"}, world, "B") == 1.0);
  CHECK_THROWS_AS(target_language_rate({"x"}, world, "Z"), UnknownLanguage);

  SUBCASE("oracle translations always land in the target language") {
    const auto corpus = world.sample_monolingual("A", 40, Split::kTrain, 3);
    std::vector<std::string> outputs;
    for (const auto& s : corpus.sentences)
      outputs.push_back(world.oracle_translate(s, "A", "B"));
    CHECK(target_language_rate(outputs, world, "B") == 1.0);
  }
}

TEST_CASE("collapse report") {
  const SyntheticWorld world = diag_world();
  DecodeConfig cfg;
  const Direction dir{"A", "B"};

  SUBCASE("identity stub") {
    const CollapseReport rep =
        collapse_report(IdentityStubSystem{}, world, dir, 50, cfg, 7);
    CHECK(rep.copying_rate >= 0.99);
    CHECK(rep.target_language_rate == 0.0);
    CHECK(rep.sample_size == 50);
  }
  SUBCASE("constant stub") {
    const std::string constant = world.surface_vocab("B")[3];
    const CollapseReport rep =
        collapse_report(ConstantStubSystem{constant}, world, dir, 50, cfg, 7);
    CHECK(rep.distinct_output_ratio == doctest::Approx(1.0 / 50));
    CHECK(rep.constancy_score == 1.0);
    CHECK(rep.copying_rate == 0.0);
  }
  SUBCASE("oracle stub") {
    const CollapseReport rep =
        collapse_report(OracleStubSystem{world}, world, dir, 50, cfg, 7);
    CHECK(rep.copying_rate == 0.0);
    CHECK(rep.target_language_rate == 1.0);
    CHECK(rep.distinct_output_ratio > 0.9);
  }
  SUBCASE("needs at least two samples") {
    CHECK_THROWS_AS(collapse_report(IdentityStubSystem{}, world, dir, 1, cfg, 7),
                    InsufficientSamples);
  }
}
