#include <gtest/gtest.h>

#include "exch/sampler.hpp"
#include "fixtures.hpp"

using namespace exch;
using namespace exch::testing;

namespace {

Structure blocks(const ClassPtr& k, const std::vector<std::vector<Element>>& b) {
  return partition_structure(k->signature(), b);
}

Rational both_in(const ExactTable& t, Element x, Element y) {
  return exact_probability(t, rules::unary_p(), {{0, {x}}, {0, {y}}});
}

}  // namespace

TEST(Sampler, ClasscoinIsConstantOnClasses) {
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3, 4}});
  auto f = rules::classcoin();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto out = sample_structure(*k, s, f, seed);
    EXPECT_EQ(out.holds(0, {1}), out.holds(0, {2}));
    EXPECT_EQ(out.holds(0, {3}), out.holds(0, {4}));
  }
}

TEST(Sampler, TwoclassPickChoosesExactlyOneClass) {
  auto k = equiv2_class();
  auto s = blocks(k, {{1, 3}, {2}});
  auto f = rules::twoclass_pick();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto out = sample_structure(*k, s, f, seed);
    EXPECT_EQ(out.holds(0, {1}), out.holds(0, {3}));
    EXPECT_NE(out.holds(0, {1}), out.holds(0, {2}));
  }
}

TEST(Sampler, ConstantEmptyAndErrors) {
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3}});
  EXPECT_EQ(sample_structure(*k, s, rules::constant_empty(), 5).fact_count(), 0u);
  EXPECT_THROW(builtin_rule("nope"), Error);
  EXPECT_THROW(builtin_rule("failed_rep:y:le:1/2"), Error);
  // twoclass_pick needs a finite-count eqrel.
  EXPECT_THROW(sample_structure(*k, s, rules::twoclass_pick(), 1), Error);
  // Non-members are rejected.
  Structure bad(k->signature(), {1, 2});
  bad.add(0, {1, 2});
  EXPECT_THROW(sample_structure(*k, bad, rules::classcoin(), 1), Error);
  for (const auto& n : rules::names()) EXPECT_EQ(builtin_rule(n).name, n);
}

TEST(Sampler, DeterministicGivenSeed) {
  auto k = two_indep_class();
  Structure s(k->signature(), {1, 2, 3});
  for (Element x : {1u, 2u, 3u}) s.add(0, {x, x}), s.add(1, {x, x});
  s.add(0, {1, 2});
  s.add(0, {2, 1});
  auto f = rules::ap_array();
  EXPECT_EQ(to_text(sample_structure(*k, s, f, 11)), to_text(sample_structure(*k, s, f, 11)));
  EXPECT_NE(to_text(sample_structure(*k, s, f, 11)), to_text(sample_structure(*k, s, f, 12)));
}

TEST(Sampler, MarginalMatchesRestriction) {
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3}});
  auto f = rules::classcoin();
  EXPECT_TRUE(sample_marginal(*k, s, f, 3, {}).facts.empty());
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto full = sample_structure(*k, s, f, seed);
    EXPECT_EQ(sample_marginal(*k, s, f, seed, {1, 3}), qf_type(full, {1, 3}));
  }
}

TEST(Sampler, RestrictionCoherenceWhenLeastAnchorsSurvive) {
  // Keeping 1 and 3 keeps the least anchor of both classes.
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3, 4}});
  auto sub = restrict(s, {1, 3, 4});
  for (auto f : {rules::classcoin(), rules::ap_array()})
    for (std::uint64_t seed = 0; seed < 50; ++seed)
      EXPECT_EQ(restrict(sample_structure(*k, s, f, seed), {1, 3, 4}), sample_structure(*k, sub, f, seed));
}

TEST(Sampler, ClasscoinFrequencyOverSeeds) {
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}});
  SamplePlan plan(*k, s, rules::classcoin());
  RandomnessSource base(2024);
  int all_in = 0, mixed = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto out = plan.draw(base.derive("seed", i));
    const bool a = out.holds(0, {1}), b = out.holds(0, {2});
    all_in += a && b;
    mixed += a != b;
  }
  EXPECT_EQ(mixed, 0);
  // sd of the frequency is 1/(2 sqrt n) ~ 0.0016.
  EXPECT_NEAR(static_cast<double>(all_in) / n, 0.5, 0.01);
}

TEST(SamplerExact, ClasscoinSingleClass) {
  auto k = equiv_class();
  auto t = exact_distribution(*k, blocks(k, {{1, 2}}), rules::classcoin());
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("universe: 1 2\nP 1\nP 2\n"), Rational(1, 2));
  EXPECT_EQ(t.at("universe: 1 2\n"), Rational(1, 2));
}

TEST(SamplerExact, ClasscoinPairFacts) {
  auto k = equiv_class();
  auto t = exact_distribution(*k, blocks(k, {{1, 2}, {3}}), rules::classcoin());
  EXPECT_EQ(both_in(t, 1, 2), Rational(1, 2));
  EXPECT_EQ(both_in(t, 1, 3), Rational(1, 4));
  Rational total = 0;
  for (const auto& [s, p] : t) total += p;
  EXPECT_EQ(total, 1);
}

TEST(SamplerExact, TwoclassPickEachClassHalf) {
  auto k = equiv2_class();
  auto t = exact_distribution(*k, blocks(k, {{1, 2}, {3}}), rules::twoclass_pick());
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("universe: 1 2 3\nP 1\nP 2\n"), Rational(1, 2));
  EXPECT_EQ(t.at("universe: 1 2 3\nP 3\n"), Rational(1, 2));
}

TEST(SamplerExact, ConstantRuleIsPointMass) {
  auto k = equiv_class();
  auto t = exact_distribution(*k, blocks(k, {{1}, {2}}), rules::constant_empty());
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.begin()->second, 1);
  EXPECT_THROW(exact_distribution(*k, blocks(k, {{1}}), rules::ap_array()), Error);
}

TEST(SamplerExact, FailedRepCannotSeparateSameAndCrossClass) {
  // With one threshold on ξ_∅ or ξ_x, the probability that a pair is in P
  // does not depend on whether the pair shares a class.
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3}});
  for (auto c : {rules::Coordinate::Empty, rules::Coordinate::Element})
    for (bool le : {true, false})
      for (int num = 0; num <= 16; ++num) {
        auto t = exact_distribution(*k, s, rules::failed_rep(c, le, Rational(num, 16)));
        EXPECT_EQ(both_in(t, 1, 2), both_in(t, 1, 3));
        EXPECT_FALSE(both_in(t, 1, 2) == Rational(1, 2) && both_in(t, 1, 3) == Rational(1, 4));
      }
  EXPECT_THROW(rules::failed_rep(rules::Coordinate::Empty, true, Rational(1, 3)), Error);
}

TEST(SamplerEqSym, TwoclassPickIsSymmetric) {
  auto k = equiv2_class();
  auto s = blocks(k, {{1}, {2}});
  auto r = check_eq_symmetry_exact(*k, s, rules::twoclass_pick());
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.exact_tv, 0);
  EXPECT_EQ(r.labelings, 2u);
}

TEST(SamplerEqSym, TwoclassPickBadFails) {
  auto k = equiv2_class();
  auto s = blocks(k, {{1}, {2}});
  auto r = check_eq_symmetry_exact(*k, s, rules::twoclass_pick_bad());
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.exact_tv, Rational(1, 2));
}

TEST(SamplerEqSym, VacuousWithoutFiniteCounts) {
  auto k = equiv_class();
  auto r = check_eq_symmetry_exact(*k, blocks(k, {{1}, {2}}), rules::classcoin());
  EXPECT_TRUE(r.pass);
  EXPECT_TRUE(r.vacuous);
}

TEST(SamplerEqSym, MonteCarloAgreesWithExact) {
  auto k = equiv2_class();
  auto s = blocks(k, {{1}, {2}});
  MonteCarloOptions opt;
  opt.samples = 20000;
  EXPECT_TRUE(check_eq_symmetry_mc(*k, s, rules::twoclass_pick(), 5, opt).pass);
  auto bad = check_eq_symmetry_mc(*k, s, rules::twoclass_pick_bad(), 5, opt);
  EXPECT_FALSE(bad.pass);
  EXPECT_NEAR(bad.tv, 0.5, 0.02);
}

TEST(SamplerExch, ClasscoinPassesPinFirstFails) {
  auto k = equiv_class();
  MonteCarloOptions opt;
  opt.samples = 20000;
  opt.tv_threshold = 0.03;
  auto good = check_exchangeability(*k, rules::classcoin(), 2, 8, opt);
  EXPECT_TRUE(good.pass) << good.worst_tv << " " << good.min_p_adjusted;
  EXPECT_GT(good.comparisons, 0u);
  auto bad = check_exchangeability(*k, rules::pin_first(), 2, 8, opt);
  EXPECT_FALSE(bad.pass);
  EXPECT_GE(bad.worst_tv, 0.1);
}

TEST(SamplerExch, BlurOnlyRulesPassAtOneElement) {
  MonteCarloOptions opt;
  opt.samples = 20000;
  EXPECT_TRUE(check_exchangeability(*equiv_class(), rules::classcoin(), 1, 4, opt).pass);
  for (auto k : {two_indep_class(), two_nested_class()})
    EXPECT_TRUE(check_exchangeability(*k, rules::two_eq_demo(), 1, 4, opt).pass) << k->describe();
}

TEST(SamplerExch, ThreadCountDoesNotChangeResult) {
  auto k = equiv_class();
  MonteCarloOptions one, four;
  one.samples = four.samples = 5000;
  four.threads = 4;
  auto a = check_exchangeability(*k, rules::classcoin(), 2, 3, one);
  auto b = check_exchangeability(*k, rules::classcoin(), 2, 3, four);
  EXPECT_EQ(a.worst_tv, b.worst_tv);
  EXPECT_EQ(a.min_p, b.min_p);
}

TEST(SamplerProperty, EqSymmetryInvariantUnderLabelPermutation) {
  // Swapping labels 1 and 2 in every conditional table permutes the tables,
  // so the worst TV is unchanged; check directly on each labeling pair.
  auto k = equiv2_class();
  for (const auto& s : enumerate(*k, 3)) {
    for (auto f : {rules::twoclass_pick(), rules::twoclass_pick_bad()}) {
      SamplePlan plan(*k, s, f);
      const auto all = exact_distribution(plan);
      for (auto lab : all_labelings(plan)) {
        auto swapped = lab;
        for (auto& m : swapped)
          for (auto& [t, v] : m) v = 3 - v;
        EXPECT_EQ(exact_tv(exact_distribution(plan, &lab), all), exact_tv(exact_distribution(plan, &swapped), all));
      }
    }
  }
}

TEST(SamplerProperty, OrderingsAreConsistentAcrossAtoms) {
  // A rule that reads the ordering of the pair {x,y} puts (x,y) in E iff x
  // precedes y; exactly one of (x,y),(y,x) must hold.
  TypeRule f;
  f.name = "order_edge";
  f.target = Signature({{"E", 2}});
  f.uses_orderings = true;
  f.decide = [](const RuleQuery& q) {
    if (q.tuple[0] == q.tuple[1]) return false;
    return q.subset_order(q.tuple).front() == q.tuple[0];
  };
  f.cutpoints = [](const RuleQuery&, std::size_t) { return std::vector<Rational>{}; };
  auto k = equiv_class();
  auto s = blocks(k, {{1, 2}, {3}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto out = sample_structure(*k, s, f, seed);
    for (Element x = 1; x <= 3; ++x)
      for (Element y = x + 1; y <= 3; ++y) EXPECT_NE(out.holds(0, {x, y}), out.holds(0, {y, x}));
  }
  // The three pair orderings are independent: 8 tournaments, each 1/8.
  auto t = exact_distribution(*k, s, f);
  EXPECT_EQ(t.size(), 8u);
  for (const auto& [o, p] : t) EXPECT_EQ(p, Rational(1, 8)) << o;
}
