#include <gtest/gtest.h>

#include <set>

#include "exch/amalgam.hpp"
#include "exch/eliminate.hpp"
#include "fixtures.hpp"

using namespace exch;
using namespace exch::testing;

namespace {

Structure blocks(const ClassPtr& k, const std::vector<std::vector<Element>>& b) {
  return partition_structure(k->signature(), b);
}

const char* kDomainSpec = R"(
signature { V/1; R/2; Q/2; }
constraint forall x : V(x) -> R(x,x);
constraint forall x,y : R(x,y) -> V(x) & V(y) & R(y,x);
constraint forall x,y,z : R(x,y) & R(y,z) -> R(x,z);
eqrel r1 { domain V; relation R; length 1; star trivial; count inf; }
)";

ClassPtr spec_class(const std::string& text) { return make_class(parse_spec(text), "inline"); }

// equiv plus a unary U: free (0), constant everywhere (1) or constant on R-classes (2).
ClassPtr equiv_with_unary(int mode) {
  std::string text = "signature { R/2; U/1; }\n"
                     "constraint forall x : R(x,x);\n"
                     "constraint forall x,y : R(x,y) -> R(y,x);\n"
                     "constraint forall x,y,z : R(x,y) & R(y,z) -> R(x,z);\n";
  if (mode == 1) text += "constraint forall x,y : U(x) <-> U(y);\n";
  if (mode == 2) text += "constraint forall x,y : R(x,y) -> (U(x) <-> U(y));\n";
  text += "eqrel r1 { domain all; relation R; length 1; star trivial; count inf; }\n";
  return spec_class(text);
}

}  // namespace

// ---------------------------------------------------------------------------
// Finite case.

TEST(ElimFin, ExpandReductRoundTrip) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  EXPECT_EQ(fe->v, 2);
  EXPECT_TRUE(fe->cls->eqrels().empty());
  for (const auto& s : enumerate_upto(*k, 4, false)) {
    const auto cls = eq_classes(s, fe->decl);
    // Every injective labeling of the classes.
    std::vector<int> labs(cls.size());
    for (std::size_t i = 0; i < labs.size(); ++i) labs[i] = static_cast<int>(i + 1);
    do {
      std::map<Tuple, int> eta;
      for (std::size_t i = 0; i < cls.size(); ++i)
        for (const auto& t : cls[i]) eta[t] = labs[i];
      Structure sp = expand_fin(*fe, s, eta);
      EXPECT_TRUE(fe->cls->contains(sp)) << to_text(sp);
      EXPECT_EQ(reduct_fin(*fe, sp), s);
      EXPECT_EQ(labeling_of(*fe, sp), eta);
    } while (std::next_permutation(labs.begin(), labs.end()));
  }
}

TEST(ElimFin, MembersOfExpandedClassAreExpansions) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  for (const auto& sp : enumerate_upto(*fe->cls, 3, false)) {
    Structure s = reduct_fin(*fe, sp);
    EXPECT_TRUE(k->contains(s));
    EXPECT_EQ(expand_fin(*fe, s, labeling_of(*fe, sp)), sp);
  }
}

TEST(ElimFin, ClassRejectsBadLabelings) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  Structure s = blocks(k, {{1, 2}, {3}});
  EXPECT_THROW(expand_fin(*fe, s, {{{1}, 1}, {{2}, 2}, {{3}, 2}}), Error);  // split class
  EXPECT_THROW(expand_fin(*fe, s, {{{1}, 1}, {{2}, 1}, {{3}, 1}}), Error);  // shared label
  EXPECT_THROW(expand_fin(*fe, s, {{{1}, 1}, {{2}, 1}}), Error);            // missing
  EXPECT_THROW(expand_fin(*fe, s, {{{1}, 3}, {{2}, 3}, {{3}, 1}}), Error);  // out of range
  Structure ok = expand_fin(*fe, s, {{{1}, 1}, {{2}, 1}, {{3}, 2}});
  Structure both = ok;
  both.add(fe->preds[1], {1});
  EXPECT_FALSE(fe->cls->contains(both));
  Structure none = ok;
  none.set(fe->preds[1], {3}, false);
  EXPECT_FALSE(fe->cls->contains(none));
}

TEST(ElimFin, GenericWrapperAgreesWithSpecClass) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  FinClass generic(k, fe->sig, labeling_constraints(*fe->sig, k->eqrels(), fe->decl, fe->preds), {}, "generic");
  auto a = enumerate_upto(*fe->cls, 3, false);
  auto b = enumerate_upto(generic, 3, false);
  std::set<std::string> ta, tb;
  for (const auto& s : a) ta.insert(to_text(s));
  for (const auto& s : b) tb.insert(to_text(s));
  EXPECT_EQ(ta, tb);
  EXPECT_FALSE(ta.empty());
}

TEST(ElimFin, OnlyLastEqrelAndFiniteCount) {
  EXPECT_THROW(class_fin(equiv_class(), "r1"), Error);
  EXPECT_THROW(class_fin(two_indep_class(), "r1"), Error);
  EXPECT_THROW(class_fin(equiv2_class(), "nope"), Error);
}

TEST(ElimFin, PermuteClassesIdentityAndInvolution) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  auto g = symmetry_group(*fe);
  Structure sp = expand_fin(*fe, blocks(k, {{1, 2}, {3}}), {{{1}, 1}, {{2}, 1}, {{3}, 2}});
  const std::vector<Tuple> all{{1}, {2}, {3}};
  EXPECT_EQ(permute_classes(sp, g, {1, 2}, all), sp);
  Structure sw = permute_classes(sp, g, {2, 1}, all);
  EXPECT_NE(sw, sp);
  EXPECT_TRUE(sw.holds(fe->preds[1], {1}));
  EXPECT_TRUE(sw.holds(fe->preds[0], {3}));
  EXPECT_EQ(permute_classes(sw, g, {2, 1}, all), sp);
  EXPECT_THROW(permute_classes(sp, g, {2, 1}, {{1}}), Error);
  EXPECT_THROW(permute_classes(sp, g, {1, 1}, all), Error);
}

TEST(ElimFin, SymmetricWithin) {
  auto fe = class_fin(equiv2_class(), "r1");
  auto r = check_symmetric_within(*fe->cls, {symmetry_group(*fe)}, 3);
  EXPECT_TRUE(r.ok) << r.detail;
  EXPECT_GT(r.cases, 0u);

  // A class that prefers label 1 for the class of the least element breaks it.
  ClassSpec broken = *fe->spec;
  const auto p2 = fe->preds[1];
  broken.constraints.push_back({{"x"}, Formula::neg(Formula::atom(p2, {0}))});
  auto bad = make_class(broken, "broken");
  auto rb = check_symmetric_within(*bad, {symmetry_group(*fe)}, 3);
  EXPECT_FALSE(rb.ok);
  EXPECT_FALSE(rb.witness.empty());

  auto one = spec_class(R"(
signature { R/2; }
constraint forall x,y : R(x,y);
eqrel r1 { domain all; relation R; length 1; star trivial; count 1; }
)");
  auto fe1 = class_fin(one, "r1");
  auto rv = check_symmetric_within(*fe1->cls, {symmetry_group(*fe1)}, 3);
  EXPECT_TRUE(rv.ok);
  EXPECT_EQ(rv.cases, 0u);
  EXPECT_NE(rv.detail.find("vacuous"), std::string::npos);
}

TEST(ElimFin, LiftedRuleMatchesDirectRuleExactly) {
  auto k = equiv2_class();
  auto fe = class_fin(k, "r1");
  auto lifted = lift_rule_fin(rules::twoclass_pick_expanded(fin_pred_name("r1", 1), fin_pred_name("r1", 2)), fe);
  for (const auto& s : {blocks(k, {{1, 2}, {3}}), blocks(k, {{1}, {2, 3}}), blocks(k, {{1, 2, 3}})}) {
    SamplePlan a(*k, s, lifted), b(*k, s, rules::twoclass_pick());
    EXPECT_EQ(exact_distribution(a), exact_distribution(b)) << to_text(s);
    for (const auto& lab : all_labelings(a))
      EXPECT_EQ(exact_distribution(a, &lab), exact_distribution(b, &lab));
  }
}

// ---------------------------------------------------------------------------
// Infinite case.

TEST(ElimInf, SideTags) {
  auto ex = make_inf_expansion(spec_class(kDomainSpec), "r1");
  EXPECT_EQ(side_tag(*ex, "V"), SideTag::ElementSide);
  EXPECT_EQ(side_tag(*ex, "R"), SideTag::ClassSide);
  EXPECT_EQ(side_tag(*ex, "Q"), SideTag::Doubled);
  EXPECT_EQ(side_tag(*ex, "C"), SideTag::ClassSide);
  EXPECT_EQ(ex->sig->operator[](ex->sig->index_of("Q")).arity, 4);

  EXPECT_EQ(side_tag(*make_inf_expansion(equiv_with_unary(0), "r1"), "U"), SideTag::ElementSide);
  EXPECT_EQ(side_tag(*make_inf_expansion(equiv_with_unary(1), "r1"), "U"), SideTag::ClassSide);
  // Constant on d's classes but not on its star classes: neither equal nor orthogonal.
  EXPECT_THROW(make_inf_expansion(equiv_with_unary(2), "r1"), Error);

  auto nested = make_inf_expansion(two_nested_class(), "r2");
  EXPECT_EQ(side_tag(*nested, "R"), SideTag::ClassSide);
  EXPECT_EQ(nested->eqrels.size(), 1u);
  EXPECT_EQ(nested->eqrels[0].domain, std::optional<std::string>("C"));
  auto indep = make_inf_expansion(two_indep_class(), "r2");
  EXPECT_EQ(side_tag(*indep, "R"), SideTag::ElementSide);
  EXPECT_TRUE(indep->eqrels[0].domain_complement);
}

TEST(ElimInf, UndeterminedSideNeedsDeclaration) {
  const std::string base = R"(
signature { R/2; S/2; U/1; }
constraint forall x : R(x,x) & S(x,x);
constraint forall x,y : (R(x,y) -> R(y,x)) & (S(x,y) -> S(y,x));
constraint forall x,y,z : R(x,y) & R(y,z) -> R(x,z);
constraint forall x,y,z : S(x,y) & S(y,z) -> S(x,z);
constraint forall x,y : S(x,y) -> R(x,y);
constraint forall x,y : S(x,y) -> (U(x) <-> U(y));
eqrel r1 { domain all; relation R; length 1; star trivial; count inf; }
)";
  EXPECT_THROW(make_inf_expansion(spec_class(base + "eqrel r2 { domain all; relation S; length 1; star r1; count inf; }"),
                                  "r2"),
               Error);
  auto ex = make_inf_expansion(
      spec_class(base + "eqrel r2 { domain all; relation S; length 1; star r1; count inf; side U class; }"), "r2");
  EXPECT_EQ(side_tag(*ex, "U"), SideTag::ClassSide);
  EXPECT_EQ(ex->tag_source[ex->sig->index_of("U")], "declared");
}

TEST(ElimInf, MeaningfulAndMinus) {
  auto ex = make_inf_expansion(spec_class(kDomainSpec), "r1");
  const Signature& ls = *ex->sig;
  // V = {1,2}, C = {3,4}, E = {5}.
  Structure sp(ls, {1, 2, 3, 4, 5});
  sp.add("V", {1});
  sp.add("V", {2});
  sp.add("C", {3});
  sp.add("C", {4});
  sp.add("R", {3, 3});
  sp.add("R", {4, 4});
  sp.add("Q", {1, 3, 5, 5});
  EXPECT_TRUE(is_meaningful(*ex, sp));
  EXPECT_TRUE(is_large_enough(*ex, sp));
  auto m = minus(*ex, sp);
  ASSERT_EQ(m.s.size(), 5u);
  const Element v13 = m.id_of.at({1, 3}), v24 = m.id_of.at({2, 4}), e = m.id_of.at({5, 5});
  EXPECT_TRUE(m.s.holds("V", {v13}));
  EXPECT_FALSE(m.s.holds("V", {e}));
  EXPECT_TRUE(m.s.holds("R", {v13, m.id_of.at({2, 3})}));
  EXPECT_FALSE(m.s.holds("R", {v13, v24}));
  EXPECT_TRUE(m.s.holds("Q", {v13, e}));
  EXPECT_EQ(m.s.relation("Q").size(), 1u);
  EXPECT_TRUE(ex->base->contains(m.s));

  Structure bad = sp;
  bad.add("Q", {1, 2, 5, 5});  // (1,2) is not a pair (v,c)
  EXPECT_FALSE(is_meaningful(*ex, bad));
  EXPECT_THROW(minus(*ex, bad), Error);
  Structure bad2 = sp;
  bad2.add("R", {1, 1});  // class-side relation at a V point
  EXPECT_FALSE(is_meaningful(*ex, bad2));
  Structure small(ls, {1, 5});
  small.add("V", {1});
  EXPECT_TRUE(is_meaningful(*ex, small));
  EXPECT_FALSE(is_large_enough(*ex, small));
}

TEST(ElimInf, ClassMembership) {
  auto e = class_inf(equiv_class(), "r1");
  const Signature& ls = e.cls->signature();
  Structure s(ls, {1, 2, 3});
  s.add("C", {2});
  s.add("C", {3});
  s.add("R", {2, 2});
  s.add("R", {3, 3});
  EXPECT_TRUE(e.cls->contains(s));
  Structure merged = s;
  merged.add("R", {2, 3});
  merged.add("R", {3, 2});
  EXPECT_FALSE(e.cls->contains(merged));  // distinct class points are inequivalent
  Structure at_v = s;
  at_v.add("R", {1, 1});
  EXPECT_FALSE(e.cls->contains(at_v));  // R lives on class points only
  Structure lone(ls, {1});
  EXPECT_TRUE(e.cls->contains(lone));  // extends by one class point
  Structure irreflexive(ls, {2});
  irreflexive.add("C", {2});
  EXPECT_FALSE(e.cls->contains(irreflexive));
}

TEST(ElimInf, EmbedWithClassesOverEquiv) {
  auto e = class_inf(equiv_class(), "r1");
  std::size_t n = 0;
  for (const auto& s : enumerate_upto(*e.ex->base, 4, false)) {
    auto r = embed_with_classes(*e.ex, s);
    EXPECT_TRUE(is_embedding(r.pi, s, r.minus.s)) << to_text(s);
    EXPECT_TRUE(e.ex->base->contains(r.minus.s));
    EXPECT_TRUE(e.cls->contains(r.sd)) << to_text(r.sd);
    EXPECT_EQ(r.large_enough, s.size() > 0);
    EXPECT_EQ(r.sd.size(), s.size() + eq_classes(s, e.ex->decl).size());
    ++n;
  }
  EXPECT_GT(n, 10u);
}

TEST(ElimInf, EmbedSaturatesDoubledSymbols) {
  auto ex = make_inf_expansion(spec_class(kDomainSpec), "r1");
  Structure s(ex->base->signature(), {1, 2, 3});
  for (Element x : {1, 2}) {
    s.add("V", {x});
    s.add("R", {x, x});
  }
  s.add("Q", {1, 3});
  s.add("Q", {3, 2});
  auto r = embed_with_classes(*ex, s);
  EXPECT_TRUE(is_embedding(r.pi, s, r.minus.s));
  EXPECT_EQ(r.minus.s.size(), 2u * 2u + 1u);
  EXPECT_TRUE(ex->base->contains(r.minus.s));
  auto t = dbl_structure(r.minus, r.minus.s);
  EXPECT_EQ(minus_dbl(r.minus, t), r.minus.s);
}

TEST(ElimInf, HatAndFiber) {
  auto e = class_inf(equiv_class(), "r1");
  auto k = e.ex->base;
  Structure s = blocks(k, {{1, 2}, {3}});
  auto r = embed_with_classes(*e.ex, s);
  const Element c12 = r.class_point.at(1), c3 = r.class_point.at(3);
  EXPECT_EQ(hat_blur(*e.ex, s, r, Blur{{{0, c12}}}), (Blur{{{1, 1}}}));
  EXPECT_EQ(hat_blur(*e.ex, s, r, Blur{{{0, 2}}}), (Blur{{{0, 2}}}));
  EXPECT_EQ(hat_blur(*e.ex, s, r, Blur{{{0, 2}, {0, c12}}}), (Blur{{{0, 2}}}));
  EXPECT_EQ(hat_blur(*e.ex, s, r, Blur{{{0, 2}, {0, c3}}}), (Blur{{{0, 2}, {1, 3}}}));
  auto f = fiber(*e.ex, *e.cls, s, Blur{{{0, 2}}});
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0], (Blur{{{0, 2}}}));
  EXPECT_EQ(f[1], (Blur{{{0, 2}, {0, c12}}}));
  EXPECT_EQ(fiber(*e.ex, *e.cls, s, Blur{{{1, 1}}}).size(), 1u);
  EXPECT_EQ(fiber(*e.ex, *e.cls, s, Blur{}).size(), 1u);
  // Every inner blur lies in exactly one fiber.
  std::size_t total = 0;
  for (const auto& b : blur_set(*k, s, s.universe(), true)) total += fiber(*e.ex, *e.cls, s, b).size();
  EXPECT_EQ(total, blur_set(*e.cls, r.sd, r.sd.universe(), true).size());
}

TEST(ElimInf, SplitterUniformAndIdentity) {
  RandomnessSource src(5);
  for (int i = 0; i < 200; ++i) {
    const double x = src.variate(std::to_string(i));
    EXPECT_EQ(split_variate(variate_to_bits(x), 1)[0], x);
    EXPECT_EQ(splitter(x, 1).picks.size(), 0u);
  }
  // Streams of a 3-way split are uniform and pairwise independent in quarters.
  const int n = 40000;
  std::map<std::pair<int, int>, int> cells;
  int below[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) {
    auto v = split_variate(src.variate_bits(std::to_string(i)), 3);
    for (int j = 0; j < 3; ++j) below[j] += v[j] < 0.5;
    ++cells[{static_cast<int>(v[0] * 4), static_cast<int>(v[2] * 4)}];
  }
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(below[j], n / 2, 600);
  ASSERT_EQ(cells.size(), 16u);
  for (const auto& [c, cnt] : cells) EXPECT_NEAR(cnt, n / 16, 300);
  EXPECT_THROW(split_variate(0, 0), Error);
  auto p = apply_pick(splitter(0.3, 3).picks[0], {1, 0}, 3);
  EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 3u);
}

TEST(ElimInf, LiftedClasscoinMatchesClasscoinExactly) {
  auto e = class_inf(equiv_class(), "r1");
  auto k = e.ex->base;
  auto lifted = lift_rule_inf(rules::classcoin_dbl(), e);
  EXPECT_EQ(lifted.target, rules::unary_p());
  for (const auto& s : {blocks(k, {{1, 2}, {3}}), blocks(k, {{1}, {2}, {3}}), blocks(k, {{1, 2, 3}})})
    EXPECT_EQ(exact_distribution(*k, s, lifted), exact_distribution(*k, s, rules::classcoin())) << to_text(s);
}

TEST(ElimInf, LiftedClasscoinMonteCarlo) {
  auto e = class_inf(equiv_class(), "r1");
  auto k = e.ex->base;
  Structure s = blocks(k, {{1, 2}, {3, 4}});
  auto lifted = lift_rule_inf(rules::classcoin_dbl(), e);
  SamplePlan a(*k, s, lifted), b(*k, s, rules::classcoin());
  EmpiricalDist da, db;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    da.add(to_text(a.draw(RandomnessSource(2 * i))));
    db.add(to_text(b.draw(RandomnessSource(2 * i + 1))));
  }
  EXPECT_LE(tv_distance(da, db), 0.02);
}

TEST(ElimInf, UnsupportedShapesThrow) {
  EXPECT_THROW(make_inf_expansion(equiv2_class(), "r1"), Error);
  EXPECT_THROW(make_inf_expansion(two_nested_class(), "r1"), Error);
}

TEST(ElimInf, ComplementedDomain) {
  auto comp = spec_class(R"(
signature { V/1; R/2; }
constraint forall x : !V(x) -> R(x,x);
constraint forall x,y : R(x,y) -> !V(x) & !V(y) & R(y,x);
constraint forall x,y,z : R(x,y) & R(y,z) -> R(x,z);
eqrel r1 { domain !V; relation R; length 1; star trivial; count inf; }
)");
  auto e = class_inf(comp, "r1");
  EXPECT_TRUE(e.ex->v_neg);
  std::size_t n = 0;
  for (const auto& s : enumerate_upto(*comp, 4, false)) {
    auto r = embed_with_classes(*e.ex, s);
    EXPECT_TRUE(is_embedding(r.pi, s, r.minus.s)) << to_text(s);
    EXPECT_TRUE(e.cls->contains(r.sd)) << to_text(r.sd);
    // Class points sit outside the domain, so V holds on them.
    for (const auto& [c, rep] : r.rep) EXPECT_TRUE(r.sd.holds("V", {c}));
    for (Element x : s.universe()) EXPECT_EQ(e.ex->is_v(r.sd, x), !s.holds("V", {x}));
    ++n;
  }
  EXPECT_GT(n, 10u);
  // A class point without V is not meaningful.
  Structure bad(*e.ex->sig, {1});
  bad.add((*e.ex->sig)[e.ex->c_sym].name, {1});
  EXPECT_FALSE(e.cls->contains(bad));
}

TEST(ElimPipeline, TwoIndependentInfiniteStages) {
  auto p = eliminate_all(two_indep_class());
  ASSERT_EQ(p.stages.size(), 2u);
  EXPECT_FALSE(p.stages[0].finite);
  EXPECT_FALSE(p.stages[1].finite);
  // The surviving relation moves to the element side of the first stage.
  const auto& mid = p.stages[0].after->eqrels();
  ASSERT_EQ(mid.size(), 1u);
  EXPECT_TRUE(mid[0].domain_complement);
  EXPECT_TRUE(p.terminal()->eqrels().empty());
  const auto& first = *p.stages[0].inf.ex;
  const auto& second = *p.stages[1].inf.ex;
  for (const auto& s : enumerate_upto(*first.base, 3, false)) {
    auto r1 = embed_with_classes(first, s);
    auto r2 = embed_with_classes(second, r1.sd);
    EXPECT_TRUE(is_embedding(r2.pi, r1.sd, r2.minus.s)) << to_text(s);
    EXPECT_TRUE(p.terminal()->contains(r2.sd)) << to_text(r2.sd);
  }
}

// ---------------------------------------------------------------------------
// Pipelines.

TEST(ElimPipeline, NoEqrelsIsIdentity) {
  auto k = graph_class();
  auto p = eliminate_all(k);
  EXPECT_TRUE(p.stages.empty());
  EXPECT_EQ(p.terminal(), k);
  auto f = rules::constant_empty();
  Structure s(k->signature(), {1, 2});
  EXPECT_EQ(exact_distribution(*k, s, p.lift(f)), exact_distribution(*k, s, f));
}

TEST(ElimPipeline, TerminalClassesHaveDap) {
  auto fin = eliminate_all(equiv2_class());
  ASSERT_EQ(fin.stages.size(), 1u);
  EXPECT_TRUE(fin.stages[0].finite);
  EXPECT_TRUE(fin.terminal()->eqrels().empty());
  for (std::size_t n : {3u, 4u}) EXPECT_TRUE(check_ndap(*fin.terminal(), n).holds) << n;

  auto inf = eliminate_all(equiv_class());
  ASSERT_EQ(inf.stages.size(), 1u);
  EXPECT_FALSE(inf.stages[0].finite);
  EXPECT_TRUE(check_ndap(*inf.terminal(), 3).holds);
  EXPECT_FALSE(check_ndap(*equiv_class(), 3).holds);
}

TEST(ElimPipeline, StopAtNamedEqrel) {
  auto p = eliminate_all(two_nested_class(), {}, std::string("r2"));
  ASSERT_EQ(p.stages.size(), 1u);
  EXPECT_EQ(p.terminal()->eqrels().size(), 1u);
  EXPECT_THROW(eliminate_all(two_nested_class(), {}, std::string("zz")), Error);
}
