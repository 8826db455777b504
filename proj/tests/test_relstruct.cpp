#include <gtest/gtest.h>

#include <random>

#include "exch/relstruct.hpp"

using namespace exch;

namespace {

Signature rsig() { return Signature({{"R", 2}}); }

Structure equivalence(const std::vector<std::vector<Element>>& blocks) {
  std::vector<Element> u;
  for (const auto& b : blocks) u.insert(u.end(), b.begin(), b.end());
  Structure s(rsig(), u);
  for (const auto& b : blocks)
    for (Element x : b)
      for (Element y : b) s.add(0, {x, y});
  return s;
}

Structure random_structure(std::mt19937& rng, const Signature& sig, std::vector<Element> u, double p) {
  Structure s(sig, u);
  std::bernoulli_distribution coin(p);
  for (std::size_t j = 0; j < sig.size(); ++j)
    for_each_tuple(s.universe(), sig[j].arity, [&](const Tuple& t) {
      if (coin(rng)) s.add(j, t);
    });
  return s;
}

// Independent check: every tuple over S agrees with its image in M.
bool embedding_oracle(const std::map<Element, Element>& phi, const Structure& s, const Structure& m) {
  for (std::size_t j = 0; j < s.signature().size(); ++j) {
    bool ok = true;
    for_each_tuple(s.universe(), s.signature()[j].arity, [&](const Tuple& t) {
      Tuple img;
      for (Element e : t) img.push_back(phi.at(e));
      if (s.holds(j, t) != m.holds(j, img)) ok = false;
    });
    if (!ok) return false;
  }
  return true;
}

}  // namespace

TEST(Relstruct, QfTypeOfEmptySetIsEmpty) {
  auto s = equivalence({{2, 3}});
  auto t = qf_type(s, {});
  EXPECT_TRUE(t.facts.empty());
  EXPECT_TRUE(t.carrier.empty());
}

TEST(Relstruct, QfTypeOfEquivalentPair) {
  auto s = equivalence({{2, 3}});
  auto t = qf_type(s, {2, 3});
  std::set<Fact> want = {{0, {2, 2}}, {0, {2, 3}}, {0, {3, 2}}, {0, {3, 3}}};
  EXPECT_EQ(t.facts, want);
}

TEST(Relstruct, QfTypeUnaryReadOff) {
  Structure m(Signature({{"P", 1}}), {1, 2, 3});
  m.add("P", {1});
  auto t = qf_type(m, {1, 2});
  std::set<Fact> want = {{0, {1}}};
  EXPECT_EQ(t.facts, want);
  EXPECT_THROW(qf_type(m, {4}), Error);
}

TEST(Relstruct, RestrictExamples) {
  auto s = equivalence({{2, 3}});
  EXPECT_EQ(restrict(s, s.universe()), s);
  auto one = restrict(s, {2});
  EXPECT_EQ(one.universe(), std::vector<Element>({2}));
  EXPECT_EQ(one.relation(0), std::set<Tuple>({{2, 2}}));
  auto none = restrict(s, {});
  EXPECT_EQ(none.size(), 0u);
  EXPECT_EQ(none.fact_count(), 0u);
  EXPECT_THROW(restrict(s, {9}), Error);
}

TEST(Relstruct, PullbackExamples) {
  auto s1 = equivalence({{2, 3}});
  EXPECT_EQ(pullback(s1, Injection::identity(s1.universe())), s1);
  auto p = pullback(s1, Injection({{1, 2}, {2, 3}}));
  EXPECT_EQ(p, equivalence({{1, 2}}));
  auto e = pullback(s1, Injection());
  EXPECT_EQ(e.size(), 0u);
  EXPECT_THROW(Injection({{1, 2}, {2, 2}}), Error);
  EXPECT_THROW(pullback(s1, Injection(std::map<Element, Element>{{1, 7}})), Error);
}

TEST(Relstruct, IsEmbeddingExamples) {
  auto m = equivalence({{1, 2}, {3}});
  auto s = restrict(m, {1, 2});
  EXPECT_TRUE(is_embedding(Injection::identity({1, 2}), s, m));
  // An R-related pair sent onto an unrelated pair.
  EXPECT_FALSE(is_embedding(Injection({{1, 1}, {2, 3}}), s, m));
  // 1 and 2 unrelated, sent onto the related pair 2~3.
  auto apart = equivalence({{1}, {2}});
  auto s1 = equivalence({{2, 3}});
  EXPECT_FALSE(is_embedding(Injection({{1, 2}, {2, 3}}), apart, s1));
  EXPECT_THROW(is_embedding(Injection(std::map<Element, Element>{{1, 1}}), s, m), Error);
}

TEST(Relstruct, EnumerateEmbeddingsExamples) {
  Structure point(rsig(), {1});
  Structure trivial(rsig(), {1, 2, 3});
  EXPECT_EQ(enumerate_embeddings(point, trivial).size(), 3u);

  auto pair = equivalence({{1, 2}});
  auto m = equivalence({{1, 2}, {3}});
  auto embs = enumerate_embeddings(pair, m);
  ASSERT_EQ(embs.size(), 2u);
  EXPECT_EQ(embs[0].image_sequence(), std::vector<Element>({1, 2}));
  EXPECT_EQ(embs[1].image_sequence(), std::vector<Element>({2, 1}));

  EXPECT_TRUE(enumerate_embeddings(trivial, point).empty());
}

TEST(Relstruct, AreIsomorphicExamples) {
  auto a = equivalence({{1, 2}, {3}});
  auto id = are_isomorphic(a, a);
  ASSERT_TRUE(id);
  EXPECT_EQ(*id, Injection::identity(a.universe()));
  EXPECT_FALSE(are_isomorphic(a, equivalence({{1, 2}})));
  auto b = equivalence({{1}, {2, 3}});
  auto iso = are_isomorphic(a, b);
  ASSERT_TRUE(iso);
  EXPECT_TRUE(is_embedding(*iso, a, b));
}

TEST(Relstruct, CanonicalForms) {
  auto a = equivalence({{1, 2}, {3}});
  auto b = equivalence({{1}, {2, 3}});
  EXPECT_EQ(labeled_form(a), labeled_form(equivalence({{1, 2}, {3}})));
  EXPECT_NE(labeled_form(a), labeled_form(b));
  EXPECT_EQ(iso_canonical_form(a), iso_canonical_form(b));
  EXPECT_NE(iso_canonical_form(a), iso_canonical_form(equivalence({{1, 2, 3}})));
  EXPECT_EQ(labeled_form(a), "universe: 1 2 3\nR 1 1\nR 1 2\nR 2 1\nR 2 2\nR 3 3\n");
}

TEST(Relstruct, TextRoundTripIsBitExact) {
  std::mt19937 rng(7);
  Signature sig({{"P", 1}, {"R", 2}, {"T", 3}});
  for (int i = 0; i < 50; ++i) {
    std::vector<Element> u;
    for (Element e = 0; e < 6; ++e)
      if (rng() % 2) u.push_back(e * 3);
    auto s = random_structure(rng, sig, u, 0.3);
    auto text = to_text(s);
    auto back = parse_structure(text, sig);
    EXPECT_EQ(back, s);
    EXPECT_EQ(to_text(back), text);
  }
  EXPECT_EQ(to_text(Structure(sig, {})), "universe:\n");
  EXPECT_THROW(parse_structure("universe: 1\nR 1\n", sig), ParseError);
  EXPECT_THROW(parse_structure("R 1 1\n", sig), ParseError);
  EXPECT_THROW(parse_structure("universe: 1\nQ 1\n", sig), ParseError);
  EXPECT_THROW(parse_structure("universe: 1\nP 2\n", sig), ParseError);
}

TEST(RelstructProperty, RestrictComposes) {
  std::mt19937 rng(11);
  Signature sig({{"P", 1}, {"R", 2}});
  for (int i = 0; i < 40; ++i) {
    auto m = random_structure(rng, sig, {1, 2, 3, 4, 5}, 0.4);
    std::vector<Element> s, t;
    for (Element e : m.universe())
      if (rng() % 3) {
        s.push_back(e);
        if (rng() % 2) t.push_back(e);
      }
    EXPECT_EQ(restrict(restrict(m, s), t), restrict(m, t));
    EXPECT_EQ(qf_type(m, s), qf_type(restrict(m, s), s));
  }
}

TEST(RelstructProperty, PullbackComposes) {
  std::mt19937 rng(13);
  Signature sig({{"P", 1}, {"R", 2}});
  for (int i = 0; i < 40; ++i) {
    auto m = random_structure(rng, sig, {1, 2, 3, 4, 5}, 0.4);
    std::vector<Element> img = m.universe();
    std::shuffle(img.begin(), img.end(), rng);
    Injection phi = Injection::from_sequences({10, 11, 12, 13}, {img[0], img[1], img[2], img[3]});
    Injection psi = Injection::from_sequences({20, 21}, {12, 10});
    EXPECT_EQ(pullback(m, phi.compose(psi)), pullback(pullback(m, phi), psi));
  }
}

TEST(RelstructProperty, TypesDetermineStructure) {
  std::mt19937 rng(17);
  Signature sig({{"R", 2}});
  for (int i = 0; i < 20; ++i) {
    auto m = random_structure(rng, sig, {1, 2, 3}, 0.5);
    Structure rebuilt(sig, m.universe());
    for (Element a : m.universe())
      for (Element b : m.universe())
        for (const auto& f : qf_type(m, {a, b}).facts) rebuilt.add(f.symbol, f.args);
    EXPECT_EQ(rebuilt, m);
  }
}

TEST(RelstructProperty, EmbeddingsMatchBruteForce) {
  std::mt19937 rng(19);
  Signature sig({{"P", 1}, {"R", 2}});
  for (int i = 0; i < 30; ++i) {
    auto m = random_structure(rng, sig, {1, 2, 3, 4}, 0.5);
    std::vector<Element> sub = {1, 2, 3, 4};
    sub.resize(1 + rng() % 3);
    auto s = restrict(m, sub);
    // Oracle: every ordered selection of |s| distinct elements of M.
    std::vector<std::vector<Element>> want;
    std::vector<Element> mu = m.universe();
    std::vector<Element> pick;
    std::function<void()> rec = [&]() {
      if (pick.size() == s.size()) {
        std::map<Element, Element> phi;
        for (std::size_t k = 0; k < pick.size(); ++k) phi[s.universe()[k]] = pick[k];
        if (embedding_oracle(phi, s, m)) want.push_back(pick);
        return;
      }
      for (Element e : mu)
        if (std::find(pick.begin(), pick.end(), e) == pick.end()) {
          pick.push_back(e);
          rec();
          pick.pop_back();
        }
    };
    rec();
    std::vector<std::vector<Element>> got;
    for (const auto& e : enumerate_embeddings(s, m)) {
      got.push_back(e.image_sequence());
      EXPECT_TRUE(is_embedding(e, s, m));
    }
    EXPECT_EQ(got, want);
  }
}

TEST(RelstructProperty, IsoCanonicalFormIsIsomorphismInvariant) {
  std::mt19937 rng(23);
  Signature sig({{"P", 1}, {"R", 2}});
  for (int i = 0; i < 30; ++i) {
    auto a = random_structure(rng, sig, {1, 2, 3, 4}, 0.4);
    std::vector<Element> img = {5, 6, 7, 8};
    std::shuffle(img.begin(), img.end(), rng);
    auto phi = Injection::from_sequences({5, 6, 7, 8}, img);
    // b is a relabeled copy of a: b = a pulled back along a bijection.
    auto to_a = Injection::from_sequences({5, 6, 7, 8}, {1, 2, 3, 4}).compose(phi);
    auto b = pullback(a, to_a);
    EXPECT_EQ(iso_canonical_form(a), iso_canonical_form(b));
    EXPECT_TRUE(are_isomorphic(b, a).has_value());
  }
}
