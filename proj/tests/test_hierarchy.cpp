#include <gtest/gtest.h>

#include <set>

#include "exch/hierarchy.hpp"

using namespace exch;

namespace {

std::vector<Blur> point_blurs(const ApIndex& idx, const IndexPoint& a) {
  // Anchors are normalized in the restriction to the point, as in the sampler.
  const Element e = idx.element_of(a);
  return blur_set(*idx.cls, restrict(idx.s, {e}), {e}, true);
}

}  // namespace

TEST(ApStructure, SmallGrid) {
  auto idx = build_ap_structure(2, 2);
  EXPECT_EQ(idx.s.size(), 4u);
  EXPECT_TRUE(idx.cls->contains(idx.s));
  EXPECT_EQ(eq_classes(idx.s, idx.cls->eqrels()[0]).size(), 2u);
  for (const auto& c : eq_classes(idx.s, idx.cls->eqrels()[0])) EXPECT_EQ(c.size(), 2u);
  auto one = build_ap_structure(1, 3);
  EXPECT_EQ(one.s.signature().size(), 0u);
  EXPECT_EQ(one.s.size(), 3u);
  EXPECT_THROW(build_ap_structure(3, 30), Error);
}

TEST(ApStructure, BlockPermutationsAreAutomorphisms) {
  auto idx = build_ap_structure(3, 2);
  // Swap the two level-1 blocks.
  std::vector<std::size_t> swap;
  for (const auto& a : idx.points) {
    IndexPoint b = a;
    b.coords[0][0] = 1 - b.coords[0][0];
    swap.push_back(idx.element_of(b) - 1);
  }
  EXPECT_TRUE(is_embedding(permutation_injection(swap), idx.s, idx.s));
  RandomnessSource src(3);
  for (int t = 0; t < 20; ++t) {
    auto p = random_block_permutation(idx, src, "t" + std::to_string(t));
    EXPECT_TRUE(is_embedding(permutation_injection(p), idx.s, idx.s));
  }
  // Moving one point across blocks is not.
  std::vector<std::size_t> bad(idx.points.size());
  for (std::size_t i = 0; i < bad.size(); ++i) bad[i] = i;
  std::swap(bad[0], bad[bad.size() - 1]);
  EXPECT_FALSE(is_embedding(permutation_injection(bad), idx.s, idx.s));
}

TEST(ApStructure, ProductGridAndPlusPermutation) {
  auto idx = build_ap_product({2, 1}, {2}, 3);
  EXPECT_EQ(idx.s.size(), 2u * 2u * 2u * 3u);
  EXPECT_TRUE(idx.cls->contains(idx.s));
  EXPECT_EQ(idx.cls->eqrels().size(), 3u);
  std::vector<std::size_t> plus;
  for (const auto& a : idx.points) {
    IndexPoint b = a;
    b.plus = (b.plus + 1) % 3;
    plus.push_back(idx.element_of(b) - 1);
  }
  EXPECT_TRUE(is_embedding(permutation_injection(plus), idx.s, idx.s));
  RandomnessSource src(8);
  for (int t = 0; t < 10; ++t)
    EXPECT_TRUE(is_embedding(permutation_injection(random_block_permutation(idx, src, std::to_string(t))), idx.s, idx.s));
}

TEST(ApSegments, SingleLevelExample) {
  auto idx = build_ap_structure(3, 8);
  const IndexPoint a{{{2, 7, 1}}, 0};
  const Element e = idx.element_of(a);
  auto bs = point_blurs(idx, a);
  ASSERT_EQ(bs.size(), 4u);
  std::set<Segment> segs;
  for (const auto& b : bs) {
    auto seg = blur_to_segment(idx, b, a);
    segs.insert(seg);
    EXPECT_EQ(segment_to_blur(idx, seg, a), b);
  }
  const std::set<Segment> want{{{}}, {{2}}, {{2, 7}}, {{2, 7, 1}}};
  EXPECT_EQ(segs, want);
  EXPECT_EQ(segment_to_blur(idx, {{2, 7, 1}}, a), (Blur{{{0, e}}}));
  EXPECT_EQ(segment_to_blur(idx, {{}}, a), Blur{});
  EXPECT_THROW(segment_to_blur(idx, {{3}}, a), Error);
}

TEST(ApSegments, BlurCountIsDepthPlusOne) {
  for (int r = 1; r <= 4; ++r) {
    auto idx = build_ap_structure(r, 2);
    for (const auto& a : idx.points) {
      auto bs = point_blurs(idx, a);
      EXPECT_EQ(bs.size(), static_cast<std::size_t>(r + 1));
      std::set<Segment> segs;
      for (const auto& b : bs) {
        auto seg = blur_to_segment(idx, b, a);
        EXPECT_EQ(segment_to_blur(idx, seg, a), b);
        segs.insert(seg);
      }
      EXPECT_EQ(segs.size(), segments_of(a).size());
      for (const auto& seg : segments_of(a)) EXPECT_EQ(blur_to_segment(idx, segment_to_blur(idx, seg, a), a), seg);
    }
  }
}

TEST(ApSegments, ProductRoundTrip) {
  auto idx = build_ap_product({2, 2}, {2}, 2);
  for (const auto& a : idx.points) {
    auto bs = point_blurs(idx, a);
    // Antichains: one prefix per level, or {[a]_=} alone.
    EXPECT_EQ(bs.size(), 3u * 3u + 1u);
    std::size_t in_domain = 0;
    for (const auto& b : bs) {
      if (b.size() == 1 && b.handles[0].kind == 0) {
        EXPECT_THROW(blur_to_segment(idx, b, a), Error);
        continue;
      }
      ++in_domain;
      EXPECT_EQ(segment_to_blur(idx, blur_to_segment(idx, b, a), a), b);
    }
    EXPECT_EQ(in_domain, segments_of(a).size());
    EXPECT_EQ(blur_to_segment(idx, Blur{}, a), Segment(2));
  }
}

TEST(ApReals, EncodeDecode) {
  EXPECT_TRUE(encode_real(0.0).empty());
  EXPECT_EQ(encode_real(0.5), std::vector<int>{1});
  EXPECT_EQ(encode_real(0.75), (std::vector<int>{1, 2}));
  EXPECT_EQ(encode_real(1.0, 3), (std::vector<int>{1, 2, 3}));
  EXPECT_THROW(encode_real(1.5), Error);
  EXPECT_THROW(encode_real(0.5, 54), Error);
  for (int p = 1; p <= 10; ++p)
    for (std::uint64_t k = 0; k < (std::uint64_t{1} << p); ++k) {
      const double x = std::ldexp(static_cast<double>(k), -p);
      EXPECT_EQ(decode_real(encode_real(x, p), p), x);
    }
  EXPECT_EQ(truncate_real(0.7, 2), 0.5);
}

TEST(ApSample, RootIsConstantLeafVaries) {
  auto idx = build_ap_structure(2, 3);
  auto root = sample_ap_array(idx, mixes::root(), 1);
  EXPECT_EQ(std::set<double>(root.values.begin(), root.values.end()).size(), 1u);
  auto leaf = sample_ap_array(idx, mixes::leaf(), 1);
  EXPECT_EQ(std::set<double>(leaf.values.begin(), leaf.values.end()).size(), idx.points.size());
  EXPECT_EQ(sample_ap_array(idx, mixes::average(), 9).values, sample_ap_array(idx, mixes::average(), 9).values);
  EXPECT_EQ(leaf.encoded.signature(), real_signature());
  for (std::size_t i = 0; i < idx.points.size(); ++i) {
    std::vector<int> bits;
    for (int b = 1; b <= kApPrecision; ++b)
      if (leaf.encoded.holds(static_cast<std::size_t>(b - 1), {static_cast<Element>(i + 1)})) bits.push_back(b);
    EXPECT_EQ(decode_real(bits), leaf.values[i]);
  }
}

TEST(ApSample, AverageCorrelatesByFirstCoordinate) {
  auto idx = build_ap_structure(2, 2);
  const auto same = std::make_pair(idx.element_of({{{0, 0}}, 0}) - 1, idx.element_of({{{0, 1}}, 0}) - 1);
  const auto cross = std::make_pair(idx.element_of({{{0, 0}}, 0}) - 1, idx.element_of({{{1, 0}}, 0}) - 1);
  auto cov = [&](std::pair<Element, Element> pr) {
    double sx = 0, sy = 0, sxy = 0;
    const int n = 20000;
    for (int s = 0; s < n; ++s) {
      auto v = sample_ap_array(idx, mixes::average(), static_cast<std::uint64_t>(s), 30).values;
      sx += v[pr.first];
      sy += v[pr.second];
      sxy += v[pr.first] * v[pr.second];
    }
    return sxy / n - (sx / n) * (sy / n);
  };
  // Means of three uniforms: sharing two of them gives covariance 2/108,
  // sharing one gives 1/108 (sd of the estimates about 5e-4).
  EXPECT_NEAR(cov(same), 2.0 / 108, 0.003);
  EXPECT_NEAR(cov(cross), 1.0 / 108, 0.003);
}

TEST(ApSample, ProductIndependentOfPlus) {
  auto idx = std::make_shared<const ApIndex>(build_ap_product({2, 1}, {2}, 3));
  for (const auto& mix : {mixes::average(), mixes::leaf(), mixes::first_block()}) {
    auto v = sample_ap_array(*idx, mix, 11).values;
    for (std::size_t i = 0; i < idx->points.size(); ++i) {
      IndexPoint b = idx->points[i];
      b.plus = 0;
      EXPECT_EQ(v[i], v[idx->element_of(b) - 1]);
    }
  }
  // Through the general sampler the same holds at a fixed seed.
  auto small = std::make_shared<const ApIndex>(build_ap_product({1, 1}, {2}, 2));
  auto out = sample_structure(*small->cls, small->s, ap_rule(small, mixes::average(), 8), 5);
  for (std::size_t i = 0; i < small->points.size(); ++i) {
    IndexPoint b = small->points[i];
    b.plus = 0;
    const Element x = static_cast<Element>(i + 1), y = small->element_of(b);
    for (std::size_t u = 0; u < 8; ++u) EXPECT_EQ(out.holds(u, {x}), out.holds(u, {y}));
  }
}

TEST(ApInvariance, BuiltinMixesPassPlantedFails) {
  auto idx = build_ap_structure(2, 3);
  InvarianceOptions opt;
  opt.samples = 20000;
  opt.tv_threshold = 0.03;
  opt.threads = 4;
  for (const auto& name : {"root", "leaf", "average", "first_block"}) {
    auto r = check_hierarchical_invariance(idx, builtin_mix(name), 17, opt);
    EXPECT_TRUE(r.pass) << name << " tv=" << r.tv << " p=" << r.p_value;
  }
  auto bad = check_hierarchical_invariance(idx, mixes::coord_parity(), 17, opt);
  EXPECT_FALSE(bad.pass);
  EXPECT_GE(bad.tv, 0.5);
  opt.identity_only = true;
  EXPECT_TRUE(check_hierarchical_invariance(idx, mixes::coord_parity(), 17, opt).pass);
}
