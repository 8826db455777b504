#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "exch/classdef.hpp"
#include "exch/equiv.hpp"
#include "exch/random.hpp"
#include "exch/sampler.hpp"
#include "exch/stats.hpp"

namespace exch {

// Index grids for hierarchically exchangeable arrays. A single level of depth
// r indexes by N^r with relations R_i (agree on the first i coordinates,
// i < r). The product form indexes by N^{r_1} x ... x N^{r_k} x N, with R_{m,i}
// for i <= r_m; the last coordinate (alpha_+) only separates points.
struct ApShape {
  std::vector<int> depths;
  std::vector<std::size_t> bounds;  // per level: range of each of its coordinates
  bool product = false;
  std::size_t plus_bound = 1;

  std::size_t levels() const { return depths.size(); }
  int relations_in(std::size_t m) const { return product ? depths[m] : depths[m] - 1; }
};

inline constexpr std::size_t kApMaxPoints = 10000;

inline ApShape single_level(int r, std::size_t bound) {
  if (r < 1) throw Error("depth must be at least 1");
  return ApShape{{r}, {bound}, false, 1};
}

inline ApShape product_shape(std::vector<int> depths, std::vector<std::size_t> bounds, std::size_t plus_bound) {
  if (depths.empty()) throw Error("product needs at least one level");
  if (bounds.size() == 1) bounds.assign(depths.size(), bounds[0]);
  if (bounds.size() != depths.size()) throw Error("one bound per level expected");
  for (int r : depths)
    if (r < 1) throw Error("depth must be at least 1");
  return ApShape{std::move(depths), std::move(bounds), true, plus_bound};
}

struct IndexPoint {
  std::vector<std::vector<std::size_t>> coords;  // one tuple per level
  std::size_t plus = 0;                          // alpha_+ (product form only)
  auto operator<=>(const IndexPoint&) const = default;
};

// One prefix per level.
using Segment = std::vector<std::vector<std::size_t>>;

inline std::string point_text(const IndexPoint& a, bool product) {
  std::string out;
  for (std::size_t m = 0; m < a.coords.size(); ++m) {
    if (m) out += ";";
    for (std::size_t j = 0; j < a.coords[m].size(); ++j) out += (j ? "." : "") + std::to_string(a.coords[m][j]);
  }
  if (product) out += "|" + std::to_string(a.plus);
  return out;
}

inline bool is_prefix(const std::vector<std::size_t>& b, const std::vector<std::size_t>& a) {
  return b.size() <= a.size() && std::equal(b.begin(), b.end(), a.begin());
}

struct ApIndex {
  ApShape shape;
  ClassPtr cls;
  Structure s;
  std::vector<IndexPoint> points;                       // element i+1 is points[i]
  std::vector<std::pair<std::size_t, int>> relation_of;  // eqrel index -> (level, prefix length)

  Element element_of(const IndexPoint& a) const {
    auto it = std::lower_bound(points.begin(), points.end(), a);
    if (it == points.end() || !(*it == a)) throw Error("point outside the grid");
    return static_cast<Element>(it - points.begin() + 1);
  }
  const IndexPoint& point_of(Element e) const { return points.at(e - 1); }
  std::uint32_t kind_of(std::size_t m, int len) const {
    for (std::size_t r = 0; r < relation_of.size(); ++r)
      if (relation_of[r] == std::make_pair(m, len)) return static_cast<std::uint32_t>(r + 1);
    throw Error("no relation for this prefix length");
  }
};

inline std::string ap_symbol(const ApShape& sh, std::size_t m, int i) {
  return sh.product ? "R" + std::to_string(m + 1) + "_" + std::to_string(i) : "R" + std::to_string(i);
}

// The class of the index structures: nested equivalence relations per level,
// each star-contained in the previous one, all with infinitely many classes.
inline ClassSpec ap_spec(const ApShape& sh) {
  ClassSpec spec;
  std::vector<Symbol> syms;
  for (std::size_t m = 0; m < sh.levels(); ++m)
    for (int i = 1; i <= sh.relations_in(m); ++i) syms.push_back({ap_symbol(sh, m, i), 2});
  spec.sig = Signature(syms);
  for (std::size_t m = 0; m < sh.levels(); ++m)
    for (int i = 1; i <= sh.relations_in(m); ++i) {
      EqRelDecl d;
      d.id = "r" + ap_symbol(sh, m, i).substr(1);
      d.relation = ap_symbol(sh, m, i);
      if (i > 1) d.star = "r" + ap_symbol(sh, m, i - 1).substr(1);
      spec.eqrels.push_back(d);
    }
  return spec;
}

inline ApIndex build_ap(const ApShape& sh) {
  ApIndex idx;
  idx.shape = sh;
  std::size_t n = sh.product ? sh.plus_bound : 1;
  for (std::size_t m = 0; m < sh.levels(); ++m)
    for (int j = 0; j < sh.depths[m]; ++j) {
      if (sh.bounds[m] == 0) throw Error("bounds must be positive");
      n *= sh.bounds[m];
      if (n > kApMaxPoints) throw Error("bound overflow: the grid exceeds " + std::to_string(kApMaxPoints) + " points");
    }
  if (sh.product && sh.plus_bound == 0) throw Error("bounds must be positive");
  // Points in lexicographic order (odometer over all coordinates).
  std::vector<std::size_t> digits, radix;
  for (std::size_t m = 0; m < sh.levels(); ++m)
    for (int j = 0; j < sh.depths[m]; ++j) radix.push_back(sh.bounds[m]);
  if (sh.product) radix.push_back(sh.plus_bound);
  digits.assign(radix.size(), 0);
  for (std::size_t c = 0; c < n; ++c) {
    IndexPoint a;
    std::size_t pos = 0;
    for (std::size_t m = 0; m < sh.levels(); ++m) {
      a.coords.emplace_back(digits.begin() + static_cast<std::ptrdiff_t>(pos),
                            digits.begin() + static_cast<std::ptrdiff_t>(pos + sh.depths[m]));
      pos += sh.depths[m];
    }
    if (sh.product) a.plus = digits.back();
    idx.points.push_back(a);
    for (std::size_t q = radix.size(); q-- > 0;) {
      if (++digits[q] < radix[q]) break;
      digits[q] = 0;
    }
  }
  ClassSpec spec = ap_spec(sh);
  idx.cls = make_class(spec, sh.product ? "ap-product" : "ap");
  idx.s = Structure(spec.sig, iota_universe(n));
  std::size_t sym = 0;
  for (std::size_t m = 0; m < sh.levels(); ++m)
    for (int i = 1; i <= sh.relations_in(m); ++i, ++sym) {
      idx.relation_of.emplace_back(m, i);
      std::map<std::vector<std::size_t>, std::vector<Element>> blocks;
      for (std::size_t p = 0; p < n; ++p) {
        const auto& c = idx.points[p].coords[m];
        blocks[std::vector<std::size_t>(c.begin(), c.begin() + i)].push_back(static_cast<Element>(p + 1));
      }
      for (const auto& [key, b] : blocks)
        for (Element x : b)
          for (Element y : b) idx.s.add(sym, {x, y});
    }
  return idx;
}

inline ApIndex build_ap_structure(int r, std::size_t bound) { return build_ap(single_level(r, bound)); }

inline ApIndex build_ap_product(std::vector<int> depths, std::vector<std::size_t> bounds, std::size_t plus_bound) {
  return build_ap(product_shape(std::move(depths), std::move(bounds), plus_bound));
}

// ---------------------------------------------------------------------------
// Blurs of a single point and initial segments.

inline Segment blur_to_segment(const ApIndex& idx, const Blur& tau, const IndexPoint& a) {
  const Element e = idx.element_of(a);
  Segment seg(idx.shape.levels());
  for (const auto& h : tau.handles) {
    if (h.anchor != e) throw Error("blur is not anchored at the point");
    if (h.kind == 0) {
      if (idx.shape.product) throw Error("blur contains [a]_=, which depends on alpha_+");
      if (tau.size() != 1) throw Error("not an antichain");
      seg[0] = a.coords[0];
      continue;
    }
    const auto [m, len] = idx.relation_of.at(h.kind - 1);
    if (!seg[m].empty()) throw Error("not an antichain: two handles on one level");
    seg[m].assign(a.coords[m].begin(), a.coords[m].begin() + len);
  }
  return seg;
}

inline Blur segment_to_blur(const ApIndex& idx, const Segment& seg, const IndexPoint& a) {
  if (seg.size() != idx.shape.levels()) throw Error("one prefix per level expected");
  const Element e = idx.element_of(a);
  Blur b;
  for (std::size_t m = 0; m < seg.size(); ++m) {
    if (!is_prefix(seg[m], a.coords[m])) throw Error("segment is not an initial segment of the point");
    const int len = static_cast<int>(seg[m].size());
    if (len == 0) continue;
    if (!idx.shape.product && len == idx.shape.depths[0]) b.handles.push_back({0, e});
    else b.handles.push_back({idx.kind_of(m, len), e});
  }
  std::sort(b.handles.begin(), b.handles.end());
  return b;
}

// All tuples of initial segments of a, shorter levels first.
inline std::vector<Segment> segments_of(const IndexPoint& a) {
  std::vector<Segment> out{Segment(a.coords.size())};
  for (std::size_t m = 0; m < a.coords.size(); ++m) {
    std::vector<Segment> next;
    for (const auto& s : out)
      for (std::size_t len = 0; len <= a.coords[m].size(); ++len) {
        Segment t = s;
        t[m].assign(a.coords[m].begin(), a.coords[m].begin() + static_cast<std::ptrdiff_t>(len));
        next.push_back(std::move(t));
      }
    out = std::move(next);
  }
  return out;
}

// Tagged, length-prefixed key of a segment for the keyed PRF.
inline std::string segment_key(const Segment& seg) {
  std::string k = "seg";
  RandomnessSource::append_u32(k, static_cast<std::uint32_t>(seg.size()));
  for (const auto& p : seg) {
    RandomnessSource::append_u32(k, static_cast<std::uint32_t>(p.size()));
    for (auto c : p) RandomnessSource::append_u32(k, static_cast<std::uint32_t>(c));
  }
  return k;
}

// ---------------------------------------------------------------------------
// Real values as unary facts U_1..U_p.

inline constexpr int kApPrecision = 16;

inline std::vector<int> encode_real(double x, int p = kApPrecision) {
  if (p < 1 || p > 53) throw Error("precision must be in [1,53]");
  if (!(x >= 0 && x <= 1)) throw Error("value outside [0,1]");
  const auto top = (std::uint64_t{1} << p) - 1;
  const auto scaled = std::min(static_cast<std::uint64_t>(std::ldexp(x, p)), top);
  std::vector<int> out;
  for (int i = 1; i <= p; ++i)
    if ((scaled >> (p - i)) & 1u) out.push_back(i);
  return out;
}

inline double decode_real(const std::vector<int>& bits, int p = kApPrecision) {
  double v = 0;
  for (int i : bits) {
    if (i < 1 || i > p) throw Error("bit index outside [1,p]");
    v += std::ldexp(1.0, -i);
  }
  return v;
}

inline double truncate_real(double x, int p = kApPrecision) { return decode_real(encode_real(x, p), p); }

inline Signature real_signature(int p = kApPrecision) {
  std::vector<Symbol> syms;
  for (int i = 1; i <= p; ++i) syms.push_back({"U" + std::to_string(i), 1});
  return Signature(syms);
}

// ---------------------------------------------------------------------------
// Mixes: X_a = mix((xi_b) for b initial segments of a).

struct MixInput {
  const ApShape* shape = nullptr;
  const IndexPoint* point = nullptr;
  // The variate of the segment with the given prefix length per level.
  std::function<double(const std::vector<std::size_t>&)> xi;
};

struct Mix {
  std::string name;
  std::function<double(const MixInput&)> fn;
  bool reads_coordinates = false;  // planted: not a function of the variates alone
};

namespace mixes {

inline std::vector<std::size_t> full_lengths(const MixInput& in) {
  std::vector<std::size_t> l;
  for (const auto& c : in.point->coords) l.push_back(c.size());
  return l;
}

inline Mix root() {
  return {"root", [](const MixInput& in) { return in.xi(std::vector<std::size_t>(in.point->coords.size(), 0)); }};
}

inline Mix leaf() {
  return {"leaf", [](const MixInput& in) { return in.xi(full_lengths(in)); }};
}

// Mean over every tuple of prefixes; correlates points sharing prefixes.
inline Mix average() {
  return {"average", [](const MixInput& in) {
            const auto full = full_lengths(in);
            std::vector<std::size_t> l(full.size(), 0);
            double sum = 0;
            std::size_t cnt = 0;
            while (true) {
              sum += in.xi(l);
              ++cnt;
              std::size_t m = 0;
              while (m < l.size() && l[m] == full[m]) l[m++] = 0;
              if (m == l.size()) break;
              ++l[m];
            }
            return sum / static_cast<double>(cnt);
          }};
}

// The variate of the first coordinate of the first level.
inline Mix first_block() {
  return {"first_block", [](const MixInput& in) {
            std::vector<std::size_t> l(in.point->coords.size(), 0);
            l[0] = 1;
            return in.xi(l);
          }};
}

// Planted failure: reads the parity of the last coordinate of the last level.
inline Mix coord_parity() {
  return {"coord_parity",
          [](const MixInput& in) { return in.point->coords.back().back() % 2 ? 0.75 : 0.25; }, true};
}

inline std::vector<std::string> names() { return {"root", "leaf", "average", "first_block", "coord_parity"}; }

}  // namespace mixes

inline Mix builtin_mix(const std::string& name) {
  if (name == "root") return mixes::root();
  if (name == "leaf") return mixes::leaf();
  if (name == "average") return mixes::average();
  if (name == "first_block") return mixes::first_block();
  if (name == "coord_parity") return mixes::coord_parity();
  throw Error("unknown mix '" + name + "'");
}

// Value at one point with variates from src keyed by segment.
inline double mix_value(const ApShape& sh, const Mix& mix, const RandomnessSource& src, const IndexPoint& a) {
  MixInput in;
  in.shape = &sh;
  in.point = &a;
  in.xi = [&](const std::vector<std::size_t>& lens) {
    Segment seg(a.coords.size());
    for (std::size_t m = 0; m < seg.size(); ++m)
      seg[m].assign(a.coords[m].begin(), a.coords[m].begin() + static_cast<std::ptrdiff_t>(lens.at(m)));
    return src.variate(segment_key(seg));
  };
  return mix.fn(in);
}

struct ApSample {
  std::vector<double> values;  // per point, truncated to p bits
  Structure encoded;           // U_1..U_p over the grid's elements
};

inline ApSample sample_ap_array(const ApIndex& idx, const Mix& mix, std::uint64_t seed, int p = kApPrecision) {
  const RandomnessSource src(seed);
  ApSample out;
  out.encoded = Structure(real_signature(p), idx.s.universe());
  for (std::size_t i = 0; i < idx.points.size(); ++i) {
    const double v = mix_value(idx.shape, mix, src, idx.points[i]);
    out.values.push_back(truncate_real(v, p));
    for (int b : encode_real(v, p)) out.encoded.add(static_cast<std::size_t>(b - 1), {static_cast<Element>(i + 1)});
  }
  return out;
}

// The same array through the general sampler: U_i(x) reads the mix on the
// variates of the blurs matching x's initial segments.
inline TypeRule ap_rule(std::shared_ptr<const ApIndex> idx, Mix mix, int p = kApPrecision) {
  TypeRule f;
  f.name = "ap:" + mix.name;
  f.target = real_signature(p);
  f.decide = [idx, mix, p](const RuleQuery& q) {
    const IndexPoint& a = idx->point_of(q.tuple[0]);
    // Local anchors: the restriction to {x} keeps x's element id.
    MixInput in;
    in.shape = &idx->shape;
    in.point = &a;
    in.xi = [&](const std::vector<std::size_t>& lens) {
      Segment seg(a.coords.size());
      for (std::size_t m = 0; m < seg.size(); ++m)
        seg[m].assign(a.coords[m].begin(), a.coords[m].begin() + static_cast<std::ptrdiff_t>(lens.at(m)));
      return q.xi_of(segment_to_blur(*idx, seg, a));
    };
    const auto bits = encode_real(mix.fn(in), p);
    return std::find(bits.begin(), bits.end(), static_cast<int>(q.symbol) + 1) != bits.end();
  };
  return f;
}

// ---------------------------------------------------------------------------
// Initial-segment-preserving permutations.

// Recursive block permutation: coordinate j of a level moves by a permutation
// chosen per prefix of earlier coordinates; alpha_+ moves by one permutation.
// Returns the image point index of every point index.
inline std::vector<std::size_t> random_block_permutation(const ApIndex& idx, const RandomnessSource& src,
                                                         const std::string& tag) {
  const auto& sh = idx.shape;
  std::vector<std::size_t> out;
  std::map<std::string, std::vector<std::size_t>> cache;
  auto sigma = [&](const std::string& key, std::size_t n) -> const std::vector<std::size_t>& {
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, src.ordering(key, n)).first;
    return it->second;
  };
  for (const auto& a : idx.points) {
    IndexPoint b = a;
    for (std::size_t m = 0; m < sh.levels(); ++m)
      for (std::size_t j = 0; j < a.coords[m].size(); ++j) {
        std::string key = tag + "H";
        RandomnessSource::append_u32(key, static_cast<std::uint32_t>(m));
        RandomnessSource::append_u32(key, static_cast<std::uint32_t>(j));
        for (std::size_t q = 0; q < j; ++q) RandomnessSource::append_u32(key, static_cast<std::uint32_t>(a.coords[m][q]));
        b.coords[m][j] = sigma(key, sh.bounds[m])[a.coords[m][j]];
      }
    if (sh.product) b.plus = sigma(tag + "Hplus", sh.plus_bound)[a.plus];
    out.push_back(idx.element_of(b) - 1);
  }
  return out;
}

inline Injection permutation_injection(const std::vector<std::size_t>& perm) {
  std::map<Element, Element> m;
  for (std::size_t i = 0; i < perm.size(); ++i) m[static_cast<Element>(i + 1)] = static_cast<Element>(perm[i] + 1);
  return Injection(m);
}

struct InvarianceOptions {
  std::uint64_t samples = 100'000;
  std::size_t permutations = 8;
  std::size_t window = 4;    // points compared jointly
  int compare_bits = 1;      // leading bits of each value kept for the comparison
  double tv_threshold = 0.02;
  double p_threshold = 1e-3;
  unsigned threads = 1;
  bool identity_only = false;
};

struct InvarianceReport {
  bool pass = true;
  double tv = 0;       // worst over permutations
  double p_value = 1;  // least over permutations, Bonferroni-adjusted
  std::size_t permutations = 0;
  std::vector<std::size_t> window;  // point indices
  std::vector<double> tvs;
  std::string detail;
};

inline std::vector<std::size_t> invariance_window(std::size_t n, std::size_t w) {
  std::vector<std::size_t> out;
  w = std::min(w, n);
  for (std::size_t i = 0; i < w; ++i) out.push_back(w == 1 ? 0 : i * (n - 1) / (w - 1));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Compares the joint law of X on a window with its law on the window's image
// under random initial-segment-preserving permutations.
inline InvarianceReport check_hierarchical_invariance(const ApIndex& idx, const Mix& mix, std::uint64_t seed,
                                                      InvarianceOptions opt = {}) {
  InvarianceReport r;
  r.window = invariance_window(idx.points.size(), opt.window);
  const RandomnessSource base(seed);
  const std::size_t np = opt.identity_only ? 1 : opt.permutations;
  auto key_of = [&](const RandomnessSource& src, const std::vector<std::size_t>& pts) {
    std::string k;
    for (auto i : pts) {
      const auto scaled = static_cast<std::uint64_t>(std::ldexp(mix_value(idx.shape, mix, src, idx.points[i]),
                                                                opt.compare_bits));
      k += std::to_string(std::min(scaled, (std::uint64_t{1} << opt.compare_bits) - 1)) + ",";
    }
    return k;
  };
  auto dist = [&](const std::string& role, const std::vector<std::size_t>& pts) {
    std::vector<std::string> keys(opt.samples);
    detail::parallel_for(opt.samples, opt.threads,
                         [&](std::uint64_t i) { keys[i] = key_of(base.derive(role, i), pts); });
    EmpiricalDist d;
    for (const auto& k : keys) d.add(k);
    return d;
  };
  for (std::size_t j = 0; j < np; ++j) {
    std::vector<std::size_t> image;
    if (opt.identity_only) {
      image = r.window;
    } else {
      const auto perm = random_block_permutation(idx, base, "perm" + std::to_string(j));
      for (auto i : r.window) image.push_back(perm[i]);
    }
    const auto a = dist("orig" + std::to_string(j), r.window);
    const auto b = dist("image" + std::to_string(j), image);
    const auto v = verdict(a, b, opt.tv_threshold, 0.0);
    r.tvs.push_back(v.tv);
    r.tv = std::max(r.tv, v.tv);
    r.p_value = std::min(r.p_value, std::min(1.0, v.p_value * static_cast<double>(np)));
  }
  r.permutations = np;
  r.pass = r.tv <= opt.tv_threshold && r.p_value >= opt.p_threshold;
  r.detail = r.pass ? "window law unchanged under sampled permutations"
                    : "window law moves under an initial-segment-preserving permutation";
  return r;
}

}  // namespace exch
