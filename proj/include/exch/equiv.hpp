#pragma once

#include <algorithm>
#include <compare>
#include <functional>
#include <optional>
#include <map>
#include <string>
#include <vector>

#include "exch/classdef.hpp"

namespace exch {

// Identity of an equivalence class touched by an element: kind 0 is equality,
// kind r+1 the r-th declared eqrel (infinite count, hence length 1). Anchors
// are normalized to the least element of the class in the ambient structure,
// so ≃-equal handles compare equal.
struct ClassHandle {
  std::uint32_t kind = 0;
  Element anchor = 0;
  auto operator<=>(const ClassHandle&) const = default;
};

// An antichain of handles, kept sorted.
struct Blur {
  std::vector<ClassHandle> handles;
  auto operator<=>(const Blur&) const = default;
  bool empty() const { return handles.empty(); }
  std::size_t size() const { return handles.size(); }
};

// Eqrels that contribute handles: those with infinitely many classes.
inline std::vector<std::size_t> handle_relations(const StructureClass& k) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k.eqrels().size(); ++r)
    if (k.eqrels()[r].infinite()) out.push_back(r);
  return out;
}

inline std::vector<std::vector<Tuple>> classes(const StructureClass& k, const Structure& s, const std::string& id) {
  return eq_classes(s, find_eqrel(k.eqrels(), id));
}

// Least element of y's class under kind in s.
inline Element class_anchor(const StructureClass& k, const Structure& s, std::uint32_t kind, Element y) {
  if (kind == 0) return y;
  const auto& d = k.eqrels().at(kind - 1);
  for (Element z : s.universe())
    if (in_domain(s, d, {z}) && related(s, d, {z}, {y})) return z;
  throw Error("element " + std::to_string(y) + " is outside the domain of " + d.id);
}

inline ClassHandle normalize(const StructureClass& k, const Structure& s, ClassHandle h) {
  return ClassHandle{h.kind, class_anchor(k, s, h.kind, h.anchor)};
}

// E(s): one handle per class of equality or an infinite-count eqrel touched by s.
inline std::vector<ClassHandle> handle_set(const StructureClass& k, const Structure& s, std::vector<Element> sub) {
  sub = sorted_set(std::move(sub));
  require_subset(s, sub);
  std::vector<ClassHandle> out;
  const auto rels = handle_relations(k);
  for (Element y : sub) {
    out.push_back({0, y});
    for (std::size_t r : rels) {
      const auto& d = k.eqrels()[r];
      if (d.length != 1) throw Error("eqrel " + d.id + " with infinite count must have length 1");
      if (in_domain(s, d, {y})) out.push_back({static_cast<std::uint32_t>(r + 1), class_anchor(k, s, r + 1, y)});
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// True iff `to` is reachable from `from` along declared stars (or equal).
inline bool star_reaches(const StructureClass& k, std::size_t from, std::size_t to) {
  const auto& ds = k.eqrels();
  std::size_t cur = from;
  while (true) {
    if (cur == to) return true;
    if (!ds[cur].star) return false;
    const auto& next = *ds[cur].star;
    std::size_t idx = ds.size();
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds[i].id == next) idx = i;
    cur = idx;
  }
}

// Class containment in the limit, read from the declared star chain and the
// equivalence of anchors in s.
inline bool handle_leq(const StructureClass& k, const Structure& s, const ClassHandle& a, const ClassHandle& b) {
  if (b.kind == 0) return a.kind == 0 && a.anchor == b.anchor;
  const auto& d = k.eqrels().at(b.kind - 1);
  if (a.kind != 0 && !star_reaches(k, a.kind - 1, b.kind - 1)) return false;
  if (!in_domain(s, d, {a.anchor}) || !in_domain(s, d, {b.anchor})) return false;
  return related(s, d, {a.anchor}, {b.anchor});
}

// B(s): all antichains of E(s) ordered by size, then lexicographically.
inline std::vector<Blur> blur_set(const StructureClass& k, const Structure& s, const std::vector<Element>& sub,
                                  bool include_empty = true) {
  const auto hs = handle_set(k, s, sub);
  const std::size_t h = hs.size();
  std::vector<std::vector<bool>> comparable(h, std::vector<bool>(h));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < h; ++j)
      comparable[i][j] = i != j && (handle_leq(k, s, hs[i], hs[j]) || handle_leq(k, s, hs[j], hs[i]));
  std::vector<Blur> out;
  std::vector<std::size_t> pick;
  std::function<void(std::size_t)> rec = [&](std::size_t from) {
    Blur b;
    for (std::size_t i : pick) b.handles.push_back(hs[i]);
    if (include_empty || !b.empty()) out.push_back(std::move(b));
    for (std::size_t i = from; i < h; ++i) {
      bool ok = true;
      for (std::size_t j : pick)
        if (comparable[i][j]) ok = false;
      if (!ok) continue;
      pick.push_back(i);
      rec(i + 1);
      pick.pop_back();
    }
  };
  rec(0);
  std::stable_sort(out.begin(), out.end(), [](const Blur& a, const Blur& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  });
  return out;
}

// Byte layout: 'B', handle count (u32 big-endian), then per handle in sorted
// order a u8 kind and the u32 big-endian least anchor of its class in s.
inline std::string canonical_key(const StructureClass& k, const Blur& b, const Structure& s) {
  std::vector<ClassHandle> hs;
  for (const auto& h : b.handles) hs.push_back(normalize(k, s, h));
  std::sort(hs.begin(), hs.end());
  hs.erase(std::unique(hs.begin(), hs.end()), hs.end());
  std::string out = "B";
  auto put32 = [&](std::uint32_t v) {
    for (int sh = 24; sh >= 0; sh -= 8) out.push_back(static_cast<char>((v >> sh) & 0xff));
  };
  put32(static_cast<std::uint32_t>(hs.size()));
  for (const auto& h : hs) {
    if (h.kind > 255) throw Error("too many eqrels for key layout");
    out.push_back(static_cast<char>(h.kind));
    put32(h.anchor);
  }
  return out;
}

// Cross-checks the declared star chain against the constraints: in members
// of the bare class up to size n, every pair related by an eqrel must be
// related by its star.
inline CheckReport validate_star_chain(const ClassSpec& spec, std::size_t n, Limits lim = {}) {
  CheckReport rep;
  rep.check = "star-chain";
  auto k = make_bare_class(spec);
  const auto& ds = k->eqrels();
  for (const auto& s : enumerate_upto(*k, n, true, lim)) {
    ++rep.cases;
    for (const auto& d : ds) {
      if (!d.star) continue;
      for (const auto& a : domain_tuples(s, d))
        for (const auto& b : domain_tuples(s, d))
          if (related(s, d, a, b) && !star_related(s, ds, d, a, b)) {
            rep.ok = false;
            rep.detail = d.id + " is not contained in its declared star " + *d.star;
            rep.witness = {{"member", s}};
            return rep;
          }
    }
  }
  rep.detail = "declared stars hold up to size " + std::to_string(n);
  return rep;
}

inline std::string handle_text(const StructureClass& k, const ClassHandle& h) {
  const std::string rel = h.kind == 0 ? std::string("=") : k.eqrels().at(h.kind - 1).relation;
  return "[" + std::to_string(h.anchor) + "]_" + rel;
}

inline std::string blur_text(const StructureClass& k, const Blur& b) {
  std::string out = "{";
  for (std::size_t i = 0; i < b.handles.size(); ++i) out += (i ? "," : "") + handle_text(k, b.handles[i]);
  return out + "}";
}

// ---------------------------------------------------------------------------
// Bounded falsifiers for the declared limit properties. Each runs on the bare
// class (constraints plus equivalence axioms, declared nesting and counts not
// enforced) and only refutes.

namespace detail {

using FactList = std::vector<std::pair<std::size_t, Tuple>>;
using SearchCache = std::map<std::size_t, std::pair<AtomTable, std::vector<GroundFormula>>>;

inline void facts_of(const Structure& s, const std::map<Element, Element>& g, FactList& yes, FactList& no) {
  collect_atoms_of(s, g, yes, no);
}

inline std::map<Element, Element> identity_map(const Structure& s) {
  std::map<Element, Element> g;
  for (Element e : s.universe()) g[e] = e;
  return g;
}

inline const EqRelDecl& length_one(const ClassSpec& spec, const std::string& id) {
  const auto& d = find_eqrel(spec.eqrels, id);
  if (d.length != 1) throw Error("falsifiers support length-1 eqrels only (" + id + ")");
  return d;
}

// Elements of s in d's domain grouped into star classes, each star class a
// list of d-classes (each a sorted element list).
inline std::vector<std::vector<std::vector<Element>>> star_groups(const Structure& s, const std::vector<EqRelDecl>& ds,
                                                                  const EqRelDecl& d) {
  std::vector<std::vector<Element>> cls;
  for (const auto& b : eq_classes(s, d)) {
    std::vector<Element> c;
    for (const auto& t : b) c.push_back(t[0]);
    cls.push_back(c);
  }
  std::vector<std::vector<std::vector<Element>>> groups;
  for (const auto& c : cls) {
    bool placed = false;
    for (auto& g : groups)
      if (star_related(s, ds, d, {g[0][0]}, {c[0]})) {
        g.push_back(c);
        placed = true;
        break;
      }
    if (!placed) groups.push_back({c});
  }
  return groups;
}

}  // namespace detail

// Evenly contains: the declared star is coarser than the relation, and no
// star class is provably saturated with fewer classes than another holds.
inline CheckReport falsify_evenly(const ClassSpec& spec, const std::string& id, std::size_t n, Limits lim = {}) {
  CheckReport rep;
  rep.check = "evenly";
  const auto& d = detail::length_one(spec, id);
  auto kb = make_bare_class(spec);
  const auto& ds = kb->eqrels();
  detail::SearchCache cache;
  const std::size_t rel = spec.sig.index_of(d.relation);
  for (const auto& s : enumerate_upto(*kb, n, true, lim)) {
    ++rep.cases;
    if (d.star) {
      const auto& q = find_eqrel(ds, *d.star);
      for (const auto& a : domain_tuples(s, d))
        for (const auto& b : domain_tuples(s, d))
          if (related(s, d, a, b) && !(in_domain(s, q, a) && in_domain(s, q, b) && related(s, q, a, b))) {
            rep.ok = false;
            rep.detail = d.id + " relates " + std::to_string(a[0]) + " and " + std::to_string(b[0]) +
                         " across classes of its star " + q.id;
            rep.witness = {{"member", s}};
            return rep;
          }
    } else {
      continue;
    }
    auto groups = detail::star_groups(s, ds, d);
    const Element z = static_cast<Element>(s.size() + 1);
    for (const auto& small : groups)
      for (const auto& big : groups) {
        if (big.size() <= small.size()) continue;
        // Can the smaller star class gain a new class in a one-point extension?
        detail::FactList yes, no;
        detail::facts_of(s, detail::identity_map(s), yes, no);
        const auto& q = find_eqrel(ds, *d.star);
        yes.emplace_back(spec.sig.index_of(q.relation), Tuple{z, small[0][0]});
        if (d.domain) (d.domain_complement ? no : yes).emplace_back(spec.sig.index_of(*d.domain), Tuple{z});
        for (const auto& c : small)
          for (Element e : c) no.emplace_back(rel, Tuple{z, e});
        if (!detail::complete_over(*kb, s.size() + 1, yes, no, cache)) {
          rep.ok = false;
          rep.detail = "a star class of " + d.id + " with " + std::to_string(small.size()) +
                       " classes admits no further class while another holds " + std::to_string(big.size());
          rep.witness = {{"member", s}};
          return rep;
        }
      }
  }
  rep.detail = "no counterexample up to size " + std::to_string(n);
  return rep;
}

// Freely contains: for every member, star class and injective reassignment
// of its classes (to present or fresh classes), a copy of the member with
// its classes moved accordingly must coexist with the original in the class.
inline CheckReport falsify_freely(const ClassSpec& spec, const std::string& id, std::size_t n, Limits lim = {}) {
  CheckReport rep;
  rep.check = "freely";
  const auto& d = detail::length_one(spec, id);
  auto kb = make_bare_class(spec);
  const auto& ds = kb->eqrels();
  const std::size_t rel = spec.sig.index_of(d.relation);
  detail::SearchCache cache;
  for (const auto& s : enumerate_upto(*kb, n, true, lim)) {
    const std::size_t m = s.size();
    auto groups = detail::star_groups(s, ds, d);
    // class_of[e] = (group, class) for elements in the domain.
    std::map<Element, std::pair<std::size_t, std::size_t>> class_of;
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t c = 0; c < groups[g].size(); ++c)
        for (Element e : groups[g][c]) class_of[e] = {g, c};
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const std::size_t v = groups[g].size();
      // target[c] < v: a present class; >= v: the (target-v)-th fresh class.
      std::vector<std::size_t> target(v);
      std::vector<bool> used(2 * v, false);
      bool stop = false;
      std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t c, std::size_t fresh) {
        if (stop) return;
        if (c == v) {
          bool identity = true;
          for (std::size_t i = 0; i < v; ++i) identity = identity && target[i] == i;
          if (identity) return;
          ++rep.cases;
          // Class of the copy of x: nullopt means a fresh class (index in fresh_of).
          auto copy_target = [&](Element x) -> std::optional<std::pair<std::size_t, std::size_t>> {
            auto it = class_of.find(x);
            if (it == class_of.end()) return std::nullopt;
            if (it->second.first != g) return it->second;
            const std::size_t t = target[it->second.second];
            if (t < v) return std::make_pair(g, t);
            return std::nullopt;
          };
          // Glue copies onto originals: partial injections, fewest glued first.
          std::vector<Element> orig = s.universe();
          std::vector<int> glue(m, -1);
          std::vector<bool> taken(m, false);
          bool found = false;
          std::function<void(std::size_t, std::size_t, std::size_t)> grec = [&](std::size_t i, std::size_t glued,
                                                                                 std::size_t want) {
            if (found) return;
            if (i == m) {
              if (glued != want) return;
              std::map<Element, Element> g1;
              Element next = static_cast<Element>(m + 1);
              for (std::size_t q = 0; q < m; ++q) g1[orig[q]] = glue[q] >= 0 ? orig[glue[q]] : next++;
              detail::FactList yes, no;
              detail::facts_of(s, detail::identity_map(s), yes, no);
              detail::facts_of(s, g1, yes, no);
              for (std::size_t q = 0; q < m; ++q) {
                if (glue[q] >= 0 || !class_of.count(orig[q])) continue;
                auto tgt = copy_target(orig[q]);
                for (Element u : orig) {
                  if (!class_of.count(u)) continue;
                  const bool same = tgt && class_of.at(u) == *tgt;
                  (same ? yes : no).emplace_back(rel, Tuple{u, g1[orig[q]]});
                  (same ? yes : no).emplace_back(rel, Tuple{g1[orig[q]], u});
                }
              }
              if (detail::complete_over(*kb, next - 1, yes, no, cache)) found = true;
              return;
            }
            grec(i + 1, glued, want);
            if (glued >= want) return;
            const Element x = orig[i];
            auto tgt = copy_target(x);
            for (std::size_t p = 0; p < m; ++p) {
              if (taken[p]) continue;
              const Element y = orig[p];
              const bool y_dom = class_of.count(y) != 0;
              if (class_of.count(x)) {
                if (!tgt || !y_dom || class_of.at(y) != *tgt) continue;
              } else if (y_dom) {
                continue;
              }
              taken[p] = true;
              glue[i] = static_cast<int>(p);
              grec(i + 1, glued + 1, want);
              glue[i] = -1;
              taken[p] = false;
            }
          };
          for (std::size_t want = 0; want <= m && !found; ++want) grec(0, 0, want);
          if (!found) {
            stop = true;
            rep.ok = false;
            std::string map;
            for (std::size_t i = 0; i < v; ++i)
              map += (i ? ", " : "") + std::to_string(groups[g][i][0]) + "->" +
                     (target[i] < v ? std::to_string(groups[g][target[i]][0]) : "fresh");
            rep.detail = "moving classes of " + d.id + " (" + map + ") cannot be realized";
            rep.witness = {{"member", s}};
          }
          return;
        }
        for (std::size_t t = 0; t < v + fresh + 1 && t < 2 * v; ++t) {
          if (used[t]) continue;
          if (t >= v && t != v + fresh) continue;
          used[t] = true;
          target[c] = t;
          rec(c + 1, t >= v ? fresh + 1 : fresh);
          used[t] = false;
        }
      };
      rec(0, 0);
      if (stop) return rep;
    }
  }
  rep.detail = "no counterexample up to size " + std::to_string(n);
  return rep;
}

// Orthogonality of r to q (both length 1) within r's star: disjoint classes
// of r and q inside one star class must meet in some one-point extension.
inline CheckReport falsify_orthogonal(const ClassSpec& spec, const std::string& r_id, const std::string& q_id,
                                      std::size_t n, Limits lim = {}) {
  CheckReport rep;
  rep.check = "orthogonal";
  const auto& dr = detail::length_one(spec, r_id);
  const auto& dq = detail::length_one(spec, q_id);
  auto kb = make_bare_class(spec);
  const auto& ds = kb->eqrels();
  detail::SearchCache cache;
  for (const auto& s : enumerate_upto(*kb, n, true, lim)) {
    const auto cr = eq_classes(s, dr);
    const auto cq = eq_classes(s, dq);
    const Element z = static_cast<Element>(s.size() + 1);
    for (const auto& a : cr)
      for (const auto& b : cq) {
        bool inside = true, meet = false;
        for (const auto& t : b) {
          inside = inside && star_related(s, ds, dr, a[0], t);
          meet = meet || std::find(a.begin(), a.end(), t) != a.end();
        }
        if (!inside || meet) continue;
        ++rep.cases;
        detail::FactList yes, no;
        detail::facts_of(s, detail::identity_map(s), yes, no);
        yes.emplace_back(spec.sig.index_of(dr.relation), Tuple{z, a[0][0]});
        yes.emplace_back(spec.sig.index_of(dq.relation), Tuple{z, b[0][0]});
        if (!detail::complete_over(*kb, s.size() + 1, yes, no, cache)) {
          rep.ok = false;
          rep.detail = "classes of " + dr.id + " at " + std::to_string(a[0][0]) + " and " + dq.id + " at " +
                       std::to_string(b[0][0]) + " never intersect";
          rep.witness = {{"member", s}};
          return rep;
        }
      }
  }
  rep.detail = "no counterexample up to size " + std::to_string(n);
  return rep;
}

}  // namespace exch
