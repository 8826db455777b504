#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "exch/classdef.hpp"

namespace exch {

// n structures, part i (1-indexed) on [n] \ {i}.
struct Plan {
  std::size_t n = 0;
  std::vector<Structure> parts;
};

// Labels of domain tuples, one map per declared eqrel (declaration order).
// A labeling of a structure assigns equal labels exactly to equivalent tuples
// within a star class; finite counts restrict labels to [count].
struct Labeling {
  std::vector<std::map<Tuple, int>> labels;
};

inline std::vector<Element> universe_without(std::size_t n, std::size_t i) {
  std::vector<Element> u;
  for (Element e = 1; e <= n; ++e)
    if (e != i) u.push_back(e);
  return u;
}

inline void require_plan_shape(const std::vector<Structure>& parts) {
  const std::size_t n = parts.size();
  for (std::size_t i = 1; i <= n; ++i)
    if (parts[i - 1].universe() != universe_without(n, i))
      throw Error("part " + std::to_string(i) + " does not have universe [n] minus {" + std::to_string(i) + "}");
  for (std::size_t i = 1; i < n; ++i)
    if (!(parts[i].signature() == parts[0].signature())) throw Error("plan parts have different signatures");
}

inline bool is_plan(const std::vector<Structure>& parts) {
  require_plan_shape(parts);
  const std::size_t n = parts.size();
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = i + 1; j <= n; ++j) {
      std::vector<Element> both;
      for (Element e = 1; e <= n; ++e)
        if (e != i && e != j) both.push_back(e);
      if (!(restrict(parts[i - 1], both) == restrict(parts[j - 1], both))) return false;
    }
  return true;
}

inline Plan make_plan(std::vector<Structure> parts) {
  if (!is_plan(parts)) throw Error("parts are not pairwise consistent");
  Plan p;
  p.n = parts.size();
  p.parts = std::move(parts);
  return p;
}

// Checks that lab is a partition labeling of s for k's eqrels.
inline std::optional<std::string> labeling_problem(const StructureClass& k, const Structure& s, const Labeling& lab) {
  const auto& ds = k.eqrels();
  if (lab.labels.size() != ds.size()) return "labeling has wrong number of eqrels";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const auto& d = ds[r];
    const auto& m = lab.labels[r];
    auto dom = domain_tuples(s, d);
    if (m.size() != dom.size()) return "labeling of " + d.id + " does not cover the domain exactly";
    for (const auto& t : dom) {
      auto it = m.find(t);
      if (it == m.end()) return "labeling of " + d.id + " misses a domain tuple";
      if (d.count && (it->second < 1 || it->second > *d.count)) return "label outside [count] for " + d.id;
    }
    for (const auto& a : dom)
      for (const auto& b : dom) {
        const bool same = m.at(a) == m.at(b);
        const bool rel = related(s, d, a, b);
        if (rel && !same) return "equivalent tuples of " + d.id + " carry different labels";
        if (!rel && same && star_related(s, ds, d, a, b))
          return "distinct classes of " + d.id + " in one star class share a label";
      }
  }
  return std::nullopt;
}

// True iff labels agree on every domain tuple shared by two parts.
inline bool coherent(const StructureClass& k, const Plan& plan, const std::vector<Labeling>& labs) {
  if (labs.size() != plan.parts.size()) throw Error("one labeling per part required");
  for (std::size_t j = 0; j < labs.size(); ++j)
    if (auto why = labeling_problem(k, plan.parts[j], labs[j]))
      throw Error("labeling of part " + std::to_string(j + 1) + ": " + *why);
  for (std::size_t r = 0; r < k.eqrels().size(); ++r)
    for (std::size_t j = 0; j < labs.size(); ++j)
      for (std::size_t q = j + 1; q < labs.size(); ++q)
        for (const auto& [t, l] : labs[j].labels[r]) {
          auto it = labs[q].labels[r].find(t);
          if (it != labs[q].labels[r].end() && it->second != l) return false;
        }
  return true;
}

namespace detail {

// The structure on [n] agreeing with the plan off the full-range atoms.
inline std::vector<std::int8_t> plan_values(const AtomTable& table, const Plan& plan) {
  std::vector<std::int8_t> init(table.size(), kUnknown);
  const std::size_t n = plan.n;
  for (AtomId a = 0; a < table.size(); ++a) {
    const auto t = table.tuple_of(a);
    const auto rng = range_of(t);
    if (rng.size() == n) continue;
    // Least element of [n] missing from the range names a part containing t.
    Element miss = 1;
    while (std::binary_search(rng.begin(), rng.end(), miss)) ++miss;
    init[a] = plan.parts[miss - 1].holds(table.symbol_of(a), t) ? kTrue : kFalse;
  }
  return init;
}

// Labeled tuples must agree with the amalgam's classes wherever the amalgam
// places them in one star class.
inline bool respects_labels(const StructureClass& k, const Structure& s, const Labeling& lab) {
  const auto& ds = k.eqrels();
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const auto& d = ds[r];
    const auto& m = lab.labels[r];
    for (auto a = m.begin(); a != m.end(); ++a) {
      if (!in_domain(s, d, a->first)) return false;
      for (auto b = std::next(a); b != m.end(); ++b) {
        const bool rel = related(s, d, a->first, b->first);
        const bool same = a->second == b->second;
        if (rel && !same) return false;
        if (!rel && same && star_related(s, ds, d, a->first, b->first)) return false;
      }
    }
  }
  return true;
}

}  // namespace detail

// Lexicographically least amalgam of the plan in k. With lab set, the amalgam
// must also admit a labeling extending lab.
inline std::optional<Structure> find_amalgam(const Plan& plan, const StructureClass& k,
                                             const Labeling* lab = nullptr) {
  require_plan_shape(plan.parts);
  if (plan.parts.size() != plan.n) throw Error("plan size mismatch");
  if (!is_plan(plan.parts)) throw Error("parts are not pairwise consistent");
  for (std::size_t i = 0; i < plan.n; ++i)
    if (!k.contains(plan.parts[i])) throw Error("part " + std::to_string(i + 1) + " is not in the class");
  AtomTable table(k.signature_ptr(), iota_universe(plan.n));
  std::vector<GroundFormula> fs;
  k.necessary(table, fs);
  auto init = detail::plan_values(table, plan);
  std::vector<AtomId> order;
  for (AtomId a = 0; a < table.size(); ++a)
    if (init[a] == kUnknown) order.push_back(a);
  Completion search(table.size(), &fs);
  std::optional<Structure> found;
  search.run(init, order, [&](const std::vector<std::int8_t>& vals) {
    Structure s = table.to_structure(vals);
    if (!k.contains(s)) return false;
    if (lab && !detail::respects_labels(k, s, *lab)) return false;
    found = std::move(s);
    return true;
  });
  return found;
}

struct DapVerdict {
  bool holds = true;
  std::string mode;  // "dap", "upto" or "weak-upto"
  std::size_t n = 0;
  std::size_t plans = 0;
  std::size_t labelings = 0;
  std::optional<Plan> counterexample;
  std::optional<Labeling> labeling;
};

// Visits every amalgamation plan of size n over k in lexicographic order of
// the plan atoms; fn returns true to stop.
template <class Fn>
void for_each_plan(const StructureClass& k, std::size_t n, Fn&& fn) {
  AtomTable table(k.signature_ptr(), iota_universe(n));
  std::vector<GroundFormula> all, fs;
  k.necessary(table, all);
  for (auto& g : all)
    if (g.support.size() < n) fs.push_back(std::move(g));
  std::vector<AtomId> order;
  std::vector<std::int8_t> init(table.size(), kUnknown);
  for (AtomId a = 0; a < table.size(); ++a) {
    if (range_of(table.tuple_of(a)).size() < n) {
      order.push_back(a);
    } else {
      init[a] = kFalse;
    }
  }
  Completion search(table.size(), &fs);
  search.run(init, order, [&](const std::vector<std::int8_t>& vals) {
    Structure whole = table.to_structure(vals);
    Plan p;
    p.n = n;
    for (std::size_t i = 1; i <= n; ++i) {
      p.parts.push_back(restrict(whole, universe_without(n, i)));
      if (!k.contains(p.parts.back())) return false;
    }
    return static_cast<bool>(fn(p));
  });
}

inline DapVerdict check_ndap(const StructureClass& k, std::size_t n, Limits lim = {}) {
  if (n > lim.enumerate_cap) throw Error("n-DAP size " + std::to_string(n) + " exceeds cap");
  DapVerdict v;
  v.mode = "dap";
  v.n = n;
  for_each_plan(k, n, [&](const Plan& p) {
    ++v.plans;
    if (find_amalgam(p, k)) return false;
    v.holds = false;
    v.counterexample = p;
    return true;
  });
  return v;
}

namespace detail {

// Calls fn(lab) for every coherent family of labelings of the plan, given as
// one global tuple->label map per eqrel. Label values are restricted growth
// strings over the domain tuples (only the equality pattern matters), with at
// most count distinct values for finite counts. fn returns true to stop.
template <class Fn>
bool for_each_coherent(const StructureClass& k, const Plan& plan, Fn&& fn) {
  const auto& ds = k.eqrels();
  const std::size_t n = plan.n;
  // Domain tuples per eqrel and which parts contain them.
  std::vector<std::vector<Tuple>> dom(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::set<Tuple> seen;
    for (const auto& part : plan.parts)
      for (const auto& t : domain_tuples(part, ds[r])) seen.insert(t);
    dom[r].assign(seen.begin(), seen.end());
  }
  auto part_of = [&](const Tuple& a, const Tuple& b) -> std::vector<std::size_t> {
    std::vector<std::size_t> out;
    auto rng = range_of(concat(a, b));
    for (std::size_t i = 1; i <= n; ++i)
      if (!std::binary_search(rng.begin(), rng.end(), static_cast<Element>(i))) out.push_back(i - 1);
    return out;
  };
  Labeling lab;
  lab.labels.resize(ds.size());
  std::function<bool(std::size_t, std::size_t, int)> rec = [&](std::size_t r, std::size_t i, int used) -> bool {
    if (r == ds.size()) return fn(static_cast<const Labeling&>(lab));
    if (i == dom[r].size()) return rec(r + 1, 0, 0);
    const auto& d = ds[r];
    const Tuple& t = dom[r][i];
    const int limit = d.count ? std::min(used + 1, *d.count) : used + 1;
    for (int l = 1; l <= limit; ++l) {
      bool ok = true;
      for (std::size_t j = 0; j < i && ok; ++j) {
        const Tuple& u = dom[r][j];
        const bool same = lab.labels[r].at(u) == l;
        for (std::size_t p : part_of(t, u)) {
          const auto& part = plan.parts[p];
          if (!star_related(part, ds, d, t, u)) continue;
          if (related(part, d, t, u) != same) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) continue;
      lab.labels[r][t] = l;
      if (rec(r, i + 1, std::max(used, l))) return true;
      lab.labels[r].erase(t);
    }
    return false;
  };
  return rec(0, 0, 0);
}

}  // namespace detail

// Per-part labelings obtained by restricting a global coherent labeling.
inline std::vector<Labeling> split_labeling(const StructureClass& k, const Plan& plan, const Labeling& global) {
  std::vector<Labeling> out(plan.n);
  for (std::size_t j = 0; j < plan.n; ++j) {
    out[j].labels.resize(k.eqrels().size());
    for (std::size_t r = 0; r < k.eqrels().size(); ++r)
      for (const auto& t : domain_tuples(plan.parts[j], k.eqrels()[r])) out[j].labels[r][t] = global.labels[r].at(t);
  }
  return out;
}

// n-DAP up to the declared eqrels. The default reading requires an amalgam
// admitting a labeling extending the given ones; weak=true accepts any amalgam
// in k for plans that carry at least one coherent labeling.
inline DapVerdict check_ndap_upto(const StructureClass& k, std::size_t n, bool weak = false, Limits lim = {}) {
  if (n > lim.enumerate_cap) throw Error("n-DAP size " + std::to_string(n) + " exceeds cap");
  DapVerdict v;
  v.mode = weak ? "weak-upto" : "upto";
  v.n = n;
  for_each_plan(k, n, [&](const Plan& p) {
    ++v.plans;
    std::optional<bool> plain;
    return detail::for_each_coherent(k, p, [&](const Labeling& lab) {
      ++v.labelings;
      bool ok;
      if (weak) {
        if (!plain) plain = find_amalgam(p, k).has_value();
        ok = *plain;
      } else {
        ok = find_amalgam(p, k, &lab).has_value();
      }
      if (ok) return false;
      v.holds = false;
      v.counterexample = p;
      v.labeling = lab;
      return true;
    });
  });
  return v;
}

// Amalgamates pairwise-compatible members of k carrying coherent labelings
// into one member on the union of their universes, by amalgamating every
// subset of the union in order of size. Labels of tuples first created at a
// step are chosen as the least label compatible with the step's amalgam (a
// globally fresh label for infinite counts).
inline std::optional<Structure> amalgamate_family(const StructureClass& k, const std::vector<Structure>& structures,
                                                  const std::vector<Labeling>& labelings) {
  if (structures.size() != labelings.size()) throw Error("one labeling per structure required");
  if (structures.empty()) throw Error("empty family");
  const auto& ds = k.eqrels();
  std::vector<Element> uni;
  for (std::size_t i = 0; i < structures.size(); ++i) {
    if (!k.contains(structures[i])) throw Error("structure " + std::to_string(i + 1) + " is not in the class");
    if (auto why = labeling_problem(k, structures[i], labelings[i]))
      throw Error("labeling " + std::to_string(i + 1) + ": " + *why);
    uni.insert(uni.end(), structures[i].universe().begin(), structures[i].universe().end());
  }
  uni = sorted_set(uni);
  if (uni.size() > 12) throw Error("family union too large");
  Labeling global;
  global.labels.resize(ds.size());
  for (std::size_t i = 0; i < structures.size(); ++i)
    for (std::size_t j = i + 1; j < structures.size(); ++j) {
      std::vector<Element> both;
      std::set_intersection(structures[i].universe().begin(), structures[i].universe().end(),
                            structures[j].universe().begin(), structures[j].universe().end(),
                            std::back_inserter(both));
      if (!(restrict(structures[i], both) == restrict(structures[j], both)))
        throw Error("structures " + std::to_string(i + 1) + " and " + std::to_string(j + 1) + " are incompatible");
    }
  for (std::size_t i = 0; i < structures.size(); ++i)
    for (std::size_t r = 0; r < ds.size(); ++r)
      for (const auto& [t, l] : labelings[i].labels[r]) {
        auto [it, fresh] = global.labels[r].emplace(t, l);
        if (!fresh && it->second != l) throw Error("labelings are not coherent");
      }
  std::vector<int> next_tag(ds.size(), 1);
  for (std::size_t r = 0; r < ds.size(); ++r)
    for (const auto& [t, l] : global.labels[r]) next_tag[r] = std::max(next_tag[r], l + 1);

  const std::size_t m = uni.size();
  std::map<std::uint32_t, Structure> done;
  auto subset_elems = [&](std::uint32_t mask) {
    std::vector<Element> w;
    for (std::size_t b = 0; b < m; ++b)
      if (mask >> b & 1) w.push_back(uni[b]);
    return w;
  };
  std::vector<std::uint32_t> masks;
  for (std::uint32_t mask = 0; mask < (1u << m); ++mask) masks.push_back(mask);
  std::stable_sort(masks.begin(), masks.end(),
                   [](std::uint32_t a, std::uint32_t b) { return __builtin_popcount(a) < __builtin_popcount(b); });
  for (std::uint32_t mask : masks) {
    auto w = subset_elems(mask);
    std::optional<Structure> inside;
    for (const auto& s : structures)
      if (subset_of(w, s.universe())) {
        inside = restrict(s, w);
        break;
      }
    if (inside) {
      done.emplace(mask, std::move(*inside));
      continue;
    }
    // Plan on [|w|] from the amalgams of the maximal proper subsets.
    const std::size_t n = w.size();
    std::map<Element, Element> to_local;
    for (std::size_t q = 0; q < n; ++q) to_local[w[q]] = static_cast<Element>(q + 1);
    const Injection from_local = Injection(to_local).inverse();
    Plan plan;
    plan.n = n;
    for (std::size_t q = 0; q < n; ++q) {
      const Structure& sub = done.at(mask & ~(1u << std::distance(uni.begin(), std::find(uni.begin(), uni.end(), w[q]))));
      std::vector<Element> dom = universe_without(n, q + 1);
      std::map<Element, Element> f;
      for (Element e : dom) f[e] = from_local(e);
      plan.parts.push_back(pullback(sub, Injection(f)));
    }
    Labeling local;
    local.labels.resize(ds.size());
    for (std::size_t r = 0; r < ds.size(); ++r)
      for (const auto& [t, l] : global.labels[r])
        if (tuple_within(t, w)) {
          Tuple lt;
          for (Element e : t) lt.push_back(to_local.at(e));
          local.labels[r][lt] = l;
        }
    auto am = find_amalgam(plan, k, &local);
    if (!am) return std::nullopt;
    Structure amalgam = pullback(*am, Injection(to_local));
    // Label the domain tuples that appear for the first time.
    for (std::size_t r = 0; r < ds.size(); ++r) {
      const auto& d = ds[r];
      for (const auto& t : domain_tuples(amalgam, d)) {
        if (global.labels[r].count(t)) continue;
        std::optional<int> lab;
        std::set<int> taken;
        for (const auto& [u, l] : global.labels[r]) {
          if (!tuple_within(u, w)) continue;
          if (related(amalgam, d, t, u)) lab = l;
          else if (star_related(amalgam, ds, d, t, u)) taken.insert(l);
        }
        if (!lab) {
          if (d.count) {
            for (int c = 1; c <= *d.count && !lab; ++c)
              if (!taken.count(c)) lab = c;
            if (!lab) return std::nullopt;
          } else {
            lab = next_tag[r]++;
          }
        }
        global.labels[r][t] = *lab;
      }
    }
    done.emplace(mask, std::move(amalgam));
  }
  return done.at((1u << m) - 1);
}

inline std::string plan_text(const Plan& p) {
  std::string out;
  for (std::size_t i = 0; i < p.n; ++i) out += "part " + std::to_string(i + 1) + "\n" + to_text(p.parts[i]);
  return out;
}

}  // namespace exch
