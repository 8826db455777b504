#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "exch/classdef.hpp"
#include "exch/equiv.hpp"
#include "exch/random.hpp"
#include "exch/stats.hpp"

namespace exch {

using Rational = boost::multiprecision::cpp_rational;

inline double to_double(const Rational& q) { return q.convert_to<double>(); }

inline std::string rational_text(const Rational& q) { return q.str(); }

// Everything a rule may read when deciding one atomic fact of the output.
struct RuleQuery {
  std::size_t symbol = 0;
  Tuple tuple;
  const StructureClass* k = nullptr;
  const Structure* local = nullptr;     // restriction of the input to range(tuple)
  const std::vector<Blur>* blurs = nullptr;  // B(range(tuple)), anchors in local
  // Per blur, its handles normalized in the ambient structure (parallel to the
  // local handle lists). A stable identity for indexing derived randomness;
  // null when the query was built outside a plan.
  const std::vector<std::vector<ClassHandle>>* ambient = nullptr;
  std::vector<double> xi;               // parallel to blurs
  // Per blur: indices into its handle list, least first under the ordering.
  std::vector<std::vector<std::size_t>> order;
  // Per eqrel (finite count only): labels of domain tuples inside range(tuple).
  std::vector<std::map<Tuple, int>> labels;

  std::optional<std::size_t> find(const Blur& b) const {
    for (std::size_t i = 0; i < blurs->size(); ++i)
      if ((*blurs)[i] == b) return i;
    return std::nullopt;
  }
  ClassHandle handle(std::uint32_t kind, Element y) const { return normalize(*k, *local, {kind, y}); }
  double xi_of(const Blur& b) const {
    auto i = find(b);
    if (!i) throw Error("rule asked for a blur outside B(s): " + blur_text(*k, b));
    return xi[*i];
  }
  int label(std::size_t r, const Tuple& t) const {
    auto it = labels.at(r).find(t);
    if (it == labels.at(r).end()) throw Error("no label for tuple in eqrel " + k->eqrels().at(r).id);
    return it->second;
  }
  // The ordering of the elements of t ⊆ range(tuple), read from the blur of
  // their =-handles (subsets embed as antichains of singletons).
  std::vector<Element> subset_order(const std::vector<Element>& t) const {
    Blur b;
    for (Element e : sorted_set(t)) b.handles.push_back({0, e});
    auto i = find(b);
    if (!i) throw Error("subset outside range");
    std::vector<Element> out;
    for (std::size_t j : order.at(*i)) out.push_back(b.handles[j].anchor);
    return out;
  }
};

struct TypeRule {
  std::string name;
  Signature target;
  std::function<bool(const RuleQuery&)> decide;
  // Threshold profile: cut points of the variate of blur i (values in (0,1)).
  // Empty function: no profile, exact mode unavailable.
  std::function<std::vector<Rational>(const RuleQuery&, std::size_t)> cutpoints;
  bool uses_orderings = false;
  bool uses_labels = false;
  // Optional compatibility check against the input class.
  std::function<void(const StructureClass&)> require;
};

// Precomputed evaluation layout for one input structure.
class SamplePlan {
 public:
  struct Range {
    std::vector<Element> elems;
    Structure local;
    std::vector<Blur> blurs;
    std::vector<std::string> keys;                   // canonical keys in the ambient structure
    std::vector<std::vector<std::size_t>> amb_to_local;  // ambient-sorted handle index -> local index
    std::vector<std::vector<ClassHandle>> ambient;       // handles normalized in the ambient structure
    std::vector<std::pair<std::size_t, Tuple>> label_tuples;
  };
  struct Atom {
    std::size_t symbol;
    Tuple tuple;
    std::size_t range;
  };
  // The r-classes of one star class of a finite-count eqrel r.
  struct LabelGroup {
    std::size_t r;
    std::size_t count;
    std::vector<std::vector<Tuple>> classes;
  };

  SamplePlan(const StructureClass& k, Structure s, const TypeRule& rule, bool include_empty = true)
      : k_(&k), s_(std::move(s)), rule_(rule), form_(labeled_form(s_)) {
    if (!k.contains(s_)) throw Error("input structure is not in the class " + k.describe());
    if (rule.require) rule.require(k);
    const auto& ds = k.eqrels();
    for (std::size_t r = 0; r < ds.size(); ++r) {
      if (ds[r].infinite()) continue;
      for (const auto& c : eq_classes(s_, ds[r])) {
        bool placed = false;
        for (auto& g : groups_)
          if (g.r == r && star_related(s_, ds, ds[r], g.classes[0][0], c[0])) {
            g.classes.push_back(c);
            placed = true;
            break;
          }
        if (!placed) groups_.push_back({r, static_cast<std::size_t>(*ds[r].count), {c}});
      }
    }
    for (const auto& g : groups_)
      if (g.classes.size() > g.count) throw Error("more classes than the declared count of " + ds[g.r].id);
    std::map<std::vector<Element>, std::size_t> memo;
    for (std::size_t j = 0; j < rule.target.size(); ++j)
      for_each_tuple(s_.universe(), rule.target[j].arity, [&](const Tuple& t) {
        auto rg = range_of(t);
        auto it = memo.find(rg);
        if (it == memo.end()) it = memo.emplace(rg, add_range(rg, include_empty)).first;
        atoms_.push_back({j, t, it->second});
      });
  }

  const StructureClass& cls() const { return *k_; }
  const Structure& input() const { return s_; }
  const TypeRule& rule() const { return rule_; }
  const std::vector<Range>& ranges() const { return ranges_; }
  const std::vector<Atom>& atoms() const { return atoms_; }
  const std::vector<LabelGroup>& label_groups() const { return groups_; }

  using Labels = std::vector<std::map<Tuple, int>>;  // per eqrel

  // Labels from per-group label vectors (group i, class j -> values[i][j]).
  Labels labels_from(const std::vector<std::vector<int>>& values) const {
    Labels out(k_->eqrels().size());
    for (std::size_t g = 0; g < groups_.size(); ++g)
      for (std::size_t c = 0; c < groups_[g].classes.size(); ++c)
        for (const auto& t : groups_[g].classes[c]) out[groups_[g].r][t] = values[g][c];
    return out;
  }

  // One uniform injective labeling per star class, keyed by (eqrel, structure, group).
  std::vector<std::vector<int>> draw_label_values(const RandomnessSource& src) const {
    std::vector<std::vector<int>> v;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      std::string key = "L";
      RandomnessSource::append_u32(key, static_cast<std::uint32_t>(groups_[g].r));
      key += form_;
      RandomnessSource::append_u32(key, static_cast<std::uint32_t>(g));
      v.push_back(src.injection(key, groups_[g].classes.size(), groups_[g].count));
    }
    return v;
  }

  template <class XiFn, class OrdFn>
  RuleQuery query(const Atom& a, XiFn&& xi, OrdFn&& ord, const Labels& labels) const {
    const Range& rg = ranges_[a.range];
    RuleQuery q;
    q.symbol = a.symbol;
    q.tuple = a.tuple;
    q.k = k_;
    q.local = &rg.local;
    q.blurs = &rg.blurs;
    q.ambient = &rg.ambient;
    q.xi.resize(rg.blurs.size());
    for (std::size_t i = 0; i < rg.blurs.size(); ++i) q.xi[i] = xi(rg.keys[i]);
    if (rule_.uses_orderings) {
      q.order.resize(rg.blurs.size());
      for (std::size_t i = 0; i < rg.blurs.size(); ++i) {
        const std::size_t m = rg.blurs[i].size();
        std::vector<std::size_t> perm = m > 1 ? ord(rg.keys[i], m) : std::vector<std::size_t>(m, 0);
        for (auto& p : perm) p = rg.amb_to_local[i][p];
        q.order[i] = std::move(perm);
      }
    }
    q.labels.resize(k_->eqrels().size());
    if (rule_.uses_labels)
      for (const auto& [r, t] : rg.label_tuples) q.labels[r][t] = labels[r].at(t);
    return q;
  }

  // Evaluates every atom; bit i of the result is atom i.
  template <class XiFn, class OrdFn>
  std::vector<bool> evaluate(XiFn&& xi, OrdFn&& ord, const Labels& labels) const {
    std::vector<bool> out(atoms_.size());
    for (std::size_t i = 0; i < atoms_.size(); ++i) out[i] = rule_.decide(query(atoms_[i], xi, ord, labels));
    return out;
  }

  Structure to_structure(const std::vector<bool>& bits) const {
    Structure out(std::make_shared<const Signature>(rule_.target), s_.universe());
    for (std::size_t i = 0; i < atoms_.size(); ++i)
      if (bits[i]) out.add(atoms_[i].symbol, atoms_[i].tuple);
    return out;
  }

  std::vector<bool> draw_bits(const RandomnessSource& src, const Labels* fixed = nullptr) const {
    Labels labels = fixed ? *fixed : labels_from(draw_label_values(src));
    return evaluate([&](const std::string& key) { return src.variate("X" + key); },
                    [&](const std::string& key, std::size_t m) { return src.ordering(key, m); }, labels);
  }

  Structure draw(const RandomnessSource& src, const Labels* fixed = nullptr) const {
    return to_structure(draw_bits(src, fixed));
  }

 private:
  std::size_t add_range(const std::vector<Element>& rg, bool include_empty) {
    Range r{rg, restrict(s_, rg), {}, {}, {}, {}, {}};
    r.blurs = blur_set(*k_, r.local, rg, include_empty);
    for (const auto& b : r.blurs) {
      r.keys.push_back(canonical_key(*k_, b, s_));
      std::vector<std::pair<ClassHandle, std::size_t>> amb;
      std::vector<ClassHandle> ids;
      for (std::size_t j = 0; j < b.handles.size(); ++j) {
        ids.push_back(normalize(*k_, s_, b.handles[j]));
        amb.emplace_back(ids.back(), j);
      }
      r.ambient.push_back(std::move(ids));
      std::sort(amb.begin(), amb.end());
      std::vector<std::size_t> map;
      for (const auto& p : amb) map.push_back(p.second);
      r.amb_to_local.push_back(std::move(map));
    }
    const auto& ds = k_->eqrels();
    for (std::size_t q = 0; q < ds.size(); ++q) {
      if (ds[q].infinite()) continue;
      for (const auto& t : domain_tuples(r.local, ds[q])) r.label_tuples.emplace_back(q, t);
    }
    ranges_.push_back(std::move(r));
    return ranges_.size() - 1;
  }

  const StructureClass* k_;
  Structure s_;
  TypeRule rule_;  // copied: plans outlive the caller's rule object
  std::string form_;
  std::vector<Range> ranges_;
  std::vector<Atom> atoms_;
  std::vector<LabelGroup> groups_;
};

inline Structure sample_structure(const StructureClass& k, const Structure& s, const TypeRule& f, std::uint64_t seed) {
  SamplePlan plan(k, s, f);
  return plan.draw(RandomnessSource(seed));
}

inline QfType sample_marginal(const StructureClass& k, const Structure& s, const TypeRule& f, std::uint64_t seed,
                              const std::vector<Element>& sub) {
  return qf_type(sample_structure(k, s, f, seed), sub);
}

// ---------------------------------------------------------------------------
// Exact distributions.

using ExactTable = std::map<std::string, Rational>;  // output text form -> probability

struct ExactOptions {
  std::uint64_t atom_cap = 1'000'000;
};

namespace detail {

inline std::vector<std::vector<int>> all_injections(std::size_t m, std::size_t c) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  std::vector<bool> used(c + 1, false);
  std::function<void()> rec = [&] {
    if (cur.size() == m) {
      out.push_back(cur);
      return;
    }
    for (std::size_t v = 1; v <= c; ++v) {
      if (used[v]) continue;
      used[v] = true;
      cur.push_back(static_cast<int>(v));
      rec();
      cur.pop_back();
      used[v] = false;
    }
  };
  rec();
  return out;
}

inline Rational tv(const ExactTable& a, const ExactTable& b) {
  Rational sum = 0;
  for (const auto& [k, p] : a) {
    auto it = b.find(k);
    Rational d = p - (it == b.end() ? Rational(0) : it->second);
    sum += d < 0 ? Rational(-d) : d;
  }
  for (const auto& [k, p] : b)
    if (!a.count(k)) sum += p;
  return sum / 2;
}

}  // namespace detail

inline Rational exact_tv(const ExactTable& a, const ExactTable& b) { return detail::tv(a, b); }

// Enumerates the variate cube cut at the rule's thresholds, all orderings the
// rule reads, and all labelings (or the given fixed one).
inline ExactTable exact_distribution(const SamplePlan& plan, const SamplePlan::Labels* fixed = nullptr,
                                     ExactOptions opt = {}) {
  const TypeRule& rule = plan.rule();
  if (!rule.cutpoints) throw Error("rule '" + rule.name + "' has no threshold profile");
  // Cut points per global blur key, gathered from every atom's view.
  std::map<std::string, std::vector<Rational>> cuts;
  std::map<std::string, std::size_t> ord_sizes;
  SamplePlan::Labels any_labels(plan.cls().eqrels().size());
  if (rule.uses_labels) {
    std::vector<std::vector<int>> first;
    for (const auto& g : plan.label_groups()) {
      std::vector<int> v(g.classes.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i + 1);
      first.push_back(v);
    }
    any_labels = fixed ? *fixed : plan.labels_from(first);
  }
  for (const auto& a : plan.atoms()) {
    const auto& rg = plan.ranges()[a.range];
    RuleQuery q = plan.query(
        a, [](const std::string&) { return 0.5; },
        [](const std::string&, std::size_t m) {
          std::vector<std::size_t> p(m);
          for (std::size_t i = 0; i < m; ++i) p[i] = i;
          return p;
        },
        any_labels);
    for (std::size_t i = 0; i < rg.blurs.size(); ++i) {
      auto& c = cuts[rg.keys[i]];
      for (const auto& x : rule.cutpoints(q, i)) {
        if (x <= 0 || x >= 1) continue;
        c.push_back(x);
      }
      if (rule.uses_orderings && rg.blurs[i].size() > 1) ord_sizes[rg.keys[i]] = rg.blurs[i].size();
    }
  }
  struct Choice {
    std::vector<double> value;
    std::vector<Rational> weight;
  };
  std::vector<std::string> xi_keys;
  std::vector<Choice> xi_choices;
  for (auto& [key, c] : cuts) {
    if (c.empty()) continue;
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    Choice ch;
    Rational lo = 0;
    for (std::size_t i = 0; i <= c.size(); ++i) {
      const Rational hi = i < c.size() ? c[i] : Rational(1);
      // A variate equal to a cut point has probability zero; the interval
      // (lo, hi] is represented by its midpoint.
      ch.value.push_back(to_double((lo + hi) / 2));
      ch.weight.push_back(hi - lo);
      lo = hi;
    }
    xi_keys.push_back(key);
    xi_choices.push_back(std::move(ch));
  }
  std::vector<std::string> ord_keys;
  std::vector<std::vector<std::vector<std::size_t>>> ord_choices;
  for (const auto& [key, m] : ord_sizes) {
    std::vector<std::size_t> p(m);
    for (std::size_t i = 0; i < m; ++i) p[i] = i;
    std::vector<std::vector<std::size_t>> all;
    do all.push_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    ord_keys.push_back(key);
    ord_choices.push_back(std::move(all));
  }
  std::vector<std::vector<std::vector<int>>> lab_choices;
  if (rule.uses_labels && !fixed)
    for (const auto& g : plan.label_groups()) lab_choices.push_back(detail::all_injections(g.classes.size(), g.count));
  // Odometer over all coordinates.
  std::vector<std::size_t> radix;
  for (const auto& c : xi_choices) radix.push_back(c.value.size());
  for (const auto& c : ord_choices) radix.push_back(c.size());
  for (const auto& c : lab_choices) radix.push_back(c.size());
  std::uint64_t total = 1;
  for (auto r : radix) {
    if (total > opt.atom_cap / std::max<std::size_t>(r, 1) + 1) throw Error("exact mode: atom count over cap");
    total *= r;
  }
  if (total > opt.atom_cap) throw Error("exact mode: atom count over cap");
  ExactTable out;
  std::vector<std::size_t> pos(radix.size(), 0);
  std::unordered_map<std::string, double> xi_now;
  std::unordered_map<std::string, const std::vector<std::size_t>*> ord_now;
  for (std::uint64_t step = 0; step < total; ++step) {
    Rational w = 1;
    std::size_t c = 0;
    for (std::size_t i = 0; i < xi_choices.size(); ++i, ++c) {
      xi_now[xi_keys[i]] = xi_choices[i].value[pos[c]];
      w *= xi_choices[i].weight[pos[c]];
    }
    for (std::size_t i = 0; i < ord_choices.size(); ++i, ++c) {
      ord_now[ord_keys[i]] = &ord_choices[i][pos[c]];
      w /= static_cast<long>(ord_choices[i].size());
    }
    SamplePlan::Labels labels = any_labels;
    if (!lab_choices.empty()) {
      std::vector<std::vector<int>> vals;
      for (std::size_t i = 0; i < lab_choices.size(); ++i, ++c) {
        vals.push_back(lab_choices[i][pos[c]]);
        w /= static_cast<long>(lab_choices[i].size());
      }
      labels = plan.labels_from(vals);
    }
    auto bits = plan.evaluate(
        [&](const std::string& key) {
          auto it = xi_now.find(key);
          return it == xi_now.end() ? 0.5 : it->second;
        },
        [&](const std::string& key, std::size_t) { return *ord_now.at(key); }, labels);
    out[to_text(plan.to_structure(bits))] += w;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (++pos[i] < radix[i]) break;
      pos[i] = 0;
    }
  }
  return out;
}

inline ExactTable exact_distribution(const StructureClass& k, const Structure& s, const TypeRule& f,
                                     ExactOptions opt = {}) {
  SamplePlan plan(k, s, f);
  return exact_distribution(plan, nullptr, opt);
}

// Probability that every listed fact holds, read off an exact table.
inline Rational exact_probability(const ExactTable& t, const Signature& target, const std::vector<Fact>& facts) {
  Rational p = 0;
  for (const auto& [text, q] : t) {
    Structure s = parse_structure(text, target);
    bool all = true;
    for (const auto& f : facts) all = all && s.holds(f.symbol, f.args);
    if (all) p += q;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Verifiers.

struct MonteCarloOptions {
  std::uint64_t samples = 100'000;
  double tv_threshold = 0.02;
  double p_threshold = 1e-3;
  unsigned threads = 1;
};

struct EqSymmetryReport {
  bool pass = true;
  bool vacuous = false;
  std::string mode;
  std::size_t labelings = 0;
  Rational exact_tv = 0;  // exact mode
  double tv = 0;          // worst TV (as double in both modes)
  double p_value = 1;     // Monte Carlo: least p over labelings
  std::string detail;
};

namespace detail {

template <class Fn>
void parallel_for(std::uint64_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, threads);
  if (threads == 1 || n < 2 * threads) {
    for (std::uint64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::uint64_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      const std::uint64_t lo = t * chunk, hi = std::min(n, lo + chunk);
      for (std::uint64_t i = lo; i < hi; ++i) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline std::string bits_key(const std::vector<bool>& bits) {
  std::string s(bits.size(), '0');
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) s[i] = '1';
  return s;
}

inline EmpiricalDist draw_dist(const SamplePlan& plan, const RandomnessSource& base, const std::string& role,
                               const MonteCarloOptions& opt, const SamplePlan::Labels* fixed = nullptr) {
  std::vector<std::string> out(opt.samples);
  parallel_for(opt.samples, opt.threads,
               [&](std::uint64_t i) { out[i] = bits_key(plan.draw_bits(base.derive(role, i), fixed)); });
  EmpiricalDist d;
  for (const auto& s : out) d.add(s);
  return d;
}

}  // namespace detail

inline std::vector<SamplePlan::Labels> all_labelings(const SamplePlan& plan) {
  std::vector<std::vector<std::vector<int>>> per;
  for (const auto& g : plan.label_groups()) per.push_back(detail::all_injections(g.classes.size(), g.count));
  std::vector<SamplePlan::Labels> out;
  std::vector<std::vector<int>> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == per.size()) {
      out.push_back(plan.labels_from(cur));
      return;
    }
    for (const auto& v : per[i]) {
      cur.push_back(v);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

inline EqSymmetryReport check_eq_symmetry_exact(const StructureClass& k, const Structure& s, const TypeRule& f,
                                                ExactOptions opt = {}) {
  EqSymmetryReport rep;
  rep.mode = "exact";
  bool finite = false;
  for (const auto& d : k.eqrels()) finite = finite || !d.infinite();
  if (!finite) {
    rep.vacuous = true;
    rep.detail = "no eqrel with finitely many classes";
    return rep;
  }
  SamplePlan plan(k, s, f);
  const ExactTable all = exact_distribution(plan, nullptr, opt);
  for (const auto& lab : all_labelings(plan)) {
    ++rep.labelings;
    const Rational d = detail::tv(exact_distribution(plan, &lab, opt), all);
    if (d > rep.exact_tv) rep.exact_tv = d;
  }
  rep.tv = to_double(rep.exact_tv);
  rep.pass = rep.exact_tv == 0;
  rep.detail = "worst conditional TV " + rep.exact_tv.str() + " over " + std::to_string(rep.labelings) + " labelings";
  return rep;
}

inline EqSymmetryReport check_eq_symmetry_mc(const StructureClass& k, const Structure& s, const TypeRule& f,
                                             std::uint64_t seed, MonteCarloOptions opt = {}) {
  EqSymmetryReport rep;
  rep.mode = "montecarlo";
  bool finite = false;
  for (const auto& d : k.eqrels()) finite = finite || !d.infinite();
  if (!finite) {
    rep.vacuous = true;
    rep.detail = "no eqrel with finitely many classes";
    return rep;
  }
  SamplePlan plan(k, s, f);
  RandomnessSource base(seed);
  const EmpiricalDist all = detail::draw_dist(plan, base, "eqsym/all", opt);
  auto labs = all_labelings(plan);
  for (std::size_t i = 0; i < labs.size(); ++i) {
    ++rep.labelings;
    auto cond = detail::draw_dist(plan, base.derive("eqsym/label", i), "draw", opt, &labs[i]);
    auto v = verdict(cond, all, opt.tv_threshold, opt.p_threshold);
    rep.tv = std::max(rep.tv, v.tv);
    rep.p_value = std::min(rep.p_value, v.p_value);
    rep.pass = rep.pass && v.pass;
  }
  rep.detail = "worst conditional TV " + std::to_string(rep.tv) + " over " + std::to_string(rep.labelings) +
               " labelings";
  return rep;
}

struct ExchComparison {
  std::string s_text, t_text;
  std::string embedding;
  double tv = 0;
  double p_value = 1;
};

struct ExchReport {
  bool pass = true;
  std::size_t comparisons = 0;
  std::size_t structures = 0;
  double worst_tv = 0;
  double min_p = 1;
  // min_p times the number of comparisons (Bonferroni), capped at 1.
  double min_p_adjusted = 1;
  std::optional<ExchComparison> worst;
};

// For all S (isomorphism representatives up to n), T (labeled members up to
// n) and embeddings π: S -> T, compares pullback(sample(T), π) with sample(S).
// The two roles use independent draws.
inline ExchReport check_exchangeability(const StructureClass& k, const TypeRule& f, std::size_t n, std::uint64_t seed,
                                        MonteCarloOptions opt = {}, Limits lim = {}) {
  ExchReport rep;
  RandomnessSource base(seed);
  const auto reps = enumerate_upto(k, n, true, lim);
  const auto members = enumerate_upto(k, n, false, lim);
  // Role-T draws, cached per member.
  std::map<std::string, std::pair<std::unique_ptr<SamplePlan>, std::vector<std::vector<bool>>>> tcache;
  auto t_draws = [&](const Structure& t) -> auto& {
    auto key = to_text(t);
    auto it = tcache.find(key);
    if (it == tcache.end()) {
      auto plan = std::make_unique<SamplePlan>(k, t, f);
      std::vector<std::vector<bool>> draws(opt.samples);
      auto src = base.derive("exch/T/" + key, 0);
      detail::parallel_for(opt.samples, opt.threads, [&](std::uint64_t i) { draws[i] = plan->draw_bits(src.derive("draw", i)); });
      it = tcache.emplace(key, std::make_pair(std::move(plan), std::move(draws))).first;
      ++rep.structures;
    }
    return it->second;
  };
  for (const auto& s : reps) {
    SamplePlan splan(k, s, f);
    const EmpiricalDist sdist = detail::draw_dist(splan, base.derive("exch/S/" + to_text(s), 0), "draw", opt);
    ++rep.structures;
    // Atom index of each S atom, in plan order.
    for (const auto& t : members) {
      if (t.size() < s.size()) continue;
      for (const auto& pi : enumerate_embeddings(s, t)) {
        auto& [tplan, draws] = t_draws(t);
        std::map<std::pair<std::size_t, Tuple>, std::size_t> tindex;
        for (std::size_t i = 0; i < tplan->atoms().size(); ++i)
          tindex[{tplan->atoms()[i].symbol, tplan->atoms()[i].tuple}] = i;
        std::vector<std::size_t> where;
        for (const auto& a : splan.atoms()) where.push_back(tindex.at({a.symbol, pi.apply(a.tuple)}));
        EmpiricalDist pulled;
        std::string key(where.size(), '0');
        for (const auto& d : draws) {
          for (std::size_t i = 0; i < where.size(); ++i) key[i] = d[where[i]] ? '1' : '0';
          pulled.add(key);
        }
        ++rep.comparisons;
        const double tv = tv_distance(pulled, sdist);
        const double p = multinomial_two_sample(pulled, sdist).p_value;
        if (!rep.worst || tv > rep.worst->tv) {
          std::string emb;
          for (const auto& [a, b] : pi.map()) emb += (emb.empty() ? "" : " ") + std::to_string(a) + "->" + std::to_string(b);
          rep.worst = ExchComparison{to_text(s), to_text(t), emb, tv, p};
        }
        rep.worst_tv = std::max(rep.worst_tv, tv);
        rep.min_p = std::min(rep.min_p, p);
      }
    }
  }
  rep.min_p_adjusted = std::min(1.0, rep.min_p * static_cast<double>(std::max<std::size_t>(rep.comparisons, 1)));
  rep.pass = rep.worst_tv <= opt.tv_threshold && rep.min_p_adjusted >= opt.p_threshold;
  return rep;
}

// ---------------------------------------------------------------------------
// Built-in rules.

namespace rules {

inline Signature unary_p() { return Signature({{"P", 1}}); }

inline std::size_t first_infinite(const StructureClass& k) {
  for (std::size_t r = 0; r < k.eqrels().size(); ++r)
    if (k.eqrels()[r].infinite() && k.eqrels()[r].length == 1) return r;
  throw Error("rule needs an eqrel with infinitely many classes");
}

inline std::size_t first_finite(const StructureClass& k) {
  for (std::size_t r = 0; r < k.eqrels().size(); ++r)
    if (!k.eqrels()[r].infinite() && k.eqrels()[r].length == 1) return r;
  throw Error("rule needs a length-1 eqrel with finitely many classes");
}

inline Rational half() { return Rational(1, 2); }

// P(x) iff the variate of x's class is at most 1/2.
inline TypeRule classcoin() {
  TypeRule f;
  f.name = "classcoin";
  f.target = unary_p();
  f.require = [](const StructureClass& k) { first_infinite(k); };
  auto blur = [](const RuleQuery& q) {
    const auto r = static_cast<std::uint32_t>(first_infinite(*q.k) + 1);
    return Blur{{q.handle(r, q.tuple[0])}};
  };
  f.decide = [blur](const RuleQuery& q) { return q.xi_of(blur(q)) <= 0.5; };
  f.cutpoints = [blur](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i] == blur(q) ? std::vector<Rational>{half()} : std::vector<Rational>{};
  };
  return f;
}

// Exactly one class in P: labels name the classes, the empty-blur variate
// picks the label.
inline TypeRule twoclass_pick() {
  TypeRule f;
  f.name = "twoclass_pick";
  f.target = unary_p();
  f.uses_labels = true;
  f.require = [](const StructureClass& k) { first_finite(k); };
  f.decide = [](const RuleQuery& q) {
    const int eta = q.label(first_finite(*q.k), {q.tuple[0]});
    const double x = q.xi_of(Blur{});
    return (eta == 1 && x <= 0.5) || (eta == 2 && x > 0.5);
  };
  f.cutpoints = [](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i].empty() ? std::vector<Rational>{half()} : std::vector<Rational>{};
  };
  return f;
}

inline TypeRule twoclass_pick_bad() {
  TypeRule f;
  f.name = "twoclass_pick_bad";
  f.target = unary_p();
  f.uses_labels = true;
  f.require = [](const StructureClass& k) { first_finite(k); };
  f.decide = [](const RuleQuery& q) { return q.label(first_finite(*q.k), {q.tuple[0]}) == 1; };
  f.cutpoints = [](const RuleQuery&, std::size_t) { return std::vector<Rational>{}; };
  return f;
}

// P from the variate of the blur joining x's classes under the first two
// infinite eqrels when that is an antichain, else of the finer class alone.
inline TypeRule two_eq_demo() {
  TypeRule f;
  f.name = "two_eq_demo";
  f.target = unary_p();
  auto blur = [](const RuleQuery& q) {
    std::vector<std::uint32_t> kinds;
    for (std::size_t r = 0; r < q.k->eqrels().size() && kinds.size() < 2; ++r)
      if (q.k->eqrels()[r].infinite()) kinds.push_back(static_cast<std::uint32_t>(r + 1));
    if (kinds.size() < 2) throw Error("two_eq_demo needs two eqrels with infinitely many classes");
    Blur both{{q.handle(kinds[0], q.tuple[0]), q.handle(kinds[1], q.tuple[0])}};
    std::sort(both.handles.begin(), both.handles.end());
    if (q.find(both)) return both;
    return Blur{{q.handle(kinds[1], q.tuple[0])}};
  };
  f.decide = [blur](const RuleQuery& q) { return q.xi_of(blur(q)) <= 0.5; };
  f.cutpoints = [blur](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i] == blur(q) ? std::vector<Rational>{half()} : std::vector<Rational>{};
  };
  return f;
}

inline constexpr int kApBits = 16;

inline Signature ap_signature(int bits = kApBits) {
  std::vector<Symbol> syms;
  for (int i = 1; i <= bits; ++i) syms.push_back({"U" + std::to_string(i), 1});
  return Signature(syms);
}

// U_i(x) iff bit i of the mean of all variates in B({x}) is set.
inline TypeRule ap_array() {
  TypeRule f;
  f.name = "ap_array";
  f.target = ap_signature();
  f.decide = [](const RuleQuery& q) {
    double v = 0;
    for (double x : q.xi) v += x;
    v /= static_cast<double>(q.xi.size());
    const auto scaled = static_cast<std::uint32_t>(std::ldexp(v, kApBits));
    return ((scaled >> (kApBits - 1 - q.symbol)) & 1u) != 0;
  };
  return f;
}

inline TypeRule constant_empty() {
  TypeRule f;
  f.name = "constant_empty";
  f.target = unary_p();
  f.decide = [](const RuleQuery&) { return false; };
  f.cutpoints = [](const RuleQuery&, std::size_t) { return std::vector<Rational>{}; };
  return f;
}

// Reads element identity: not exchangeable.
inline TypeRule pin_first() {
  TypeRule f;
  f.name = "pin_first";
  f.target = unary_p();
  f.decide = [](const RuleQuery& q) { return q.tuple[0] == 1; };
  f.cutpoints = [](const RuleQuery&, std::size_t) { return std::vector<Rational>{}; };
  return f;
}

// Element-wise rules reading one variate, ξ_∅ or ξ_{x}, against one threshold.
enum class Coordinate { Empty, Element };
inline TypeRule failed_rep(Coordinate c, bool at_most, Rational threshold) {
  TypeRule f;
  f.name = std::string("failed_rep:") + (c == Coordinate::Empty ? "empty" : "x") + ":" + (at_most ? "le" : "gt") +
           ":" + threshold.str();
  f.target = unary_p();
  auto blur = [c](const RuleQuery& q) { return c == Coordinate::Empty ? Blur{} : Blur{{{0, q.tuple[0]}}}; };
  const double t = to_double(threshold);
  if (to_double(Rational(t)) != to_double(threshold) || Rational(t) != threshold)
    throw Error("failed_rep threshold must be a dyadic rational with at most 53 bits");
  f.decide = [blur, at_most, t](const RuleQuery& q) {
    const double x = q.xi_of(blur(q));
    return at_most ? x <= t : x > t;
  };
  f.cutpoints = [blur, threshold](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i] == blur(q) ? std::vector<Rational>{threshold} : std::vector<Rational>{};
  };
  return f;
}

inline std::vector<std::string> names() {
  return {"classcoin", "twoclass_pick", "twoclass_pick_bad", "two_eq_demo", "ap_array", "constant_empty", "pin_first"};
}

}  // namespace rules

// Named rules; `failed_rep:<empty|x>:<le|gt>:<p/q>` builds a failed-rep rule.
inline TypeRule builtin_rule(const std::string& name) {
  if (name == "classcoin") return rules::classcoin();
  if (name == "twoclass_pick") return rules::twoclass_pick();
  if (name == "twoclass_pick_bad") return rules::twoclass_pick_bad();
  if (name == "two_eq_demo") return rules::two_eq_demo();
  if (name == "ap_array") return rules::ap_array();
  if (name == "constant_empty") return rules::constant_empty();
  if (name == "pin_first") return rules::pin_first();
  if (name.rfind("failed_rep:", 0) == 0) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
      auto c = name.find(':', pos);
      parts.push_back(name.substr(pos, c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (parts.size() == 4 && (parts[1] == "empty" || parts[1] == "x") && (parts[2] == "le" || parts[2] == "gt")) {
      try {
        return rules::failed_rep(parts[1] == "empty" ? rules::Coordinate::Empty : rules::Coordinate::Element,
                                 parts[2] == "le", Rational(parts[3]));
      } catch (const std::runtime_error&) {
      }
    }
    throw Error("bad failed_rep rule name '" + name + "'");
  }
  throw Error("unknown rule '" + name + "'");
}

}  // namespace exch
