#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "exch/classdef.hpp"
#include "exch/equiv.hpp"
#include "exch/random.hpp"
#include "exch/sampler.hpp"

namespace exch {

namespace detail {

inline std::string fresh_symbol(const Signature& sig, std::string name) {
  while (sig.find(name)) name += "_";
  return name;
}

inline std::size_t eqrel_index(const std::vector<EqRelDecl>& ds, const std::string& id) {
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds[i].id == id) return i;
  throw Error("unknown eqrel '" + id + "'");
}

inline std::size_t last_eqrel(const StructureClass& k, const std::string& id) {
  const auto& ds = k.eqrels();
  const std::size_t d = eqrel_index(ds, id);
  if (d + 1 != ds.size())
    throw Error("eqrel '" + id + "' is not the last declared one; eliminate '" + ds.back().id + "' first");
  return d;
}

// Variable blocks x (0..k-1) and y (k..2k-1) with printable names.
inline std::vector<std::string> block_names(int k, int blocks) {
  std::vector<std::string> out;
  const char* base = "xyz";
  for (int b = 0; b < blocks; ++b)
    for (int i = 0; i < k; ++i)
      out.push_back(std::string(1, base[b % 3]) + (k > 1 ? std::to_string(i) : std::string()));
  return out;
}

inline std::vector<int> block(int k, int b) {
  std::vector<int> v(k);
  for (int i = 0; i < k; ++i) v[i] = b * k + i;
  return v;
}

inline std::vector<int> join(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline Formula domain_formula(const Signature& sig, const EqRelDecl& d, const std::vector<int>& x) {
  if (!d.domain) return Formula::constant(true);
  auto a = Formula::atom(sig.index_of(*d.domain), x);
  return d.domain_complement ? Formula::neg(std::move(a)) : a;
}

}  // namespace detail

// ===========================================================================
// Finite case: v classes per star class become v fresh predicates.

inline std::string fin_pred_name(const std::string& id, int i) { return "P_" + id + "_" + std::to_string(i); }

// Universal constraints saying that P_1..P_v label the classes of d: every
// domain tuple carries exactly one label, labels are constant on classes and
// distinct classes in one star class carry distinct labels.
inline std::vector<Constraint> labeling_constraints(const Signature& sig, const std::vector<EqRelDecl>& ds,
                                                    const EqRelDecl& d, const std::vector<std::size_t>& preds) {
  const int k = d.length;
  const auto x = detail::block(k, 0), y = detail::block(k, 1);
  const auto n1 = detail::block_names(k, 1), n2 = detail::block_names(k, 2);
  const std::size_t rel = sig.index_of(d.relation);
  auto P = [&](std::size_t i, const std::vector<int>& v) { return Formula::atom(preds[i], v); };
  std::vector<Constraint> out;
  std::vector<Formula> inside, any;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    inside.push_back(Formula::implies(P(i, x), detail::domain_formula(sig, d, x)));
    any.push_back(P(i, x));
  }
  out.push_back({n1, Formula::all(std::move(inside))});
  out.push_back({n1, Formula::implies(detail::domain_formula(sig, d, x), Formula::any(std::move(any)))});
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = i + 1; j < preds.size(); ++j)
      out.push_back({n1, Formula::neg(Formula::all({P(i, x), P(j, x)}))});
  Formula star = Formula::constant(true);
  if (d.star) star = Formula::atom(sig.index_of(find_eqrel(ds, *d.star).relation), detail::join(x, y));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out.push_back({n2, Formula::implies(Formula::all({P(i, x), Formula::atom(rel, detail::join(x, y))}), P(i, y))});
    out.push_back({n2, Formula::implies(Formula::all({P(i, x), P(i, y), star}), Formula::atom(rel, detail::join(x, y)))});
  }
  return out;
}

// Membership oracle for K_{~d} over a base given only as an oracle: the
// reduct is in the base and the predicates label d's classes.
class FinClass : public StructureClass {
 public:
  FinClass(ClassPtr base, std::shared_ptr<const Signature> sig, std::vector<Constraint> labeling,
           std::vector<EqRelDecl> eqrels, std::string label)
      : base_(std::move(base)),
        sig_(std::move(sig)),
        eqrels_(std::move(eqrels)),
        shell_(ClassSpec{*sig_, std::move(labeling), {}, 0}, "labeling"),
        label_(std::move(label)) {}

  const std::shared_ptr<const Signature>& signature_ptr() const override { return sig_; }
  const std::vector<EqRelDecl>& eqrels() const override { return eqrels_; }
  std::string describe() const override { return label_; }

  Membership membership(const Structure& s) const override {
    if (!(s.signature() == *sig_)) throw Error("signature mismatch");
    if (!shell_.contains(s)) return Membership::NonMember;
    Structure r(base_->signature_ptr(), s.universe());
    for (std::size_t j = 0; j < base_->signature().size(); ++j)
      for (const auto& t : s.relation(j)) r.add(j, t);
    return base_->membership(r);
  }

  void necessary(const AtomTable& table, std::vector<GroundFormula>& out) const override {
    shell_.necessary(table, out);
    // Base symbols are a prefix of the signature with equal arities, so atom
    // ids over the same universe coincide.
    AtomTable bt(base_->signature_ptr(), table.universe());
    base_->necessary(bt, out);
  }

 private:
  ClassPtr base_;
  std::shared_ptr<const Signature> sig_;
  std::vector<EqRelDecl> eqrels_;
  SpecClass shell_;
  std::string label_;
};

struct FinExpansion {
  ClassPtr base;
  std::size_t d = 0;
  EqRelDecl decl;
  int v = 0;
  std::vector<std::size_t> preds;  // symbol of label i is preds[i-1]
  std::shared_ptr<const Signature> sig;
  std::optional<ClassSpec> spec;  // present when the base is given by a spec
  ClassPtr cls;                   // K_{~d}
};

inline std::shared_ptr<const FinExpansion> class_fin(ClassPtr base, const std::string& id) {
  auto fe = std::make_shared<FinExpansion>();
  fe->base = base;
  fe->d = detail::last_eqrel(*base, id);
  const auto& ds = base->eqrels();
  fe->decl = ds[fe->d];
  if (fe->decl.infinite()) throw Error("eqrel '" + id + "' has infinitely many classes");
  fe->v = *fe->decl.count;
  std::vector<Symbol> more;
  Signature acc = base->signature();
  for (int i = 1; i <= fe->v; ++i) {
    Symbol sym{detail::fresh_symbol(acc, fin_pred_name(id, i)), fe->decl.length};
    acc = acc.extended({sym});
    fe->preds.push_back(acc.size() - 1);
  }
  fe->sig = std::make_shared<const Signature>(acc);
  auto labeling = labeling_constraints(*fe->sig, ds, fe->decl, fe->preds);
  std::vector<EqRelDecl> rest(ds.begin(), ds.begin() + static_cast<std::ptrdiff_t>(fe->d));
  const std::string label = base->describe() + "~" + id;
  if (auto sc = std::dynamic_pointer_cast<const SpecClass>(base)) {
    ClassSpec spec = sc->spec();
    spec.sig = *fe->sig;
    // d stops being declared, so its equivalence and nesting axioms become
    // plain constraints; the count follows from the injective labels.
    bool encoded = false;
    auto ax = detail::eqrel_axioms(spec.sig, spec.eqrels, fe->decl, 0, encoded);
    spec.constraints.insert(spec.constraints.end(), ax.begin(), ax.end());
    spec.constraints.insert(spec.constraints.end(), labeling.begin(), labeling.end());
    spec.eqrels = rest;
    fe->spec = spec;
    fe->cls = make_class(spec, label);
  } else {
    fe->cls = std::make_shared<FinClass>(base, fe->sig, labeling, rest, label);
  }
  return fe;
}

namespace detail {

// Throws unless eta labels every domain tuple of d in s consistently.
inline void require_valid_labeling(const Structure& s, const std::vector<EqRelDecl>& ds, const EqRelDecl& d, int v,
                                   const std::map<Tuple, int>& eta) {
  const auto dom = domain_tuples(s, d);
  for (const auto& t : dom) {
    auto it = eta.find(t);
    if (it == eta.end()) throw Error("invalid labeling: a domain tuple of " + d.id + " has no label");
    if (it->second < 1 || it->second > v) throw Error("invalid labeling: label outside [1," + std::to_string(v) + "]");
  }
  for (const auto& a : dom)
    for (const auto& b : dom) {
      if (!star_related(s, ds, d, a, b)) continue;
      if (related(s, d, a, b) != (eta.at(a) == eta.at(b)))
        throw Error("invalid labeling: labels must agree exactly on equivalent tuples of " + d.id);
    }
}

}  // namespace detail

// S^{η_d}: adds P_i = {x : η_d(x) = i}.
inline Structure expand_fin(const FinExpansion& fe, const Structure& s, const std::map<Tuple, int>& eta) {
  if (!(s.signature() == fe.base->signature())) throw Error("expand_fin: signature mismatch");
  detail::require_valid_labeling(s, fe.base->eqrels(), fe.decl, fe.v, eta);
  Structure out(fe.sig, s.universe());
  for (std::size_t j = 0; j < s.signature().size(); ++j)
    for (const auto& t : s.relation(j)) out.add(j, t);
  for (const auto& t : domain_tuples(s, fe.decl)) out.add(fe.preds[eta.at(t) - 1], t);
  return out;
}

// S'⁻: forgets the label predicates.
inline Structure reduct_fin(const FinExpansion& fe, const Structure& s) {
  if (!(s.signature() == *fe.sig)) throw Error("reduct_fin: signature mismatch");
  Structure out(fe.base->signature_ptr(), s.universe());
  for (std::size_t j = 0; j < fe.base->signature().size(); ++j)
    for (const auto& t : s.relation(j)) out.add(j, t);
  return out;
}

// Labels read off the predicates.
inline std::map<Tuple, int> labeling_of(const FinExpansion& fe, const Structure& s) {
  std::map<Tuple, int> out;
  for (std::size_t i = 0; i < fe.preds.size(); ++i)
    for (const auto& t : s.relation(fe.preds[i])) out[t] = static_cast<int>(i + 1);
  return out;
}

// A group of predicates labeling the classes of one relation: the domain and
// star are read by symbol name so the group stays meaningful after later
// stages remove the declarations.
struct SymmetryGroup {
  std::vector<std::string> preds;
  int length = 1;
  std::optional<std::string> domain;
  bool domain_complement = false;
  std::optional<std::string> star_relation;
};

inline SymmetryGroup symmetry_group(const FinExpansion& fe) {
  SymmetryGroup g;
  for (auto p : fe.preds) g.preds.push_back((*fe.sig)[p].name);
  g.length = fe.decl.length;
  g.domain = fe.decl.domain;
  g.domain_complement = fe.decl.domain_complement;
  if (fe.decl.star) g.star_relation = find_eqrel(fe.base->eqrels(), *fe.decl.star).relation;
  return g;
}

namespace detail {

inline std::vector<Tuple> group_domain(const Structure& s, const SymmetryGroup& g) {
  EqRelDecl d;
  d.length = g.length;
  d.domain = g.domain;
  d.domain_complement = g.domain_complement;
  return domain_tuples(s, d);
}

inline bool group_star_related(const Structure& s, const SymmetryGroup& g, const Tuple& a, const Tuple& b) {
  return !g.star_relation || s.holds(*g.star_relation, concat(a, b));
}

inline std::vector<std::vector<Tuple>> group_star_classes(const Structure& s, const SymmetryGroup& g) {
  std::vector<std::vector<Tuple>> out;
  for (const auto& t : group_domain(s, g)) {
    bool placed = false;
    for (auto& c : out)
      if (group_star_related(s, g, c[0], t)) {
        c.push_back(t);
        placed = true;
        break;
      }
    if (!placed) out.push_back({t});
  }
  return out;
}

}  // namespace detail

// S_{π|C}: inside the star class C a tuple labeled i is relabeled π(i)
// (perm[i-1] = π(i)); outside C nothing changes.
inline Structure permute_classes(const Structure& s, const SymmetryGroup& g, const std::vector<int>& perm,
                                 const std::vector<Tuple>& star_class) {
  const std::size_t v = g.preds.size();
  if (perm.size() != v) throw Error("permute_classes: permutation has the wrong size");
  std::vector<int> seen(v + 1, 0);
  for (int p : perm) {
    if (p < 1 || p > static_cast<int>(v) || seen[p]++) throw Error("permute_classes: not a permutation");
  }
  std::set<Tuple> c(star_class.begin(), star_class.end());
  bool is_class = false;
  for (const auto& sc : detail::group_star_classes(s, g))
    if (std::set<Tuple>(sc.begin(), sc.end()) == c) is_class = true;
  if (!is_class) throw Error("permute_classes: tuple set is not a star class");
  std::vector<std::size_t> idx;
  for (const auto& p : g.preds) idx.push_back(s.signature().index_of(p));
  Structure out = s;
  for (const auto& t : c)
    for (std::size_t i = 0; i < v; ++i) out.set(idx[i], t, false);
  for (const auto& t : c)
    for (std::size_t i = 0; i < v; ++i)
      if (s.holds(idx[i], t)) out.add(idx[perm[i] - 1], t);
  return out;
}

// Closure of k under permute_classes for every member up to n, every star
// class and every permutation, for each given group (earlier groups check
// that previously established symmetries survive).
inline CheckReport check_symmetric_within(const StructureClass& k, const std::vector<SymmetryGroup>& groups,
                                          std::size_t n, Limits lim = {}) {
  CheckReport r;
  r.check = "symmetric-within";
  bool any = false;
  for (const auto& g : groups) any = any || g.preds.size() > 1;
  if (!any) {
    r.detail = "vacuous: no group has two or more predicates";
    return r;
  }
  for (const auto& s : enumerate_upto(k, n, true, lim))
    for (const auto& g : groups) {
      if (g.preds.size() < 2) continue;
      std::vector<int> perm(g.preds.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i + 1);
      for (const auto& c : detail::group_star_classes(s, g)) {
        auto p = perm;
        while (std::next_permutation(p.begin(), p.end())) {
          ++r.cases;
          Structure t = permute_classes(s, g, p, c);
          if (!k.contains(t)) {
            r.ok = false;
            r.detail = "permuting the labels of a star class leaves the class";
            r.witness = {{"member", s}, {"permuted", t}};
            return r;
          }
        }
      }
    }
  r.detail = "closed under label permutations up to size " + std::to_string(n);
  return r;
}

// f' reads f on S^{η_d} with the same variates, orderings and remaining labels.
inline TypeRule lift_rule_fin(const TypeRule& f, std::shared_ptr<const FinExpansion> fe) {
  TypeRule g;
  g.name = f.name + "^" + fe->decl.id;
  g.target = f.target;
  g.uses_orderings = f.uses_orderings;
  g.uses_labels = true;
  auto run = [f, fe](const RuleQuery& q, auto&& body) {
    std::map<Tuple, int> eta;
    for (const auto& t : domain_tuples(*q.local, fe->decl)) eta[t] = q.label(fe->d, t);
    Structure local = expand_fin(*fe, *q.local, eta);
    RuleQuery inner = q;
    inner.k = fe->cls.get();
    inner.local = &local;
    inner.labels.resize(fe->d);
    return body(inner);
  };
  g.decide = [f, run](const RuleQuery& q) { return run(q, [&](const RuleQuery& in) { return f.decide(in); }); };
  if (f.cutpoints)
    g.cutpoints = [f, run](const RuleQuery& q, std::size_t i) {
      return run(q, [&](const RuleQuery& in) { return f.cutpoints(in, i); });
    };
  return g;
}

// ===========================================================================
// Infinite case: class points and pair-coded elements.

enum class SideTag { ClassSide, ElementSide, Doubled };

inline const char* side_tag_name(SideTag t) {
  switch (t) {
    case SideTag::ClassSide: return "class-side";
    case SideTag::ElementSide: return "element-side";
    default: return "doubled";
  }
}

struct InfOptions {
  std::size_t detect_n = 4;      // members inspected when a side is not declared
  std::size_t bound = 2;         // extra points in the membership extension search
  std::uint64_t search_cap = 1u << 16;  // candidate extensions before giving up
  Limits lim{};
};

struct InfExpansion {
  ClassPtr base;
  std::size_t d = 0;
  EqRelDecl decl;
  std::optional<std::size_t> v_sym;  // domain symbol of d; nullopt when the domain is everything
  bool v_neg = false;                 // d's domain is the complement of v_sym
  std::size_t c_sym = 0;             // the class marker C
  std::shared_ptr<const Signature> sig;  // base symbols (with new arities), then C
  std::vector<SideTag> tags;         // per symbol of sig
  std::vector<std::string> tag_source;  // "declared", "forced" or "detected" ("arity" for doubled)
  std::vector<EqRelDecl> eqrels;     // of K_{~d}
  std::vector<Constraint> meaningful;  // universal form of the meaningful conditions
  std::vector<Constraint> distinct;    // distinct class points are d-inequivalent
  InfOptions opt;

  bool is_c(const Structure& s, Element x) const { return s.holds(c_sym, {x}); }
  bool is_v(const Structure& s, Element x) const { return v_sym ? s.holds(*v_sym, {x}) != v_neg : !is_c(s, x); }
  bool is_e(const Structure& s, Element x) const { return !is_c(s, x) && !is_v(s, x); }
  std::size_t d_rel() const { return base->signature().index_of(decl.relation); }
};

namespace detail {

// Bounded evidence for the side of a unary symbol or an eqrel relation.
inline SideTag detect_side(const StructureClass& base, const EqRelDecl& d, std::size_t sym, const InfOptions& opt) {
  const auto& sig = base.signature();
  const auto& ds = base.eqrels();
  const bool unary = sig[sym].arity == 1;
  bool splits_star = false, splits_class = false;
  for (const auto& s : enumerate_upto(base, opt.detect_n, true, opt.lim)) {
    const auto dom = domain_tuples(s, d);
    for (const auto& a : dom)
      for (const auto& b : dom) {
        if (!star_related(s, ds, d, a, b)) continue;
        const bool differ = unary ? s.holds(sym, a) != s.holds(sym, b) : !s.holds(sym, concat(a, b));
        if (!differ) continue;
        splits_star = true;
        if (related(s, d, a, b)) splits_class = true;
      }
  }
  if (!splits_star) return SideTag::ClassSide;
  if (splits_class) return SideTag::ElementSide;
  throw Error("side of " + sig[sym].name + " relative to " + d.id + " is undetermined up to size " +
              std::to_string(opt.detect_n) + "; declare it with 'side " + sig[sym].name + " class|element;'");
}

}  // namespace detail

inline std::shared_ptr<const InfExpansion> make_inf_expansion(ClassPtr base, const std::string& id, InfOptions opt = {}) {
  auto ex = std::make_shared<InfExpansion>();
  ex->base = base;
  ex->opt = opt;
  ex->d = detail::last_eqrel(*base, id);
  const auto& ds = base->eqrels();
  ex->decl = ds[ex->d];
  const auto& d = ex->decl;
  if (!d.infinite()) throw Error("eqrel '" + id + "' has finitely many classes");
  if (d.length != 1) throw Error("eqrel '" + id + "' has infinitely many classes and length > 1");
  const Signature& sig = base->signature();
  if (d.domain) ex->v_sym = sig.index_of(*d.domain);
  ex->v_neg = d.domain_complement;
  const std::size_t drel = sig.index_of(d.relation);
  std::map<std::size_t, std::size_t> defines;  // relation symbol -> eqrel index (length 1)
  for (std::size_t r = 0; r < ex->d; ++r) {
    if (ds[r].length != 1)
      throw Error("eqrel '" + ds[r].id + "' has length > 1 and cannot survive eliminating '" + id + "'");
    defines[sig.index_of(ds[r].relation)] = r;
  }
  std::vector<Symbol> syms;
  for (std::size_t j = 0; j < sig.size(); ++j) {
    const int a = sig[j].arity;
    SideTag tag = SideTag::Doubled;
    std::string src = "arity";
    if (ex->v_sym && j == *ex->v_sym) {
      tag = SideTag::ElementSide;
      src = "forced";
    } else if (j == drel) {
      tag = SideTag::ClassSide;
      src = "forced";
    } else if (a == 1 || (a == 2 && defines.count(j))) {
      std::optional<Side> declared;
      for (const auto& [name, side] : d.sides)
        if (name == sig[j].name) declared = side;
      if (declared && *declared != Side::Auto) {
        tag = *declared == Side::ClassSide ? SideTag::ClassSide : SideTag::ElementSide;
        src = "declared";
      } else {
        tag = detail::detect_side(*base, d, j, opt);
        src = "detected";
      }
    }
    ex->tags.push_back(tag);
    ex->tag_source.push_back(src);
    syms.push_back({sig[j].name, tag == SideTag::Doubled ? 2 * a : a});
  }
  const std::string c_name = detail::fresh_symbol(sig, "C");
  syms.push_back({c_name, 1});
  ex->tags.push_back(SideTag::ClassSide);
  ex->tag_source.push_back("forced");
  ex->c_sym = syms.size() - 1;
  ex->sig = std::make_shared<const Signature>(syms);
  const Signature& ls = *ex->sig;

  // Surviving declarations with domains moved to the matching side.
  for (std::size_t r = 0; r < ex->d; ++r) {
    EqRelDecl e = ds[r];
    const SideTag t = ex->tags[sig.index_of(e.relation)];
    const bool same_domain = e.domain == d.domain && e.domain_complement == d.domain_complement;
    if (same_domain) {
      if (t == SideTag::ClassSide) {
        e.domain = c_name;
        e.domain_complement = false;
      } else if (d.domain) {
        // Copied from d, complement included.
      } else {
        e.domain = c_name;
        e.domain_complement = true;
      }
    } else if (!e.domain && d.domain) {
      // Class side: outside V. Element side: outside C.
      e.domain = t == SideTag::ClassSide ? *d.domain : c_name;
      e.domain_complement = t == SideTag::ClassSide ? !d.domain_complement : true;
    } else if (e.domain && !e.domain_complement && ex->tags[sig.index_of(*e.domain)] == t) {
      // Already confined to the right side.
    } else {
      throw Error("eqrel '" + e.id + "': its domain cannot be placed on one side of '" + id + "'");
    }
    e.sides.clear();
    ex->eqrels.push_back(e);
  }

  // Meaningful conditions and distinct class points, as universal constraints.
  auto C = [&](int x) { return Formula::atom(ex->c_sym, {x}); };
  auto V = [&](int x) {
    if (!ex->v_sym) return Formula::neg(C(x));
    auto a = Formula::atom(*ex->v_sym, {x});
    return ex->v_neg ? Formula::neg(std::move(a)) : a;
  };
  auto E = [&](int x) {
    return ex->v_sym ? Formula::all({Formula::neg(C(x)), Formula::neg(V(x))}) : Formula::constant(false);
  };
  const std::vector<std::string> n1{"x"}, n2{"x", "y"};
  auto& out = ex->meaningful;
  if (ex->v_sym) out.push_back({n1, Formula::neg(Formula::all({C(0), V(0)}))});
  for (std::size_t j = 0; j < sig.size(); ++j) {
    const SideTag t = ex->tags[j];
    const int a = sig[j].arity;
    if (t == SideTag::Doubled) {
      std::vector<std::string> names;
      std::vector<int> args;
      std::vector<Formula> pairs;
      for (int i = 0; i < a; ++i) {
        names.push_back("x" + std::to_string(i + 1));
        names.push_back("y" + std::to_string(i + 1));
        const int xv = 2 * i, yv = 2 * i + 1;
        args.push_back(xv);
        args.push_back(yv);
        pairs.push_back(Formula::any({Formula::all({V(xv), C(yv)}), Formula::all({Formula::eq(xv, yv), E(xv)})}));
      }
      out.push_back({names, Formula::implies(Formula::atom(j, args), Formula::all(std::move(pairs)))});
    } else if (a == 1) {
      if (ex->v_neg && j == *ex->v_sym) continue;  // holds on class points, fixed by the first constraint
      auto banned = t == SideTag::ClassSide ? V(0) : C(0);
      out.push_back({n1, Formula::implies(Formula::atom(j, {0}), Formula::neg(banned))});
    } else {
      auto ok = [&](int x) { return t == SideTag::ClassSide ? Formula::neg(V(x)) : Formula::neg(C(x)); };
      out.push_back({n2, Formula::implies(Formula::atom(j, {0, 1}), Formula::all({ok(0), ok(1)}))});
    }
  }
  ex->distinct.push_back({n2, Formula::implies(Formula::all({C(0), C(1)}),
                                               Formula::binary(Formula::Op::Iff, Formula::atom(drel, {0, 1}),
                                                               Formula::eq(0, 1)))});
  (void)ls;
  return ex;
}

inline SideTag side_tag(const InfExpansion& ex, const std::string& symbol) {
  return ex.tags.at(ex.sig->index_of(symbol));
}

inline bool is_meaningful(const InfExpansion& ex, const Structure& s) {
  if (!(s.signature() == *ex.sig)) throw Error("is_meaningful: signature mismatch");
  for (const auto& c : ex.meaningful)
    if (violation(c, s)) return false;
  return true;
}

inline bool is_large_enough(const InfExpansion& ex, const Structure& s) {
  bool c = false, v = false;
  for (Element x : s.universe()) {
    c = c || ex.is_c(s, x);
    v = v || ex.is_v(s, x);
  }
  return c && v;
}

// S'⁻ with its pair map: element i+1 stands for pairs[i], either (v,c) or (e,e).
struct MinusResult {
  Structure s;
  std::vector<Element> carrier;  // universe of S'
  std::vector<std::pair<Element, Element>> pairs;
  std::map<std::pair<Element, Element>, Element> id_of;

  Element pi_v(Element x) const { return pairs.at(x - 1).first; }
  Element pi_c(Element x) const { return pairs.at(x - 1).second; }
};

inline MinusResult minus(const InfExpansion& ex, const Structure& sp) {
  if (!is_meaningful(ex, sp)) throw Error("minus: structure is not meaningful");
  MinusResult m;
  m.carrier = sp.universe();
  std::vector<Element> vs, cs, es;
  for (Element x : sp.universe()) (ex.is_c(sp, x) ? cs : ex.is_v(sp, x) ? vs : es).push_back(x);
  for (Element v : vs)
    for (Element c : cs) m.pairs.emplace_back(v, c);
  for (Element e : es) m.pairs.emplace_back(e, e);
  std::sort(m.pairs.begin(), m.pairs.end());
  for (std::size_t i = 0; i < m.pairs.size(); ++i) m.id_of[m.pairs[i]] = static_cast<Element>(i + 1);
  const std::size_t n = m.pairs.size();
  m.s = Structure(ex.base->signature_ptr(), iota_universe(n));
  const Signature& sig = ex.base->signature();
  for (std::size_t j = 0; j < sig.size(); ++j) {
    const SideTag t = ex.tags[j];
    auto proj = [&](Element x) { return t == SideTag::ClassSide ? m.pi_c(x) : m.pi_v(x); };
    if (t == SideTag::Doubled) {
      for (const auto& f : sp.relation(j)) {
        Tuple u;
        for (std::size_t i = 0; i < f.size(); i += 2) u.push_back(m.id_of.at({f[i], f[i + 1]}));
        m.s.add(j, u);
      }
    } else if (sig[j].arity == 1) {
      for (Element x = 1; x <= static_cast<Element>(n); ++x)
        if (sp.holds(j, {proj(x)})) m.s.add(j, {x});
    } else {
      for (Element x = 1; x <= static_cast<Element>(n); ++x)
        for (Element y = 1; y <= static_cast<Element>(n); ++y)
          if (sp.holds(j, {proj(x), proj(y)})) m.s.add(j, {x, y});
    }
  }
  return m;
}

// Membership in K_{~d}: some meaningful, large enough S0 ⊇ S' with at most
// `bound` extra points has S0⁻ in the base class.
inline Membership class_inf_contains(const InfExpansion& ex, const Structure& sp, std::size_t bound,
                                     std::uint64_t cap) {
  if (!(sp.signature() == *ex.sig)) throw Error("signature mismatch");
  for (const auto* cs : {&ex.meaningful, &ex.distinct})
    for (const auto& c : *cs)
      if (violation(c, sp)) return Membership::NonMember;
  bool has_c = false, has_v = false;
  for (Element x : sp.universe()) {
    has_c = has_c || ex.is_c(sp, x);
    has_v = has_v || ex.is_v(sp, x);
  }
  std::vector<Constraint> all = ex.meaningful;
  all.insert(all.end(), ex.distinct.begin(), ex.distinct.end());
  const SpecClass shell(ClassSpec{*ex.sig, all, {}, 0}, "shell");
  enum Kind { KC, KV, KE };
  std::vector<Kind> kinds{KC, KV};
  if (ex.v_sym) kinds.push_back(KE);
  const Element top = sp.universe().empty() ? 0 : sp.universe().back();
  std::uint64_t tried = 0;
  bool over = false;
  for (std::size_t j = 0; j <= bound; ++j) {
    // Multisets of kinds for the new points (the points are interchangeable).
    std::vector<std::size_t> pick(j, 0);
    while (true) {
      bool nc = has_c, nv = has_v;
      for (auto p : pick) {
        nc = nc || kinds[p] == KC;
        nv = nv || kinds[p] == KV;
      }
      if (nc && nv) {
        std::vector<Element> u = sp.universe();
        for (std::size_t i = 0; i < j; ++i) u.push_back(top + 1 + static_cast<Element>(i));
        AtomTable table(ex.sig, u);
        std::vector<std::int8_t> init(table.size(), kUnknown);
        for (AtomId a = 0; a < table.size(); ++a) {
          const Tuple t = table.tuple_of(a);
          bool old = true;
          for (Element e : t) old = old && e <= top;
          if (old) init[a] = sp.holds(table.symbol_of(a), t) ? kTrue : kFalse;
        }
        for (std::size_t i = 0; i < j; ++i) {
          const Element z = top + 1 + static_cast<Element>(i);
          init[table.id(ex.c_sym, {z})] = kinds[pick[i]] == KC ? kTrue : kFalse;
          if (ex.v_sym) init[table.id(*ex.v_sym, {z})] = (kinds[pick[i]] == KV) != ex.v_neg ? kTrue : kFalse;
        }
        std::vector<GroundFormula> fs;
        shell.necessary(table, fs);
        std::vector<AtomId> order;
        for (AtomId a = 0; a < table.size(); ++a)
          if (init[a] == kUnknown) order.push_back(a);
        Completion search(table.size(), &fs);
        bool found = false;
        search.run(init, order, [&](const std::vector<std::int8_t>& vals) {
          if (++tried > cap) {
            over = true;
            return true;
          }
          Structure s0 = table.to_structure(vals);
          if (!shell.contains(s0)) return false;
          if (ex.base->contains(minus(ex, s0).s)) {
            found = true;
            return true;
          }
          return false;
        });
        if (found) return Membership::Member;
        if (over) return Membership::Indeterminate;
      }
      // Next nondecreasing kind sequence.
      std::size_t i = j;
      while (i > 0 && pick[i - 1] + 1 == kinds.size()) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t q = i; q < j; ++q) pick[q] = pick[i - 1];
    }
  }
  return Membership::NonMember;
}

class InfClass : public StructureClass {
 public:
  explicit InfClass(std::shared_ptr<const InfExpansion> ex) : ex_(std::move(ex)) {
    std::vector<Constraint> all = ex_->meaningful;
    all.insert(all.end(), ex_->distinct.begin(), ex_->distinct.end());
    shell_ = std::make_unique<SpecClass>(ClassSpec{*ex_->sig, all, {}, 0}, "shell");
  }

  const std::shared_ptr<const Signature>& signature_ptr() const override { return ex_->sig; }
  const std::vector<EqRelDecl>& eqrels() const override { return ex_->eqrels; }
  std::string describe() const override { return ex_->base->describe() + "~" + ex_->decl.id; }
  const InfExpansion& expansion() const { return *ex_; }

  Membership membership(const Structure& s) const override {
    return class_inf_contains(*ex_, s, ex_->opt.bound, ex_->opt.search_cap);
  }

  void necessary(const AtomTable& table, std::vector<GroundFormula>& out) const override {
    shell_->necessary(table, out);
  }

 private:
  std::shared_ptr<const InfExpansion> ex_;
  std::unique_ptr<SpecClass> shell_;
};

struct InfElimination {
  std::shared_ptr<const InfExpansion> ex;
  ClassPtr cls;
};

inline InfElimination class_inf(ClassPtr base, const std::string& id, InfOptions opt = {}) {
  auto ex = make_inf_expansion(std::move(base), id, opt);
  return {ex, std::make_shared<InfClass>(ex)};
}

// S_{~d} with class points and the embedding of S into its minus.
struct EmbedResult {
  Structure sd;
  Injection pi;  // S -> minus.s
  MinusResult minus;
  std::map<Element, Element> class_point;  // element of d's domain -> its class point
  std::map<Element, Element> rep;          // class point -> least element of the class
  bool large_enough = false;
};

inline EmbedResult embed_with_classes(const InfExpansion& ex, const Structure& s, bool check_member = true) {
  if (!(s.signature() == ex.base->signature())) throw Error("embed_with_classes: signature mismatch");
  if (check_member && !ex.base->contains(s)) throw Error("embed_with_classes: structure is not in the class");
  EmbedResult r;
  const auto classes = eq_classes(s, ex.decl);
  const Element top = s.universe().empty() ? 0 : s.universe().back();
  std::vector<Element> u = s.universe();
  std::vector<Element> cpoints;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const Element c = top + 1 + static_cast<Element>(k);
    cpoints.push_back(c);
    u.push_back(c);
    r.rep[c] = classes[k][0][0];
    for (const auto& t : classes[k]) r.class_point[t[0]] = c;
  }
  r.sd = Structure(ex.sig, u);
  for (Element c : cpoints) {
    r.sd.add(ex.c_sym, {c});
    if (ex.v_neg) r.sd.add(*ex.v_sym, {c});  // class points lie outside V
  }
  std::vector<Element> side_c;  // C ∪ E
  for (Element c : cpoints) side_c.push_back(c);
  for (Element x : s.universe())
    if (!r.class_point.count(x)) side_c.push_back(x);
  auto pre = [&](Element a) { return r.rep.count(a) ? r.rep.at(a) : a; };
  auto pair_of = [&](Element x) { return r.class_point.count(x) ? r.class_point.at(x) : x; };
  const Signature& sig = s.signature();
  bool doubled = false;
  for (std::size_t j = 0; j < sig.size(); ++j) {
    const SideTag t = ex.tags[j];
    if (t == SideTag::Doubled) {
      doubled = true;
      for (const auto& f : s.relation(j)) {
        Tuple w;
        for (Element x : f) {
          w.push_back(x);
          w.push_back(pair_of(x));
        }
        r.sd.add(j, w);
      }
    } else if (t == SideTag::ElementSide) {
      for (const auto& f : s.relation(j)) r.sd.add(j, f);
    } else if (sig[j].arity == 1) {
      for (Element c : cpoints) {
        bool all = true;
        for (const auto& [x, cp] : r.class_point)
          if (cp == c) all = all && s.holds(j, {x});
        if (all) r.sd.add(j, {c});
      }
      for (Element x : s.universe())
        if (!r.class_point.count(x) && s.holds(j, {x})) r.sd.add(j, {x});
    } else {
      for (Element a : side_c)
        for (Element b : side_c)
          if (s.holds(j, {pre(a), pre(b)})) r.sd.add(j, {a, b});
    }
  }
  r.minus = minus(ex, r.sd);
  if (doubled && cpoints.size() > 1 && !r.class_point.empty()) {
    // Pairs (v,c) with c not v's class are not images of S; their doubled
    // facts come from a completion of the minus in the base class.
    const auto& m = r.minus;
    auto real = [&](Element id) {
      const auto& p = m.pairs[id - 1];
      return p.first == p.second || r.class_point.at(p.first) == p.second;
    };
    std::vector<std::pair<std::size_t, Tuple>> yes, no;
    for (std::size_t j = 0; j < sig.size(); ++j)
      for_each_tuple(m.s.universe(), sig[j].arity, [&](const Tuple& t) {
        if (ex.tags[j] == SideTag::Doubled && !std::all_of(t.begin(), t.end(), real)) return;
        (m.s.holds(j, t) ? yes : no).emplace_back(j, t);
      });
    std::map<std::size_t, std::pair<AtomTable, std::vector<GroundFormula>>> cache;
    auto full = detail::complete_over(*ex.base, m.pairs.size(), yes, no, cache);
    if (!full) throw Error("embed_with_classes: no saturation of the class points within the search");
    for (std::size_t j = 0; j < sig.size(); ++j) {
      if (ex.tags[j] != SideTag::Doubled) continue;
      for (const auto& t : full->relation(j)) {
        Tuple w;
        for (Element id : t) {
          w.push_back(m.pairs[id - 1].first);
          w.push_back(m.pairs[id - 1].second);
        }
        r.sd.add(j, w);
      }
    }
    r.minus = minus(ex, r.sd);
  }
  std::map<Element, Element> pm;
  for (Element x : s.universe()) pm[x] = r.minus.id_of.at({x, pair_of(x)});
  r.pi = Injection(pm);
  r.large_enough = is_large_enough(ex, r.sd);
  return r;
}

// ---------------------------------------------------------------------------
// Doubled output structures.

inline Signature dbl_signature(const Signature& t) {
  std::vector<Symbol> out;
  for (const auto& s : t.symbols()) out.push_back({s.name, 2 * s.arity});
  return Signature(out);
}

inline Signature undbl_signature(const Signature& t) {
  std::vector<Symbol> out;
  for (const auto& s : t.symbols()) {
    if (s.arity % 2) throw Error("symbol " + s.name + " has odd arity and is not doubled");
    out.push_back({s.name, s.arity / 2});
  }
  return Signature(out);
}

// T^dbl on the carrier: (x1,y1,…) holds iff T holds of the pair-coded ids.
inline Structure dbl_structure(const MinusResult& m, const Structure& t) {
  if (t.universe() != iota_universe(m.pairs.size())) throw Error("dbl_structure: misaligned carrier");
  Structure out(dbl_signature(t.signature()), m.carrier);
  for (std::size_t j = 0; j < t.signature().size(); ++j)
    for (const auto& f : t.relation(j)) {
      Tuple w;
      for (Element x : f) {
        w.push_back(m.pairs[x - 1].first);
        w.push_back(m.pairs[x - 1].second);
      }
      out.add(j, w);
    }
  return out;
}

inline Structure minus_dbl(const MinusResult& m, const Structure& td) {
  if (td.universe() != m.carrier) throw Error("minus_dbl: misaligned carrier");
  Structure out(undbl_signature(td.signature()), iota_universe(m.pairs.size()));
  for (std::size_t j = 0; j < td.signature().size(); ++j)
    for (const auto& f : td.relation(j)) {
      Tuple u;
      bool ok = true;
      for (std::size_t i = 0; i < f.size() && ok; i += 2) {
        auto it = m.id_of.find({f[i], f[i + 1]});
        if (it == m.id_of.end()) ok = false;
        else u.push_back(it->second);
      }
      if (ok) out.add(j, u);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Blurs across the transform.

// The handle of s matching a handle of s_{~d}: class points stand for d's
// classes, and class-side relations at a class point for their classes at
// any member.
inline ClassHandle corresponding_handle(const InfExpansion& ex, const Structure& s, const EmbedResult& e,
                                        const ClassHandle& h) {
  auto it = e.rep.find(h.anchor);
  if (it == e.rep.end()) return normalize(*ex.base, s, h);
  const std::uint32_t kind = h.kind == 0 ? static_cast<std::uint32_t>(ex.d + 1) : h.kind;
  return normalize(*ex.base, s, {kind, it->second});
}

// τ̂: the corresponding handles that have no strictly finer one among them.
inline Blur hat_blur(const InfExpansion& ex, const Structure& s, const EmbedResult& e, const Blur& inner) {
  std::vector<ClassHandle> hs;
  for (const auto& h : inner.handles) hs.push_back(corresponding_handle(ex, s, e, h));
  Blur out;
  for (const auto& h : hs) {
    bool minimal = true;
    for (const auto& g : hs)
      if (!(g == h) && handle_leq(*ex.base, s, g, h)) minimal = false;
    if (minimal) out.handles.push_back(h);
  }
  std::sort(out.handles.begin(), out.handles.end());
  out.handles.erase(std::unique(out.handles.begin(), out.handles.end()), out.handles.end());
  return out;
}

// Everything a lifted rule needs for one local structure: S_{~d}, its blurs,
// which outer blur each one hats to, and its slot in that fiber.
struct LiftLayout {
  EmbedResult emb;
  std::vector<Blur> inner_blurs;
  std::vector<std::vector<ClassHandle>> inner_ambient;
  std::vector<std::size_t> hat;         // inner blur -> outer blur index
  std::vector<std::size_t> slot;        // ι₀ inside the fiber
  std::vector<int> pick;                // ι₁ inside the fiber, -1 for the image of τ itself
  std::vector<std::size_t> fiber_size;  // per outer blur
  std::vector<std::vector<std::size_t>> image_pos;  // image blurs: outer handle index -> inner handle index
  std::vector<std::vector<std::size_t>> by_identity;  // inner handle indices sorted by identity
  std::vector<std::vector<std::size_t>> outer_rank;   // outer handle index -> rank by identity
};

// identity(h) gives a stable name for an outer handle (ambient
// normalization inside a plan); fibers are ordered by size, then by the
// sorted identities of their corresponding handles.
inline LiftLayout lift_layout(const InfExpansion& ex, const StructureClass& kd, const Structure& s,
                              const std::vector<Blur>& outer, bool include_empty,
                              const std::function<ClassHandle(const ClassHandle&)>& identity) {
  LiftLayout L;
  L.emb = embed_with_classes(ex, s, false);
  L.inner_blurs = blur_set(kd, L.emb.sd, L.emb.sd.universe(), include_empty);
  std::map<Blur, std::size_t> outer_index;
  for (std::size_t i = 0; i < outer.size(); ++i) outer_index[outer[i]] = i;
  std::vector<std::vector<ClassHandle>> desc(L.inner_blurs.size());
  std::vector<bool> image(L.inner_blurs.size(), false);
  for (std::size_t t = 0; t < L.inner_blurs.size(); ++t) {
    const Blur& b = L.inner_blurs[t];
    const Blur h = hat_blur(ex, s, L.emb, b);
    auto it = outer_index.find(h);
    if (it == outer_index.end()) throw Error("lift: a blur of s_~d hats outside B(s)");
    L.hat.push_back(it->second);
    std::vector<ClassHandle> ids, corr;
    for (const auto& x : b.handles) {
      corr.push_back(corresponding_handle(ex, s, L.emb, x));
      ids.push_back(identity(corr.back()));
    }
    L.inner_ambient.push_back(ids);
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t c) { return ids[a] < ids[c]; });
    L.by_identity.push_back(idx);
    std::sort(ids.begin(), ids.end());
    desc[t] = ids;
    image[t] = corr.size() == h.handles.size();
    std::vector<std::size_t> pos;
    if (image[t]) {
      const Blur& ob = outer[it->second];
      for (const auto& oh : ob.handles)
        for (std::size_t q = 0; q < corr.size(); ++q)
          if (corr[q] == oh) pos.push_back(q);
    }
    L.image_pos.push_back(pos);
  }
  L.fiber_size.assign(outer.size(), 0);
  L.slot.assign(L.inner_blurs.size(), 0);
  L.pick.assign(L.inner_blurs.size(), -1);
  std::vector<std::vector<std::size_t>> members(outer.size());
  for (std::size_t t = 0; t < L.inner_blurs.size(); ++t) members[L.hat[t]].push_back(t);
  for (std::size_t i = 0; i < outer.size(); ++i) {
    auto& ms = members[i];
    std::sort(ms.begin(), ms.end(), [&](std::size_t a, std::size_t b) {
      if (desc[a].size() != desc[b].size()) return desc[a].size() < desc[b].size();
      return desc[a] < desc[b];
    });
    L.fiber_size[i] = ms.size();
    int next = 0;
    for (std::size_t q = 0; q < ms.size(); ++q) {
      L.slot[ms[q]] = q;
      if (!image[ms[q]]) L.pick[ms[q]] = next++;
    }
  }
  for (const auto& b : outer) {
    std::vector<ClassHandle> ids;
    for (const auto& h : b.handles) ids.push_back(identity(h));
    std::vector<std::size_t> idx(ids.size()), rank(ids.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t c) { return ids[a] < ids[c]; });
    for (std::size_t r = 0; r < idx.size(); ++r) rank[idx[r]] = r;
    L.outer_rank.push_back(rank);
  }
  return L;
}

// T^τ: the blurs of s_{~d} whose hat is τ, in ι₀ order (local anchors name
// the handles).
inline std::vector<Blur> fiber(const InfExpansion& ex, const StructureClass& kd, const Structure& s, const Blur& tau,
                               bool include_empty = true) {
  const auto outer = blur_set(*ex.base, s, s.universe(), include_empty);
  auto L = lift_layout(ex, kd, s, outer, include_empty, [](const ClassHandle& h) { return h; });
  std::size_t i = 0;
  while (i < outer.size() && !(outer[i] == tau)) ++i;
  if (i == outer.size()) throw Error("fiber: blur is not in B(s)");
  std::vector<Blur> out(L.fiber_size[i]);
  for (std::size_t t = 0; t < L.inner_blurs.size(); ++t)
    if (L.hat[t] == i) out[L.slot[t]] = L.inner_blurs[t];
  return out;
}

// ---------------------------------------------------------------------------
// Splitting one variate into m.

// Bit k of the 53-bit mantissa (k = 0 most significant) goes to stream k mod m.
inline std::vector<double> split_variate(std::uint64_t bits, std::size_t m) {
  if (m == 0 || m > 53) throw Error("split_variate: stream count must be in [1,53]");
  std::vector<std::uint64_t> acc(m, 0);
  std::vector<int> len(m, 0);
  for (int k = 0; k < 53; ++k) {
    const std::size_t j = static_cast<std::size_t>(k) % m;
    acc[j] = (acc[j] << 1) | ((bits >> (52 - k)) & 1u);
    ++len[j];
  }
  std::vector<double> out(m);
  for (std::size_t j = 0; j < m; ++j) out[j] = std::ldexp(static_cast<double>(acc[j]), -len[j]);
  return out;
}

inline std::uint64_t variate_to_bits(double xi) { return static_cast<std::uint64_t>(std::ldexp(xi, 53)); }

struct Split {
  std::vector<double> variates;
  // Keys of uniformly random maps from orderings of τ to orderings of τ'.
  std::vector<std::uint64_t> picks;
};

inline Split splitter(double xi, std::size_t m) {
  Split out;
  const std::uint64_t bits = variate_to_bits(xi);
  out.variates = split_variate(bits, m);
  const RandomnessSource src(bits);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    std::string key = "T";
    RandomnessSource::append_u32(key, static_cast<std::uint32_t>(j));
    out.picks.push_back(src.hash(key));
  }
  return out;
}

// The value of a picked map at one ordering of τ (ranks least first).
inline std::vector<std::size_t> apply_pick(std::uint64_t pick, const std::vector<std::size_t>& ranks, std::size_t n) {
  std::string key = "P";
  for (auto r : ranks) RandomnessSource::append_u32(key, static_cast<std::uint32_t>(r));
  return RandomnessSource(pick).ordering(key, n);
}

// ---------------------------------------------------------------------------
// Lifting a rule over K_{~d} (doubled target) to a rule over K.

inline TypeRule lift_rule_inf(const TypeRule& f, const InfElimination& e) {
  TypeRule g;
  g.name = f.name + "^" + e.ex->decl.id;
  g.target = undbl_signature(f.target);
  g.uses_orderings = f.uses_orderings;
  g.uses_labels = f.uses_labels;
  struct Cache {
    std::mutex mu;
    std::map<std::string, std::shared_ptr<const LiftLayout>> layouts;
  };
  auto cache = std::make_shared<Cache>();
  auto layout_of = [e, cache](const RuleQuery& q) {
    std::string key = to_text(*q.local);
    if (q.ambient)
      for (const auto& hs : *q.ambient)
        for (const auto& h : hs) key += " " + std::to_string(h.kind) + ":" + std::to_string(h.anchor);
    {
      std::lock_guard<std::mutex> lock(cache->mu);
      auto it = cache->layouts.find(key);
      if (it != cache->layouts.end()) return it->second;
    }
    std::map<ClassHandle, ClassHandle> ident;
    if (q.ambient)
      for (std::size_t i = 0; i < q.blurs->size(); ++i)
        for (std::size_t j = 0; j < (*q.blurs)[i].handles.size(); ++j)
          ident[(*q.blurs)[i].handles[j]] = (*q.ambient)[i][j];
    bool empty = false;
    for (const auto& b : *q.blurs) empty = empty || b.empty();
    auto L = std::make_shared<const LiftLayout>(lift_layout(*e.ex, *e.cls, *q.local, *q.blurs, empty,
                                                            [&](const ClassHandle& h) {
                                                              auto it = ident.find(h);
                                                              return it == ident.end() ? h : it->second;
                                                            }));
    std::lock_guard<std::mutex> lock(cache->mu);
    return cache->layouts.emplace(key, L).first->second;
  };
  // Builds the doubled query and hands it to body.
  auto run = [f, e, layout_of](const RuleQuery& q, auto&& body) {
    auto L = layout_of(q);
    RuleQuery in;
    in.symbol = q.symbol;
    for (Element x : q.tuple) {
      in.tuple.push_back(x);
      auto it = L->emb.class_point.find(x);
      in.tuple.push_back(it == L->emb.class_point.end() ? x : it->second);
    }
    in.k = e.cls.get();
    in.local = &L->emb.sd;
    in.blurs = &L->inner_blurs;
    in.ambient = &L->inner_ambient;
    std::map<std::size_t, Split> splits;
    auto split_of = [&](std::size_t i) -> const Split& {
      auto it = splits.find(i);
      if (it == splits.end()) it = splits.emplace(i, splitter(q.xi[i], L->fiber_size[i])).first;
      return it->second;
    };
    in.xi.resize(L->inner_blurs.size());
    for (std::size_t t = 0; t < L->inner_blurs.size(); ++t) in.xi[t] = split_of(L->hat[t]).variates[L->slot[t]];
    if (f.uses_orderings) {
      in.order.resize(L->inner_blurs.size());
      for (std::size_t t = 0; t < L->inner_blurs.size(); ++t) {
        const std::size_t i = L->hat[t];
        const auto& outer_order = q.order.at(i);
        if (L->pick[t] < 0) {
          for (std::size_t h : outer_order) in.order[t].push_back(L->image_pos[t][h]);
        } else {
          std::vector<std::size_t> ranks;
          for (std::size_t h : outer_order) ranks.push_back(L->outer_rank[i][h]);
          const std::size_t n = L->inner_blurs[t].size();
          for (std::size_t r : apply_pick(split_of(i).picks.at(L->pick[t]), ranks, n))
            in.order[t].push_back(L->by_identity[t][r]);
        }
      }
    }
    const auto& ds = e.cls->eqrels();
    in.labels.resize(ds.size());
    if (f.uses_labels)
      for (std::size_t r = 0; r < ds.size(); ++r) {
        if (ds[r].infinite()) continue;
        for (const auto& t : domain_tuples(L->emb.sd, ds[r])) {
          auto it = L->emb.rep.find(t[0]);
          in.labels[r][t] = q.label(r, {it == L->emb.rep.end() ? t[0] : it->second});
        }
      }
    return body(in, *L);
  };
  g.decide = [f, run](const RuleQuery& q) {
    return run(q, [&](const RuleQuery& in, const LiftLayout&) { return f.decide(in); });
  };
  if (f.cutpoints)
    g.cutpoints = [f, run](const RuleQuery& q, std::size_t i) {
      return run(q, [&](const RuleQuery& in, const LiftLayout& L) {
        std::vector<Rational> out;
        for (std::size_t t = 0; t < L.inner_blurs.size(); ++t) {
          if (L.hat[t] != i) continue;
          auto c = f.cutpoints(in, t);
          if (c.empty()) continue;
          if (L.fiber_size[i] > 1) throw Error("exact mode unavailable: the rule reads a split variate");
          out.insert(out.end(), c.begin(), c.end());
        }
        return out;
      });
    };
  return g;
}

// ===========================================================================
// The full pipeline.

struct Stage {
  std::string eqrel;
  bool finite = false;
  std::shared_ptr<const FinExpansion> fin;
  InfElimination inf;
  ClassPtr before, after;
};

struct Pipeline {
  ClassPtr original;
  std::vector<Stage> stages;  // in elimination order: last declared eqrel first

  const ClassPtr& terminal() const { return stages.empty() ? original : stages.back().after; }

  // Lifts a rule over the terminal class back to the original class.
  TypeRule lift(const TypeRule& f) const {
    TypeRule g = f;
    for (auto it = stages.rbegin(); it != stages.rend(); ++it)
      g = it->finite ? lift_rule_fin(g, it->fin) : lift_rule_inf(g, it->inf);
    return g;
  }

  // Label groups introduced by finite stages.
  std::vector<SymmetryGroup> groups() const {
    std::vector<SymmetryGroup> out;
    for (const auto& s : stages)
      if (s.finite) out.push_back(symmetry_group(*s.fin));
    return out;
  }
};

// Eliminates declared eqrels from the last one down to `stop` (inclusive;
// nullopt: all of them).
inline Pipeline eliminate_all(ClassPtr k, InfOptions opt = {}, std::optional<std::string> stop = std::nullopt) {
  Pipeline p;
  p.original = k;
  if (stop) detail::eqrel_index(k->eqrels(), *stop);
  ClassPtr cur = k;
  while (!cur->eqrels().empty()) {
    const EqRelDecl d = cur->eqrels().back();
    Stage st;
    st.eqrel = d.id;
    st.before = cur;
    st.finite = !d.infinite();
    if (st.finite) {
      st.fin = class_fin(cur, d.id);
      st.after = st.fin->cls;
    } else {
      st.inf = class_inf(cur, d.id, opt);
      st.after = st.inf.cls;
    }
    cur = st.after;
    p.stages.push_back(std::move(st));
    if (stop && d.id == *stop) break;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Rules written over eliminated classes.

namespace rules {

// twoclass_pick over K_{~d}: the class labeled 1 or 2 is read off the predicates.
inline TypeRule twoclass_pick_expanded(const std::string& p1 = fin_pred_name("r1", 1),
                                       const std::string& p2 = fin_pred_name("r1", 2)) {
  TypeRule f;
  f.name = "twoclass_pick_expanded";
  f.target = unary_p();
  f.decide = [p1, p2](const RuleQuery& q) {
    const double x = q.xi_of(Blur{});
    return (q.local->holds(p1, q.tuple) && x <= 0.5) || (q.local->holds(p2, q.tuple) && x > 0.5);
  };
  f.cutpoints = [](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i].empty() ? std::vector<Rational>{half()} : std::vector<Rational>{};
  };
  return f;
}

// classcoin over K_{~d} with doubled target: P(x,c) iff the variate of the
// class point c is at most 1/2.
inline TypeRule classcoin_dbl() {
  TypeRule f;
  f.name = "classcoin_dbl";
  f.target = Signature({{"P", 2}});
  auto blur = [](const RuleQuery& q) { return Blur{{{0, q.tuple[1]}}}; };
  f.decide = [blur](const RuleQuery& q) { return q.xi_of(blur(q)) <= 0.5; };
  f.cutpoints = [blur](const RuleQuery& q, std::size_t i) {
    return (*q.blurs)[i] == blur(q) ? std::vector<Rational>{half()} : std::vector<Rational>{};
  };
  return f;
}

}  // namespace rules

}  // namespace exch
