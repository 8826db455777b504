#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "exch/relstruct.hpp"

namespace exch {

// Quantifier-free body of a universal constraint. Variables are indices into
// the constraint's variable list.
struct Formula {
  enum class Op { True, False, Atom, Eq, Not, And, Or, Implies, Iff };
  Op op = Op::True;
  std::size_t symbol = 0;
  std::vector<int> vars;
  std::vector<Formula> kids;

  static Formula constant(bool v) { return Formula{v ? Op::True : Op::False, 0, {}, {}}; }
  static Formula atom(std::size_t sym, std::vector<int> args) {
    return Formula{Op::Atom, sym, std::move(args), {}};
  }
  static Formula eq(int a, int b) { return Formula{Op::Eq, 0, {a, b}, {}}; }
  static Formula neg(Formula f) { return Formula{Op::Not, 0, {}, {std::move(f)}}; }
  static Formula binary(Op op, Formula a, Formula b) {
    return Formula{op, 0, {}, {std::move(a), std::move(b)}};
  }
  static Formula all(std::vector<Formula> fs) {
    if (fs.empty()) return constant(true);
    Formula f = std::move(fs[0]);
    for (std::size_t i = 1; i < fs.size(); ++i) f = binary(Op::And, std::move(f), std::move(fs[i]));
    return f;
  }
  static Formula any(std::vector<Formula> fs) {
    if (fs.empty()) return constant(false);
    Formula f = std::move(fs[0]);
    for (std::size_t i = 1; i < fs.size(); ++i) f = binary(Op::Or, std::move(f), std::move(fs[i]));
    return f;
  }
  static Formula implies(Formula a, Formula b) {
    return binary(Op::Implies, std::move(a), std::move(b));
  }
};

struct Constraint {
  std::vector<std::string> vars;
  Formula body;
};

// Evaluates the body under vals (one element per variable).
inline bool evaluate(const Formula& f, const Structure& s, const std::vector<Element>& vals) {
  using Op = Formula::Op;
  switch (f.op) {
    case Op::True: return true;
    case Op::False: return false;
    case Op::Atom: {
      Tuple t;
      t.reserve(f.vars.size());
      for (int v : f.vars) t.push_back(vals[v]);
      return s.holds(f.symbol, t);
    }
    case Op::Eq: return vals[f.vars[0]] == vals[f.vars[1]];
    case Op::Not: return !evaluate(f.kids[0], s, vals);
    case Op::And: return evaluate(f.kids[0], s, vals) && evaluate(f.kids[1], s, vals);
    case Op::Or: return evaluate(f.kids[0], s, vals) || evaluate(f.kids[1], s, vals);
    case Op::Implies: return !evaluate(f.kids[0], s, vals) || evaluate(f.kids[1], s, vals);
    case Op::Iff: return evaluate(f.kids[0], s, vals) == evaluate(f.kids[1], s, vals);
  }
  return false;
}

// Calls fn(vals) for every assignment of m variables over elems.
template <class Fn>
void for_each_assignment(const std::vector<Element>& elems, std::size_t m, Fn&& fn) {
  if (m == 0) {
    fn(std::vector<Element>{});
    return;
  }
  for_each_tuple(elems, static_cast<int>(m), [&](const Tuple& t) { fn(t); });
}

// First assignment violating c in s, if any.
inline std::optional<std::vector<Element>> violation(const Constraint& c, const Structure& s) {
  std::optional<std::vector<Element>> bad;
  for_each_assignment(s.universe(), c.vars.size(), [&](const std::vector<Element>& vals) {
    if (!bad && !evaluate(c.body, s, vals)) bad = vals;
  });
  return bad;
}

inline std::string formula_text(const Formula& f, const Signature& sig,
                                const std::vector<std::string>& vars) {
  using Op = Formula::Op;
  switch (f.op) {
    case Op::True: return "true";
    case Op::False: return "false";
    case Op::Atom: {
      std::string s = sig[f.symbol].name + "(";
      for (std::size_t i = 0; i < f.vars.size(); ++i) s += (i ? "," : "") + vars[f.vars[i]];
      return s + ")";
    }
    case Op::Eq: return vars[f.vars[0]] + " = " + vars[f.vars[1]];
    case Op::Not: return "!(" + formula_text(f.kids[0], sig, vars) + ")";
    default: break;
  }
  const char* sym = f.op == Op::And ? " & " : f.op == Op::Or ? " | " : f.op == Op::Implies ? " -> " : " <-> ";
  return "(" + formula_text(f.kids[0], sig, vars) + sym + formula_text(f.kids[1], sig, vars) + ")";
}

// ---------------------------------------------------------------------------
// Ground formulas: propositional formulas over numbered atoms, evaluated in
// three-valued logic during search (0 false, 1 true, 2 unknown).

using AtomId = std::uint32_t;
constexpr std::int8_t kFalse = 0;
constexpr std::int8_t kTrue = 1;
constexpr std::int8_t kUnknown = 2;

struct GNode {
  enum Op : std::uint8_t { Const, Atom, Not, And, Or, Iff };
  Op op = Const;
  std::uint32_t value = 0;  // constant value or atom id
  std::uint32_t first = 0;  // children are kids[first, first + count)
  std::uint32_t count = 0;
};

struct GroundFormula {
  std::vector<GNode> nodes;
  std::vector<std::uint32_t> kids;
  std::uint32_t root = 0;
  std::vector<AtomId> atoms;     // distinct atoms mentioned
  std::vector<Element> support;  // elements of the grounding assignment

  std::int8_t eval(const std::vector<std::int8_t>& vals) const { return eval_node(root, vals); }

  std::int8_t eval_node(std::uint32_t i, const std::vector<std::int8_t>& vals) const {
    const GNode& n = nodes[i];
    switch (n.op) {
      case GNode::Const: return static_cast<std::int8_t>(n.value);
      case GNode::Atom: return vals[n.value];
      case GNode::Not: {
        auto v = eval_node(kids[n.first], vals);
        return v == kUnknown ? kUnknown : static_cast<std::int8_t>(1 - v);
      }
      case GNode::And: {
        std::int8_t r = kTrue;
        for (std::uint32_t k = 0; k < n.count; ++k) {
          auto v = eval_node(kids[n.first + k], vals);
          if (v == kFalse) return kFalse;
          if (v == kUnknown) r = kUnknown;
        }
        return r;
      }
      case GNode::Or: {
        std::int8_t r = kFalse;
        for (std::uint32_t k = 0; k < n.count; ++k) {
          auto v = eval_node(kids[n.first + k], vals);
          if (v == kTrue) return kTrue;
          if (v == kUnknown) r = kUnknown;
        }
        return r;
      }
      case GNode::Iff: {
        auto a = eval_node(kids[n.first], vals);
        auto b = eval_node(kids[n.first + 1], vals);
        if (a == kUnknown || b == kUnknown) return kUnknown;
        return a == b ? kTrue : kFalse;
      }
    }
    return kUnknown;
  }
};

// Builds ground formulas with constant folding. A leaf is either a known truth
// value or an atom id.
class GroundBuilder {
 public:
  struct Leaf {
    bool is_const = true;
    bool value = false;
    AtomId atom = 0;
    static Leaf constant(bool v) { return Leaf{true, v, 0}; }
    static Leaf of(AtomId a) { return Leaf{false, false, a}; }
  };

  // Handle into the node list; negative values encode constants (-1 false, -2 true).
  using Ref = std::int64_t;
  static constexpr Ref kF = -1;
  static constexpr Ref kT = -2;

  Ref constant(bool v) const { return v ? kT : kF; }

  Ref leaf(const Leaf& l) {
    if (l.is_const) return constant(l.value);
    GNode n;
    n.op = GNode::Atom;
    n.value = l.atom;
    out_.nodes.push_back(n);
    atoms_.push_back(l.atom);
    return static_cast<Ref>(out_.nodes.size() - 1);
  }

  Ref negate(Ref a) {
    if (a == kT) return kF;
    if (a == kF) return kT;
    return push(GNode::Not, {a});
  }

  Ref conj(const std::vector<Ref>& xs) {
    std::vector<Ref> keep;
    for (Ref x : xs) {
      if (x == kF) return kF;
      if (x != kT) keep.push_back(x);
    }
    if (keep.empty()) return kT;
    if (keep.size() == 1) return keep[0];
    return push(GNode::And, keep);
  }

  Ref disj(const std::vector<Ref>& xs) {
    std::vector<Ref> keep;
    for (Ref x : xs) {
      if (x == kT) return kT;
      if (x != kF) keep.push_back(x);
    }
    if (keep.empty()) return kF;
    if (keep.size() == 1) return keep[0];
    return push(GNode::Or, keep);
  }

  Ref iff(Ref a, Ref b) {
    if (a == kT) return b;
    if (b == kT) return a;
    if (a == kF) return negate(b);
    if (b == kF) return negate(a);
    return push(GNode::Iff, {a, b});
  }

  // Finishes the formula rooted at r. Returns nullopt when r folded to true.
  // A formula that folded to false is returned as a constant-false node.
  std::optional<GroundFormula> finish(Ref r, std::vector<Element> support) {
    if (r == kT) {
      reset();
      return std::nullopt;
    }
    GroundFormula g = std::move(out_);
    if (r == kF) {
      g.nodes.clear();
      g.kids.clear();
      GNode n;
      n.op = GNode::Const;
      n.value = 0;
      g.nodes.push_back(n);
      g.root = 0;
      atoms_.clear();
    } else {
      g.root = static_cast<std::uint32_t>(r);
      atoms_.clear();
      collect_atoms(g, g.root);
    }
    std::sort(atoms_.begin(), atoms_.end());
    atoms_.erase(std::unique(atoms_.begin(), atoms_.end()), atoms_.end());
    g.atoms = atoms_;
    g.support = sorted_set(std::move(support));
    reset();
    return g;
  }

  // Grounds a constraint body under vals, resolving atoms through resolve(sym, tuple).
  template <class Resolve>
  Ref ground(const Formula& f, const std::vector<Element>& vals, Resolve& resolve) {
    using Op = Formula::Op;
    switch (f.op) {
      case Op::True: return kT;
      case Op::False: return kF;
      case Op::Atom: {
        Tuple t;
        t.reserve(f.vars.size());
        for (int v : f.vars) t.push_back(vals[v]);
        return leaf(resolve(f.symbol, t));
      }
      case Op::Eq: return constant(vals[f.vars[0]] == vals[f.vars[1]]);
      case Op::Not: return negate(ground(f.kids[0], vals, resolve));
      case Op::And: return conj({ground(f.kids[0], vals, resolve), ground(f.kids[1], vals, resolve)});
      case Op::Or: return disj({ground(f.kids[0], vals, resolve), ground(f.kids[1], vals, resolve)});
      case Op::Implies: {
        Ref a = ground(f.kids[0], vals, resolve);
        if (a == kF) return kT;
        return disj({negate(a), ground(f.kids[1], vals, resolve)});
      }
      case Op::Iff: return iff(ground(f.kids[0], vals, resolve), ground(f.kids[1], vals, resolve));
    }
    return kT;
  }

 private:
  Ref push(GNode::Op op, const std::vector<Ref>& xs) {
    GNode n;
    n.op = op;
    n.first = static_cast<std::uint32_t>(out_.kids.size());
    n.count = static_cast<std::uint32_t>(xs.size());
    for (Ref x : xs) out_.kids.push_back(static_cast<std::uint32_t>(x));
    out_.nodes.push_back(n);
    return static_cast<Ref>(out_.nodes.size() - 1);
  }

  void collect_atoms(const GroundFormula& g, std::uint32_t i) {
    const GNode& n = g.nodes[i];
    if (n.op == GNode::Atom) atoms_.push_back(n.value);
    for (std::uint32_t k = 0; k < n.count; ++k) collect_atoms(g, g.kids[n.first + k]);
  }

  void reset() {
    out_ = GroundFormula{};
    atoms_.clear();
  }

  GroundFormula out_;
  std::vector<AtomId> atoms_;
};

}  // namespace exch
