#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "exch/error.hpp"
#include "exch/formula.hpp"
#include "exch/relstruct.hpp"
#include "exch/search.hpp"

namespace exch {

enum class Side { Auto, ClassSide, ElementSide };

inline const char* side_name(Side s) {
  switch (s) {
    case Side::ClassSide: return "class";
    case Side::ElementSide: return "element";
    default: return "auto";
  }
}

struct EqRelDecl {
  std::string id;
  std::optional<std::string> domain;  // nullopt: every element (tuple) is in the domain
  bool domain_complement = false;     // domain is the complement of the named symbol
  std::string relation;
  int length = 1;
  std::optional<std::string> star;  // nullopt: trivial (one class on the domain)
  std::optional<int> count;         // nullopt: infinitely many classes
  // Side tags declared for eliminating this relation (symbol name, side).
  std::vector<std::pair<std::string, Side>> sides;

  bool infinite() const { return !count.has_value(); }
};

struct ClassSpec {
  Signature sig;
  std::vector<Constraint> constraints;
  std::vector<EqRelDecl> eqrels;
  // Nonempty members need at least this many elements (0: no requirement).
  int min_size = 0;
};

struct ParseOptions {
  std::size_t max_vars = 6;
};

namespace detail {

class SpecLexer {
 public:
  struct Token {
    enum Kind { Ident, Int, Punct, End } kind = End;
    std::string text;
    int line = 1;
    int col = 1;
  };

  explicit SpecLexer(std::string_view src) : src_(src) { advance(); }

  const Token& peek() const { return tok_; }

  Token take() {
    Token t = tok_;
    advance();
    return t;
  }

  [[noreturn]] void fail(const std::string& msg, const Token& at) const {
    throw ParseError(msg, at.line, at.col);
  }

  Token expect_punct(const std::string& p) {
    if (tok_.kind != Token::Punct || tok_.text != p)
      fail("expected '" + p + "' but found '" + describe(tok_) + "'", tok_);
    return take();
  }

  Token expect_ident() {
    if (tok_.kind != Token::Ident) fail("expected identifier but found '" + describe(tok_) + "'", tok_);
    return take();
  }

  Token expect_keyword(const std::string& k) {
    if (tok_.kind != Token::Ident || tok_.text != k)
      fail("expected '" + k + "' but found '" + describe(tok_) + "'", tok_);
    return take();
  }

  long expect_int() {
    if (tok_.kind != Token::Int) fail("expected integer but found '" + describe(tok_) + "'", tok_);
    Token t = take();
    if (t.text.size() > 9) fail("integer too large", t);
    return std::stol(t.text);
  }

  bool at_punct(const std::string& p) const { return tok_.kind == Token::Punct && tok_.text == p; }
  bool at_keyword(const std::string& k) const { return tok_.kind == Token::Ident && tok_.text == k; }

  static std::string describe(const Token& t) { return t.kind == Token::End ? "end of input" : t.text; }

 private:
  void advance() {
    skip_space();
    tok_ = Token{};
    tok_.line = line_;
    tok_.col = col_;
    if (i_ >= src_.size()) {
      tok_.kind = Token::End;
      return;
    }
    char c = src_[i_];
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i_;
      while (j < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[j])) || src_[j] == '_')) ++j;
      tok_.kind = Token::Ident;
      tok_.text = std::string(src_.substr(i_, j - i_));
      bump(j - i_);
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i_;
      while (j < src_.size() && std::isdigit(static_cast<unsigned char>(src_[j]))) ++j;
      tok_.kind = Token::Int;
      tok_.text = std::string(src_.substr(i_, j - i_));
      bump(j - i_);
      return;
    }
    static const char* multi[] = {"<->", "->", "!="};
    for (const char* m : multi) {
      std::string_view mv(m);
      if (src_.substr(i_, mv.size()) == mv) {
        tok_.kind = Token::Punct;
        tok_.text = std::string(mv);
        bump(mv.size());
        return;
      }
    }
    if (std::string_view("{};:,/()&|!=").find(c) != std::string_view::npos) {
      tok_.kind = Token::Punct;
      tok_.text = std::string(1, c);
      bump(1);
      return;
    }
    throw ParseError(std::string("unexpected character '") + c + "'", line_, col_);
  }

  void bump(std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) {
      if (src_[i_] == '\n') {
        ++line_;
        col_ = 1;
      } else {
        ++col_;
      }
      ++i_;
    }
  }

  void skip_space() {
    while (i_ < src_.size()) {
      char c = src_[i_];
      if (c == '#' || (c == '/' && i_ + 1 < src_.size() && src_[i_ + 1] == '/')) {
        while (i_ < src_.size() && src_[i_] != '\n') bump(1);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        bump(1);
      } else {
        break;
      }
    }
  }

  std::string_view src_;
  std::size_t i_ = 0;
  int line_ = 1;
  int col_ = 1;
  Token tok_;
};

class SpecParser {
 public:
  SpecParser(std::string_view text, ParseOptions opt) : lex_(text), opt_(opt) {}

  ClassSpec parse() {
    bool have_sig = false;
    while (lex_.peek().kind != SpecLexer::Token::End) {
      auto t = lex_.peek();
      if (t.kind != SpecLexer::Token::Ident) lex_.fail("expected a declaration", t);
      if (t.text == "signature") {
        if (have_sig) lex_.fail("duplicate signature block", t);
        parse_signature();
        have_sig = true;
      } else if (t.text == "constraint") {
        if (!have_sig) lex_.fail("constraint before signature", t);
        parse_constraint();
      } else if (t.text == "eqrel") {
        if (!have_sig) lex_.fail("eqrel before signature", t);
        parse_eqrel();
      } else if (t.text == "minsize") {
        lex_.take();
        long n = lex_.expect_int();
        lex_.expect_punct(";");
        spec_.min_size = static_cast<int>(n);
      } else {
        lex_.fail("unknown declaration '" + t.text + "'", t);
      }
    }
    if (!have_sig) throw ParseError("missing signature block", 1, 1);
    return std::move(spec_);
  }

 private:
  void parse_signature() {
    lex_.take();
    lex_.expect_punct("{");
    std::vector<Symbol> syms;
    while (!lex_.at_punct("}")) {
      auto name = lex_.expect_ident();
      lex_.expect_punct("/");
      auto at = lex_.peek();
      long a = lex_.expect_int();
      if (a < 1) lex_.fail("arity must be at least 1", at);
      lex_.expect_punct(";");
      for (const auto& s : syms)
        if (s.name == name.text) lex_.fail("duplicate symbol '" + name.text + "'", name);
      syms.push_back(Symbol{name.text, static_cast<int>(a)});
    }
    lex_.expect_punct("}");
    spec_.sig = Signature(std::move(syms));
  }

  void parse_constraint() {
    lex_.take();
    lex_.expect_keyword("forall");
    vars_.clear();
    if (!lex_.at_punct(":")) {
      while (true) {
        auto v = lex_.expect_ident();
        for (const auto& w : vars_)
          if (w == v.text) lex_.fail("duplicate variable '" + v.text + "'", v);
        vars_.push_back(v.text);
        if (vars_.size() > opt_.max_vars)
          lex_.fail("too many variables (limit " + std::to_string(opt_.max_vars) + ")", v);
        if (!lex_.at_punct(",")) break;
        lex_.take();
      }
    }
    lex_.expect_punct(":");
    Formula body = parse_iff();
    lex_.expect_punct(";");
    spec_.constraints.push_back(Constraint{vars_, std::move(body)});
  }

  Formula parse_iff() {
    Formula f = parse_implies();
    while (lex_.at_punct("<->")) {
      lex_.take();
      f = Formula::binary(Formula::Op::Iff, std::move(f), parse_implies());
    }
    return f;
  }

  Formula parse_implies() {
    Formula f = parse_or();
    if (lex_.at_punct("->")) {
      lex_.take();
      return Formula::implies(std::move(f), parse_implies());
    }
    return f;
  }

  Formula parse_or() {
    Formula f = parse_and();
    while (lex_.at_punct("|")) {
      lex_.take();
      f = Formula::binary(Formula::Op::Or, std::move(f), parse_and());
    }
    return f;
  }

  Formula parse_and() {
    Formula f = parse_unary();
    while (lex_.at_punct("&")) {
      lex_.take();
      f = Formula::binary(Formula::Op::And, std::move(f), parse_unary());
    }
    return f;
  }

  int var_index(const SpecLexer::Token& t) {
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i] == t.text) return static_cast<int>(i);
    lex_.fail("unknown variable '" + t.text + "'", t);
  }

  Formula parse_unary() {
    if (lex_.at_punct("!")) {
      lex_.take();
      return Formula::neg(parse_unary());
    }
    if (lex_.at_punct("(")) {
      lex_.take();
      Formula f = parse_iff();
      lex_.expect_punct(")");
      return f;
    }
    auto t = lex_.expect_ident();
    if (t.text == "true") return Formula::constant(true);
    if (t.text == "false") return Formula::constant(false);
    if (lex_.at_punct("(")) {
      lex_.take();
      auto idx = spec_.sig.find(t.text);
      if (!idx) lex_.fail("unknown symbol '" + t.text + "'", t);
      std::vector<int> args;
      while (true) {
        args.push_back(var_index(lex_.expect_ident()));
        if (!lex_.at_punct(",")) break;
        lex_.take();
      }
      lex_.expect_punct(")");
      if (static_cast<int>(args.size()) != spec_.sig[*idx].arity)
        lex_.fail("arity mismatch for '" + t.text + "': expected " +
                      std::to_string(spec_.sig[*idx].arity) + ", got " + std::to_string(args.size()),
                  t);
      return Formula::atom(*idx, std::move(args));
    }
    int a = var_index(t);
    if (lex_.at_punct("=")) {
      lex_.take();
      return Formula::eq(a, var_index(lex_.expect_ident()));
    }
    if (lex_.at_punct("!=")) {
      lex_.take();
      return Formula::neg(Formula::eq(a, var_index(lex_.expect_ident())));
    }
    lex_.fail("expected '=' or '!=' after variable", lex_.peek());
  }

  void parse_eqrel() {
    lex_.take();
    auto id = lex_.expect_ident();
    for (const auto& e : spec_.eqrels)
      if (e.id == id.text) lex_.fail("duplicate eqrel id '" + id.text + "'", id);
    EqRelDecl d;
    d.id = id.text;
    lex_.expect_punct("{");
    bool have_rel = false, have_len = false;
    std::optional<SpecLexer::Token> domain_tok, rel_tok, star_tok;
    while (!lex_.at_punct("}")) {
      auto key = lex_.expect_ident();
      if (key.text == "domain") {
        if (lex_.at_punct("!")) {
          lex_.take();
          d.domain_complement = true;
        }
        auto v = lex_.expect_ident();
        if (d.domain_complement && v.text == "all") lex_.fail("'!all' is not a domain", v);
        domain_tok = v;
        if (v.text != "all") d.domain = v.text;
      } else if (key.text == "relation") {
        auto v = lex_.expect_ident();
        rel_tok = v;
        d.relation = v.text;
        have_rel = true;
      } else if (key.text == "length") {
        auto at = lex_.peek();
        long k = lex_.expect_int();
        if (k < 1) lex_.fail("length must be at least 1", at);
        d.length = static_cast<int>(k);
        have_len = true;
      } else if (key.text == "star") {
        auto v = lex_.expect_ident();
        star_tok = v;
        if (v.text != "trivial") d.star = v.text;
      } else if (key.text == "count") {
        if (lex_.at_keyword("inf")) {
          lex_.take();
          d.count.reset();
        } else {
          auto at = lex_.peek();
          long c = lex_.expect_int();
          if (c < 1) lex_.fail("count must be at least 1", at);
          d.count = static_cast<int>(c);
        }
      } else if (key.text == "side") {
        auto sym = lex_.expect_ident();
        if (!spec_.sig.find(sym.text)) lex_.fail("unknown symbol '" + sym.text + "'", sym);
        auto v = lex_.expect_ident();
        Side s;
        if (v.text == "class") s = Side::ClassSide;
        else if (v.text == "element") s = Side::ElementSide;
        else lex_.fail("side must be 'class' or 'element'", v);
        d.sides.emplace_back(sym.text, s);
      } else {
        lex_.fail("unknown eqrel field '" + key.text + "'", key);
      }
      lex_.expect_punct(";");
    }
    auto close = lex_.expect_punct("}");
    if (!have_rel) lex_.fail("eqrel '" + d.id + "' lacks a relation", close);
    (void)have_len;
    const int k = d.length;
    if (d.domain) {
      auto idx = spec_.sig.find(*d.domain);
      if (!idx) lex_.fail("unknown symbol '" + *d.domain + "'", *domain_tok);
      if (spec_.sig[*idx].arity != k)
        lex_.fail("arity mismatch: domain '" + *d.domain + "' must have arity " + std::to_string(k), *domain_tok);
    }
    auto ridx = spec_.sig.find(d.relation);
    if (!ridx) lex_.fail("unknown symbol '" + d.relation + "'", *rel_tok);
    if (spec_.sig[*ridx].arity != 2 * k)
      lex_.fail("arity mismatch: relation '" + d.relation + "' must have arity " + std::to_string(2 * k), *rel_tok);
    if (d.star) {
      const EqRelDecl* prev = nullptr;
      for (const auto& e : spec_.eqrels)
        if (e.id == *d.star) prev = &e;
      if (!prev) lex_.fail("star '" + *d.star + "' does not name an earlier eqrel", *star_tok);
      if (prev->length != k) lex_.fail("star '" + *d.star + "' has a different length", *star_tok);
    }
    if (!d.count && k > 1) lex_.fail("count inf requires length 1", id);
    spec_.eqrels.push_back(std::move(d));
  }

  SpecLexer lex_;
  ParseOptions opt_;
  ClassSpec spec_;
  std::vector<std::string> vars_;
};

}  // namespace detail

inline ClassSpec parse_spec(std::string_view text, ParseOptions opt = {}) {
  return detail::SpecParser(text, opt).parse();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string to_text(const ClassSpec& k) {
  std::string out = "signature {";
  for (const auto& s : k.sig.symbols()) out += " " + s.name + "/" + std::to_string(s.arity) + ";";
  out += " }\n";
  for (const auto& c : k.constraints) {
    out += "constraint forall";
    for (std::size_t i = 0; i < c.vars.size(); ++i) out += (i ? "," : " ") + c.vars[i];
    out += " : " + formula_text(c.body, k.sig, c.vars) + ";\n";
  }
  if (k.min_size > 0) out += "minsize " + std::to_string(k.min_size) + ";\n";
  for (const auto& e : k.eqrels) {
    out += "eqrel " + e.id + " { domain " + (e.domain_complement ? "!" : "") + (e.domain ? *e.domain : std::string("all")) +
           "; relation " + e.relation + "; length " + std::to_string(e.length) + "; star " +
           (e.star ? *e.star : std::string("trivial")) + "; count " +
           (e.count ? std::to_string(*e.count) : std::string("inf")) + ";";
    for (const auto& [sym, side] : e.sides) out += std::string(" side ") + sym + " " + side_name(side) + ";";
    out += " }\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classes as membership oracles.

enum class Membership { Member, NonMember, Indeterminate };

class StructureClass {
 public:
  virtual ~StructureClass() = default;
  virtual const std::shared_ptr<const Signature>& signature_ptr() const = 0;
  virtual const std::vector<EqRelDecl>& eqrels() const = 0;
  virtual Membership membership(const Structure& s) const = 0;
  // Appends ground conditions every member over table's universe satisfies.
  // Each formula's support is the set of elements its truth depends on; a
  // member's substructure on any superset of the support also satisfies it.
  virtual void necessary(const AtomTable& table, std::vector<GroundFormula>& out) const = 0;
  virtual std::string describe() const = 0;

  const Signature& signature() const { return *signature_ptr(); }
  bool contains(const Structure& s) const { return membership(s) == Membership::Member; }
};

using ClassPtr = std::shared_ptr<const StructureClass>;

// Tuples of the eqrel's domain present in s, in lexicographic order.
inline std::vector<Tuple> domain_tuples(const Structure& s, const EqRelDecl& d) {
  std::vector<Tuple> out;
  if (d.domain && !d.domain_complement) {
    const auto& r = s.relation(*d.domain);
    out.assign(r.begin(), r.end());
  } else if (d.domain) {
    for_each_tuple(s.universe(), d.length, [&](const Tuple& t) {
      if (!s.holds(*d.domain, t)) out.push_back(t);
    });
  } else {
    for_each_tuple(s.universe(), d.length, [&](const Tuple& t) { out.push_back(t); });
  }
  return out;
}

inline bool in_domain(const Structure& s, const EqRelDecl& d, const Tuple& t) {
  return d.domain ? s.holds(*d.domain, t) != d.domain_complement : true;
}

inline Tuple concat(const Tuple& a, const Tuple& b) {
  Tuple t = a;
  t.insert(t.end(), b.begin(), b.end());
  return t;
}

inline bool related(const Structure& s, const EqRelDecl& d, const Tuple& a, const Tuple& b) {
  return s.holds(d.relation, concat(a, b));
}

inline const EqRelDecl& find_eqrel(const std::vector<EqRelDecl>& ds, const std::string& id) {
  for (const auto& d : ds)
    if (d.id == id) return d;
  throw Error("unknown eqrel '" + id + "'");
}

// Classes of the star of d that contain t; nullopt star means every domain tuple.
inline bool star_related(const Structure& s, const std::vector<EqRelDecl>& ds, const EqRelDecl& d,
                         const Tuple& a, const Tuple& b) {
  if (!d.star) return true;
  const auto& q = find_eqrel(ds, *d.star);
  return in_domain(s, q, a) && in_domain(s, q, b) && related(s, q, a, b);
}

namespace detail {

// Universal constraints implied by an eqrel declaration: the relation is an
// equivalence on its domain, nested in its star, and has at most count
// classes per star class (encoded only when small enough).
inline std::vector<Constraint> eqrel_axioms(const Signature& sig, const std::vector<EqRelDecl>& ds,
                                            const EqRelDecl& d, std::size_t max_vars,
                                            bool& count_encoded) {
  const int k = d.length;
  const std::size_t P = sig.index_of(d.relation);
  auto block = [&](int base) {
    std::vector<int> v(k);
    for (int i = 0; i < k; ++i) v[i] = base * k + i;
    return v;
  };
  auto names = [&](int blocks) {
    std::vector<std::string> v;
    for (int b = 0; b < blocks; ++b)
      for (int i = 0; i < k; ++i)
        v.push_back(std::string(1, static_cast<char>('x' + (b % 3))) + std::to_string(b / 3) +
                    (k > 1 ? "_" + std::to_string(i) : ""));
    return v;
  };
  auto V = [&](const std::vector<int>& x) {
    if (!d.domain) return Formula::constant(true);
    auto a = Formula::atom(sig.index_of(*d.domain), x);
    return d.domain_complement ? Formula::neg(std::move(a)) : a;
  };
  auto rel = [&](std::size_t sym, const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> args = a;
    args.insert(args.end(), b.begin(), b.end());
    return Formula::atom(sym, args);
  };
  std::vector<Constraint> out;
  auto x = block(0), y = block(1), z = block(2);
  out.push_back({names(2), Formula::implies(rel(P, x, y), Formula::all({V(x), V(y)}))});
  out.push_back({names(1), Formula::implies(V(x), rel(P, x, x))});
  out.push_back({names(2), Formula::implies(rel(P, x, y), rel(P, y, x))});
  out.push_back({names(3), Formula::implies(Formula::all({rel(P, x, y), rel(P, y, z)}), rel(P, x, z))});
  std::optional<std::size_t> Q;
  if (d.star) Q = sig.index_of(find_eqrel(ds, *d.star).relation);
  if (Q) out.push_back({names(2), Formula::implies(rel(P, x, y), rel(*Q, x, y))});
  count_encoded = true;
  if (d.count) {
    const int c = *d.count;
    if (static_cast<std::size_t>((c + 1) * k) <= max_vars) {
      std::vector<Formula> parts;
      std::vector<std::vector<int>> xs;
      for (int i = 0; i <= c; ++i) xs.push_back(block(i));
      for (int i = 0; i <= c; ++i) parts.push_back(V(xs[i]));
      for (int i = 0; i <= c; ++i)
        for (int j = i + 1; j <= c; ++j) {
          parts.push_back(Formula::neg(rel(P, xs[i], xs[j])));
          if (Q) parts.push_back(rel(*Q, xs[i], xs[j]));
        }
      out.push_back({names(c + 1), Formula::neg(Formula::all(std::move(parts)))});
    } else {
      count_encoded = false;
    }
  }
  return out;
}

}  // namespace detail

// Partition of d's domain tuples into classes: blocks sorted internally,
// blocks ordered by least tuple. Throws if the relation is not an
// equivalence on the domain.
inline std::vector<std::vector<Tuple>> eq_classes(const Structure& s, const EqRelDecl& d) {
  auto dom = domain_tuples(s, d);
  std::vector<std::vector<Tuple>> blocks;
  std::vector<bool> done(dom.size(), false);
  for (std::size_t i = 0; i < dom.size(); ++i) {
    if (done[i]) continue;
    if (!related(s, d, dom[i], dom[i]))
      throw Error("relation " + d.relation + " is not reflexive on its domain");
    std::vector<Tuple> b;
    for (std::size_t j = i; j < dom.size(); ++j)
      if (related(s, d, dom[i], dom[j])) {
        if (done[j]) throw Error("relation " + d.relation + " is not an equivalence");
        done[j] = true;
        b.push_back(dom[j]);
      }
    for (const auto& a : b)
      for (const auto& c : b)
        if (!related(s, d, a, c)) throw Error("relation " + d.relation + " is not an equivalence");
    blocks.push_back(std::move(b));
  }
  for (std::size_t i = 0; i < dom.size(); ++i)
    for (std::size_t j = 0; j < dom.size(); ++j) {
      bool same = false;
      for (const auto& b : blocks)
        if (std::find(b.begin(), b.end(), dom[i]) != b.end() &&
            std::find(b.begin(), b.end(), dom[j]) != b.end())
          same = true;
      if (same != related(s, d, dom[i], dom[j]))
        throw Error("relation " + d.relation + " is not an equivalence");
    }
  return blocks;
}

// Class defined by a ClassSpec: membership is evaluation of the constraints,
// the eqrel axioms and the size floor.
class SpecClass : public StructureClass {
 public:
  // With bare=true only the equivalence axioms of each eqrel are added; the
  // nesting and count declarations are left unenforced so they can be tested.
  explicit SpecClass(ClassSpec spec, std::string label = "spec", bool bare = false)
      : spec_(std::move(spec)), sig_(std::make_shared<const Signature>(spec_.sig)), label_(std::move(label)) {
    effective_ = spec_.constraints;
    for (const auto& d : spec_.eqrels) {
      bool encoded = true;
      auto ax = detail::eqrel_axioms(spec_.sig, spec_.eqrels, d, 6, encoded);
      if (bare) {
        ax.resize(4);
        encoded = true;
      }
      effective_.insert(effective_.end(), ax.begin(), ax.end());
      if (!encoded) leaf_counts_.push_back(&d - spec_.eqrels.data());
    }
  }

  const ClassSpec& spec() const { return spec_; }
  const std::shared_ptr<const Signature>& signature_ptr() const override { return sig_; }
  const std::vector<EqRelDecl>& eqrels() const override { return spec_.eqrels; }
  const std::vector<Constraint>& effective_constraints() const { return effective_; }
  std::string describe() const override { return label_; }

  Membership membership(const Structure& s) const override {
    if (!(s.signature() == *sig_)) throw Error("signature mismatch");
    for (const auto& c : effective_)
      if (violation(c, s)) return Membership::NonMember;
    for (std::size_t i : leaf_counts_)
      if (!count_ok(s, spec_.eqrels[i])) return Membership::NonMember;
    if (s.size() > 0 && static_cast<int>(s.size()) < spec_.min_size) return Membership::NonMember;
    return Membership::Member;
  }

  void necessary(const AtomTable& table, std::vector<GroundFormula>& out) const override {
    GroundBuilder gb;
    auto resolve = [&](std::size_t sym, const Tuple& t) { return GroundBuilder::Leaf::of(table.id(sym, t)); };
    for (const auto& c : effective_) {
      for_each_assignment(table.universe(), c.vars.size(), [&](const std::vector<Element>& vals) {
        auto r = gb.ground(c.body, vals, resolve);
        if (auto g = gb.finish(r, vals)) out.push_back(std::move(*g));
      });
    }
  }

 private:
  bool count_ok(const Structure& s, const EqRelDecl& d) const {
    auto blocks = eq_classes(s, d);
    std::vector<std::size_t> group(blocks.size());
    std::map<std::size_t, int> per_group;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      group[i] = i;
      for (std::size_t j = 0; j < i; ++j)
        if (star_related(s, spec_.eqrels, d, blocks[i].front(), blocks[j].front())) {
          group[i] = group[j];
          break;
        }
      if (++per_group[group[i]] > *d.count) return false;
    }
    return true;
  }

  ClassSpec spec_;
  std::shared_ptr<const Signature> sig_;
  std::string label_;
  std::vector<Constraint> effective_;
  std::vector<std::size_t> leaf_counts_;
};

inline ClassPtr make_class(ClassSpec spec, std::string label = "spec") {
  return std::make_shared<SpecClass>(std::move(spec), std::move(label));
}

inline ClassPtr make_bare_class(ClassSpec spec, std::string label = "bare") {
  return std::make_shared<SpecClass>(std::move(spec), std::move(label), true);
}

inline ClassPtr load_spec_class(const std::string& path) {
  return make_class(parse_spec(read_file(path)), path);
}

// ---------------------------------------------------------------------------
// Enumeration and bounded checks.

struct Limits {
  std::size_t enumerate_cap = 6;
  std::size_t membership_cap = 8;
};

// Visits members of k with universe u in lexicographic order; fn returns true to stop.
template <class Fn>
void for_each_member_on(const StructureClass& k, const std::vector<Element>& u, Fn&& fn) {
  AtomTable table(k.signature_ptr(), u);
  std::vector<GroundFormula> formulas;
  k.necessary(table, formulas);
  Completion search(table.size(), &formulas);
  std::vector<AtomId> order(table.size());
  for (AtomId a = 0; a < table.size(); ++a) order[a] = a;
  search.run(std::vector<std::int8_t>(table.size(), kUnknown), order,
             [&](const std::vector<std::int8_t>& vals) {
               Structure s = table.to_structure(vals);
               if (!k.contains(s)) return false;
               return static_cast<bool>(fn(s));
             });
}

inline std::vector<Structure> enumerate(const StructureClass& k, std::size_t n, Limits lim = {}) {
  if (n > lim.enumerate_cap) throw Error("enumeration size " + std::to_string(n) + " exceeds cap");
  std::vector<Structure> out;
  for_each_member_on(k, iota_universe(n), [&](const Structure& s) {
    out.push_back(s);
    return false;
  });
  return out;
}

// One representative per isomorphism type (the lexicographically first labeled member).
inline std::vector<Structure> enumerate_iso(const StructureClass& k, std::size_t n, Limits lim = {}) {
  std::vector<Structure> out;
  std::set<std::string> seen;
  for (auto& s : enumerate(k, n, lim))
    if (seen.insert(iso_canonical_form(s)).second) out.push_back(std::move(s));
  return out;
}

inline std::vector<Structure> enumerate_upto(const StructureClass& k, std::size_t n, bool iso, Limits lim = {}) {
  std::vector<Structure> out;
  for (std::size_t m = 0; m <= n; ++m) {
    auto part = iso ? enumerate_iso(k, m, lim) : enumerate(k, m, lim);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

struct CheckReport {
  bool ok = true;
  std::string check;
  std::string detail;
  std::vector<std::pair<std::string, Structure>> witness;
  std::size_t cases = 0;
};

inline CheckReport check_hereditary(const StructureClass& k, std::size_t n, Limits lim = {}) {
  CheckReport r;
  r.check = "hereditary";
  for (std::size_t m = 1; m <= n; ++m)
    for (const auto& s : enumerate_iso(k, m, lim))
      for (Element e : s.universe()) {
        ++r.cases;
        std::vector<Element> rest;
        for (Element f : s.universe())
          if (f != e) rest.push_back(f);
        Structure sub = restrict(s, rest);
        if (!k.contains(sub)) {
          r.ok = false;
          r.detail = "restriction of a member is not a member";
          r.witness = {{"member", s}, {"restriction", sub}};
          return r;
        }
      }
  r.detail = "no violation up to size " + std::to_string(n);
  return r;
}

namespace detail {

// Searches for U in k with g0 = identity on T0 (universe [m0]) and g1 sending
// T1's elements as given by g1map; other tuples are free.
inline std::optional<Structure> complete_over(const StructureClass& k, std::size_t m,
                                              const std::vector<std::pair<std::size_t, Tuple>>& fixed_true,
                                              const std::vector<std::pair<std::size_t, Tuple>>& fixed_false,
                                              std::map<std::size_t, std::pair<AtomTable, std::vector<GroundFormula>>>& cache) {
  auto it = cache.find(m);
  if (it == cache.end()) {
    AtomTable table(k.signature_ptr(), iota_universe(m));
    std::vector<GroundFormula> fs;
    k.necessary(table, fs);
    it = cache.emplace(m, std::make_pair(std::move(table), std::move(fs))).first;
  }
  const AtomTable& table = it->second.first;
  std::vector<std::int8_t> init(table.size(), kUnknown);
  for (const auto& [sym, t] : fixed_true) init[table.id(sym, t)] = kTrue;
  for (const auto& [sym, t] : fixed_false) {
    auto a = table.id(sym, t);
    if (init[a] == kTrue) return std::nullopt;
    init[a] = kFalse;
  }
  std::vector<AtomId> order;
  for (AtomId a = 0; a < table.size(); ++a)
    if (init[a] == kUnknown) order.push_back(a);
  Completion search(table.size(), &it->second.second);
  std::optional<Structure> found;
  search.run(init, order, [&](const std::vector<std::int8_t>& vals) {
    Structure s = table.to_structure(vals);
    if (!k.contains(s)) return false;
    found = std::move(s);
    return true;
  });
  return found;
}

inline void collect_atoms_of(const Structure& t, const std::map<Element, Element>& g,
                             std::vector<std::pair<std::size_t, Tuple>>& yes,
                             std::vector<std::pair<std::size_t, Tuple>>& no) {
  std::vector<Element> u = t.universe();
  for (std::size_t j = 0; j < t.signature().size(); ++j)
    for_each_tuple(u, t.signature()[j].arity, [&](const Tuple& x) {
      Tuple y;
      for (Element e : x) y.push_back(g.at(e));
      (t.holds(j, x) ? yes : no).emplace_back(j, y);
    });
}

}  // namespace detail

// Amalgam search for T0 <-f0- S -f1-> T1. Tries the disjoint amalgam first,
// then identifications of new points of T1 with new points of T0.
inline std::optional<Structure> find_amalgam_over(const StructureClass& k, const Structure& t0,
                                                  const Injection& f0, const Structure& t1,
                                                  const Injection& f1,
                                                  std::map<std::size_t, std::pair<AtomTable, std::vector<GroundFormula>>>& cache) {
  // Relabel T0 onto [m0].
  std::map<Element, Element> g0;
  Element next = 1;
  for (Element e : t0.universe()) g0[e] = next++;
  const std::size_t m0 = t0.size();
  std::vector<Element> new0, new1;
  std::set<Element> img0, img1;
  for (const auto& [s, v] : f0.map()) img0.insert(v);
  for (const auto& [s, v] : f1.map()) img1.insert(v);
  for (Element e : t0.universe())
    if (!img0.count(e)) new0.push_back(g0[e]);
  for (Element e : t1.universe())
    if (!img1.count(e)) new1.push_back(e);
  // ident[i] = index into new0 the i-th new1 point is glued to, or -1.
  std::vector<int> ident(new1.size(), -1);
  std::optional<Structure> result;
  std::vector<std::pair<std::size_t, Tuple>> yes0, no0;
  detail::collect_atoms_of(t0, g0, yes0, no0);
  // Enumerate partial injections new1 -> new0 by number of glued points.
  std::function<void(std::size_t, std::size_t, std::size_t, std::vector<bool>&)> rec;
  std::size_t target = 0;
  rec = [&](std::size_t i, std::size_t glued, std::size_t, std::vector<bool>& used) {
    if (result) return;
    if (i == new1.size()) {
      if (glued != target) return;
      std::map<Element, Element> g1;
      for (const auto& [s, v] : f1.map()) g1[v] = g0.at(f0(s));
      Element fresh = static_cast<Element>(m0) + 1;
      for (std::size_t q = 0; q < new1.size(); ++q)
        g1[new1[q]] = ident[q] >= 0 ? new0[ident[q]] : fresh++;
      std::size_t m = static_cast<std::size_t>(fresh) - 1;
      auto yes = yes0, no = no0;
      detail::collect_atoms_of(t1, g1, yes, no);
      result = detail::complete_over(k, m, yes, no, cache);
      return;
    }
    rec(i + 1, glued, 0, used);
    if (glued < target)
      for (std::size_t p = 0; p < new0.size(); ++p)
        if (!used[p]) {
          used[p] = true;
          ident[i] = static_cast<int>(p);
          rec(i + 1, glued + 1, 0, used);
          ident[i] = -1;
          used[p] = false;
        }
  };
  for (target = 0; target <= std::min(new0.size(), new1.size()) && !result; ++target) {
    std::vector<bool> used(new0.size(), false);
    rec(0, 0, 0, used);
  }
  return result;
}

inline CheckReport check_amalgamation(const StructureClass& k, std::size_t n, Limits lim = {}) {
  CheckReport r;
  r.check = "amalgamation";
  auto members = enumerate_upto(k, n, true, lim);
  std::map<std::size_t, std::pair<AtomTable, std::vector<GroundFormula>>> cache;
  for (const auto& s : members)
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b = a; b < members.size(); ++b) {
        const auto& t0 = members[a];
        const auto& t1 = members[b];
        if (t0.size() < s.size() || t1.size() < s.size()) continue;
        for (const auto& f0 : enumerate_embeddings(s, t0))
          for (const auto& f1 : enumerate_embeddings(s, t1)) {
            ++r.cases;
            if (!find_amalgam_over(k, t0, f0, t1, f1, cache)) {
              r.ok = false;
              r.detail = "no amalgam found";
              r.witness = {{"S", s}, {"T0", t0}, {"T1", t1}};
              return r;
            }
          }
      }
  r.detail = "no failure up to size " + std::to_string(n);
  return r;
}

}  // namespace exch
