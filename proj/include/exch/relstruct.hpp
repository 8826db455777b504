#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "exch/error.hpp"

namespace exch {

using Element = std::uint32_t;
using Tuple = std::vector<Element>;

struct Symbol {
  std::string name;
  int arity = 1;
  bool operator==(const Symbol&) const = default;
};

class Signature {
 public:
  Signature() = default;
  explicit Signature(std::vector<Symbol> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].arity < 1)
        throw Error("symbol " + symbols_[i].name + " has arity < 1");
      if (symbols_[i].name.empty()) throw Error("empty symbol name");
      for (std::size_t j = 0; j < i; ++j)
        if (symbols_[j].name == symbols_[i].name)
          throw Error("duplicate symbol " + symbols_[i].name);
    }
  }

  std::size_t size() const { return symbols_.size(); }
  bool empty() const { return symbols_.empty(); }
  const Symbol& operator[](std::size_t i) const { return symbols_.at(i); }
  const std::vector<Symbol>& symbols() const { return symbols_; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      if (symbols_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw Error("unknown symbol " + std::string(name));
  }

  Signature extended(const std::vector<Symbol>& more) const {
    auto all = symbols_;
    all.insert(all.end(), more.begin(), more.end());
    return Signature(std::move(all));
  }

  bool operator==(const Signature&) const = default;

 private:
  std::vector<Symbol> symbols_;
};

inline std::vector<Element> sorted_set(std::vector<Element> s) {
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

inline std::vector<Element> range_of(const Tuple& t) { return sorted_set(t); }

class Structure {
 public:
  Structure() : Structure(Signature{}, {}) {}

  Structure(Signature sig, std::vector<Element> universe)
      : Structure(std::make_shared<const Signature>(std::move(sig)), std::move(universe)) {}

  Structure(std::shared_ptr<const Signature> sig, std::vector<Element> universe)
      : sig_(std::move(sig)), universe_(sorted_set(std::move(universe))), rel_(sig_->size()) {}

  const Signature& signature() const { return *sig_; }
  const std::shared_ptr<const Signature>& signature_ptr() const { return sig_; }
  const std::vector<Element>& universe() const { return universe_; }
  std::size_t size() const { return universe_.size(); }

  bool has_element(Element e) const {
    return std::binary_search(universe_.begin(), universe_.end(), e);
  }

  const std::set<Tuple>& relation(std::size_t sym) const { return rel_.at(sym); }
  const std::set<Tuple>& relation(std::string_view name) const {
    return rel_[sig_->index_of(name)];
  }

  bool holds(std::size_t sym, const Tuple& t) const { return rel_[sym].count(t) != 0; }
  bool holds(std::string_view name, const Tuple& t) const {
    return holds(sig_->index_of(name), t);
  }

  void add(std::size_t sym, Tuple t) {
    check_tuple(sym, t);
    rel_[sym].insert(std::move(t));
  }
  void add(std::string_view name, Tuple t) { add(sig_->index_of(name), std::move(t)); }

  void set(std::size_t sym, const Tuple& t, bool value) {
    if (value) {
      add(sym, t);
    } else {
      rel_.at(sym).erase(t);
    }
  }

  std::size_t fact_count() const {
    std::size_t n = 0;
    for (const auto& r : rel_) n += r.size();
    return n;
  }

  friend bool operator==(const Structure& a, const Structure& b) {
    return (a.sig_ == b.sig_ || *a.sig_ == *b.sig_) && a.universe_ == b.universe_ &&
           a.rel_ == b.rel_;
  }

 private:
  void check_tuple(std::size_t sym, const Tuple& t) const {
    if (sym >= sig_->size()) throw Error("symbol index out of range");
    const auto& s = (*sig_)[sym];
    if (static_cast<int>(t.size()) != s.arity)
      throw Error("arity mismatch for " + s.name);
    for (Element e : t)
      if (!has_element(e))
        throw Error("element " + std::to_string(e) + " not in universe (symbol " + s.name + ")");
  }

  std::shared_ptr<const Signature> sig_;
  std::vector<Element> universe_;
  std::vector<std::set<Tuple>> rel_;
};

struct Fact {
  std::size_t symbol = 0;
  Tuple args;
  auto operator<=>(const Fact&) const = default;
};

struct QfType {
  std::vector<Element> carrier;
  std::set<Fact> facts;
  bool operator==(const QfType&) const = default;
};

class Injection {
 public:
  Injection() = default;
  explicit Injection(std::map<Element, Element> m) : map_(std::move(m)) {
    std::set<Element> seen;
    for (const auto& [k, v] : map_)
      if (!seen.insert(v).second)
        throw Error("map is not injective (two elements sent to " + std::to_string(v) + ")");
  }

  static Injection identity(const std::vector<Element>& dom) {
    std::map<Element, Element> m;
    for (Element e : dom) m[e] = e;
    return Injection(std::move(m));
  }

  static Injection from_sequences(const std::vector<Element>& dom,
                                  const std::vector<Element>& img) {
    if (dom.size() != img.size()) throw Error("domain/image length mismatch");
    std::map<Element, Element> m;
    for (std::size_t i = 0; i < dom.size(); ++i)
      if (!m.emplace(dom[i], img[i]).second) throw Error("repeated domain element");
    return Injection(std::move(m));
  }

  const std::map<Element, Element>& map() const { return map_; }
  std::size_t size() const { return map_.size(); }
  bool defined_at(Element e) const { return map_.count(e) != 0; }

  Element operator()(Element e) const {
    auto it = map_.find(e);
    if (it == map_.end()) throw Error("element " + std::to_string(e) + " outside injection domain");
    return it->second;
  }

  Tuple apply(const Tuple& t) const {
    Tuple out;
    out.reserve(t.size());
    for (Element e : t) out.push_back((*this)(e));
    return out;
  }

  std::vector<Element> domain() const {
    std::vector<Element> d;
    for (const auto& kv : map_) d.push_back(kv.first);
    return d;
  }

  // Image listed in domain order.
  std::vector<Element> image_sequence() const {
    std::vector<Element> d;
    for (const auto& kv : map_) d.push_back(kv.second);
    return d;
  }

  Injection inverse() const {
    std::map<Element, Element> m;
    for (const auto& [k, v] : map_) m[v] = k;
    return Injection(std::move(m));
  }

  // (this ∘ inner)(x) = this(inner(x)); inner's image must lie in this domain.
  Injection compose(const Injection& inner) const {
    std::map<Element, Element> m;
    for (const auto& [k, v] : inner.map_) m[k] = (*this)(v);
    return Injection(std::move(m));
  }

  bool operator==(const Injection&) const = default;

 private:
  std::map<Element, Element> map_;
};

// Calls fn on every tuple of the given arity over elems, in lexicographic order.
template <class Fn>
void for_each_tuple(const std::vector<Element>& elems, int arity, Fn&& fn) {
  if (elems.empty()) return;
  std::vector<std::size_t> idx(arity, 0);
  Tuple t(arity, elems[0]);
  while (true) {
    fn(static_cast<const Tuple&>(t));
    int pos = arity - 1;
    while (pos >= 0 && idx[pos] + 1 == elems.size()) {
      idx[pos] = 0;
      t[pos] = elems[0];
      --pos;
    }
    if (pos < 0) return;
    ++idx[pos];
    t[pos] = elems[idx[pos]];
  }
}

inline bool subset_of(const std::vector<Element>& sorted_small,
                      const std::vector<Element>& sorted_big) {
  return std::includes(sorted_big.begin(), sorted_big.end(), sorted_small.begin(),
                       sorted_small.end());
}

inline void require_subset(const Structure& m, const std::vector<Element>& s) {
  for (Element e : s)
    if (!m.has_element(e))
      throw Error("element " + std::to_string(e) + " not in universe");
}

inline bool tuple_within(const Tuple& t, const std::vector<Element>& sorted_s) {
  for (Element e : t)
    if (!std::binary_search(sorted_s.begin(), sorted_s.end(), e)) return false;
  return true;
}

inline QfType qf_type(const Structure& m, std::vector<Element> s) {
  s = sorted_set(std::move(s));
  require_subset(m, s);
  QfType out;
  out.carrier = s;
  for (std::size_t j = 0; j < m.signature().size(); ++j)
    for (const auto& t : m.relation(j))
      if (tuple_within(t, s)) out.facts.insert(Fact{j, t});
  return out;
}

inline Structure restrict(const Structure& m, std::vector<Element> s) {
  s = sorted_set(std::move(s));
  require_subset(m, s);
  Structure out(m.signature_ptr(), s);
  for (std::size_t j = 0; j < m.signature().size(); ++j)
    for (const auto& t : m.relation(j))
      if (tuple_within(t, s)) out.add(j, t);
  return out;
}

// M^φ: the structure on domain(φ) with R(x) iff R(φ(x)) in M.
inline Structure pullback(const Structure& m, const Injection& phi) {
  for (const auto& [k, v] : phi.map())
    if (!m.has_element(v))
      throw Error("injection range escapes universe at " + std::to_string(v));
  Structure out(m.signature_ptr(), phi.domain());
  const Injection inv = phi.inverse();
  for (std::size_t j = 0; j < m.signature().size(); ++j)
    for (const auto& t : m.relation(j)) {
      bool inside = true;
      for (Element e : t)
        if (!inv.defined_at(e)) {
          inside = false;
          break;
        }
      if (inside) out.add(j, inv.apply(t));
    }
  return out;
}

inline bool is_embedding(const Injection& phi, const Structure& s, const Structure& m) {
  if (phi.domain() != s.universe()) throw Error("injection domain differs from universe of S");
  if (!(s.signature() == m.signature())) throw Error("signature mismatch");
  return pullback(m, phi) == s;
}

namespace detail {

// Backtracking over images of S's elements in increasing order, so embeddings
// are produced in lexicographic order of their image sequence.
template <class Fn>
bool embed_search(const Structure& s, const Structure& m, std::vector<Element>& img,
                  std::vector<bool>& used, Fn& fn) {
  const auto& su = s.universe();
  const auto& mu = m.universe();
  const std::size_t i = img.size();
  if (i == su.size()) return fn(Injection::from_sequences(su, img));
  for (std::size_t c = 0; c < mu.size(); ++c) {
    if (used[c]) continue;
    img.push_back(mu[c]);
    bool ok = true;
    std::vector<Element> dom_prefix(su.begin(), su.begin() + static_cast<long>(i) + 1);
    for (std::size_t j = 0; j < s.signature().size() && ok; ++j) {
      const int a = s.signature()[j].arity;
      std::vector<Element> positions(i + 1);
      for (std::size_t p = 0; p <= i; ++p) positions[p] = static_cast<Element>(p);
      for_each_tuple(positions, a, [&](const Tuple& pt) {
        if (!ok) return;
        if (std::find(pt.begin(), pt.end(), static_cast<Element>(i)) == pt.end()) return;
        Tuple st(a), mt(a);
        for (int q = 0; q < a; ++q) {
          st[q] = dom_prefix[pt[q]];
          mt[q] = img[pt[q]];
        }
        if (s.holds(j, st) != m.holds(j, mt)) ok = false;
      });
    }
    if (ok) {
      used[c] = true;
      if (!embed_search(s, m, img, used, fn)) return false;
      used[c] = false;
    }
    img.pop_back();
  }
  return true;
}

}  // namespace detail

// fn(Injection) returns false to stop early.
template <class Fn>
void for_each_embedding(const Structure& s, const Structure& m, Fn&& fn) {
  if (!(s.signature() == m.signature())) throw Error("signature mismatch");
  if (s.size() > m.size()) return;
  std::vector<Element> img;
  std::vector<bool> used(m.size(), false);
  detail::embed_search(s, m, img, used, fn);
}

inline std::vector<Injection> enumerate_embeddings(const Structure& s, const Structure& m) {
  std::vector<Injection> out;
  for_each_embedding(s, m, [&](Injection phi) {
    out.push_back(std::move(phi));
    return true;
  });
  return out;
}

inline std::optional<Injection> are_isomorphic(const Structure& s, const Structure& t) {
  if (!(s.signature() == t.signature()) || s.size() != t.size()) return std::nullopt;
  std::optional<Injection> found;
  for_each_embedding(s, t, [&](Injection phi) {
    found = std::move(phi);
    return false;
  });
  return found;
}

// Text encoding: "universe: e1 e2 ..." then one "R a b" line per fact, facts in
// signature order and lexicographic tuple order.
inline std::string to_text(const Structure& s) {
  std::string out = "universe:";
  for (Element e : s.universe()) out += " " + std::to_string(e);
  out += "\n";
  for (std::size_t j = 0; j < s.signature().size(); ++j)
    for (const auto& t : s.relation(j)) {
      out += s.signature()[j].name;
      for (Element e : t) out += " " + std::to_string(e);
      out += "\n";
    }
  return out;
}

inline Structure parse_structure(std::string_view text, const Signature& sig) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  std::optional<Structure> s;
  auto sig_ptr = std::make_shared<const Signature>(sig);
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    if (!s) {
      if (head != "universe:") throw ParseError("expected 'universe:' header", lineno, 1);
      std::vector<Element> u;
      std::string tok;
      while (ls >> tok) {
        try {
          std::size_t used = 0;
          unsigned long v = std::stoul(tok, &used);
          if (used != tok.size() || v > 0xffffffffUL) throw std::invalid_argument(tok);
          u.push_back(static_cast<Element>(v));
        } catch (const std::exception&) {
          throw ParseError("bad element '" + tok + "'", lineno, 1);
        }
      }
      auto sorted = sorted_set(u);
      if (sorted.size() != u.size()) throw ParseError("repeated universe element", lineno, 1);
      s.emplace(sig_ptr, u);
      continue;
    }
    auto idx = sig.find(head);
    if (!idx) throw ParseError("unknown symbol '" + head + "'", lineno, 1);
    Tuple t;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        unsigned long v = std::stoul(tok, &used);
        if (used != tok.size() || v > 0xffffffffUL) throw std::invalid_argument(tok);
        t.push_back(static_cast<Element>(v));
      } catch (const std::exception&) {
        throw ParseError("bad element '" + tok + "'", lineno, 1);
      }
    }
    if (static_cast<int>(t.size()) != sig[*idx].arity)
      throw ParseError("arity mismatch for " + head, lineno, 1);
    try {
      s->add(*idx, t);
    } catch (const Error& e) {
      throw ParseError(e.what(), lineno, 1);
    }
  }
  if (!s) throw ParseError("missing 'universe:' header", lineno + 1, 1);
  return *s;
}

inline std::string labeled_form(const Structure& s) { return to_text(s); }

namespace detail {

inline std::string encode_relabeled(const Structure& s, const std::vector<std::size_t>& inv) {
  // inv[p] = index into universe of the element given label p.
  const auto& u = s.universe();
  const std::size_t n = u.size();
  std::string bits;
  bits.push_back(static_cast<char>(n));
  std::vector<Element> labels(n);
  for (std::size_t p = 0; p < n; ++p) labels[p] = static_cast<Element>(p);
  for (std::size_t j = 0; j < s.signature().size(); ++j) {
    const int a = s.signature()[j].arity;
    Tuple orig(a);
    for_each_tuple(labels, a, [&](const Tuple& lt) {
      for (int q = 0; q < a; ++q) orig[q] = u[inv[lt[q]]];
      bits.push_back(s.holds(j, orig) ? '1' : '0');
    });
  }
  return bits;
}

}  // namespace detail

// Lexicographically least encoding over all relabelings of the universe onto
// 0..n-1. Exhaustive; meant for universes of at most 8 elements.
inline std::string iso_canonical_form(const Structure& s) {
  const std::size_t n = s.size();
  if (n > 9) throw Error("iso_canonical_form: universe larger than 9");
  std::vector<std::size_t> inv(n);
  for (std::size_t i = 0; i < n; ++i) inv[i] = i;
  std::string best;
  bool first = true;
  do {
    std::string enc = detail::encode_relabeled(s, inv);
    if (first || enc < best) {
      best = std::move(enc);
      first = false;
    }
  } while (std::next_permutation(inv.begin(), inv.end()));
  return best;
}

inline std::vector<Element> iota_universe(std::size_t n, Element start = 1) {
  std::vector<Element> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = start + static_cast<Element>(i);
  return u;
}

}  // namespace exch
