#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "exch/formula.hpp"
#include "exch/relstruct.hpp"

namespace exch {

// Numbers every (symbol, tuple) over a universe. Ids follow signature order,
// then lexicographic tuple order, which is the canonical order used for
// "lexicographically least" everywhere.
class AtomTable {
 public:
  AtomTable(std::shared_ptr<const Signature> sig, std::vector<Element> universe)
      : sig_(std::move(sig)), universe_(sorted_set(std::move(universe))) {
    const std::size_t n = universe_.size();
    Element maxe = universe_.empty() ? 0 : universe_.back();
    pos_.assign(static_cast<std::size_t>(maxe) + 1, -1);
    for (std::size_t i = 0; i < n; ++i) pos_[universe_[i]] = static_cast<int>(i);
    std::uint64_t off = 0;
    for (const auto& s : sig_->symbols()) {
      offset_.push_back(off);
      std::uint64_t cnt = 1;
      for (int i = 0; i < s.arity; ++i) cnt *= n;
      off += cnt;
      if (off > (1u << 26)) throw Error("atom table too large");
    }
    offset_.push_back(off);
  }

  const Signature& signature() const { return *sig_; }
  const std::shared_ptr<const Signature>& signature_ptr() const { return sig_; }
  const std::vector<Element>& universe() const { return universe_; }
  std::size_t size() const { return static_cast<std::size_t>(offset_.back()); }

  std::optional<AtomId> find(std::size_t sym, const Tuple& t) const {
    std::uint64_t code = 0;
    for (Element e : t) {
      if (e >= pos_.size() || pos_[e] < 0) return std::nullopt;
      code = code * universe_.size() + static_cast<std::uint64_t>(pos_[e]);
    }
    return static_cast<AtomId>(offset_[sym] + code);
  }

  AtomId id(std::size_t sym, const Tuple& t) const {
    auto a = find(sym, t);
    if (!a) throw Error("tuple outside atom table universe");
    return *a;
  }

  std::size_t symbol_of(AtomId a) const {
    std::size_t s = 0;
    while (offset_[s + 1] <= a) ++s;
    return s;
  }

  Tuple tuple_of(AtomId a) const {
    const std::size_t s = symbol_of(a);
    const int arity = (*sig_)[s].arity;
    std::uint64_t code = a - offset_[s];
    Tuple t(arity);
    for (int i = arity - 1; i >= 0; --i) {
      t[i] = universe_[code % universe_.size()];
      code /= universe_.size();
    }
    return t;
  }

  Structure to_structure(const std::vector<std::int8_t>& vals) const {
    Structure s(sig_, universe_);
    for (AtomId a = 0; a < size(); ++a)
      if (vals[a] == kTrue) s.add(symbol_of(a), tuple_of(a));
    return s;
  }

  std::vector<std::int8_t> values_of(const Structure& s) const {
    std::vector<std::int8_t> v(size(), kFalse);
    for (std::size_t j = 0; j < sig_->size(); ++j)
      for (const auto& t : s.relation(j)) v[id(j, t)] = kTrue;
    return v;
  }

  // Atoms whose tuples have range inside the sorted set s (or, with
  // full=true, exactly equal to the whole universe).
  std::vector<AtomId> atoms_where(const std::function<bool(const Tuple&)>& pred) const {
    std::vector<AtomId> out;
    for (AtomId a = 0; a < size(); ++a)
      if (pred(tuple_of(a))) out.push_back(a);
    return out;
  }

 private:
  std::shared_ptr<const Signature> sig_;
  std::vector<Element> universe_;
  std::vector<int> pos_;
  std::vector<std::uint64_t> offset_;
};

// Depth-first completion of a partial assignment: branches on atoms in the
// given order (false before true), prunes with three-valued evaluation of
// ground formulas and unit propagation. Solutions are visited in
// lexicographic order of the branching atoms.
class Completion {
 public:
  Completion(std::size_t atom_count, const std::vector<GroundFormula>* formulas)
      : formulas_(formulas), watch_(atom_count) {
    for (std::size_t f = 0; f < formulas_->size(); ++f)
      for (AtomId a : (*formulas_)[f].atoms) watch_[a].push_back(static_cast<std::uint32_t>(f));
  }

  // leaf(vals) returns true to stop the search. Returns true if stopped.
  template <class Leaf>
  bool run(std::vector<std::int8_t> init, const std::vector<AtomId>& order, Leaf&& leaf) {
    vals_ = std::move(init);
    trail_.clear();
    order_ = &order;
    for (std::size_t f = 0; f < formulas_->size(); ++f) {
      if (!check_formula(static_cast<std::uint32_t>(f))) return false;
    }
    if (!drain()) return false;
    return dfs(0, leaf);
  }

  std::uint64_t nodes_visited() const { return nodes_; }

 private:
  template <class Leaf>
  bool dfs(std::size_t pos, Leaf& leaf) {
    const auto& order = *order_;
    while (pos < order.size() && vals_[order[pos]] != kUnknown) ++pos;
    if (pos == order.size()) return leaf(static_cast<const std::vector<std::int8_t>&>(vals_));
    ++nodes_;
    const AtomId a = order[pos];
    for (std::int8_t v : {kFalse, kTrue}) {
      const std::size_t mark = trail_.size();
      set(a, v);
      if (drain() && dfs(pos + 1, leaf)) return true;
      undo(mark);
    }
    return false;
  }

  void set(AtomId a, std::int8_t v) {
    vals_[a] = v;
    trail_.push_back(a);
    queue_.push_back(a);
  }

  void undo(std::size_t mark) {
    while (trail_.size() > mark) {
      vals_[trail_.back()] = kUnknown;
      trail_.pop_back();
    }
    queue_.clear();
  }

  bool drain() {
    while (!queue_.empty()) {
      AtomId a = queue_.back();
      queue_.pop_back();
      for (std::uint32_t f : watch_[a])
        if (!check_formula(f)) {
          queue_.clear();
          return false;
        }
    }
    return true;
  }

  // False on conflict; forces the last unknown atom of a formula when only
  // one of its values keeps the formula satisfiable.
  bool check_formula(std::uint32_t f) {
    const GroundFormula& g = (*formulas_)[f];
    const auto r = g.eval(vals_);
    if (r == kFalse) return false;
    if (r == kTrue) return true;
    AtomId only = 0;
    int unknown = 0;
    for (AtomId a : g.atoms)
      if (vals_[a] == kUnknown) {
        only = a;
        if (++unknown > 1) return true;
      }
    if (unknown != 1) return true;
    vals_[only] = kFalse;
    const auto r0 = g.eval(vals_);
    vals_[only] = kTrue;
    const auto r1 = g.eval(vals_);
    vals_[only] = kUnknown;
    if (r0 == kFalse && r1 == kFalse) return false;
    if (r0 == kFalse) set(only, kTrue);
    if (r1 == kFalse) set(only, kFalse);
    return true;
  }

  const std::vector<GroundFormula>* formulas_;
  std::vector<std::vector<std::uint32_t>> watch_;
  std::vector<std::int8_t> vals_;
  std::vector<AtomId> trail_;
  std::vector<AtomId> queue_;
  const std::vector<AtomId>* order_ = nullptr;
  std::uint64_t nodes_ = 0;
};

}  // namespace exch
