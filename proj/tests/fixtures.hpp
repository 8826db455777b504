#pragma once

#include <string>

#include "exch/classdef.hpp"

namespace exch::testing {

inline std::string class_path(const std::string& name) { return std::string(EXCH_CLASS_DIR) + "/" + name; }

inline ClassPtr load(const std::string& name) { return load_spec_class(class_path(name)); }

inline ClassPtr equiv_class() { return load("equiv.kspec"); }
inline ClassPtr equiv2_class() { return load("equiv2.kspec"); }
inline ClassPtr two_indep_class() { return load("two_indep.kspec"); }
inline ClassPtr two_nested_class() { return load("two_nested.kspec"); }
inline ClassPtr graph_class() { return load("graph.kspec"); }

// Equivalence structure over a one-binary-symbol signature from its blocks.
inline Structure partition_structure(const Signature& sig, const std::vector<std::vector<Element>>& blocks,
                                     std::size_t sym = 0) {
  std::vector<Element> u;
  for (const auto& b : blocks) u.insert(u.end(), b.begin(), b.end());
  Structure s(sig, u);
  for (const auto& b : blocks)
    for (Element x : b)
      for (Element y : b) s.add(sym, {x, y});
  return s;
}

}  // namespace exch::testing
