#pragma once

#include <nlohmann/json.hpp>

#include "exch/amalgam.hpp"
#include "exch/eliminate.hpp"
#include "exch/hierarchy.hpp"
#include "exch/sampler.hpp"

namespace exch::json_out {

using json = nlohmann::json;

inline json structure(const Structure& s) {
  json rel = json::object();
  for (std::size_t j = 0; j < s.signature().size(); ++j) {
    json facts = json::array();
    for (const auto& t : s.relation(j)) facts.push_back(t);
    rel[s.signature()[j].name] = facts;
  }
  return {{"universe", s.universe()}, {"relations", rel}};
}

inline json check(const CheckReport& r) {
  json w = json::object();
  for (const auto& [name, s] : r.witness) w[name] = structure(s);
  return {{"check", r.check}, {"ok", r.ok}, {"detail", r.detail}, {"cases", r.cases}, {"witness", w}};
}

inline json labeling(const StructureClass& k, const Labeling& lab) {
  json out = json::object();
  for (std::size_t r = 0; r < lab.labels.size(); ++r) {
    json m = json::array();
    for (const auto& [t, v] : lab.labels[r]) m.push_back({{"tuple", t}, {"label", v}});
    out[k.eqrels().at(r).id] = m;
  }
  return out;
}

inline json dap(const StructureClass& k, const DapVerdict& v) {
  json out = {{"holds", v.holds}, {"mode", v.mode}, {"n", v.n}, {"plans", v.plans}, {"labelings", v.labelings}};
  if (v.counterexample) {
    json parts = json::array();
    for (const auto& p : v.counterexample->parts) parts.push_back(structure(p));
    out["counterexample"] = parts;
  } else {
    out["counterexample"] = nullptr;
  }
  out["labeling"] = v.labeling ? labeling(k, *v.labeling) : json(nullptr);
  return out;
}

inline json exch(const ExchReport& r) {
  json out = {{"pass", r.pass},
              {"comparisons", r.comparisons},
              {"structures", r.structures},
              {"worst_tv", r.worst_tv},
              {"min_p", r.min_p},
              {"min_p_adjusted", r.min_p_adjusted}};
  if (r.worst)
    out["worst"] = {{"s", r.worst->s_text},
                    {"t", r.worst->t_text},
                    {"embedding", r.worst->embedding},
                    {"tv", r.worst->tv},
                    {"p_value", r.worst->p_value}};
  else
    out["worst"] = nullptr;
  return out;
}

inline json eqsym(const EqSymmetryReport& r) {
  return {{"pass", r.pass},           {"vacuous", r.vacuous}, {"mode", r.mode},       {"labelings", r.labelings},
          {"exact_tv", r.exact_tv.str()}, {"tv", r.tv},       {"p_value", r.p_value}, {"detail", r.detail}};
}

inline json exact_table(const ExactTable& t) {
  json out = json::object();
  for (const auto& [k, p] : t) out[k] = p.str();
  return out;
}

inline json invariance(const ApIndex& idx, const InvarianceReport& r) {
  json window = json::array();
  for (auto i : r.window) window.push_back(point_text(idx.points[i], idx.shape.product));
  return {{"pass", r.pass},     {"tv", r.tv}, {"p_value", r.p_value}, {"permutations", r.permutations},
          {"window", window},   {"tvs", r.tvs}, {"detail", r.detail}};
}

inline json stage(const Stage& st) {
  json out = {{"eqrel", st.eqrel}, {"kind", st.finite ? "finite" : "infinite"}};
  if (st.finite) {
    json preds = json::array();
    for (auto p : st.fin->preds) preds.push_back((*st.fin->sig)[p].name);
    out["labels"] = preds;
    out["classes_per_star_class"] = st.fin->v;
  } else {
    const auto& ex = *st.inf.ex;
    json tags = json::array();
    for (std::size_t j = 0; j < ex.sig->size(); ++j)
      tags.push_back({{"symbol", (*ex.sig)[j].name},
                      {"arity", (*ex.sig)[j].arity},
                      {"side", side_tag_name(ex.tags[j])},
                      {"source", ex.tag_source[j]}});
    out["symbols"] = tags;
    out["class_marker"] = (*ex.sig)[ex.c_sym].name;
    out["extension_bound"] = ex.opt.bound;
  }
  json eq = json::array();
  for (const auto& d : st.after->eqrels()) eq.push_back(d.id);
  out["remaining_eqrels"] = eq;
  return out;
}

}  // namespace exch::json_out
