// exch-kit: command-line front end for the exch library.
// Exit codes: 0 success or passing verdict, 1 failing verdict, 2 usage or input error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "exch/amalgam.hpp"
#include "exch/eliminate.hpp"
#include "exch/equiv.hpp"
#include "exch/hierarchy.hpp"
#include "exch/sampler.hpp"
#include "report_json.hpp"

namespace fs = std::filesystem;
using namespace exch;
using json = nlohmann::json;

namespace {

constexpr int kOk = 0, kVerdictFail = 1, kUsage = 2;

struct UsageError : Error {
  using Error::Error;
};

// A bare file name that does not exist locally resolves against the shipped classes.
std::string resolve_class(const std::string& path) {
  if (fs::exists(path)) return path;
  const fs::path shipped = fs::path(EXCH_CLASS_DIR) / path;
  if (fs::exists(shipped)) return shipped.string();
  throw Error("class file not found: " + path);
}

ClassSpec load_spec(const std::string& path) { return parse_spec(read_file(resolve_class(path))); }

Structure load_structure(const std::string& path, const Signature& sig) {
  if (!fs::exists(path)) throw Error("structure file not found: " + path);
  return parse_structure(read_file(path), sig);
}

std::vector<Element> parse_elements(const std::string& text) {
  std::vector<Element> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(static_cast<Element>(std::stoul(item)));
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<T>(std::stol(item)));
    } catch (const std::exception&) {
      throw UsageError("not a number list: " + text);
    }
  }
  if (out.empty()) throw UsageError("empty list: " + text);
  return out;
}

void require_open_unit(double v, const char* name) {
  if (!(v > 0 && v < 1)) throw UsageError(std::string(name) + " must lie in (0,1)");
}

// Rules written over the terminal class of a pipeline.
TypeRule terminal_rule(const std::string& name, const Pipeline& p) {
  if (name == "classcoin_dbl") return rules::classcoin_dbl();
  if (name == "twoclass_pick_expanded") {
    for (const auto& st : p.stages)
      if (st.finite && st.fin->v >= 2)
        return rules::twoclass_pick_expanded((*st.fin->sig)[st.fin->preds[0]].name,
                                             (*st.fin->sig)[st.fin->preds[1]].name);
    throw UsageError("twoclass_pick_expanded needs a finite stage with two labels");
  }
  return builtin_rule(name);
}

TypeRule pick_rule(const std::string& name, const ClassPtr& k, bool lift) {
  if (!lift) return builtin_rule(name);
  const Pipeline p = eliminate_all(k);
  return p.lift(terminal_rule(name, p));
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

struct Common {
  bool as_json = false;
  unsigned threads = 1;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exch-kit: exchangeable structures over amalgamation classes"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_flag("--json", common.as_json, "Machine-readable output");
  app.add_option("--threads", common.threads, "Worker threads for Monte Carlo")->check(CLI::Range(1u, 256u));

  std::function<int()> run;
  std::string class_path, structure_path, rule_name, subset, out_dir, stage, mix_name, depths_text, bounds_text,
      csv_path, mode = "exact";
  std::size_t n = 3, plus = 2, window = 4, perms = 8;
  std::optional<std::uint64_t> seed;
  std::uint64_t samples = 100000;
  double tv = 0.02, pmin = 1e-3;
  bool upto = false, weak = false, no_empty = false, lift = false, product = false;
  int precision = kApPrecision;

  auto add_class = [&](CLI::App* c) { c->add_option("--class", class_path, "Class spec file")->required(); };
  auto add_seed = [&](CLI::App* c, bool required) {
    auto* o = c->add_option("--seed", seed, "Seed of the keyed randomness");
    if (required) o->required();
  };
  auto add_stats = [&](CLI::App* c) {
    c->add_option("--samples", samples, "Draws per distribution")->check(CLI::Range(std::uint64_t{2}, std::uint64_t{100000000}));
    c->add_option("--tv", tv, "Total variation threshold");
    c->add_option("--p", pmin, "p-value threshold");
  };

  auto* cc = app.add_subcommand("check-class", "Bounded checks of a class: heredity, amalgamation, declarations");
  add_class(cc);
  cc->add_option("--n", n, "Size bound")->check(CLI::Range(1, 8));
  cc->callback([&] {
    run = [&] {
      const ClassSpec spec = load_spec(class_path);
      auto k = make_class(spec, class_path);
      std::vector<CheckReport> reps{check_hereditary(*k, n), check_amalgamation(*k, n), validate_star_chain(spec, n)};
      for (const auto& d : spec.eqrels) {
        if (d.length != 1) continue;
        for (auto r : {falsify_evenly(spec, d.id, n), falsify_freely(spec, d.id, n)}) {
          r.check += " " + d.id;
          reps.push_back(std::move(r));
        }
      }
      bool ok = true;
      json arr = json::array();
      for (const auto& r : reps) {
        ok = ok && r.ok;
        arr.push_back(json_out::check(r));
      }
      if (common.as_json) {
        print({{"command", "check-class"}, {"class", class_path}, {"n", n}, {"ok", ok}, {"checks", arr}});
      } else {
        for (const auto& r : reps) {
          std::cout << (r.ok ? "ok   " : "FAIL ") << r.check << ": " << r.detail << "\n";
          for (const auto& [name, s] : r.witness) std::cout << name << ":\n" << to_text(s);
        }
      }
      return ok ? kOk : kVerdictFail;
    };
  });

  auto* cd = app.add_subcommand("check-dap", "Disjoint amalgamation for plans of size n");
  add_class(cd);
  cd->add_option("--n", n, "Plan size")->check(CLI::Range(2, 6));
  auto* up = cd->add_flag("--upto", upto, "Only plans with coherent partition labelings");
  cd->add_flag("--weak-upto", weak, "Labeling-respecting amalgams only")->excludes(up);
  cd->callback([&] {
    run = [&] {
      auto k = make_class(load_spec(class_path), class_path);
      const DapVerdict v = (upto || weak) ? check_ndap_upto(*k, n, weak) : check_ndap(*k, n);
      if (common.as_json) {
        json j = json_out::dap(*k, v);
        j["command"] = "check-dap";
        j["class"] = class_path;
        print(j);
      } else {
        std::cout << (v.holds ? "holds" : "fails") << ": " << v.mode << " n=" << v.n << " plans=" << v.plans << "\n";
        if (v.counterexample) std::cout << "counterexample\n" << plan_text(*v.counterexample);
      }
      return v.holds ? kOk : kVerdictFail;
    };
  });

  auto* cb = app.add_subcommand("blurs", "List B(s) for a subset of a structure");
  add_class(cb);
  cb->add_option("--structure", structure_path, "Structure file")->required();
  cb->add_option("--subset", subset, "Comma-separated elements (default: the whole universe)");
  cb->add_flag("--no-empty-blur", no_empty, "Leave out the empty blur");
  cb->callback([&] {
    run = [&] {
      auto k = make_class(load_spec(class_path), class_path);
      const Structure s = load_structure(structure_path, k->signature());
      if (!k->contains(s)) throw Error("structure is not in the class");
      const auto sub = subset.empty() ? s.universe() : sorted_set(parse_elements(subset));
      const auto bs = blur_set(*k, s, sub, !no_empty);
      json arr = json::array();
      for (const auto& b : bs) arr.push_back(blur_text(*k, b));
      if (common.as_json)
        print({{"command", "blurs"}, {"subset", sub}, {"count", bs.size()}, {"blurs", arr}});
      else
        for (const auto& b : bs) std::cout << blur_text(*k, b) << "\n";
      return kOk;
    };
  });

  auto* cs = app.add_subcommand("sample", "Draw one output structure");
  add_class(cs);
  cs->add_option("--structure", structure_path, "Input structure file")->required();
  cs->add_option("--rule", rule_name, "Rule name")->required();
  cs->add_flag("--lift", lift, "Rule is written over the fully eliminated class");
  add_seed(cs, true);
  cs->callback([&] {
    run = [&] {
      auto k = make_class(load_spec(class_path), class_path);
      const Structure s = load_structure(structure_path, k->signature());
      const TypeRule f = pick_rule(rule_name, k, lift);
      const Structure out = sample_structure(*k, s, f, *seed);
      if (common.as_json)
        print({{"command", "sample"}, {"rule", f.name}, {"seed", *seed}, {"output", json_out::structure(out)}});
      else
        std::cout << to_text(out);
      return kOk;
    };
  });

  auto* ce = app.add_subcommand("test-exch", "Monte Carlo K-exchangeability test");
  add_class(ce);
  ce->add_option("--rule", rule_name, "Rule name")->required();
  ce->add_option("--n", n, "Size bound")->check(CLI::Range(1, 5));
  ce->add_flag("--lift", lift, "Rule is written over the fully eliminated class");
  add_seed(ce, true);
  add_stats(ce);
  ce->callback([&] {
    run = [&] {
      require_open_unit(tv, "--tv");
      require_open_unit(pmin, "--p");
      auto k = make_class(load_spec(class_path), class_path);
      const TypeRule f = pick_rule(rule_name, k, lift);
      MonteCarloOptions opt{samples, tv, pmin, common.threads};
      const ExchReport r = check_exchangeability(*k, f, n, *seed, opt);
      if (common.as_json) {
        json j = json_out::exch(r);
        j["command"] = "test-exch";
        j["rule"] = f.name;
        j["seed"] = *seed;
        j["samples"] = samples;
        print(j);
      } else {
        std::cout << (r.pass ? "pass" : "FAIL") << ": comparisons=" << r.comparisons << " worst_tv=" << r.worst_tv
                  << " min_p_adjusted=" << r.min_p_adjusted << "\n";
        if (r.worst) std::cout << "worst embedding " << r.worst->embedding << "\n";
      }
      return r.pass ? kOk : kVerdictFail;
    };
  });

  auto* cq = app.add_subcommand("test-eqsym", "Independence of the output from partition labelings");
  add_class(cq);
  cq->add_option("--structure", structure_path, "Input structure file")->required();
  cq->add_option("--rule", rule_name, "Rule name")->required();
  cq->add_option("--mode", mode, "exact or mc")->check(CLI::IsMember({"exact", "mc"}));
  cq->add_flag("--lift", lift, "Rule is written over the fully eliminated class");
  add_seed(cq, false);
  add_stats(cq);
  cq->callback([&] {
    run = [&] {
      if (mode == "mc" && !seed) throw UsageError("--seed is required with --mode mc");
      auto k = make_class(load_spec(class_path), class_path);
      const Structure s = load_structure(structure_path, k->signature());
      const TypeRule f = pick_rule(rule_name, k, lift);
      EqSymmetryReport r;
      if (mode == "exact") {
        r = check_eq_symmetry_exact(*k, s, f);
      } else {
        require_open_unit(tv, "--tv");
        require_open_unit(pmin, "--p");
        r = check_eq_symmetry_mc(*k, s, f, *seed, MonteCarloOptions{samples, tv, pmin, common.threads});
      }
      if (common.as_json) {
        json j = json_out::eqsym(r);
        j["command"] = "test-eqsym";
        j["rule"] = f.name;
        print(j);
      } else {
        std::cout << (r.pass ? "pass" : "FAIL") << (r.vacuous ? " (vacuous)" : "") << ": " << r.detail << "\n";
      }
      return r.pass ? kOk : kVerdictFail;
    };
  });

  auto* cl = app.add_subcommand("eliminate", "Eliminate declared eqrels and write the stage classes");
  add_class(cl);
  cl->add_option("--out", out_dir, "Output directory")->required();
  cl->add_option("--stage", stage, "Stop after eliminating this eqrel");
  cl->callback([&] {
    run = [&] {
      auto k = make_class(load_spec(class_path), class_path);
      const Pipeline p = eliminate_all(k, {}, stage.empty() ? std::nullopt : std::optional<std::string>(stage));
      fs::create_directories(out_dir);
      json stages = json::array();
      for (std::size_t i = 0; i < p.stages.size(); ++i) {
        const Stage& st = p.stages[i];
        json js = json_out::stage(st);
        const std::string base = "stage" + std::to_string(i + 1) + "_" + st.eqrel;
        std::optional<ClassSpec> spec;
        if (auto sc = std::dynamic_pointer_cast<const SpecClass>(st.after)) {
          spec = sc->spec();
          js["membership"] = "spec";
        } else if (!st.finite) {
          std::vector<Constraint> shell = st.inf.ex->meaningful;
          shell.insert(shell.end(), st.inf.ex->distinct.begin(), st.inf.ex->distinct.end());
          spec = ClassSpec{*st.inf.ex->sig, shell, st.inf.ex->eqrels, 0};
          js["membership"] = "shell spec plus extension search";
        } else {
          js["membership"] = "oracle";
        }
        if (spec) {
          const std::string file = base + (st.finite ? ".kspec" : ".shell.kspec");
          std::ofstream(fs::path(out_dir) / file) << to_text(*spec);
          js["file"] = file;
        } else {
          js["file"] = nullptr;
        }
        stages.push_back(js);
      }
      json manifest = {{"class", class_path},
                       {"stages", stages},
                       {"terminal_eqrels", p.terminal()->eqrels().size()},
                       {"order", [&] {
                          json o = json::array();
                          for (const auto& st : p.stages) o.push_back(st.eqrel);
                          return o;
                        }()}};
      std::ofstream(fs::path(out_dir) / "pipeline.json") << manifest.dump(2) << "\n";
      if (common.as_json) {
        manifest["command"] = "eliminate";
        print(manifest);
      } else {
        for (const auto& js : stages)
          std::cout << js["eqrel"].get<std::string>() << ": " << js["kind"].get<std::string>() << " -> "
                    << (js["file"].is_null() ? std::string("(oracle)") : js["file"].get<std::string>()) << "\n";
        std::cout << "manifest " << (fs::path(out_dir) / "pipeline.json").string() << "\n";
      }
      return kOk;
    };
  });

  auto* ca = app.add_subcommand("ap-demo", "Hierarchically exchangeable array and its invariance test");
  ca->add_option("--depths", depths_text, "Comma-separated depths (several: product form)")->required();
  ca->add_option("--bounds", bounds_text, "Coordinate range, one value or one per level")->required();
  ca->add_option("--mix", mix_name, "Mix: root, leaf, average, first_block, coord_parity")->required();
  ca->add_option("--plus", plus, "Range of the extra coordinate in the product form")->check(CLI::Range(1, 64));
  ca->add_flag("--product", product, "Product form even for one level");
  ca->add_option("--precision", precision, "Bits per value")->check(CLI::Range(1, 53));
  ca->add_option("--csv", csv_path, "Write the array as CSV to this file");
  ca->add_option("--window", window, "Points compared jointly")->check(CLI::Range(1, 8));
  ca->add_option("--permutations", perms, "Sampled permutations")->check(CLI::Range(1, 64));
  add_seed(ca, true);
  add_stats(ca);
  ca->callback([&] {
    run = [&] {
      require_open_unit(tv, "--tv");
      require_open_unit(pmin, "--p");
      const auto depths = parse_list<int>(depths_text);
      auto bounds = parse_list<std::size_t>(bounds_text);
      const bool prod = product || depths.size() > 1;
      const ApIndex idx = prod ? build_ap_product(depths, bounds, plus)
                               : build_ap_structure(depths[0], bounds.at(0));
      const Mix mix = builtin_mix(mix_name);
      const ApSample arr = sample_ap_array(idx, mix, *seed, precision);
      InvarianceOptions opt;
      opt.samples = samples;
      opt.tv_threshold = tv;
      opt.p_threshold = pmin;
      opt.threads = common.threads;
      opt.window = window;
      opt.permutations = perms;
      const InvarianceReport r = check_hierarchical_invariance(idx, mix, *seed, opt);
      std::ostringstream csv;
      csv << "point,value\n";
      for (std::size_t i = 0; i < idx.points.size(); ++i)
        csv << point_text(idx.points[i], idx.shape.product) << "," << arr.values[i] << "\n";
      if (!csv_path.empty()) std::ofstream(csv_path) << csv.str();
      if (common.as_json) {
        json j = json_out::invariance(idx, r);
        j["command"] = "ap-demo";
        j["mix"] = mix.name;
        j["seed"] = *seed;
        json values = json::array();
        for (std::size_t i = 0; i < idx.points.size(); ++i)
          values.push_back({{"point", point_text(idx.points[i], idx.shape.product)}, {"value", arr.values[i]}});
        j["array"] = values;
        print(j);
      } else {
        if (csv_path.empty()) std::cout << csv.str();
        std::cout << (r.pass ? "pass" : "FAIL") << ": worst_tv=" << r.tv << " p=" << r.p_value << " ("
                  << r.permutations << " permutations)\n";
      }
      return r.pass ? kOk : kVerdictFail;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  try {
    return run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
