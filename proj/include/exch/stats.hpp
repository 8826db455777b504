#pragma once

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "exch/error.hpp"

namespace exch {

// Counts keyed by an outcome encoding (usually a structure's text form).
struct EmpiricalDist {
  std::map<std::string, std::uint64_t> counts;
  std::uint64_t total = 0;

  void add(const std::string& outcome, std::uint64_t n = 1) {
    counts[outcome] += n;
    total += n;
  }
  void merge(const EmpiricalDist& o) {
    for (const auto& [k, v] : o.counts) add(k, v);
  }
  double p(const std::string& outcome) const {
    auto it = counts.find(outcome);
    return it == counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total);
  }
};

inline double tv_distance(const EmpiricalDist& a, const EmpiricalDist& b) {
  if (a.total == 0 || b.total == 0) throw Error("tv_distance: empty distribution");
  double sum = 0;
  for (const auto& [k, v] : a.counts) sum += std::abs(a.p(k) - b.p(k));
  for (const auto& [k, v] : b.counts)
    if (!a.counts.count(k)) sum += b.p(k);
  return std::min(1.0, sum / 2);
}

struct ChiSquareResult {
  double statistic = 0;
  std::size_t df = 0;
  double p_value = 1;
};

// Two-sample chi-square homogeneity test over the pooled support. Categories
// whose smaller expected count is below 5 are merged into one bin; if fewer
// than two bins remain the test is degenerate and p = 1.
inline ChiSquareResult multinomial_two_sample(const EmpiricalDist& a, const EmpiricalDist& b) {
  if (a.total < 2 || b.total < 2) throw Error("multinomial_two_sample: each sample needs at least 2 draws");
  std::map<std::string, std::pair<double, double>> joint;
  for (const auto& [k, v] : a.counts) joint[k].first = static_cast<double>(v);
  for (const auto& [k, v] : b.counts) joint[k].second = static_cast<double>(v);
  const double na = static_cast<double>(a.total), nb = static_cast<double>(b.total), n = na + nb;
  std::vector<std::pair<double, double>> bins;
  std::pair<double, double> pooled{0, 0};
  for (const auto& [k, c] : joint) {
    const double col = c.first + c.second;
    if (std::min(na, nb) * col / n < 5) {
      pooled.first += c.first;
      pooled.second += c.second;
    } else {
      bins.push_back(c);
    }
  }
  if (pooled.first + pooled.second > 0) bins.push_back(pooled);
  ChiSquareResult r;
  if (bins.size() < 2) return r;
  for (const auto& [x, y] : bins) {
    const double col = x + y;
    const double ea = na * col / n, eb = nb * col / n;
    r.statistic += (x - ea) * (x - ea) / ea + (y - eb) * (y - eb) / eb;
  }
  r.df = bins.size() - 1;
  boost::math::chi_squared dist(static_cast<double>(r.df));
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

struct Verdict {
  bool pass = true;
  double tv = 0;
  double p_value = 1;
  // Outcomes with the largest |p1 - p2|, at most five.
  std::vector<std::pair<std::string, double>> discrepancies;
};

inline Verdict verdict(const EmpiricalDist& a, const EmpiricalDist& b, double tv_threshold, double p_threshold) {
  Verdict v;
  v.tv = tv_distance(a, b);
  v.p_value = multinomial_two_sample(a, b).p_value;
  v.pass = v.tv <= tv_threshold && v.p_value >= p_threshold;
  std::map<std::string, double> diff;
  for (const auto& [k, c] : a.counts) diff[k] = a.p(k) - b.p(k);
  for (const auto& [k, c] : b.counts) diff[k] = a.p(k) - b.p(k);
  for (const auto& d : diff) v.discrepancies.push_back(d);
  std::stable_sort(v.discrepancies.begin(), v.discrepancies.end(),
                   [](const auto& x, const auto& y) { return std::abs(x.second) > std::abs(y.second); });
  if (v.discrepancies.size() > 5) v.discrepancies.resize(5);
  return v;
}

}  // namespace exch
