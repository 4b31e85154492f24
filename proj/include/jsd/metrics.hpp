#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace jsd {

struct QueryResult {
  std::string query_id;
  std::vector<std::uint32_t> ranked;  // best first, unique
  std::uint32_t gold = 0;

  /// 1-based rank of the gold document, 0 when absent.
  std::size_t gold_rank() const noexcept {
    for (std::size_t i = 0; i < ranked.size(); ++i)
      if (ranked[i] == gold) return i + 1;
    return 0;
  }
};

inline double recall_at_k(std::span<const QueryResult> results, std::size_t k) {
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : results) {
    const auto rank = r.gold_rank();
    if (rank != 0 && rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline double reciprocal_rank_at_10(const QueryResult& r) noexcept {
  const auto rank = r.gold_rank();
  return rank != 0 && rank <= 10 ? 1.0 / static_cast<double>(rank) : 0.0;
}

inline double mrr_at_10(std::span<const QueryResult> results) {
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) s += reciprocal_rank_at_10(r);
  return s / static_cast<double>(results.size());
}

struct MetricReport {
  double recall_1 = 0.0;
  double recall_5 = 0.0;
  double mrr_10 = 0.0;
  std::vector<double> reciprocal_ranks;  // per query, @10

  nlohmann::json to_json() const {
    return {{"r_at_1", recall_1}, {"r_at_5", recall_5}, {"mrr_at_10", mrr_10}, {"queries", reciprocal_ranks.size()}};
  }
};

inline MetricReport metric_report(std::span<const QueryResult> results) {
  MetricReport m;
  m.recall_1 = recall_at_k(results, 1);
  m.recall_5 = recall_at_k(results, 5);
  m.mrr_10 = mrr_at_10(results);
  m.reciprocal_ranks.reserve(results.size());
  for (const auto& r : results) m.reciprocal_ranks.push_back(reciprocal_rank_at_10(r));
  return m;
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-sided
  std::size_t dof = 0;
  bool constant_difference = false;  // zero-variance differences with nonzero mean
};

/// Paired t-test on per-query differences a - b; Student-t with n-1 dof.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired_t_test: samples have different lengths");
  if (a.size() < 2) throw ConfigError("paired_t_test: need at least two pairs");
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = (a[i] - b[i]) - mean;
    ss += dev * dev;
  }
  TTestResult r;
  r.dof = n - 1;
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    if (mean == 0.0) return r;  // t = 0, p = 1
    r.constant_difference = true;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p = 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(r.dof));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace jsd
