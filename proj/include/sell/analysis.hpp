#pragma once

// HashedNet excluded-weight analysis, the ACDC mult-add crossover, and
// comparison tables with their Pareto frontier.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sell/error.hpp"
#include "sell/linop.hpp"
#include "sell/result.hpp"

namespace sell {

/// Expected number of real weights that no virtual position references:
/// n_real * (1 - 1/n_real)^n_virtual, evaluated in log space.
inline double exclusion_exact(std::uint64_t n_real, std::uint64_t n_virtual) {
  if (n_real < 1 || n_virtual < 1)
    throw InvalidInput("exclusion_exact: n_real and n_virtual must be >= 1");
  if (n_real == 1)
    return 0.0;
  const double nr = static_cast<double>(n_real);
  return nr * std::exp(static_cast<double>(n_virtual) * std::log1p(-1.0 / nr));
}

/// Large-n_virtual limit of the excluded fraction at compression ratio c = n_real / n_virtual.
inline double exclusion_limit(double c) {
  if (!(c > 0.0))
    throw InvalidInput("exclusion_limit: c must be > 0");
  return std::exp(-1.0 / c);
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Mean and standard error of the excluded fraction over sampled index tables.
inline MonteCarloEstimate exclusion_montecarlo(std::uint64_t n_real, std::uint64_t n_virtual,
                                               int trials, std::uint64_t seed) {
  if (trials < 1)
    throw InvalidInput("exclusion_montecarlo: trials must be >= 1");
  if (n_real < 1 || n_virtual < 1)
    throw InvalidInput("exclusion_montecarlo: n_real and n_virtual must be >= 1");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::uint64_t> pick(0, n_real - 1);
  std::vector<char> used(n_real);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::fill(used.begin(), used.end(), 0);
    for (std::uint64_t v = 0; v < n_virtual; ++v)
      used[pick(gen)] = 1;
    const auto unused = std::count(used.begin(), used.end(), 0);
    const double frac = double(unused) / double(n_real);
    sum += frac;
    sum_sq += frac * frac;
  }
  const double mean = sum / trials;
  if (trials == 1)
    return {mean, 0.0};
  const double var = std::max(0.0, (sum_sq - trials * mean * mean) / (trials - 1));
  return {mean, std::sqrt(var / trials)};
}

struct ExclusionReport {
  std::uint64_t n_real = 0;
  std::uint64_t n_virtual = 0;
  double exact_expected_excluded = 0.0;
  double exact_ratio = 0.0;
  double limit_ratio = 0.0;
  std::optional<MonteCarloEstimate> montecarlo;
};

inline ExclusionReport exclusion_report(std::uint64_t n_real, std::uint64_t n_virtual,
                                        int trials = 0, std::uint64_t seed = 0) {
  ExclusionReport r;
  r.n_real = n_real;
  r.n_virtual = n_virtual;
  r.exact_expected_excluded = exclusion_exact(n_real, n_virtual);
  r.exact_ratio = r.exact_expected_excluded / double(n_real);
  r.limit_ratio = exclusion_limit(double(n_real) / double(n_virtual));
  if (trials > 0)
    r.montecarlo = exclusion_montecarlo(n_real, n_virtual, trials, seed);
  return r;
}

/// Smallest width N at which an L-layer ACDC stack costs fewer mult-adds than
/// a dense N x N matvec.
inline std::size_t acdc_crossover(std::size_t layers, const CostModel &model = {},
                                  std::size_t max_width = std::size_t{1} << 24) {
  if (layers < 1)
    throw InvalidInput("acdc_crossover: layers must be >= 1");
  for (std::size_t n = 1; n <= max_width; ++n) {
    const auto dense = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n);
    if (acdc_multadds(n, layers, model) < dense)
      return n;
  }
  throw NoCrossover("ACDC never undercuts dense cost up to width " + std::to_string(max_width));
}

struct ComparisonRow {
  std::string kind;
  std::string knob;
  std::int64_t params = 0;
  std::optional<std::int64_t> multadds;
  double param_ratio = 0.0;
  double eval_loss = 0.0;
  bool diverged = false;
  bool crs_enabled = true;
};

struct ComparisonTable {
  /// Sorted by params.
  std::vector<ComparisonRow> rows;
  /// Rows not dominated in (params, eval_loss); sorted by params.
  std::vector<ComparisonRow> frontier;
};

/// a dominates b: no worse in both coordinates, strictly better in one.
inline bool dominates(const ComparisonRow &a, const ComparisonRow &b) {
  const bool weak = a.params <= b.params && a.eval_loss <= b.eval_loss;
  const bool strict = a.params < b.params || a.eval_loss < b.eval_loss;
  return weak && strict;
}

inline std::vector<ComparisonRow> pareto_frontier(std::vector<ComparisonRow> rows) {
  // sweep by (params, loss); a row survives if its loss beats every earlier row
  std::sort(rows.begin(), rows.end(), [](const auto &a, const auto &b) {
    if (a.params != b.params)
      return a.params < b.params;
    return a.eval_loss < b.eval_loss;
  });
  std::vector<ComparisonRow> out;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t best_params = -1;
  for (const auto &r : rows) {
    if (r.eval_loss < best) {
      out.push_back(r);
      best = r.eval_loss;
      best_params = r.params;
    } else if (r.eval_loss == best && r.params == best_params) {
      out.push_back(r); // exact duplicate point: neither dominates
    }
  }
  return out;
}

/// Build the comparison table; unsupported cells are skipped and diverged
/// runs are listed but excluded from the frontier.
inline ComparisonTable assemble_report(const std::vector<ExperimentResult> &results) {
  if (results.empty())
    throw InvalidInput("assemble_report: at least one result is required");
  ComparisonTable table;
  for (const auto &r : results) {
    if (r.status == "unsupported")
      continue;
    table.rows.push_back({r.kind, r.knob, r.params, r.multadds, r.param_ratio, r.final_eval_loss,
                          r.diverged, r.crs_enabled});
  }
  std::stable_sort(table.rows.begin(), table.rows.end(),
                   [](const auto &a, const auto &b) { return a.params < b.params; });
  std::vector<ComparisonRow> candidates;
  for (const auto &r : table.rows)
    if (!r.diverged && std::isfinite(r.eval_loss))
      candidates.push_back(r);
  table.frontier = pareto_frontier(std::move(candidates));
  return table;
}

} // namespace sell
