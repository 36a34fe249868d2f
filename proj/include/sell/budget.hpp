#pragma once

// Parameter-budget machinery: every kind exposes one tuning knob normalised to
// t in [0, 1]; curves of total parameters against t are intersected to find a
// common support, budgets are spaced geometrically, and a target count is
// inverted back to a knob setting.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sell/error.hpp"
#include "sell/kernels.hpp"
#include "sell/linop.hpp"

namespace sell {

/// Upper end of the ACDC knob (the depth used in the original ACDC work).
inline constexpr std::size_t kAcdcMaxLayers = 12;

struct LayerDims {
  std::size_t n_out = 1;
  std::size_t n_in = 1;
  bool operator==(const LayerDims &) const = default;
};

/// How t maps onto each kind's hyperparameter.
inline std::string knob_meaning(Kind kind) {
  switch (kind) {
  case Kind::Dense: return "none (fixed n_out*n_in)";
  case Kind::ACDC: return "layers L = 1 + round(t*(12-1)), ascending";
  case Kind::TensorTrain: return "tt_rank r = 1 + round(t*(r_max-1)), r_max = full TT rank";
  case Kind::Tucker: return "rank_fraction f = (1 + t*(d_max-1)) / d_max";
  case Kind::RankFactorised: return "d_bn = 1 + round(t*(min(n_in,n_out)-1))";
  case Kind::HashedNet: return "n_real = max(1, round(t*n_out*n_in))";
  case Kind::ShuffleLinear: return "groups over divisors of n in [2, n], descending in t";
  }
  return "";
}

namespace detail {

inline std::size_t round_index(double t, std::size_t count) {
  if (count <= 1)
    return 0;
  return static_cast<std::size_t>(std::llround(t * static_cast<double>(count - 1)));
}

inline std::vector<std::size_t> shuffle_groups_descending(std::size_t n) {
  std::vector<std::size_t> g;
  for (std::size_t d = n; d >= 2; --d)
    if (n % d == 0)
      g.push_back(d);
  return g;
}

inline std::size_t tt_full_rank(const std::array<std::size_t, 3> &d) {
  return std::max(std::min(d[0], d[1] * d[2]), std::min(d[0] * d[1], d[2]));
}

} // namespace detail

/// Operator spec at normalised knob position t for one layer.
inline OperatorSpec knob_spec(Kind kind, LayerDims dims, double t, std::uint64_t seed = 0) {
  if (!(t >= 0.0 && t <= 1.0))
    throw InvalidInput("knob position must lie in [0, 1]");
  OperatorSpec spec{dims.n_out, dims.n_in, DenseHyper{}, seed};
  switch (kind) {
  case Kind::Dense:
    break;
  case Kind::ACDC:
    spec.hyper = AcdcHyper{1 + detail::round_index(t, kAcdcMaxLayers)};
    break;
  case Kind::TensorTrain: {
    const auto r_max = detail::tt_full_rank(reshape3(dims.n_out, dims.n_in).dims);
    spec.hyper = TtHyper{1 + detail::round_index(t, r_max)};
    break;
  }
  case Kind::Tucker: {
    const auto d = reshape3(dims.n_out, dims.n_in).dims;
    const double d_max = static_cast<double>(*std::max_element(d.begin(), d.end()));
    spec.hyper = TuckerHyper{(1.0 + t * (d_max - 1.0)) / d_max};
    break;
  }
  case Kind::RankFactorised:
    spec.hyper = RfHyper{1 + detail::round_index(t, std::min(dims.n_out, dims.n_in))};
    break;
  case Kind::HashedNet: {
    const double virt = static_cast<double>(dims.n_out * dims.n_in);
    spec.hyper = HashedHyper{std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(t * virt)))};
    break;
  }
  case Kind::ShuffleLinear: {
    if (dims.n_out != dims.n_in || dims.n_in % 2 != 0)
      throw SpecError("ShuffleLinear requires square layers of even width");
    const auto groups = detail::shuffle_groups_descending(dims.n_in);
    spec.hyper = ShuffleHyper{groups[detail::round_index(t, groups.size())]};
    break;
  }
  }
  validate(spec);
  return spec;
}

inline std::vector<OperatorSpec> knob_specs(Kind kind, const std::vector<LayerDims> &layers,
                                            double t) {
  std::vector<OperatorSpec> specs;
  specs.reserve(layers.size());
  for (const auto &l : layers)
    specs.push_back(knob_spec(kind, l, t));
  return specs;
}

inline std::size_t total_params(Kind kind, const std::vector<LayerDims> &layers, double t) {
  std::size_t total = 0;
  for (const auto &l : layers)
    total += param_count(knob_spec(kind, l, t));
  return total;
}

struct KnobSample {
  double t = 0.0;
  std::size_t params = 0;
};

struct KnobCurve {
  Kind kind = Kind::Dense;
  std::vector<LayerDims> layer_dims;
  std::vector<KnobSample> samples;
  std::string knob_meaning;

  std::size_t min_params() const { return samples.front().params; }
  std::size_t max_params() const { return samples.back().params; }
};

inline KnobCurve knob_curve(Kind kind, const std::vector<LayerDims> &layers, int resolution) {
  if (resolution < 2)
    throw InvalidInput("knob_curve: resolution must be >= 2");
  if (layers.empty())
    throw InvalidInput("knob_curve: at least one layer is required");
  KnobCurve c{kind, layers, {}, knob_meaning(kind)};
  for (int i = 0; i < resolution; ++i) {
    const double t = double(i) / double(resolution - 1);
    c.samples.push_back({t, total_params(kind, layers, t)});
  }
  return c;
}

/// Parameter range every curve can reach.
inline std::pair<double, double> support_interval(const std::vector<KnobCurve> &curves) {
  if (curves.size() < 2)
    throw InvalidInput("support_interval: at least two curves are required");
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  for (const auto &c : curves) {
    lo = std::max(lo, double(c.min_params()));
    hi = std::min(hi, double(c.max_params()));
  }
  if (lo > hi)
    throw NoCommonSupport("no parameter count is reachable by every kind: max of minima " +
                          std::to_string(lo) + " exceeds min of maxima " + std::to_string(hi));
  return {lo, hi};
}

/// Midpoint of [lo, hi] by linear interpolation in log parameter count.
inline double log_midpoint(double lo, double hi) {
  if (!(lo > 0.0 && lo < hi))
    throw InvalidInput("log_midpoint: requires 0 < lo < hi");
  return std::sqrt(lo * hi);
}

/// k budgets spaced evenly in log parameter count, endpoints included.
/// For k = 2^m + 1 this is exactly repeated log_midpoint bisection.
inline std::vector<double> log_spaced_budgets(double lo, double hi, int k) {
  if (k < 1)
    throw InvalidInput("log_spaced_budgets: k must be >= 1");
  if (k == 1)
    return {lo == hi ? lo : log_midpoint(lo, hi)};
  std::vector<double> out;
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (int i = 0; i < k; ++i) {
    if (i == 0)
      out.push_back(lo);
    else if (i == k - 1)
      out.push_back(hi);
    else
      out.push_back(std::exp(a + (b - a) * double(i) / double(k - 1)));
  }
  return out;
}

struct BudgetSolution {
  Kind kind = Kind::Dense;
  double t = 0.0;
  std::vector<OperatorSpec> specs;
  std::size_t params = 0;
  /// |params - target| <= tol * target
  bool within_tol = false;
};

/// Knob setting whose total parameter count is closest to `target`; ties go
/// to the smaller count.
inline BudgetSolution solve_budget(Kind kind, const std::vector<LayerDims> &layers, double target,
                                   double tol = 0.0) {
  const double lo_params = double(total_params(kind, layers, 0.0));
  const double hi_params = double(total_params(kind, layers, 1.0));
  if (target < lo_params || target > hi_params)
    throw OutOfSupport(std::string(kind_name(kind)) + ": target " + std::to_string(target) +
                           " parameters is outside the reachable range",
                       lo_params, hi_params);

  auto make = [&](double t) {
    BudgetSolution s{kind, t, knob_specs(kind, layers, t), 0, false};
    for (const auto &spec : s.specs)
      s.params += param_count(spec);
    s.within_tol = std::abs(double(s.params) - target) <= tol * target;
    return s;
  };

  // smallest t with params(t) >= target; params is a non-decreasing step function
  double lo = 0.0;
  double hi = 1.0;
  if (lo_params >= target)
    return make(0.0);
  for (int it = 0; it < 200 && std::nextafter(lo, hi) < hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (double(total_params(kind, layers, mid)) >= target)
      hi = mid;
    else
      lo = mid;
  }
  BudgetSolution below = make(lo);
  BudgetSolution above = make(hi);
  const double d_below = target - double(below.params);
  const double d_above = double(above.params) - target;
  return d_above < d_below ? above : below;
}

} // namespace sell
