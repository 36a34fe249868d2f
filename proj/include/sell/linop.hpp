#pragma once

// The compressed-linear-operator abstraction: an immutable OperatorSpec naming
// a family member, the ParamStore holding its trainable values, and the
// closed-form parameter / mult-add accounting against a dense baseline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sell/error.hpp"
#include "sell/kernels.hpp"

namespace sell {

/// Order matches the alternatives of `Hyper`.
enum class Kind { Dense, ACDC, TensorTrain, Tucker, RankFactorised, HashedNet, ShuffleLinear };

inline constexpr std::array<Kind, 7> kAllKinds{Kind::Dense,          Kind::ACDC,      Kind::TensorTrain,
                                               Kind::Tucker,         Kind::RankFactorised,
                                               Kind::HashedNet,      Kind::ShuffleLinear};

inline std::string_view kind_name(Kind k) {
  switch (k) {
  case Kind::Dense: return "Dense";
  case Kind::ACDC: return "ACDC";
  case Kind::TensorTrain: return "TensorTrain";
  case Kind::Tucker: return "Tucker";
  case Kind::RankFactorised: return "RankFactorised";
  case Kind::HashedNet: return "HashedNet";
  case Kind::ShuffleLinear: return "ShuffleLinear";
  }
  return "?";
}

/// Accepts canonical names plus the usual abbreviations (TT, RF, Shuffle).
inline Kind parse_kind(std::string_view s) {
  for (Kind k : kAllKinds)
    if (s == kind_name(k))
      return k;
  if (s == "TT") return Kind::TensorTrain;
  if (s == "RF") return Kind::RankFactorised;
  if (s == "Hashed") return Kind::HashedNet;
  if (s == "Shuffle") return Kind::ShuffleLinear;
  throw SpecError("unknown operator kind '" + std::string(s) + "'");
}

struct DenseHyper {
  bool operator==(const DenseHyper &) const = default;
};
struct AcdcHyper {
  std::size_t layers = 1;
  bool operator==(const AcdcHyper &) const = default;
};
struct TtHyper {
  std::size_t tt_rank = 1;
  bool operator==(const TtHyper &) const = default;
};
struct TuckerHyper {
  double rank_fraction = 1.0;
  bool operator==(const TuckerHyper &) const = default;
};
struct RfHyper {
  std::size_t d_bn = 1;
  bool operator==(const RfHyper &) const = default;
};
struct HashedHyper {
  std::size_t n_real = 1;
  bool operator==(const HashedHyper &) const = default;
};
struct ShuffleHyper {
  std::size_t groups = 1;
  bool operator==(const ShuffleHyper &) const = default;
};

using Hyper = std::variant<DenseHyper, AcdcHyper, TtHyper, TuckerHyper, RfHyper, HashedHyper,
                           ShuffleHyper>;

/// Immutable descriptor of one compressed-layer instance.
struct OperatorSpec {
  std::size_t n_out = 1;
  std::size_t n_in = 1;
  Hyper hyper;
  std::uint64_t seed = 0;

  Kind kind() const { return static_cast<Kind>(hyper.index()); }
  std::size_t dense_params() const { return n_out * n_in; }

  bool operator==(const OperatorSpec &) const = default;
};

/// Short "name=value" rendering of the structural hyperparameter.
inline std::string knob_label(const OperatorSpec &spec) {
  return std::visit(
      [](const auto &h) -> std::string {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, DenseHyper>) return "dense";
        else if constexpr (std::is_same_v<H, AcdcHyper>) return "L=" + std::to_string(h.layers);
        else if constexpr (std::is_same_v<H, TtHyper>) return "r=" + std::to_string(h.tt_rank);
        else if constexpr (std::is_same_v<H, TuckerHyper>) {
          nlohmann::json j = h.rank_fraction;
          return "f=" + j.dump();
        } else if constexpr (std::is_same_v<H, RfHyper>) return "d_bn=" + std::to_string(h.d_bn);
        else if constexpr (std::is_same_v<H, HashedHyper>) return "n_real=" + std::to_string(h.n_real);
        else return "g=" + std::to_string(h.groups);
      },
      spec.hyper);
}

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Segment &) const = default;
};

/// Construction-time data that is never trained.
struct FixedData {
  /// HashedNet: row-major n_out x n_in table of indices into the real weights.
  std::vector<std::uint32_t> hash_index;
  bool operator==(const FixedData &) const = default;
};

/// Flat trainable vector plus a named partition of it.
struct ParamStore {
  Vector flat;
  std::vector<Segment> segments;
  std::shared_ptr<const FixedData> fixed = std::make_shared<const FixedData>();

  std::span<double> segment(std::string_view name) {
    const auto &s = find(name);
    return {flat.data() + s.offset, s.length};
  }
  std::span<const double> segment(std::string_view name) const {
    const auto &s = find(name);
    return {flat.data() + s.offset, s.length};
  }

  /// Appends a zero-filled segment and returns its offset.
  std::size_t add_segment(std::string name, std::size_t length) {
    const std::size_t offset = flat.size();
    segments.push_back({std::move(name), offset, length});
    flat.resize(offset + length, 0.0);
    return offset;
  }

  /// True when segments tile [0, flat.size()) in order with no gap or overlap.
  bool partition_is_exact() const {
    std::size_t next = 0;
    for (const auto &s : segments) {
      if (s.offset != next)
        return false;
      next += s.length;
    }
    return next == flat.size();
  }

  bool operator==(const ParamStore &o) const {
    return flat == o.flat && segments == o.segments && *fixed == *o.fixed;
  }

private:
  const Segment &find(std::string_view name) const {
    for (const auto &s : segments)
      if (s.name == name)
        return s;
    throw SpecError("ParamStore: no segment named '" + std::string(name) + "'");
  }
};

/// Constant for mult-adds(DCT_N) = kappa * N * log2(N), chosen so that a
/// 12-layer ACDC stack first beats a dense N x N matvec at N = 625.
inline double default_dct_kappa() {
  constexpr double layers = 12.0;
  const double n = 624.5;
  // L * (2 kappa n log2 n + 2 n) == n^2 solved for kappa.
  return (n / layers - 2.0) / (2.0 * std::log2(n));
}

struct CostModel {
  double dct_kappa = default_dct_kappa();
  /// Report TT / Tucker as reconstruct-then-matvec instead of Unavailable.
  bool materialise_tt_tucker = false;
};

/// Mult-adds of an L-layer ACDC stack of width n: two DCTs and two diagonal
/// scalings per layer; the riffle permutation is free.
inline std::int64_t acdc_multadds(std::size_t n, std::size_t layers, const CostModel &model) {
  const double w = static_cast<double>(n);
  const double dct = model.dct_kappa * w * std::log2(w);
  return std::llround(static_cast<double>(layers) * (2.0 * dct + 2.0 * w));
}

struct CostReport {
  std::int64_t params = 0;
  std::optional<std::int64_t> multadds;
  std::int64_t dense_params = 0;
  std::int64_t dense_multadds = 0;
  double param_ratio = 0.0;
  std::optional<double> multadd_ratio;
};

namespace detail {

inline std::array<std::size_t, 3> tucker_ranks(const std::array<std::size_t, 3> &dims,
                                               double rank_fraction) {
  std::array<std::size_t, 3> r{};
  for (std::size_t k = 0; k < 3; ++k)
    r[k] = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(rank_fraction * static_cast<double>(dims[k]))));
  return r;
}

} // namespace detail

/// Throws SpecError when a hyperparameter is outside its valid range.
inline void validate(const OperatorSpec &spec) {
  if (spec.n_out == 0 || spec.n_in == 0)
    throw SpecError("operator dimensions must be >= 1");
  const std::size_t n = spec.n_in;
  std::visit(
      [&](const auto &h) {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, AcdcHyper>) {
          if (spec.n_out != spec.n_in)
            throw SpecError("ACDC requires a square operator");
          if (n % 2 != 0)
            throw SpecError("ACDC requires an even width, got " + std::to_string(n));
          if (h.layers < 1)
            throw SpecError("ACDC requires at least one layer");
        } else if constexpr (std::is_same_v<H, TtHyper>) {
          if (h.tt_rank < 1)
            throw SpecError("TT rank must be >= 1");
          if (spec.n_out * spec.n_in < 8)
            throw SpecError("TensorTrain requires n_out * n_in >= 8");
        } else if constexpr (std::is_same_v<H, TuckerHyper>) {
          if (!(h.rank_fraction > 0.0 && h.rank_fraction <= 1.0))
            throw SpecError("Tucker rank_fraction must lie in (0, 1]");
          if (spec.n_out * spec.n_in < 8)
            throw SpecError("Tucker requires n_out * n_in >= 8");
        } else if constexpr (std::is_same_v<H, RfHyper>) {
          if (h.d_bn < 1 || h.d_bn > std::min(spec.n_in, spec.n_out))
            throw SpecError("RF bottleneck must lie in [1, min(d_in, d_out)], got " +
                            std::to_string(h.d_bn));
        } else if constexpr (std::is_same_v<H, HashedHyper>) {
          if (h.n_real < 1 || h.n_real > spec.n_out * spec.n_in)
            throw SpecError("HashedNet n_real must lie in [1, n_out * n_in], got " +
                            std::to_string(h.n_real));
        } else if constexpr (std::is_same_v<H, ShuffleHyper>) {
          if (spec.n_out != spec.n_in)
            throw SpecError("ShuffleLinear requires a square operator");
          if (n % 2 != 0)
            throw SpecError("ShuffleLinear requires an even width, got " + std::to_string(n));
          if (h.groups < 1 || n % h.groups != 0)
            throw SpecError("ShuffleLinear groups must divide the width, got " +
                            std::to_string(h.groups));
        }
      },
      spec.hyper);
}

inline std::size_t param_count(const OperatorSpec &spec) {
  validate(spec);
  return std::visit(
      [&](const auto &h) -> std::size_t {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, DenseHyper>) {
          return spec.n_out * spec.n_in;
        } else if constexpr (std::is_same_v<H, AcdcHyper>) {
          return 2 * h.layers * spec.n_in;
        } else if constexpr (std::is_same_v<H, TtHyper>) {
          const auto d = reshape3(spec.n_out, spec.n_in).dims;
          const std::size_t r = h.tt_rank;
          return d[0] * r + r * d[1] * r + r * d[2];
        } else if constexpr (std::is_same_v<H, TuckerHyper>) {
          const auto d = reshape3(spec.n_out, spec.n_in).dims;
          const auto r = detail::tucker_ranks(d, h.rank_fraction);
          return r[0] * r[1] * r[2] + d[0] * r[0] + d[1] * r[1] + d[2] * r[2];
        } else if constexpr (std::is_same_v<H, RfHyper>) {
          return h.d_bn * spec.n_in + spec.n_out * h.d_bn;
        } else if constexpr (std::is_same_v<H, HashedHyper>) {
          return h.n_real;
        } else {
          const std::size_t block = spec.n_in / h.groups;
          return 2 * h.groups * block * block;
        }
      },
      spec.hyper);
}

/// Mult-adds of one structured matvec; nullopt where no robust figure exists.
inline std::optional<std::int64_t> multadd_count(const OperatorSpec &spec,
                                                 const CostModel &model = {}) {
  validate(spec);
  const auto dense = static_cast<std::int64_t>(spec.n_out * spec.n_in);
  return std::visit(
      [&](const auto &h) -> std::optional<std::int64_t> {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, DenseHyper> || std::is_same_v<H, HashedHyper>) {
          return dense;
        } else if constexpr (std::is_same_v<H, AcdcHyper>) {
          return acdc_multadds(spec.n_in, h.layers, model);
        } else if constexpr (std::is_same_v<H, TtHyper>) {
          if (!model.materialise_tt_tucker)
            return std::nullopt;
          const auto d = reshape3(spec.n_out, spec.n_in).dims;
          const std::size_t r = h.tt_rank;
          // (G1 G2) for all (i1,i2), then contract with G3 for every element.
          const std::size_t rebuild = d[0] * d[1] * r * r + d[0] * d[1] * d[2] * r;
          return dense + static_cast<std::int64_t>(rebuild);
        } else if constexpr (std::is_same_v<H, TuckerHyper>) {
          if (!model.materialise_tt_tucker)
            return std::nullopt;
          const auto d = reshape3(spec.n_out, spec.n_in).dims;
          const auto r = detail::tucker_ranks(d, h.rank_fraction);
          const std::size_t rebuild =
              d[0] * r[0] * r[1] * r[2] + d[0] * d[1] * r[1] * r[2] + d[0] * d[1] * d[2] * r[2];
          return dense + static_cast<std::int64_t>(rebuild);
        } else if constexpr (std::is_same_v<H, RfHyper>) {
          return static_cast<std::int64_t>(h.d_bn * (spec.n_in + spec.n_out));
        } else {
          return static_cast<std::int64_t>(2 * spec.n_in * spec.n_in / h.groups);
        }
      },
      spec.hyper);
}

inline CostReport cost_report(const OperatorSpec &spec, const CostModel &model = {}) {
  CostReport r;
  r.params = static_cast<std::int64_t>(param_count(spec));
  r.multadds = multadd_count(spec, model);
  r.dense_params = static_cast<std::int64_t>(spec.dense_params());
  r.dense_multadds = r.dense_params;
  r.param_ratio = static_cast<double>(r.params) / static_cast<double>(r.dense_params);
  if (r.multadds)
    r.multadd_ratio = static_cast<double>(*r.multadds) / static_cast<double>(r.dense_multadds);
  return r;
}

// JSON: {"kind": string, "n_out": int, "n_in": int, "hyper": object, "seed": int}

inline void to_json(nlohmann::json &j, const OperatorSpec &spec) {
  nlohmann::json hyper = nlohmann::json::object();
  std::visit(
      [&](const auto &h) {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, AcdcHyper>) hyper["layers"] = h.layers;
        else if constexpr (std::is_same_v<H, TtHyper>) hyper["tt_rank"] = h.tt_rank;
        else if constexpr (std::is_same_v<H, TuckerHyper>) hyper["rank_fraction"] = h.rank_fraction;
        else if constexpr (std::is_same_v<H, RfHyper>) hyper["d_bn"] = h.d_bn;
        else if constexpr (std::is_same_v<H, HashedHyper>) hyper["n_real"] = h.n_real;
        else if constexpr (std::is_same_v<H, ShuffleHyper>) hyper["groups"] = h.groups;
      },
      spec.hyper);
  j = nlohmann::json{{"kind", std::string(kind_name(spec.kind()))},
                     {"n_out", spec.n_out},
                     {"n_in", spec.n_in},
                     {"hyper", hyper},
                     {"seed", spec.seed}};
}

inline void from_json(const nlohmann::json &j, OperatorSpec &spec) {
  try {
    spec.n_out = j.at("n_out").get<std::size_t>();
    spec.n_in = j.at("n_in").get<std::size_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    const nlohmann::json hyper = j.value("hyper", nlohmann::json::object());
    switch (parse_kind(j.at("kind").get<std::string>())) {
    case Kind::Dense: spec.hyper = DenseHyper{}; break;
    case Kind::ACDC: spec.hyper = AcdcHyper{hyper.at("layers").get<std::size_t>()}; break;
    case Kind::TensorTrain: spec.hyper = TtHyper{hyper.at("tt_rank").get<std::size_t>()}; break;
    case Kind::Tucker: spec.hyper = TuckerHyper{hyper.at("rank_fraction").get<double>()}; break;
    case Kind::RankFactorised: spec.hyper = RfHyper{hyper.at("d_bn").get<std::size_t>()}; break;
    case Kind::HashedNet: spec.hyper = HashedHyper{hyper.at("n_real").get<std::size_t>()}; break;
    case Kind::ShuffleLinear: spec.hyper = ShuffleHyper{hyper.at("groups").get<std::size_t>()}; break;
    }
  } catch (const nlohmann::json::exception &e) {
    throw SpecError(std::string("malformed operator spec: ") + e.what());
  }
}

} // namespace sell
