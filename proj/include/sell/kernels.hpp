#pragma once

// Numeric primitives shared by the structured operators: an orthonormal
// DCT-II/DCT-III pair, the riffle shuffle, the k-mode tensor product and a
// near-cubic reshape of a matrix into a 3-way tensor.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sell/error.hpp"

namespace sell {

using Vector = std::vector<double>;

/// Row-major dense tensor of arbitrary rank.
struct DenseTensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  DenseTensor() = default;
  DenseTensor(std::vector<std::size_t> s, std::vector<double> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (element_count(shape) != values.size())
      throw ShapeError("DenseTensor: shape does not match number of values");
  }
  explicit DenseTensor(std::vector<std::size_t> s)
      : shape(std::move(s)), values(element_count(shape), 0.0) {}

  static DenseTensor matrix(std::size_t rows, std::size_t cols) {
    return DenseTensor({rows, cols});
  }

  static std::size_t element_count(const std::vector<std::size_t> &s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  // rank-2 accessors
  double &operator()(std::size_t i, std::size_t j) { return values[i * shape[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }

  bool operator==(const DenseTensor &) const = default;
};

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void require_nonempty(std::span<const double> x, const char *op) {
  if (x.empty())
    throw InvalidInput(std::string(op) + ": input vector must have length >= 1");
}

inline double dct_scale(std::size_t k, std::size_t n) {
  return k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
}

// cos(pi * m / (2n)) with m reduced modulo 4n so large products keep full accuracy.
inline double half_cos(std::size_t m, std::size_t n) {
  m %= 4 * n;
  return std::cos(std::numbers::pi * static_cast<double>(m) / (2.0 * static_cast<double>(n)));
}

// In-place iterative radix-2 FFT; sign = -1 forward, +1 inverse (unscaled).
inline void fft_radix2(std::vector<std::complex<double>> &a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1)
      j ^= bit;
    j ^= bit;
    if (i < j)
      std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k) /
                           static_cast<double>(len);
      const std::complex<double> w = std::polar(1.0, angle);
      for (std::size_t start = 0; start < n; start += len) {
        const auto u = a[start + k];
        const auto v = a[start + k + half] * w;
        a[start + k] = u + v;
        a[start + k + half] = u - v;
      }
    }
  }
}

inline Vector dct2_naive(std::span<const double> x) {
  const std::size_t n = x.size();
  Vector out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += x[i] * half_cos((2 * i + 1) * k, n);
    out[k] = dct_scale(k, n) * acc;
  }
  return out;
}

inline Vector idct2_naive(std::span<const double> y) {
  const std::size_t n = y.size();
  Vector out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      acc += dct_scale(k, n) * y[k] * half_cos((2 * i + 1) * k, n);
    out[i] = acc;
  }
  return out;
}

// Makhoul's even/odd reordering turns the length-n DCT-II into one length-n FFT.
inline Vector dct2_fast(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> v(n);
  for (std::size_t i = 0; i < n / 2; ++i) {
    v[i] = x[2 * i];
    v[n - 1 - i] = x[2 * i + 1];
  }
  fft_radix2(v, -1);
  Vector out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double angle = -std::numbers::pi * static_cast<double>(k) / (2.0 * static_cast<double>(n));
    out[k] = dct_scale(k, n) * (v[k] * std::polar(1.0, angle)).real();
  }
  return out;
}

inline Vector idct2_fast(std::span<const double> y) {
  const std::size_t n = y.size();
  std::vector<std::complex<double>> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double yk = y[k] / dct_scale(k, n);
    const double ynk = k == 0 ? 0.0 : y[n - k] / dct_scale(n - k, n);
    const double angle = std::numbers::pi * static_cast<double>(k) / (2.0 * static_cast<double>(n));
    v[k] = std::complex<double>(yk, -ynk) * std::polar(1.0, angle);
  }
  fft_radix2(v, +1);
  Vector out(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n / 2; ++i) {
    out[2 * i] = v[i].real() * inv_n;
    out[2 * i + 1] = v[n - 1 - i].real() * inv_n;
  }
  return out;
}

} // namespace detail

/// Orthonormal DCT-II. O(N log N) for power-of-two N, O(N^2) otherwise.
inline Vector dct2(std::span<const double> x) {
  detail::require_nonempty(x, "dct2");
  if (x.size() >= 2 && detail::is_power_of_two(x.size()))
    return detail::dct2_fast(x);
  return detail::dct2_naive(x);
}

/// Inverse of dct2 (orthonormal DCT-III, equal to the transpose of dct2).
inline Vector idct2(std::span<const double> y) {
  detail::require_nonempty(y, "idct2");
  if (y.size() >= 2 && detail::is_power_of_two(y.size()))
    return detail::idct2_fast(y);
  return detail::idct2_naive(y);
}

/// Interleave the two halves: out[2i] = x[i], out[2i+1] = x[i + N/2].
inline Vector riffle(std::span<const double> x) {
  if (x.size() % 2 != 0)
    throw InvalidInput("riffle: length must be even, got " + std::to_string(x.size()));
  const std::size_t half = x.size() / 2;
  Vector out(x.size());
  for (std::size_t i = 0; i < half; ++i) {
    out[2 * i] = x[i];
    out[2 * i + 1] = x[i + half];
  }
  return out;
}

inline Vector riffle_inverse(std::span<const double> x) {
  if (x.size() % 2 != 0)
    throw InvalidInput("riffle_inverse: length must be even, got " + std::to_string(x.size()));
  const std::size_t half = x.size() / 2;
  Vector out(x.size());
  for (std::size_t i = 0; i < half; ++i) {
    out[i] = x[2 * i];
    out[i + half] = x[2 * i + 1];
  }
  return out;
}

/// Contract mode `k` of `t` against the columns of the rank-2 `m`:
/// result[..., j, ...] = sum_i m(j, i) * t[..., i, ...].
inline DenseTensor kmode_product(const DenseTensor &t, const DenseTensor &m, std::size_t k) {
  if (m.rank() != 2)
    throw ShapeError("kmode_product: matrix operand must be rank 2");
  if (k >= t.rank())
    throw ShapeError("kmode_product: mode " + std::to_string(k) + " out of range for rank " +
                     std::to_string(t.rank()));
  if (m.cols() != t.shape[k])
    throw ShapeError("kmode_product: matrix has " + std::to_string(m.cols()) +
                     " columns but mode has size " + std::to_string(t.shape[k]));

  const std::size_t outer = DenseTensor::element_count({t.shape.begin(), t.shape.begin() + k});
  const std::size_t inner = DenseTensor::element_count({t.shape.begin() + k + 1, t.shape.end()});
  const std::size_t in_dim = t.shape[k];
  const std::size_t out_dim = m.rows();

  auto shape = t.shape;
  shape[k] = out_dim;
  DenseTensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    const double *src = t.values.data() + o * in_dim * inner;
    double *dst = out.values.data() + o * out_dim * inner;
    for (std::size_t j = 0; j < out_dim; ++j) {
      for (std::size_t i = 0; i < in_dim; ++i) {
        const double w = m(j, i);
        if (w == 0.0)
          continue;
        const double *s = src + i * inner;
        double *d = dst + j * inner;
        for (std::size_t q = 0; q < inner; ++q)
          d[q] += w * s[q];
      }
    }
  }
  return out;
}

struct Reshape3 {
  std::array<std::size_t, 3> dims{};
  /// True when the product has no factorisation into three factors >= 2 and
  /// the degenerate (p, 1, 1) layout was returned instead.
  bool fallback = false;
};

/// Factor n_out * n_in into three dimensions of near-equal size.
///
/// Candidates have every factor >= 2. The winner minimises max/min; ties go to
/// the triple with the most balanced outer pair (smallest |d0 - d2|, which
/// places the largest factor in the middle), then to the lexicographically
/// smallest triple.
inline Reshape3 reshape3(std::size_t n_out, std::size_t n_in) {
  if (n_out == 0 || n_in == 0)
    throw InvalidInput("reshape3: dimensions must be positive");
  const std::size_t p = n_out * n_in;
  if (p < 8)
    throw InvalidInput("reshape3: n_out * n_in must be >= 8, got " + std::to_string(p));

  using wide = unsigned __int128;
  auto better = [](const std::array<std::size_t, 3> &a, const std::array<std::size_t, 3> &b) {
    const auto [amin, amax] = std::minmax({a[0], a[1], a[2]});
    const auto [bmin, bmax] = std::minmax({b[0], b[1], b[2]});
    const wide lhs = static_cast<wide>(amax) * bmin;
    const wide rhs = static_cast<wide>(bmax) * amin;
    if (lhs != rhs)
      return lhs < rhs;
    const auto aspread = a[0] > a[2] ? a[0] - a[2] : a[2] - a[0];
    const auto bspread = b[0] > b[2] ? b[0] - b[2] : b[2] - b[0];
    if (aspread != bspread)
      return aspread < bspread;
    return a < b;
  };

  std::vector<std::size_t> divisors;
  for (std::size_t d = 1; d * d <= p; ++d) {
    if (p % d == 0) {
      divisors.push_back(d);
      if (d * d != p)
        divisors.push_back(p / d);
    }
  }
  std::sort(divisors.begin(), divisors.end());

  Reshape3 best{{p, 1, 1}, true};
  for (const std::size_t d0 : divisors) {
    if (d0 < 2)
      continue;
    const std::size_t rest = p / d0;
    for (const std::size_t d1 : divisors) {
      if (d1 < 2 || rest % d1 != 0 || rest / d1 < 2)
        continue;
      const std::array<std::size_t, 3> cand{d0, d1, rest / d1};
      if (best.fallback || better(cand, best.dims))
        best = {cand, false};
    }
  }
  return best;
}

} // namespace sell
