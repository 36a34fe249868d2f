#pragma once

// Construction, forward application, materialisation and reverse-mode
// gradients for the dense baseline and the six structured substitutes.
//
// Flat parameter layouts (all row-major):
//   Dense          W  (n_out x n_in)
//   ACDC           A_0..A_{L-1}, D_0..D_{L-1}  (n each)
//   TensorTrain    G_0 (1,d0,r), G_1 (r,d1,r), G_2 (r,d2,1)
//   Tucker         core (R0,R1,R2), U_0 (d0,R0), U_1 (d1,R1), U_2 (d2,R2)
//   RankFactorised W1 (d_bn x n_in), W2 (n_out x d_bn)
//   HashedNet      w  (n_real), index table in ParamStore::fixed
//   ShuffleLinear  B1, B2: g diagonal blocks of (n/g x n/g) each

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sell/error.hpp"
#include "sell/kernels.hpp"
#include "sell/linop.hpp"

namespace sell {

struct Built {
  OperatorSpec spec;
  ParamStore params;
  std::vector<std::string> warnings;
};

struct GradResult {
  Vector param_grads;
  Vector input_grad;
};

namespace detail {

inline void fill_uniform(std::span<double> out, double bound, std::mt19937_64 &gen) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto &v : out)
    v = dist(gen);
}

inline void fill_normal(std::span<double> out, double mean, double stddev, std::mt19937_64 &gen) {
  std::normal_distribution<double> dist(mean, stddev);
  for (auto &v : out)
    v = dist(gen);
}

inline Vector matvec(const DenseTensor &m, std::span<const double> x) {
  Vector y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double *row = m.values.data() + i * m.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j)
      acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

inline Vector matvec_transposed(const DenseTensor &m, std::span<const double> u) {
  Vector y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double *row = m.values.data() + i * m.cols();
    for (std::size_t j = 0; j < m.cols(); ++j)
      y[j] += row[j] * u[i];
  }
  return y;
}

inline DenseTensor outer(std::span<const double> u, std::span<const double> x) {
  DenseTensor g = DenseTensor::matrix(u.size(), x.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      g(i, j) = u[i] * x[j];
  return g;
}

// y = M x for row-major M given as a span (rows x cols)
inline void gemv(std::span<const double> m, std::size_t rows, std::size_t cols,
                 std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      acc += m[i * cols + j] * x[j];
    y[i] = acc;
  }
}

// y = M^T u
inline void gemv_t(std::span<const double> m, std::size_t rows, std::size_t cols,
                   std::span<const double> u, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      y[j] += m[i * cols + j] * u[i];
}

inline void check_input(const OperatorSpec &spec, std::span<const double> x) {
  if (x.size() != spec.n_in)
    throw ShapeError("input has length " + std::to_string(x.size()) + ", operator expects " +
                     std::to_string(spec.n_in));
}

inline void check_upstream(const OperatorSpec &spec, std::span<const double> u) {
  if (u.size() != spec.n_out)
    throw ShapeError("upstream gradient has length " + std::to_string(u.size()) +
                     ", operator output is " + std::to_string(spec.n_out));
}

// ---------------------------------------------------------------- ACDC

struct AcdcTape {
  std::vector<Vector> before_diag; // C^-1 u_l
  std::vector<Vector> after_dct;   // C (D_l C^-1 u_l)
};

inline Vector acdc_forward(const OperatorSpec &spec, const ParamStore &p, std::span<const double> x,
                           AcdcTape *tape) {
  const auto layers = std::get<AcdcHyper>(spec.hyper).layers;
  Vector u = riffle(x);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto a = p.segment("A_" + std::to_string(l));
    const auto d = p.segment("D_" + std::to_string(l));
    Vector v = idct2(u);
    if (tape)
      tape->before_diag.push_back(v);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] *= d[i];
    v = dct2(v);
    if (tape)
      tape->after_dct.push_back(v);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] *= a[i];
    u = std::move(v);
  }
  return u;
}

inline GradResult acdc_grad(const OperatorSpec &spec, const ParamStore &p, std::span<const double> x,
                            std::span<const double> upstream) {
  const auto layers = std::get<AcdcHyper>(spec.hyper).layers;
  AcdcTape tape;
  acdc_forward(spec, p, x, &tape);
  GradResult out{Vector(p.flat.size(), 0.0), {}};
  Vector g(upstream.begin(), upstream.end());
  for (std::size_t l = layers; l-- > 0;) {
    const auto name_a = "A_" + std::to_string(l);
    const auto name_d = "D_" + std::to_string(l);
    const auto a = p.segment(name_a);
    const auto d = p.segment(name_d);
    double *ga = out.param_grads.data() + (a.data() - p.flat.data());
    double *gd = out.param_grads.data() + (d.data() - p.flat.data());
    const auto &c = tape.after_dct[l];
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * c[i];
      g[i] *= a[i];
    }
    Vector gb = idct2(g); // C^T = C^-1
    const auto &pre = tape.before_diag[l];
    for (std::size_t i = 0; i < gb.size(); ++i) {
      gd[i] = gb[i] * pre[i];
      gb[i] *= d[i];
    }
    g = dct2(gb); // (C^-1)^T = C
  }
  out.input_grad = riffle_inverse(g);
  return out;
}

/// Orthonormal DCT-II matrix: C x == dct2(x). Cached per thread.
inline const Vector &dct_matrix(std::size_t n) {
  thread_local std::size_t cached_n = 0;
  thread_local Vector c;
  if (cached_n == n)
    return c;
  c.assign(n * n, 0.0);
  Vector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const Vector col = dct2(e);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      c[i * n + j] = col[i];
  }
  cached_n = n;
  return c;
}

// out = op(a) * b for square n x n row-major matrices; op is identity or transpose
inline void square_matmul(const Vector &a, bool transpose_a, const Vector &b, Vector &out,
                          std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  const double *__restrict pa = a.data();
  const double *__restrict pb = b.data();
  double *__restrict po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double *__restrict row = po + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = transpose_a ? pa[k * n + i] : pa[i * n + k];
      const double *__restrict brow = pb + k * n;
      for (std::size_t j = 0; j < n; ++j)
        row[j] += aik * brow[j];
    }
  }
}

inline void scale_rows(Vector &m, std::span<const double> diag, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m[i * n + j] *= diag[i];
}

// Whole-matrix ACDC: the same layer recursion as acdc_forward with every
// basis vector pushed through at once.
inline DenseTensor acdc_materialize(const OperatorSpec &spec, const ParamStore &p,
                                    std::vector<Vector> *before_diag = nullptr,
                                    std::vector<Vector> *after_dct = nullptr) {
  const std::size_t n = spec.n_in;
  const auto layers = std::get<AcdcHyper>(spec.hyper).layers;
  const Vector &c = dct_matrix(n);
  Vector u(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    // column j of the riffle permutation
    const std::size_t i = j < n / 2 ? 2 * j : 2 * (j - n / 2) + 1;
    u[i * n + j] = 1.0;
  }
  Vector v(n * n);
  for (std::size_t l = 0; l < layers; ++l) {
    square_matmul(c, true, u, v, n);
    if (before_diag)
      before_diag->push_back(v);
    scale_rows(v, p.segment("D_" + std::to_string(l)), n);
    square_matmul(c, false, v, u, n);
    if (after_dct)
      after_dct->push_back(u);
    scale_rows(u, p.segment("A_" + std::to_string(l)), n);
  }
  DenseTensor m = DenseTensor::matrix(n, n);
  m.values = std::move(u);
  return m;
}

inline Vector acdc_materialize_vjp(const OperatorSpec &spec, const ParamStore &p,
                                   const DenseTensor &grad_m) {
  const std::size_t n = spec.n_in;
  const auto layers = std::get<AcdcHyper>(spec.hyper).layers;
  std::vector<Vector> before_diag, after_dct;
  acdc_materialize(spec, p, &before_diag, &after_dct);
  const Vector &c = dct_matrix(n);
  Vector out(p.flat.size(), 0.0);
  Vector g = grad_m.values;
  Vector h(n * n);
  for (std::size_t l = layers; l-- > 0;) {
    const auto a = p.segment("A_" + std::to_string(l));
    const auto d = p.segment("D_" + std::to_string(l));
    double *ga = out.data() + (a.data() - p.flat.data());
    double *gd = out.data() + (d.data() - p.flat.data());
    const Vector &post = after_dct[l];
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        acc += g[i * n + j] * post[i * n + j];
      ga[i] = acc;
    }
    scale_rows(g, a, n);
    square_matmul(c, true, g, h, n);
    const Vector &pre = before_diag[l];
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        acc += h[i * n + j] * pre[i * n + j];
      gd[i] = acc;
    }
    scale_rows(h, d, n);
    square_matmul(c, false, h, g, n);
  }
  return out;
}

// ---------------------------------------------------------------- TT

inline DenseTensor tt_materialize(const OperatorSpec &spec, const ParamStore &p) {
  const auto dims = reshape3(spec.n_out, spec.n_in).dims;
  const std::size_t r = std::get<TtHyper>(spec.hyper).tt_rank;
  const auto g0 = p.segment("G_0"); // [i1][b]
  const auto g1 = p.segment("G_1"); // [a][i2][b]
  const auto g2 = p.segment("G_2"); // [a][i3]
  const auto [d0, d1, d2] = dims;

  DenseTensor m = DenseTensor::matrix(spec.n_out, spec.n_in);
  Vector left(r);
  for (std::size_t i1 = 0; i1 < d0; ++i1) {
    for (std::size_t i2 = 0; i2 < d1; ++i2) {
      // left = G_0(i1) G_1(i2), a 1 x r row
      for (std::size_t b = 0; b < r; ++b) {
        double acc = 0.0;
        for (std::size_t a = 0; a < r; ++a)
          acc += g0[i1 * r + a] * g1[(a * d1 + i2) * r + b];
        left[b] = acc;
      }
      double *dst = m.values.data() + (i1 * d1 + i2) * d2;
      for (std::size_t i3 = 0; i3 < d2; ++i3) {
        double acc = 0.0;
        for (std::size_t b = 0; b < r; ++b)
          acc += left[b] * g2[b * d2 + i3];
        dst[i3] = acc;
      }
    }
  }
  return m;
}

inline Vector tt_materialize_vjp(const OperatorSpec &spec, const ParamStore &p,
                                 const DenseTensor &grad_m) {
  const auto [d0, d1, d2] = reshape3(spec.n_out, spec.n_in).dims;
  const std::size_t r = std::get<TtHyper>(spec.hyper).tt_rank;
  const auto g0 = p.segment("G_0");
  const auto g1 = p.segment("G_1");
  const auto g2 = p.segment("G_2");
  const double *da = grad_m.values.data(); // viewed as (d0, d1, d2)

  Vector out(p.flat.size(), 0.0);
  double *dg0 = out.data();
  double *dg1 = dg0 + g0.size();
  double *dg2 = dg1 + g1.size();

  // right[i2][i3][a] = (G_1(i2) G_2(i3))_a
  Vector right(d1 * d2 * r, 0.0);
  for (std::size_t i2 = 0; i2 < d1; ++i2)
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t b = 0; b < r; ++b) {
        const double w = g1[(a * d1 + i2) * r + b];
        for (std::size_t i3 = 0; i3 < d2; ++i3)
          right[(i2 * d2 + i3) * r + a] += w * g2[b * d2 + i3];
      }
  // left[i1][i2][b] = (G_0(i1) G_1(i2))_b
  Vector left(d0 * d1 * r, 0.0);
  for (std::size_t i1 = 0; i1 < d0; ++i1)
    for (std::size_t a = 0; a < r; ++a) {
      const double w = g0[i1 * r + a];
      for (std::size_t i2 = 0; i2 < d1; ++i2)
        for (std::size_t b = 0; b < r; ++b)
          left[(i1 * d1 + i2) * r + b] += w * g1[(a * d1 + i2) * r + b];
    }

  for (std::size_t i1 = 0; i1 < d0; ++i1)
    for (std::size_t i2 = 0; i2 < d1; ++i2)
      for (std::size_t i3 = 0; i3 < d2; ++i3) {
        const double e = da[(i1 * d1 + i2) * d2 + i3];
        if (e == 0.0)
          continue;
        for (std::size_t a = 0; a < r; ++a)
          dg0[i1 * r + a] += e * right[(i2 * d2 + i3) * r + a];
        for (std::size_t b = 0; b < r; ++b)
          dg2[b * d2 + i3] += e * left[(i1 * d1 + i2) * r + b];
      }

  // dG_1[a][i2][b] = sum_{i1,i3} dA[i1,i2,i3] G_0(i1)_a G_2(i3)_b
  Vector tmp(d0 * r); // sum_i3 dA[i1,i2,i3] G_2[b][i3]
  for (std::size_t i2 = 0; i2 < d1; ++i2) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::size_t i1 = 0; i1 < d0; ++i1)
      for (std::size_t i3 = 0; i3 < d2; ++i3) {
        const double e = da[(i1 * d1 + i2) * d2 + i3];
        for (std::size_t b = 0; b < r; ++b)
          tmp[i1 * r + b] += e * g2[b * d2 + i3];
      }
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t i1 = 0; i1 < d0; ++i1) {
        const double w = g0[i1 * r + a];
        for (std::size_t b = 0; b < r; ++b)
          dg1[(a * d1 + i2) * r + b] += w * tmp[i1 * r + b];
      }
  }
  return out;
}

// ---------------------------------------------------------------- Tucker

inline DenseTensor segment_matrix(const ParamStore &p, const std::string &name, std::size_t rows,
                                  std::size_t cols) {
  const auto s = p.segment(name);
  return DenseTensor({rows, cols}, Vector(s.begin(), s.end()));
}

inline DenseTensor transpose(const DenseTensor &m) {
  DenseTensor t = DenseTensor::matrix(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      t(j, i) = m(i, j);
  return t;
}

struct TuckerView {
  std::array<std::size_t, 3> dims;
  std::array<std::size_t, 3> ranks;
  DenseTensor core;
  std::array<DenseTensor, 3> factors; // (I_k x R_k)
};

inline TuckerView tucker_view(const OperatorSpec &spec, const ParamStore &p) {
  TuckerView v;
  v.dims = reshape3(spec.n_out, spec.n_in).dims;
  v.ranks = tucker_ranks(v.dims, std::get<TuckerHyper>(spec.hyper).rank_fraction);
  const auto core = p.segment("core");
  v.core = DenseTensor({v.ranks[0], v.ranks[1], v.ranks[2]}, Vector(core.begin(), core.end()));
  for (std::size_t k = 0; k < 3; ++k)
    v.factors[k] = segment_matrix(p, "U_" + std::to_string(k), v.dims[k], v.ranks[k]);
  return v;
}

inline DenseTensor tucker_materialize(const OperatorSpec &spec, const ParamStore &p) {
  const auto v = tucker_view(spec, p);
  DenseTensor t = v.core;
  for (std::size_t k = 0; k < 3; ++k)
    t = kmode_product(t, v.factors[k], k);
  return DenseTensor({spec.n_out, spec.n_in}, std::move(t.values));
}

// out(i, j) = sum over all indices except mode k of x[.., i, ..] * y[.., j, ..]
inline DenseTensor contract_all_but(const DenseTensor &x, const DenseTensor &y, std::size_t k) {
  const std::size_t outer = DenseTensor::element_count({x.shape.begin(), x.shape.begin() + k});
  const std::size_t inner = DenseTensor::element_count({x.shape.begin() + k + 1, x.shape.end()});
  const std::size_t nx = x.shape[k];
  const std::size_t ny = y.shape[k];
  DenseTensor out = DenseTensor::matrix(nx, ny);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < nx; ++i) {
      const double *xs = x.values.data() + (o * nx + i) * inner;
      for (std::size_t j = 0; j < ny; ++j) {
        const double *ys = y.values.data() + (o * ny + j) * inner;
        double acc = 0.0;
        for (std::size_t q = 0; q < inner; ++q)
          acc += xs[q] * ys[q];
        out(i, j) += acc;
      }
    }
  return out;
}

inline Vector tucker_materialize_vjp(const OperatorSpec &spec, const ParamStore &p,
                                     const DenseTensor &grad_m) {
  const auto v = tucker_view(spec, p);
  const DenseTensor da({v.dims[0], v.dims[1], v.dims[2]}, grad_m.values);
  Vector out(p.flat.size(), 0.0);

  // core gradient: dA x_0 U0^T x_1 U1^T x_2 U2^T
  DenseTensor dcore = da;
  for (std::size_t k = 0; k < 3; ++k)
    dcore = kmode_product(dcore, transpose(v.factors[k]), k);
  const auto core_seg = p.segment("core");
  std::copy(dcore.values.begin(), dcore.values.end(),
            out.begin() + (core_seg.data() - p.flat.data()));

  // factor k: unfold_k(dA) * unfold_k(core x_{m != k} U_m)^T
  for (std::size_t k = 0; k < 3; ++k) {
    DenseTensor partial = v.core;
    for (std::size_t m = 0; m < 3; ++m)
      if (m != k)
        partial = kmode_product(partial, v.factors[m], m);
    const DenseTensor du = contract_all_but(da, partial, k);
    const auto seg = p.segment("U_" + std::to_string(k));
    std::copy(du.values.begin(), du.values.end(), out.begin() + (seg.data() - p.flat.data()));
  }
  return out;
}

// ---------------------------------------------------------------- RF

inline GradResult rf_grad(const OperatorSpec &spec, const ParamStore &p, std::span<const double> x,
                          std::span<const double> u) {
  const std::size_t k = std::get<RfHyper>(spec.hyper).d_bn;
  const auto w1 = p.segment("W1");
  const auto w2 = p.segment("W2");
  Vector h(k);
  gemv(w1, k, spec.n_in, x, h);
  GradResult out{Vector(p.flat.size(), 0.0), Vector(spec.n_in)};
  double *gw1 = out.param_grads.data();
  double *gw2 = gw1 + w1.size();
  for (std::size_t i = 0; i < spec.n_out; ++i)
    for (std::size_t b = 0; b < k; ++b)
      gw2[i * k + b] = u[i] * h[b];
  Vector gh(k);
  gemv_t(w2, spec.n_out, k, u, gh);
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t j = 0; j < spec.n_in; ++j)
      gw1[b * spec.n_in + j] = gh[b] * x[j];
  gemv_t(w1, k, spec.n_in, gh, out.input_grad);
  return out;
}

// ---------------------------------------------------------------- Shuffle

inline Vector block_apply(std::span<const double> blocks, std::size_t groups, std::size_t bs,
                          std::span<const double> x) {
  Vector y(groups * bs, 0.0);
  for (std::size_t q = 0; q < groups; ++q)
    gemv(blocks.subspan(q * bs * bs, bs * bs), bs, bs, x.subspan(q * bs, bs),
         std::span<double>(y).subspan(q * bs, bs));
  return y;
}

inline Vector block_apply_t(std::span<const double> blocks, std::size_t groups, std::size_t bs,
                            std::span<const double> u) {
  Vector y(groups * bs, 0.0);
  for (std::size_t q = 0; q < groups; ++q)
    gemv_t(blocks.subspan(q * bs * bs, bs * bs), bs, bs, u.subspan(q * bs, bs),
           std::span<double>(y).subspan(q * bs, bs));
  return y;
}

inline void block_outer(std::span<double> out, std::size_t groups, std::size_t bs,
                        std::span<const double> u, std::span<const double> x) {
  for (std::size_t q = 0; q < groups; ++q)
    for (std::size_t i = 0; i < bs; ++i)
      for (std::size_t j = 0; j < bs; ++j)
        out[(q * bs + i) * bs + j] = u[q * bs + i] * x[q * bs + j];
}

inline GradResult shuffle_grad(const OperatorSpec &spec, const ParamStore &p,
                               std::span<const double> x, std::span<const double> u) {
  const std::size_t g = std::get<ShuffleHyper>(spec.hyper).groups;
  const std::size_t bs = spec.n_in / g;
  const auto b1 = p.segment("B1");
  const auto b2 = p.segment("B2");
  const Vector shuffled = riffle(block_apply(b1, g, bs, x));
  GradResult out{Vector(p.flat.size(), 0.0), {}};
  std::span<double> gb1(out.param_grads.data(), b1.size());
  std::span<double> gb2(out.param_grads.data() + b1.size(), b2.size());
  block_outer(gb2, g, bs, u, shuffled);
  const Vector gz = riffle_inverse(block_apply_t(b2, g, bs, u));
  block_outer(gb1, g, bs, gz, x);
  out.input_grad = block_apply_t(b1, g, bs, gz);
  return out;
}

// ---------------------------------------------------------------- HashedNet

inline DenseTensor hashed_materialize(const OperatorSpec &spec, const ParamStore &p) {
  const auto w = p.segment("w");
  const auto &idx = p.fixed->hash_index;
  DenseTensor m = DenseTensor::matrix(spec.n_out, spec.n_in);
  for (std::size_t e = 0; e < idx.size(); ++e)
    m.values[e] = w[idx[e]];
  return m;
}

} // namespace detail

/// Throws SpecError unless `params` has the layout `spec` implies.
inline void check_consistent(const OperatorSpec &spec, const ParamStore &params) {
  const std::size_t expected = param_count(spec);
  if (params.flat.size() != expected)
    throw SpecError("parameter vector has " + std::to_string(params.flat.size()) +
                    " entries, spec requires " + std::to_string(expected));
  if (!params.partition_is_exact())
    throw SpecError("parameter segments do not partition the flat vector");
  if (spec.kind() == Kind::HashedNet) {
    const auto &idx = params.fixed->hash_index;
    const auto n_real = std::get<HashedHyper>(spec.hyper).n_real;
    if (idx.size() != spec.n_out * spec.n_in)
      throw SpecError("hash index table has wrong size");
    for (auto v : idx)
      if (v >= n_real)
        throw SpecError("hash index out of range");
  }
}

// ---------------------------------------------------------------- builders

/// Build parameters for `spec`, deterministically from spec.seed.
inline Built build(const OperatorSpec &spec) {
  validate(spec);
  Built out{spec, {}, {}};
  ParamStore &p = out.params;
  std::mt19937_64 gen(spec.seed);
  const std::size_t n_out = spec.n_out;
  const std::size_t n_in = spec.n_in;

  std::visit(
      [&](const auto &h) {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, DenseHyper>) {
          p.add_segment("W", n_out * n_in);
          detail::fill_uniform(p.flat, 1.0 / std::sqrt(double(n_in)), gen);
        } else if constexpr (std::is_same_v<H, AcdcHyper>) {
          for (std::size_t l = 0; l < h.layers; ++l)
            p.add_segment("A_" + std::to_string(l), n_in);
          for (std::size_t l = 0; l < h.layers; ++l)
            p.add_segment("D_" + std::to_string(l), n_in);
          detail::fill_normal(p.flat, 1.0, 1e-2, gen);
        } else if constexpr (std::is_same_v<H, TtHyper>) {
          const auto shape = reshape3(n_out, n_in);
          if (shape.fallback)
            out.warnings.push_back("reshape3 found no 3-factor split; using (p,1,1)");
          const auto [d0, d1, d2] = shape.dims;
          const std::size_t r = h.tt_rank;
          p.add_segment("G_0", d0 * r);
          p.add_segment("G_1", r * d1 * r);
          p.add_segment("G_2", r * d2);
          // entry = sum of r^2 triple products, so r^2 sigma^6 = 2 / (n_in + n_out)
          const double target = 2.0 / double(n_in + n_out);
          const double var = std::cbrt(target / double(r * r));
          detail::fill_normal(p.flat, 0.0, std::sqrt(var), gen);
          if (p.flat.size() > n_out * n_in)
            out.warnings.push_back("TT rank " + std::to_string(r) +
                                   " uses more parameters than the dense matrix");
        } else if constexpr (std::is_same_v<H, TuckerHyper>) {
          const auto shape = reshape3(n_out, n_in);
          if (shape.fallback)
            out.warnings.push_back("reshape3 found no 3-factor split; using (p,1,1)");
          const auto d = shape.dims;
          const auto r = detail::tucker_ranks(d, h.rank_fraction);
          p.add_segment("core", r[0] * r[1] * r[2]);
          for (std::size_t k = 0; k < 3; ++k)
            p.add_segment("U_" + std::to_string(k), d[k] * r[k]);
          // entry = sum of R0 R1 R2 four-way products
          const double target = 2.0 / double(n_in + n_out);
          const double var = std::pow(target / double(r[0] * r[1] * r[2]), 0.25);
          detail::fill_normal(p.flat, 0.0, std::sqrt(var), gen);
        } else if constexpr (std::is_same_v<H, RfHyper>) {
          p.add_segment("W1", h.d_bn * n_in);
          p.add_segment("W2", n_out * h.d_bn);
          detail::fill_uniform(p.segment("W1"), 1.0 / std::sqrt(double(n_in)), gen);
          detail::fill_uniform(p.segment("W2"), 1.0 / std::sqrt(double(h.d_bn)), gen);
        } else if constexpr (std::is_same_v<H, HashedHyper>) {
          auto fixed = std::make_shared<FixedData>();
          fixed->hash_index.resize(n_out * n_in);
          std::uniform_int_distribution<std::uint32_t> pick(
              0, static_cast<std::uint32_t>(h.n_real - 1));
          for (auto &v : fixed->hash_index)
            v = pick(gen);
          p.fixed = std::move(fixed);
          p.add_segment("w", h.n_real);
          detail::fill_uniform(p.flat, 1.0 / std::sqrt(double(n_in)), gen);
        } else {
          const std::size_t bs = n_in / h.groups;
          p.add_segment("B1", h.groups * bs * bs);
          p.add_segment("B2", h.groups * bs * bs);
          detail::fill_uniform(p.flat, 1.0 / std::sqrt(double(bs)), gen);
        }
      },
      spec.hyper);
  return out;
}

inline Built build_dense(std::size_t n_out, std::size_t n_in, std::uint64_t seed) {
  return build({n_out, n_in, DenseHyper{}, seed});
}

inline Built build_acdc(std::size_t n, std::size_t layers, std::uint64_t seed) {
  return build({n, n, AcdcHyper{layers}, seed});
}

inline Built build_tt(std::size_t n_out, std::size_t n_in, std::size_t tt_rank, std::uint64_t seed) {
  return build({n_out, n_in, TtHyper{tt_rank}, seed});
}

inline Built build_tucker(std::size_t n_out, std::size_t n_in, double rank_fraction,
                          std::uint64_t seed) {
  return build({n_out, n_in, TuckerHyper{rank_fraction}, seed});
}

/// Note the argument order: input width first.
inline Built build_rf(std::size_t d_in, std::size_t d_out, std::size_t d_bn, std::uint64_t seed) {
  return build({d_out, d_in, RfHyper{d_bn}, seed});
}

inline Built build_hashed(std::size_t n_out, std::size_t n_in, std::size_t n_real,
                          std::uint64_t seed) {
  return build({n_out, n_in, HashedHyper{n_real}, seed});
}

/// HashedNet with a caller-supplied index table instead of a sampled one.
inline Built build_hashed_with_table(std::size_t n_out, std::size_t n_in, std::size_t n_real,
                                     std::vector<std::uint32_t> table, std::uint64_t seed) {
  Built b = build_hashed(n_out, n_in, n_real, seed);
  auto fixed = std::make_shared<FixedData>();
  fixed->hash_index = std::move(table);
  b.params.fixed = std::move(fixed);
  check_consistent(b.spec, b.params);
  return b;
}

inline Built build_shuffle_linear(std::size_t n, std::size_t groups, std::uint64_t seed) {
  return build({n, n, ShuffleHyper{groups}, seed});
}

// ---------------------------------------------------------------- dispatch

/// Dense n_out x n_in matrix the operator represents.
inline DenseTensor materialize(const OperatorSpec &spec, const ParamStore &params);

/// y = W x for the represented W.
inline Vector apply(const OperatorSpec &spec, const ParamStore &params, std::span<const double> x) {
  check_consistent(spec, params);
  detail::check_input(spec, x);
  switch (spec.kind()) {
  case Kind::Dense: {
    Vector y(spec.n_out);
    detail::gemv(params.segment("W"), spec.n_out, spec.n_in, x, y);
    return y;
  }
  case Kind::ACDC:
    return detail::acdc_forward(spec, params, x, nullptr);
  case Kind::TensorTrain:
  case Kind::Tucker:
    return detail::matvec(materialize(spec, params), x);
  case Kind::RankFactorised: {
    const std::size_t k = std::get<RfHyper>(spec.hyper).d_bn;
    Vector h(k), y(spec.n_out);
    detail::gemv(params.segment("W1"), k, spec.n_in, x, h);
    detail::gemv(params.segment("W2"), spec.n_out, k, h, y);
    return y;
  }
  case Kind::HashedNet: {
    const auto w = params.segment("w");
    const auto &idx = params.fixed->hash_index;
    Vector y(spec.n_out, 0.0);
    for (std::size_t i = 0; i < spec.n_out; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < spec.n_in; ++j)
        acc += w[idx[i * spec.n_in + j]] * x[j];
      y[i] = acc;
    }
    return y;
  }
  case Kind::ShuffleLinear: {
    const std::size_t g = std::get<ShuffleHyper>(spec.hyper).groups;
    const std::size_t bs = spec.n_in / g;
    const Vector z = riffle(detail::block_apply(params.segment("B1"), g, bs, x));
    return detail::block_apply(params.segment("B2"), g, bs, z);
  }
  }
  throw SpecError("unknown operator kind");
}

inline DenseTensor materialize(const OperatorSpec &spec, const ParamStore &params) {
  check_consistent(spec, params);
  switch (spec.kind()) {
  case Kind::Dense:
    return detail::segment_matrix(params, "W", spec.n_out, spec.n_in);
  case Kind::TensorTrain:
    return detail::tt_materialize(spec, params);
  case Kind::Tucker:
    return detail::tucker_materialize(spec, params);
  case Kind::HashedNet:
    return detail::hashed_materialize(spec, params);
  case Kind::RankFactorised: {
    const std::size_t k = std::get<RfHyper>(spec.hyper).d_bn;
    const auto w1 = params.segment("W1");
    const auto w2 = params.segment("W2");
    DenseTensor m = DenseTensor::matrix(spec.n_out, spec.n_in);
    for (std::size_t i = 0; i < spec.n_out; ++i)
      for (std::size_t b = 0; b < k; ++b) {
        const double w = w2[i * k + b];
        for (std::size_t j = 0; j < spec.n_in; ++j)
          m(i, j) += w * w1[b * spec.n_in + j];
      }
    return m;
  }
  case Kind::ACDC:
    return detail::acdc_materialize(spec, params);
  case Kind::ShuffleLinear: {
    // column j = apply(e_j)
    DenseTensor m = DenseTensor::matrix(spec.n_out, spec.n_in);
    Vector e(spec.n_in, 0.0);
    for (std::size_t j = 0; j < spec.n_in; ++j) {
      e[j] = 1.0;
      const Vector col = apply(spec, params, e);
      e[j] = 0.0;
      for (std::size_t i = 0; i < spec.n_out; ++i)
        m(i, j) = col[i];
    }
    return m;
  }
  }
  throw SpecError("unknown operator kind");
}

inline Vector materialize_vjp(const OperatorSpec &spec, const ParamStore &params,
                              const DenseTensor &grad_m);

/// Reverse-mode derivative of <upstream, apply(x)> w.r.t. parameters and input.
inline GradResult grad(const OperatorSpec &spec, const ParamStore &params,
                       std::span<const double> x, std::span<const double> upstream) {
  check_consistent(spec, params);
  detail::check_input(spec, x);
  detail::check_upstream(spec, upstream);
  switch (spec.kind()) {
  case Kind::Dense: {
    const DenseTensor w = detail::segment_matrix(params, "W", spec.n_out, spec.n_in);
    return {detail::outer(upstream, x).values, detail::matvec_transposed(w, upstream)};
  }
  case Kind::ACDC:
    return detail::acdc_grad(spec, params, x, upstream);
  case Kind::RankFactorised:
    return detail::rf_grad(spec, params, x, upstream);
  case Kind::ShuffleLinear:
    return detail::shuffle_grad(spec, params, x, upstream);
  case Kind::HashedNet: {
    const auto w = params.segment("w");
    const auto &idx = params.fixed->hash_index;
    GradResult out{Vector(params.flat.size(), 0.0), Vector(spec.n_in, 0.0)};
    for (std::size_t i = 0; i < spec.n_out; ++i)
      for (std::size_t j = 0; j < spec.n_in; ++j) {
        const auto k = idx[i * spec.n_in + j];
        out.param_grads[k] += upstream[i] * x[j];
        out.input_grad[j] += w[k] * upstream[i];
      }
    return out;
  }
  case Kind::TensorTrain:
  case Kind::Tucker: {
    const DenseTensor m = materialize(spec, params);
    return {materialize_vjp(spec, params, detail::outer(upstream, x)),
            detail::matvec_transposed(m, upstream)};
  }
  }
  throw SpecError("unknown operator kind");
}

/// Pull a gradient w.r.t. the materialised matrix back onto the parameters.
inline Vector materialize_vjp(const OperatorSpec &spec, const ParamStore &params,
                              const DenseTensor &grad_m) {
  check_consistent(spec, params);
  if (grad_m.rank() != 2 || grad_m.rows() != spec.n_out || grad_m.cols() != spec.n_in)
    throw ShapeError("materialize_vjp: gradient must be n_out x n_in");
  switch (spec.kind()) {
  case Kind::Dense:
    return grad_m.values;
  case Kind::HashedNet: {
    Vector out(params.flat.size(), 0.0);
    const auto &idx = params.fixed->hash_index;
    for (std::size_t e = 0; e < idx.size(); ++e)
      out[idx[e]] += grad_m.values[e];
    return out;
  }
  case Kind::TensorTrain:
    return detail::tt_materialize_vjp(spec, params, grad_m);
  case Kind::Tucker:
    return detail::tucker_materialize_vjp(spec, params, grad_m);
  case Kind::RankFactorised: {
    const std::size_t k = std::get<RfHyper>(spec.hyper).d_bn;
    const auto w1 = params.segment("W1");
    const auto w2 = params.segment("W2");
    Vector out(params.flat.size(), 0.0);
    double *gw1 = out.data();
    double *gw2 = gw1 + w1.size();
    // gW2 = G W1^T, gW1 = W2^T G
    for (std::size_t i = 0; i < spec.n_out; ++i)
      for (std::size_t b = 0; b < k; ++b) {
        double acc = 0.0;
        for (std::size_t j = 0; j < spec.n_in; ++j)
          acc += grad_m(i, j) * w1[b * spec.n_in + j];
        gw2[i * k + b] = acc;
        const double w = w2[i * k + b];
        for (std::size_t j = 0; j < spec.n_in; ++j)
          gw1[b * spec.n_in + j] += w * grad_m(i, j);
      }
    return out;
  }
  case Kind::ACDC:
    return detail::acdc_materialize_vjp(spec, params, grad_m);
  case Kind::ShuffleLinear: {
    // W e_j is column j, so the pull-back is a sum of per-column gradients
    Vector out(params.flat.size(), 0.0);
    Vector e(spec.n_in, 0.0);
    Vector u(spec.n_out);
    for (std::size_t j = 0; j < spec.n_in; ++j) {
      for (std::size_t i = 0; i < spec.n_out; ++i)
        u[i] = grad_m(i, j);
      e[j] = 1.0;
      const auto g = grad(spec, params, e, u);
      e[j] = 0.0;
      for (std::size_t q = 0; q < out.size(); ++q)
        out[q] += g.param_grads[q];
    }
    return out;
  }
  }
  throw SpecError("unknown operator kind");
}

} // namespace sell
