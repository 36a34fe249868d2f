// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Exit status is nonzero if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "oracles.hpp"

using namespace sell;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string &what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome property_suite() {
  Outcome o;
  for (std::size_t n = 2; n <= 512; n *= 2) {
    oracle::Mat c = oracle::zeros(n, n);
    Vector e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = 1.0;
      const Vector col = dct2(e);
      e[j] = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        c[i][j] = col[i];
    }
    const double err = oracle::max_abs_diff(oracle::mul(c, oracle::transpose(c)), oracle::identity(n));
    o.require(err < 1e-12, "DCT orthonormality n=" + std::to_string(n) + " err " + num(err));
  }

  std::mt19937_64 gen(1);
  for (std::size_t n : {2, 8, 64}) {
    const auto x = oracle::random_vector(n, gen);
    auto y = riffle(x);
    o.require(riffle_inverse(y) == x && riffle(riffle_inverse(x)) == x, "riffle inverse");
    auto xs = x;
    std::sort(y.begin(), y.end());
    std::sort(xs.begin(), xs.end());
    o.require(y == xs, "riffle bijectivity");
  }

  std::uniform_int_distribution<std::size_t> dim(1, 3), rank(1, 4);
  for (int i = 0; i < 200;) {
    std::vector<std::size_t> shape(rank(gen));
    for (auto &s : shape)
      s = dim(gen);
    if (DenseTensor::element_count(shape) > 81)
      continue;
    DenseTensor t(shape, oracle::random_vector(DenseTensor::element_count(shape), gen));
    const std::size_t k = gen() % shape.size();
    const std::size_t j = dim(gen);
    DenseTensor m({j, shape[k]}, oracle::random_vector(j * shape[k], gen));
    o.require(kmode_product(t, m, k).values == oracle::kmode(t, m, k).values, "k-mode brute force");
    ++i;
  }

  for (Kind kind : kAllKinds) {
    double mat_err = 0.0, lin_err = 0.0;
    for (int i = 0; i < 10; ++i) {
      const Built b = build(oracle::random_spec(kind, gen));
      const DenseTensor m = materialize(b.spec, b.params);
      Vector e(b.spec.n_in, 0.0);
      for (std::size_t j = 0; j < b.spec.n_in; ++j) {
        e[j] = 1.0;
        const Vector col = apply(b.spec, b.params, e);
        e[j] = 0.0;
        for (std::size_t r = 0; r < b.spec.n_out; ++r)
          mat_err = std::max(mat_err, std::abs(col[r] - m(r, j)));
      }
      const auto x = oracle::random_vector(b.spec.n_in, gen);
      const auto z = oracle::random_vector(b.spec.n_in, gen);
      Vector mix(x.size());
      for (std::size_t q = 0; q < x.size(); ++q)
        mix[q] = 1.7 * x[q] - 0.3 * z[q];
      const Vector ax = apply(b.spec, b.params, x), az = apply(b.spec, b.params, z);
      Vector rhs(ax.size());
      for (std::size_t q = 0; q < ax.size(); ++q)
        rhs[q] = 1.7 * ax[q] - 0.3 * az[q];
      lin_err = std::max(lin_err, oracle::relative_error(apply(b.spec, b.params, mix), rhs));
    }
    const std::string name(kind_name(kind));
    o.require(mat_err < 1e-10, name + " materialize/apply " + num(mat_err));
    o.require(lin_err < 1e-9, name + " linearity " + num(lin_err));
  }
  return o;
}

Outcome gradient_checks() {
  Outcome o;
  double worst = 0.0;
  for (Kind kind : kAllKinds) {
    std::mt19937_64 gen(900 + int(kind));
    for (int trial = 0; trial < 3; ++trial) {
      const Built b = build(oracle::random_spec(kind, gen));
      const auto x = oracle::random_vector(b.spec.n_in, gen);
      const auto u = oracle::random_vector(b.spec.n_out, gen);
      const auto g = grad(b.spec, b.params, x, u);
      auto f = [&](const std::vector<double> &p) {
        ParamStore q = b.params;
        q.flat = p;
        const auto y = apply(b.spec, q, x);
        return std::inner_product(y.begin(), y.end(), u.begin(), 0.0);
      };
      const double err =
          oracle::relative_error(g.param_grads, oracle::numeric_gradient(f, b.params.flat, 1e-5));
      worst = std::max(worst, err);
      o.require(err < 1e-5, std::string(kind_name(kind)) + " rel err " + num(err));
    }
  }
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("worst rel err ") + num(worst);
  return o;
}

Outcome crs_rule() {
  Outcome o;
  o.require(crs_decay(5e-4, 4096, 4096) == 5e-4, "identity at M=N");
  o.require(crs_decay(5e-4, 410, 4100) == 5e-5, "10% compression gives 5e-5");
  o.require(crs_decay(1e-4, 2556, 10000) == 2.556e-5, "1e-4 at 0.2556 gives 2.556e-5");
  std::mt19937_64 gen(2);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t m = 1 + gen() % 100000, n = m + gen() % 100000;
    const double d = 1e-3 * double(gen() % 1000) / 1000.0;
    const long double exact = static_cast<long double>(d) * m / n;
    const double got = crs_decay(d, m, n);
    o.require(std::abs(got - exact) <= 2.0L * std::numeric_limits<double>::epsilon() * exact,
              "d_c = M d / N off by more than 2 ulp");
    o.require(crs_decay(d, n, n) == d, "identity");
    if (!o.pass)
      break;
  }
  return o;
}

Outcome hashed_exclusion() {
  Outcome o;
  for (std::uint64_t n_v : {10000ull, 100000ull, 1000000ull})
    for (int i = 1; i <= 9; ++i) {
      const auto n_r = static_cast<std::uint64_t>(std::llround(0.1 * i * double(n_v)));
      const double ratio = exclusion_exact(n_r, n_v) / double(n_r);
      const double limit = exclusion_limit(double(n_r) / double(n_v));
      o.require(std::abs(ratio - limit) / limit < 0.01, "limit mismatch n_v=" + std::to_string(n_v));
    }
  const auto mc = exclusion_montecarlo(5000, 10000, 1000, 4);
  const double exact = exclusion_exact(5000, 10000) / 5000.0;
  o.require(std::abs(mc.mean - exact) <= 3.0 * mc.stderr_,
            "Monte-Carlo " + num(mc.mean) + " vs exact " + num(exact));
  for (double c : {0.45, 0.5, 0.55, 0.6, 0.65}) {
    const double e = exclusion_exact(std::uint64_t(c * 1e6), 1000000) / (c * 1e6);
    o.require(e >= 0.10 && e <= 0.20, "c=" + num(c) + " excludes " + num(100 * e) + "%");
  }
  return o;
}

Outcome budget_machinery() {
  Outcome o;
  const double m = log_midpoint(0.6e6, 2.4e6);
  o.require(std::abs(m - 1.2e6) <= 1e-9 * 1.2e6, "log_midpoint(0.6e6, 2.4e6) = " + num(m));
  const double darts = log_midpoint(0.49e6, 1.42e6);
  o.require(std::abs(darts - 0.83e6) <= 0.01 * 0.83e6, "DARTS midpoint " + num(darts));
  const std::vector<Kind> kinds{Kind::ACDC,           Kind::TensorTrain, Kind::Tucker,
                                Kind::RankFactorised, Kind::HashedNet,   Kind::ShuffleLinear};
  const std::vector<std::vector<LayerDims>> shapes{
      {{64, 64}}, {{32, 32}, {64, 64}}, {{128, 128}}, {{48, 48}, {96, 96}, {16, 16}}};
  std::mt19937_64 gen(5);
  int ok = 0;
  for (int i = 0; i < 100; ++i) {
    const Kind kind = kinds[gen() % kinds.size()];
    const auto &layers = shapes[gen() % shapes.size()];
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const std::size_t p = total_params(kind, layers, t);
    const auto s = solve_budget(kind, layers, double(p));
    bool same = s.params == p;
    const auto want = knob_specs(kind, layers, t);
    for (std::size_t l = 0; l < want.size(); ++l)
      same = same && param_count(s.specs[l]) == param_count(want[l]);
    ok += same ? 1 : 0;
  }
  o.require(ok == 100, std::to_string(ok) + "/100 round trips");
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("midpoints ") + num(m) + ", " + num(darts);
  return o;
}

Outcome acdc_crossover_check() {
  Outcome o;
  const std::size_t n = acdc_crossover(12);
  o.require(n >= 600 && n <= 650, "crossover(12) = " + std::to_string(n));
  std::size_t prev = 0;
  for (std::size_t l = 1; l <= 12; ++l) {
    const std::size_t c = acdc_crossover(l);
    o.require(c >= prev, "non-monotone in L at " + std::to_string(l));
    prev = c;
  }
  CostModel prev_model;
  for (double scale : {1.25, 1.5, 2.0, 4.0}) {
    CostModel m;
    m.dct_kappa = scale * default_dct_kappa();
    o.require(acdc_crossover(12, m) >= acdc_crossover(12, prev_model), "non-monotone in kappa");
    prev_model = m;
  }
  CostModel doubled;
  doubled.dct_kappa = 2.0 * default_dct_kappa();
  o.require(acdc_crossover(12, doubled) > n, "doubling kappa did not raise the crossover");
  if (o.pass)
    o.detail = "crossover(12) = " + std::to_string(n);
  return o;
}

Outcome capacity_experiment() {
  Outcome o;
  const std::size_t n = 64;
  const DenseTensor teacher = random_teacher(n, n, 2024);
  const double baseline = constant_predictor_loss(teacher);
  const TrainConfig cfg;

  std::vector<Built> full;
  full.push_back(build_dense(n, n, 1));
  full.push_back(build_rf(n, n, n, 1));
  full.push_back(build_tt(n, n, 16, 1));
  full.push_back(build_tucker(n, n, 1.0, 1));
  std::vector<std::uint32_t> table(n * n);
  std::iota(table.begin(), table.end(), 0u);
  full.push_back(build_hashed_with_table(n, n, n * n, table, 1));
  full.push_back(build_shuffle_linear(n, 1, 1));
  for (auto &b : full) {
    const FitTrace t = fit_matrix(b.spec, b.params, teacher, cfg);
    const double loss = t.diverged ? std::numeric_limits<double>::infinity() : t.final_eval_loss();
    o.require(loss < 1e-4, "full-capacity " + std::string(kind_name(b.spec.kind())) + " " + num(loss));
  }

  const std::vector<Kind> kinds{Kind::ACDC,           Kind::TensorTrain, Kind::Tucker,
                                Kind::RankFactorised, Kind::HashedNet,   Kind::ShuffleLinear};
  const double budgets[] = {205, 410, 819};
  std::string medians;
  for (Kind kind : kinds) {
    const std::string name(kind_name(kind));
    std::vector<double> med;
    for (std::size_t bi = 0; bi < 3; ++bi) {
      const auto sol = solve_budget(kind, {{n, n}}, budgets[bi]);
      std::vector<double> losses;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        OperatorSpec spec = sol.specs[0];
        spec.seed = 100 + seed;
        TrainConfig c = cfg;
        c.seed = 200 + seed;
        const FitTrace t = fit_matrix(spec, teacher, c);
        const double loss = t.diverged ? std::numeric_limits<double>::infinity() : t.final_eval_loss();
        losses.push_back(loss);
        if (bi == 1 && !t.diverged)
          o.require(loss < baseline, name + " at 10% budget " + num(loss) + " >= constant " + num(baseline));
      }
      med.push_back(median(losses));
    }
    medians += " " + name + "[" + num(med[0]) + "," + num(med[1]) + "," + num(med[2]) + "]";
    o.require(med[1] <= med[0] && med[2] <= med[1],
              name + " median loss not non-increasing " + num(med[0]) + "," + num(med[1]) + "," + num(med[2]));
  }
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("constant ") + num(baseline) + "; medians" + medians;
  return o;
}

Outcome crs_ablation() {
  Outcome o;
  const std::size_t n = 64;
  const DenseTensor teacher = random_teacher(n, n, 2025);
  TrainConfig on;
  TrainConfig off = on;
  off.crs_enabled = false;
  const int stage = final_stage_start(on);

  int hashed_ok = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const OperatorSpec spec{n, n, HashedHyper{410}, 300 + seed};
    on.seed = off.seed = 400 + seed;
    const FitTrace a = fit_matrix(spec, teacher, on);
    const FitTrace b = fit_matrix(spec, teacher, off);
    bool below = !a.diverged;
    for (int e = 0; below && e < stage; ++e)
      below = std::size_t(e) >= b.epochs.size() || a.epochs[e].eval_loss <= b.epochs[e].eval_loss;
    hashed_ok += below ? 1 : 0;
  }
  o.require(hashed_ok >= 4, "HashedNet CRS-on below CRS-off before final stage in " +
                                std::to_string(hashed_ok) + "/5 seeds");

  int shuffle_ok = 0;
  std::string ratios;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const OperatorSpec spec{n, n, ShuffleHyper{32}, 500 + seed};
    on.seed = off.seed = 600 + seed;
    const FitTrace a = fit_matrix(spec, teacher, on);
    const FitTrace b = fit_matrix(spec, teacher, off);
    const bool ok = b.diverged || (!a.diverged && b.final_eval_loss() >= 2.0 * a.final_eval_loss());
    shuffle_ok += ok ? 1 : 0;
    ratios += (seed ? "," : "") +
              (b.diverged ? std::string("diverged") : num(b.final_eval_loss() / a.final_eval_loss()));
  }
  o.require(shuffle_ok >= 3, "ShuffleLinear CRS-off diverged or >= 2x CRS-on in " +
                                 std::to_string(shuffle_ok) + "/5 seeds");
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("HashedNet ") + std::to_string(hashed_ok) +
              "/5; ShuffleLinear off/on ratios " + ratios;
  return o;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "sell_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "cfg.json");
    cfg << R"({"kinds": ["ACDC", "TT", "Tucker", "RF", "HashedNet", "ShuffleLinear"],
      "layer_dims": [[32, 32], [16, 16]], "budgets": "auto:3", "seed": 77,
      "ablations": {"crs_off_repeat": true}})";
  }
  std::vector<std::string> outputs;
  for (const char *sub : {"a", "b"}) {
    const std::string cmd = std::string(SELL_CLI_PATH) + " run --config " + (dir / "cfg.json").string() +
                            " --epochs-override 5 --jobs " + (sub[0] == 'a' ? "1" : "2") +
                            " --output-dir " + (dir / sub).string() + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    o.require(WIFEXITED(status) && WEXITSTATUS(status) == 0, std::string("run ") + sub + " failed");
    outputs.push_back(slurp(dir / sub / "results.json"));
  }
  o.require(!outputs[0].empty() && outputs[0] == outputs[1], "results.json differs between runs");
  if (o.pass)
    o.detail = std::to_string(outputs[0].size()) + " identical bytes";
  return o;
}

} // namespace

int main() {
  struct Criterion {
    const char *name;
    std::function<Outcome()> run;
    double limit_seconds;
  };
  const std::vector<Criterion> criteria{
      {"1 property suite", property_suite, 60},
      {"2 gradient checks", gradient_checks, 60},
      {"3 CRS decay rule", crs_rule, 0},
      {"4 HashedNet exclusion", hashed_exclusion, 120},
      {"5 budget machinery", budget_machinery, 0},
      {"6 ACDC crossover", acdc_crossover_check, 0},
      {"7 capacity experiment", capacity_experiment, 900},
      {"8 CRS ablation", crs_ablation, 900},
      {"9 determinism", determinism, 0},
  };
  int failed = 0;
  for (const auto &c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception &e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (c.limit_seconds > 0)
      o.require(secs < c.limit_seconds, "runtime " + num(secs) + "s over " + num(c.limit_seconds) + "s");
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.name << " (" << num(secs) << "s)"
              << (o.detail.empty() ? "" : ": " + o.detail) << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
