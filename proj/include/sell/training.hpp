#pragma once

// SGD with momentum and coupled L2 decay, compression-ratio-scaled decay, and
// the teacher-matrix regression used as the desk-scale benchmark.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sell/error.hpp"
#include "sell/kernels.hpp"
#include "sell/linop.hpp"
#include "sell/transforms.hpp"

namespace sell {

struct StepSchedule {
  std::vector<int> milestones{60, 120, 160};
  double factor = 0.2;
  bool operator==(const StepSchedule &) const = default;
};

struct CosineSchedule {
  int total_epochs = 200;
  bool operator==(const CosineSchedule &) const = default;
};

using Schedule = std::variant<StepSchedule, CosineSchedule>;

/// Defaults follow the CIFAR Wide-ResNet recipe (lr 0.1, x0.2 at 60/120/160,
/// momentum 0.9, decay 5e-4, batch 128).
struct TrainConfig {
  double lr0 = 0.1;
  Schedule schedule = StepSchedule{};
  double momentum = 0.9;
  double base_decay = 5e-4;
  bool crs_enabled = true;
  int epochs = 200;
  int batch = 128;
  /// Minibatches drawn per epoch (synthetic data has no natural epoch length).
  int batches_per_epoch = 16;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig &) const = default;
};

inline void validate(const TrainConfig &c) {
  if (!(c.lr0 > 0.0))
    throw ConfigError("lr0 must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0))
    throw ConfigError("momentum must lie in [0, 1)");
  if (!(c.base_decay >= 0.0))
    throw ConfigError("base_decay must be >= 0");
  if (c.epochs < 1)
    throw ConfigError("epochs must be >= 1");
  if (c.batch < 1 || c.batches_per_epoch < 1)
    throw ConfigError("batch and batches_per_epoch must be >= 1");
  if (const auto *cos = std::get_if<CosineSchedule>(&c.schedule); cos && cos->total_epochs < 1)
    throw ConfigError("cosine total_epochs must be >= 1");
}

/// Learning rate for zero-based `epoch`.
inline double learning_rate(const TrainConfig &c, int epoch) {
  if (const auto *step = std::get_if<StepSchedule>(&c.schedule)) {
    double lr = c.lr0;
    for (int m : step->milestones)
      if (epoch >= m)
        lr *= step->factor;
    return lr;
  }
  const auto &cos = std::get<CosineSchedule>(c.schedule);
  const double t = std::min(1.0, double(epoch) / double(cos.total_epochs));
  return 0.5 * c.lr0 * (1.0 + std::cos(std::numbers::pi * t));
}

/// First epoch of the last learning-rate stage (epochs if the schedule has one stage).
inline int final_stage_start(const TrainConfig &c) {
  if (const auto *step = std::get_if<StepSchedule>(&c.schedule)) {
    int last = 0;
    for (int m : step->milestones)
      if (m < c.epochs)
        last = std::max(last, m);
    return last;
  }
  return c.epochs;
}

/// Weight decay for a layer holding `m` parameters in place of `n`: d * m / n.
inline double crs_decay(double base_decay, std::size_t m, std::size_t n) {
  return base_decay * (static_cast<double>(m) / static_cast<double>(n));
}

struct SgdHyper {
  double lr = 0.1;
  double momentum = 0.9;
  double decay = 0.0;
};

/// v <- momentum v + (g + decay p);  p <- p - lr v.
inline void sgd_step(std::span<double> params, std::span<const double> grads,
                     std::span<double> velocity, const SgdHyper &h, int epoch = 0) {
  if (grads.size() != params.size() || velocity.size() != params.size())
    throw ShapeError("sgd_step: params, grads and velocity must have equal length");
  for (double g : grads)
    if (!std::isfinite(g))
      throw DivergedError("non-finite gradient", epoch);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] + h.decay * params[i];
    velocity[i] = h.momentum * velocity[i] + g;
    params[i] -= h.lr * velocity[i];
  }
}

struct EpochRecord {
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double lr = 0.0;
  double effective_decay = 0.0;
  bool operator==(const EpochRecord &) const = default;
};

struct FitTrace {
  std::vector<EpochRecord> epochs;
  ParamStore final_params;
  bool diverged = false;
  /// Epoch at which divergence was detected, -1 if none.
  int diverged_epoch = -1;

  double final_eval_loss() const {
    return epochs.empty() ? std::numeric_limits<double>::infinity() : epochs.back().eval_loss;
  }
};

/// Shortest decimal string that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_trace_csv(std::ostream &os, const FitTrace &trace) {
  os << "epoch,train_loss,eval_loss,lr,effective_decay\n";
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    const auto &r = trace.epochs[e];
    os << e << ',' << format_double(r.train_loss) << ',' << format_double(r.eval_loss) << ','
       << format_double(r.lr) << ',' << format_double(r.effective_decay) << '\n';
  }
}

/// Random teacher with i.i.d. N(0, 1/n_in) entries.
inline DenseTensor random_teacher(std::size_t n_out, std::size_t n_in, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  DenseTensor w = DenseTensor::matrix(n_out, n_in);
  detail::fill_normal(w.values, 0.0, 1.0 / std::sqrt(double(n_in)), gen);
  return w;
}

/// Normalised Frobenius error ||a - b||_F^2 / (rows * cols).
inline double matrix_mse(const DenseTensor &a, const DenseTensor &b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    acc += d * d;
  }
  return acc / double(a.values.size());
}

/// eval_loss of the best matrix with all entries equal (the entry variance).
inline double constant_predictor_loss(const DenseTensor &teacher) {
  double mean = 0.0;
  for (double v : teacher.values)
    mean += v;
  mean /= double(teacher.values.size());
  double acc = 0.0;
  for (double v : teacher.values)
    acc += (v - mean) * (v - mean);
  return acc / double(teacher.values.size());
}

struct BatchLoss {
  /// Mean over batch and outputs of squared residuals.
  double mse = 0.0;
  /// d(mse)/d(materialised matrix).
  DenseTensor grad_m;
};

/// Minibatch loss for inputs `xs` (batch x n_in, row-major).
///
/// Uses sum_b ||E x_b||^2 = tr(E S E^T) with S = X^T X, which equals running
/// apply() on every row but costs one n_out x n_in x n_in product.
inline BatchLoss batch_loss(const DenseTensor &model, const DenseTensor &teacher,
                            std::span<const double> xs, std::size_t batch) {
  const std::size_t n_out = model.rows();
  const std::size_t n_in = model.cols();
  Vector s(n_in * n_in, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double *x = xs.data() + b * n_in;
    for (std::size_t i = 0; i < n_in; ++i) {
      const double xi = x[i];
      double *row = s.data() + i * n_in;
      for (std::size_t j = i; j < n_in; ++j)
        row[j] += xi * x[j];
    }
  }
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < i; ++j)
      s[i * n_in + j] = s[j * n_in + i];

  BatchLoss out{0.0, DenseTensor::matrix(n_out, n_in)};
  Vector err(n_in);
  const double scale = 1.0 / (double(batch) * double(n_out));
  for (std::size_t i = 0; i < n_out; ++i) {
    for (std::size_t j = 0; j < n_in; ++j)
      err[j] = model(i, j) - teacher(i, j);
    double *g = out.grad_m.values.data() + i * n_in;
    for (std::size_t k = 0; k < n_in; ++k) {
      const double e = err[k];
      if (e == 0.0)
        continue;
      const double *srow = s.data() + k * n_in;
      for (std::size_t j = 0; j < n_in; ++j)
        g[j] += e * srow[j];
    }
    double row_loss = 0.0;
    for (std::size_t j = 0; j < n_in; ++j) {
      row_loss += err[j] * g[j];
      g[j] *= 2.0 * scale;
    }
    out.mse += row_loss * scale;
  }
  return out;
}

/// Regress a compressed operator onto a dense teacher with minibatches of
/// standard-normal inputs. train_loss is the minibatch estimate of eval_loss
/// (mean squared residual divided by n_in).
inline FitTrace fit_matrix(const OperatorSpec &spec, ParamStore initial, const DenseTensor &teacher,
                           const TrainConfig &config) {
  validate(config);
  check_consistent(spec, initial);
  if (teacher.rank() != 2 || teacher.rows() != spec.n_out || teacher.cols() != spec.n_in)
    throw ShapeError("fit_matrix: teacher must be n_out x n_in");

  const double decay =
      config.crs_enabled ? crs_decay(config.base_decay, param_count(spec), spec.dense_params())
                         : config.base_decay;
  const std::size_t batch = static_cast<std::size_t>(config.batch);

  FitTrace trace;
  trace.final_params = std::move(initial);
  ParamStore &params = trace.final_params;
  Vector velocity(params.flat.size(), 0.0);
  std::mt19937_64 gen(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector xs(batch * spec.n_in);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate(config, epoch);
    const ParamStore snapshot = params;
    double train = 0.0;
    bool bad = false;
    try {
      for (int step = 0; step < config.batches_per_epoch; ++step) {
        for (auto &v : xs)
          v = normal(gen);
        const DenseTensor m = materialize(spec, params);
        const BatchLoss bl = batch_loss(m, teacher, xs, batch);
        if (!std::isfinite(bl.mse))
          throw DivergedError("non-finite training loss", epoch);
        train += bl.mse / double(spec.n_in);
        const Vector g = materialize_vjp(spec, params, bl.grad_m);
        sgd_step(params.flat, g, velocity, {lr, config.momentum, decay}, epoch);
      }
    } catch (const DivergedError &) {
      bad = true;
    }
    double eval = std::numeric_limits<double>::quiet_NaN();
    if (!bad)
      eval = matrix_mse(materialize(spec, params), teacher);
    if (bad || !std::isfinite(eval)) {
      params = snapshot;
      trace.diverged = true;
      trace.diverged_epoch = epoch;
      break;
    }
    trace.epochs.push_back({train / double(config.batches_per_epoch), eval, lr, decay});
  }
  return trace;
}

inline FitTrace fit_matrix(const OperatorSpec &spec, const DenseTensor &teacher,
                           const TrainConfig &config) {
  Built b = build(spec);
  return fit_matrix(b.spec, std::move(b.params), teacher, config);
}

// JSON for TrainConfig

inline void to_json(nlohmann::json &j, const TrainConfig &c) {
  nlohmann::json sched;
  if (const auto *step = std::get_if<StepSchedule>(&c.schedule))
    sched = {{"type", "step"}, {"milestones", step->milestones}, {"factor", step->factor}};
  else
    sched = {{"type", "cosine"}, {"total_epochs", std::get<CosineSchedule>(c.schedule).total_epochs}};
  j = nlohmann::json{{"lr0", c.lr0},
                     {"schedule", sched},
                     {"momentum", c.momentum},
                     {"base_decay", c.base_decay},
                     {"crs_enabled", c.crs_enabled},
                     {"epochs", c.epochs},
                     {"batch", c.batch},
                     {"batches_per_epoch", c.batches_per_epoch},
                     {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json &j, TrainConfig &c) {
  const TrainConfig d;
  c.lr0 = j.value("lr0", d.lr0);
  c.momentum = j.value("momentum", d.momentum);
  c.base_decay = j.value("base_decay", d.base_decay);
  c.crs_enabled = j.value("crs_enabled", d.crs_enabled);
  c.epochs = j.value("epochs", d.epochs);
  c.batch = j.value("batch", d.batch);
  c.batches_per_epoch = j.value("batches_per_epoch", d.batches_per_epoch);
  c.seed = j.value("seed", d.seed);
  c.schedule = d.schedule;
  if (j.contains("schedule")) {
    const auto &s = j.at("schedule");
    const auto type = s.value("type", std::string("step"));
    if (type == "step") {
      StepSchedule step;
      step.milestones = s.value("milestones", step.milestones);
      step.factor = s.value("factor", step.factor);
      c.schedule = step;
    } else if (type == "cosine") {
      c.schedule = CosineSchedule{s.value("total_epochs", c.epochs)};
    } else {
      throw ConfigError("unknown schedule type '" + type + "'");
    }
  }
}

} // namespace sell
