#pragma once

// Configuration-driven experiment runner: solve each kind's knob at each
// budget, fit every layer's teacher, and write results.json, pareto.csv,
// per-layer trace CSVs and (for the decay ablation) crs_delta.csv.

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sell/analysis.hpp"
#include "sell/budget.hpp"
#include "sell/error.hpp"
#include "sell/linop.hpp"
#include "sell/result.hpp"
#include "sell/training.hpp"
#include "sell/transforms.hpp"

namespace sell {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitAllDiverged = 3;

/// "auto:k" budgets: k points spaced in log count across the common support.
struct AutoBudgets {
  int count = 3;
};

struct ExperimentConfig {
  std::vector<Kind> kinds;
  std::vector<LayerDims> layer_dims;
  std::variant<std::vector<double>, AutoBudgets> budgets = AutoBudgets{};
  TrainConfig train;
  bool crs_off_repeat = false;
  std::filesystem::path output_dir = "results";
  std::uint64_t seed = 0;
};

struct RunOptions {
  std::optional<int> epochs_override;
  int jobs = 1;
};

struct RunSummary {
  std::vector<ExperimentResult> results;
  std::vector<double> budgets;
  int exit_code = kExitOk;
};

/// Independent 64-bit seed for a tuple of stream identifiers.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t{out[1]} << 32) | out[0];
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json &j) {
  ExperimentConfig c;
  try {
    if (!j.is_object())
      throw ConfigError("config must be a JSON object");
    for (const auto &k : j.at("kinds"))
      c.kinds.push_back(parse_kind(k.get<std::string>()));
    if (c.kinds.empty())
      throw ConfigError("config must list at least one kind");
    for (const auto &d : j.at("layer_dims")) {
      if (!d.is_array() || d.size() != 2)
        throw ConfigError("layer_dims entries must be [n_out, n_in]");
      c.layer_dims.push_back({d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>()});
      if (c.layer_dims.back().n_out == 0 || c.layer_dims.back().n_in == 0)
        throw ConfigError("layer dimensions must be positive");
    }
    if (c.layer_dims.empty())
      throw ConfigError("config must list at least one layer");
    const auto &b = j.at("budgets");
    if (b.is_string()) {
      const auto s = b.get<std::string>();
      int k = 0;
      const auto *first = s.data() + 5;
      if (s.rfind("auto:", 0) != 0 ||
          std::from_chars(first, s.data() + s.size(), k).ptr != s.data() + s.size() || k < 1)
        throw ConfigError("budgets string must be 'auto:k' with k >= 1, got '" + s + "'");
      c.budgets = AutoBudgets{k};
    } else {
      std::vector<double> list = b.get<std::vector<double>>();
      if (list.empty())
        throw ConfigError("budget list must not be empty");
      for (double v : list)
        if (!(v > 0.0))
          throw ConfigError("budgets must be positive");
      c.budgets = list;
    }
    if (j.contains("train"))
      c.train = j.at("train").get<TrainConfig>();
    validate(c.train);
    if (j.contains("ablations"))
      c.crs_off_repeat = j.at("ablations").value("crs_off_repeat", false);
    c.output_dir = j.value("output_dir", std::string("results"));
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const SpecError &e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw ConfigError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " +
                      e.what());
  }
  return parse_experiment_config(j);
}

/// Scale a training config to a different epoch count, stretching milestones.
inline TrainConfig with_epochs(TrainConfig c, int epochs) {
  if (epochs < 1)
    throw ConfigError("epoch override must be >= 1");
  if (auto *step = std::get_if<StepSchedule>(&c.schedule)) {
    for (int &m : step->milestones)
      m = static_cast<int>(std::lround(double(m) * double(epochs) / double(c.epochs)));
  } else {
    std::get<CosineSchedule>(c.schedule).total_epochs = epochs;
  }
  c.epochs = epochs;
  return c;
}

namespace detail {

inline std::vector<double> resolve_budgets(const ExperimentConfig &c) {
  if (const auto *list = std::get_if<std::vector<double>>(&c.budgets))
    return *list;
  const int k = std::get<AutoBudgets>(c.budgets).count;
  std::vector<KnobCurve> curves;
  for (Kind kind : c.kinds) {
    if (kind == Kind::Dense)
      continue; // no knob
    try {
      curves.push_back(knob_curve(kind, c.layer_dims, 2));
    } catch (const Error &) {
      // kind cannot represent these layers; its cells will be unsupported
    }
  }
  double lo = 0.0, hi = 0.0;
  if (curves.empty()) {
    std::size_t dense = 0;
    for (const auto &l : c.layer_dims)
      dense += l.n_out * l.n_in;
    lo = hi = double(dense);
  } else if (curves.size() == 1) {
    lo = double(curves[0].min_params());
    hi = double(curves[0].max_params());
  } else {
    std::tie(lo, hi) = support_interval(curves);
  }
  if (lo == hi)
    return std::vector<double>(static_cast<std::size_t>(k), lo);
  return log_spaced_budgets(lo, hi, k);
}

struct Cell {
  std::size_t kind_index;
  std::size_t budget_index;
  bool crs_enabled;
};

inline std::string cell_stem(const ExperimentResult &r) {
  return std::string(r.kind) + "_b" + std::to_string(r.budget_index) +
         (r.crs_enabled ? "_crs" : "_nocrs");
}

inline ExperimentResult run_cell(const ExperimentConfig &c, const TrainConfig &train, Kind kind,
                                 std::size_t kind_index, std::size_t budget_index, double budget,
                                 bool crs, const std::vector<DenseTensor> &teachers) {
  ExperimentResult r;
  r.kind = std::string(kind_name(kind));
  r.budget_index = budget_index;
  r.budget = budget;
  r.crs_enabled = crs;
  r.train = train;
  r.train.crs_enabled = crs;

  BudgetSolution sol;
  try {
    sol = solve_budget(kind, c.layer_dims, budget, 0.0);
  } catch (const Error &e) {
    r.status = "unsupported";
    r.detail = e.what();
    return r;
  }
  r.knob_t = sol.t;

  const std::uint64_t cell_seed = derive_seed({c.seed, 1, kind_index, budget_index});
  CostModel model;
  double err_sum = 0.0, train_sum = 0.0, base_sum = 0.0, elems = 0.0;
  std::int64_t multadds = 0;
  bool multadds_known = true;
  for (std::size_t l = 0; l < sol.specs.size(); ++l) {
    OperatorSpec spec = sol.specs[l];
    spec.seed = derive_seed({cell_seed, 2, l});
    TrainConfig tc = r.train;
    tc.seed = derive_seed({cell_seed, 3, l});
    const FitTrace trace = fit_matrix(spec, teachers[l], tc);

    LayerResult lr;
    lr.spec = spec;
    lr.diverged = trace.diverged;
    lr.effective_decay =
        crs ? crs_decay(tc.base_decay, param_count(spec), spec.dense_params()) : tc.base_decay;
    if (!trace.diverged) {
      lr.final_eval_loss = trace.epochs.back().eval_loss;
      lr.final_train_loss = trace.epochs.back().train_loss;
    } else {
      lr.final_eval_loss = std::numeric_limits<double>::quiet_NaN();
      lr.final_train_loss = std::numeric_limits<double>::quiet_NaN();
    }
    lr.trace_file = "traces/" + cell_stem(r) + "_L" + std::to_string(l) + ".csv";

    const auto cost = cost_report(spec, model);
    r.params += cost.params;
    r.dense_params += cost.dense_params;
    r.dense_multadds += cost.dense_multadds;
    if (cost.multadds)
      multadds += *cost.multadds;
    else
      multadds_known = false;

    const double n = double(spec.dense_params());
    elems += n;
    err_sum += lr.final_eval_loss * n;
    train_sum += lr.final_train_loss * n;
    base_sum += constant_predictor_loss(teachers[l]) * n;
    r.diverged = r.diverged || trace.diverged;
    r.knob += (l ? "|" : "") + knob_label(spec);
    r.layers.push_back(lr);

    std::ostringstream csv;
    write_trace_csv(csv, trace);
    const auto path = c.output_dir / lr.trace_file;
    std::ofstream out(path);
    if (!out)
      throw IoError("cannot write " + path.string());
    out << csv.str();
  }
  if (multadds_known) {
    r.multadds = multadds;
    r.multadd_ratio = double(multadds) / double(r.dense_multadds);
  }
  r.param_ratio = double(r.params) / double(r.dense_params);
  r.final_eval_loss = err_sum / elems;
  r.final_train_loss = train_sum / elems;
  r.constant_baseline_loss = base_sum / elems;
  if (r.diverged) {
    r.status = "diverged";
    r.final_eval_loss = std::numeric_limits<double>::quiet_NaN();
    r.final_train_loss = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << text;
  if (!out)
    throw IoError("failed writing " + path.string());
}

inline std::string optional_cell(const std::optional<std::int64_t> &v) {
  return v ? std::to_string(*v) : std::string("NA");
}

inline std::string pareto_csv(const ComparisonTable &table) {
  std::ostringstream os;
  os << "kind,knob,crs_enabled,params,multadds,param_ratio,eval_loss,diverged\n";
  for (const auto &r : table.frontier)
    os << r.kind << ',' << r.knob << ',' << (r.crs_enabled ? 1 : 0) << ',' << r.params << ','
       << optional_cell(r.multadds) << ',' << format_double(r.param_ratio) << ','
       << format_double(r.eval_loss) << ',' << (r.diverged ? 1 : 0) << '\n';
  return os.str();
}

} // namespace detail

/// Paired CRS-on / CRS-off losses for every (kind, budget) that has both.
struct CrsDelta {
  std::string kind;
  std::size_t budget_index = 0;
  double budget = 0.0;
  double loss_crs_on = 0.0;
  double loss_crs_off = 0.0;
};

inline std::vector<CrsDelta> crs_deltas(const std::vector<ExperimentResult> &results) {
  std::map<std::pair<std::string, std::size_t>, std::pair<const ExperimentResult *, const ExperimentResult *>>
      pairs;
  for (const auto &r : results) {
    if (r.status == "unsupported")
      continue;
    auto &slot = pairs[{r.kind, r.budget_index}];
    (r.crs_enabled ? slot.first : slot.second) = &r;
  }
  std::vector<CrsDelta> out;
  for (const auto &[key, p] : pairs)
    if (p.first && p.second)
      out.push_back({key.first, key.second, p.first->budget, p.first->final_eval_loss,
                     p.second->final_eval_loss});
  return out;
}

inline std::string crs_delta_csv(const std::vector<CrsDelta> &deltas) {
  std::ostringstream os;
  os << "kind,budget_index,budget,eval_loss_crs_on,eval_loss_crs_off,delta_off_minus_on\n";
  for (const auto &d : deltas)
    os << d.kind << ',' << d.budget_index << ',' << format_double(d.budget) << ','
       << format_double(d.loss_crs_on) << ',' << format_double(d.loss_crs_off) << ','
       << format_double(d.loss_crs_off - d.loss_crs_on) << '\n';
  return os.str();
}

/// Run every (kind, budget[, decay variant]) cell and write artifacts to
/// config.output_dir. Cells are independent and may run on `jobs` threads;
/// output is identical for any job count.
inline RunSummary run(const ExperimentConfig &config, const RunOptions &options = {}) {
  if (config.kinds.empty())
    throw ConfigError("config must list at least one kind");
  if (config.layer_dims.empty())
    throw ConfigError("config must list at least one layer");
  TrainConfig train = config.train;
  if (options.epochs_override)
    train = with_epochs(train, *options.epochs_override);
  validate(train);

  std::error_code ec;
  std::filesystem::create_directories(config.output_dir / "traces", ec);
  std::filesystem::create_directories(config.output_dir / "runs", ec);
  if (ec)
    throw IoError("cannot create output directory " + config.output_dir.string() + ": " +
                  ec.message());

  RunSummary summary;
  summary.budgets = detail::resolve_budgets(config);

  std::vector<DenseTensor> teachers;
  for (std::size_t l = 0; l < config.layer_dims.size(); ++l)
    teachers.push_back(random_teacher(config.layer_dims[l].n_out, config.layer_dims[l].n_in,
                                      derive_seed({config.seed, 0, l})));

  std::vector<detail::Cell> cells;
  for (std::size_t k = 0; k < config.kinds.size(); ++k)
    for (std::size_t b = 0; b < summary.budgets.size(); ++b) {
      cells.push_back({k, b, train.crs_enabled});
      if (config.crs_off_repeat)
        cells.push_back({k, b, !train.crs_enabled});
    }

  std::vector<ExperimentResult> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto &cell = cells[i];
      try {
        results[i] = detail::run_cell(config, train, config.kinds[cell.kind_index], cell.kind_index,
                                      cell.budget_index, summary.budgets[cell.budget_index],
                                      cell.crs_enabled, teachers);
      } catch (const std::exception &e) {
        errors[i] = e.what();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(cells.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < jobs; ++t)
      pool.emplace_back(worker);
  }
  for (const auto &e : errors)
    if (!e.empty())
      throw IoError(e);

  nlohmann::json all = nlohmann::json::array();
  for (const auto &r : results) {
    all.push_back(r);
    detail::write_text(config.output_dir / "runs" / (detail::cell_stem(r) + ".json"),
                       nlohmann::json(r).dump(2) + "\n");
  }
  detail::write_text(config.output_dir / "results.json", all.dump(2) + "\n");
  detail::write_text(config.output_dir / "pareto.csv", detail::pareto_csv(assemble_report(results)));
  if (config.crs_off_repeat)
    detail::write_text(config.output_dir / "crs_delta.csv", crs_delta_csv(crs_deltas(results)));

  std::size_t attempted = 0, diverged = 0;
  for (const auto &r : results) {
    if (r.status == "unsupported")
      continue;
    ++attempted;
    diverged += r.diverged ? 1 : 0;
  }
  summary.exit_code = (attempted > 0 && diverged == attempted) ? kExitAllDiverged : kExitOk;
  summary.results = std::move(results);
  return summary;
}

inline std::vector<ExperimentResult> load_results(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ParseError(path.string(), 0, "cannot open file");
  try {
    const auto j = nlohmann::json::parse(in);
    return j.get<std::vector<ExperimentResult>>();
  } catch (const nlohmann::json::parse_error &e) {
    throw ParseError(path.string(), e.byte, e.what());
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

/// Write params_vs_loss.csv, multadds_vs_loss.csv and (when both decay
/// variants are present) crs_delta.csv next to `results_path`. Returns the
/// paths written.
inline std::vector<std::filesystem::path> emit_plotdata(const std::filesystem::path &results_path) {
  const auto results = load_results(results_path);
  const auto dir = results_path.parent_path().empty() ? std::filesystem::path(".")
                                                      : results_path.parent_path();
  std::ostringstream params, multadds;
  params << "kind,knob,crs_enabled,budget_index,params,param_ratio,eval_loss\n";
  multadds << "kind,knob,crs_enabled,budget_index,multadds,multadd_ratio,eval_loss\n";
  for (const auto &r : results) {
    if (r.status != "ok")
      continue;
    params << r.kind << ',' << r.knob << ',' << (r.crs_enabled ? 1 : 0) << ',' << r.budget_index
           << ',' << r.params << ',' << format_double(r.param_ratio) << ','
           << format_double(r.final_eval_loss) << '\n';
    if (r.multadds)
      multadds << r.kind << ',' << r.knob << ',' << (r.crs_enabled ? 1 : 0) << ','
               << r.budget_index << ',' << *r.multadds << ',' << format_double(*r.multadd_ratio)
               << ',' << format_double(r.final_eval_loss) << '\n';
  }
  std::vector<std::filesystem::path> written{dir / "params_vs_loss.csv", dir / "multadds_vs_loss.csv"};
  detail::write_text(written[0], params.str());
  detail::write_text(written[1], multadds.str());
  const auto deltas = crs_deltas(results);
  if (!deltas.empty()) {
    written.push_back(dir / "crs_delta.csv");
    detail::write_text(written.back(), crs_delta_csv(deltas));
  }
  return written;
}

} // namespace sell
