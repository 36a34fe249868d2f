#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sell/linop.hpp"
#include "sell/training.hpp"

namespace sell {

struct LayerResult {
  OperatorSpec spec;
  double final_eval_loss = 0.0;
  double final_train_loss = 0.0;
  double effective_decay = 0.0;
  bool diverged = false;
  std::string trace_file;
};

/// One (kind, budget, decay-variant) cell of an experiment.
struct ExperimentResult {
  std::string kind;
  /// "ok", "diverged" or "unsupported"
  std::string status = "ok";
  std::string detail;
  std::size_t budget_index = 0;
  double budget = 0.0;
  double knob_t = 0.0;
  std::string knob;
  bool crs_enabled = true;
  std::int64_t params = 0;
  std::optional<std::int64_t> multadds;
  std::int64_t dense_params = 0;
  std::int64_t dense_multadds = 0;
  double param_ratio = 0.0;
  std::optional<double> multadd_ratio;
  double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double constant_baseline_loss = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::vector<LayerResult> layers;
  TrainConfig train;
};

namespace detail {

// NaN / inf are not representable in JSON; encode as null.
inline nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double number_or_nan(const nlohmann::json &j, const char *key) {
  if (!j.contains(key) || j.at(key).is_null())
    return std::numeric_limits<double>::quiet_NaN();
  return j.at(key).get<double>();
}

} // namespace detail

inline void to_json(nlohmann::json &j, const LayerResult &r) {
  j = nlohmann::json{{"spec", r.spec},
                     {"final_eval_loss", detail::finite_or_null(r.final_eval_loss)},
                     {"final_train_loss", detail::finite_or_null(r.final_train_loss)},
                     {"effective_decay", r.effective_decay},
                     {"diverged", r.diverged},
                     {"trace_file", r.trace_file}};
}

inline void from_json(const nlohmann::json &j, LayerResult &r) {
  r.spec = j.at("spec").get<OperatorSpec>();
  r.final_eval_loss = detail::number_or_nan(j, "final_eval_loss");
  r.final_train_loss = detail::number_or_nan(j, "final_train_loss");
  r.effective_decay = j.value("effective_decay", 0.0);
  r.diverged = j.value("diverged", false);
  r.trace_file = j.value("trace_file", std::string());
}

inline void to_json(nlohmann::json &j, const ExperimentResult &r) {
  j = nlohmann::json{
      {"kind", r.kind},
      {"status", r.status},
      {"detail", r.detail},
      {"budget_index", r.budget_index},
      {"budget", r.budget},
      {"knob_t", r.knob_t},
      {"knob", r.knob},
      {"crs_enabled", r.crs_enabled},
      {"params", r.params},
      {"multadds", r.multadds ? nlohmann::json(*r.multadds) : nlohmann::json(nullptr)},
      {"dense_params", r.dense_params},
      {"dense_multadds", r.dense_multadds},
      {"param_ratio", r.param_ratio},
      {"multadd_ratio", r.multadd_ratio ? nlohmann::json(*r.multadd_ratio) : nlohmann::json(nullptr)},
      {"final_eval_loss", detail::finite_or_null(r.final_eval_loss)},
      {"final_train_loss", detail::finite_or_null(r.final_train_loss)},
      {"constant_baseline_loss", detail::finite_or_null(r.constant_baseline_loss)},
      {"diverged", r.diverged},
      {"layers", r.layers},
      {"train", r.train}};
}

inline void from_json(const nlohmann::json &j, ExperimentResult &r) {
  r.kind = j.at("kind").get<std::string>();
  r.status = j.value("status", std::string("ok"));
  r.detail = j.value("detail", std::string());
  r.budget_index = j.value("budget_index", std::size_t{0});
  r.budget = j.value("budget", 0.0);
  r.knob_t = j.value("knob_t", 0.0);
  r.knob = j.value("knob", std::string());
  r.crs_enabled = j.value("crs_enabled", true);
  r.params = j.value("params", std::int64_t{0});
  if (j.contains("multadds") && !j.at("multadds").is_null())
    r.multadds = j.at("multadds").get<std::int64_t>();
  r.dense_params = j.value("dense_params", std::int64_t{0});
  r.dense_multadds = j.value("dense_multadds", std::int64_t{0});
  r.param_ratio = j.value("param_ratio", 0.0);
  if (j.contains("multadd_ratio") && !j.at("multadd_ratio").is_null())
    r.multadd_ratio = j.at("multadd_ratio").get<double>();
  r.final_eval_loss = detail::number_or_nan(j, "final_eval_loss");
  r.final_train_loss = detail::number_or_nan(j, "final_train_loss");
  r.constant_baseline_loss = detail::number_or_nan(j, "constant_baseline_loss");
  r.diverged = j.value("diverged", false);
  if (j.contains("layers"))
    r.layers = j.at("layers").get<std::vector<LayerResult>>();
  if (j.contains("train"))
    r.train = j.at("train").get<TrainConfig>();
}

} // namespace sell
