#include <charconv>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sell/sell.hpp"

namespace {

std::vector<sell::LayerDims> parse_dims(const std::string &text) {
  std::vector<sell::LayerDims> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    const auto x = item.find('x');
    sell::LayerDims d;
    auto ok = [&](std::string_view s, std::size_t &v) {
      return !s.empty() && std::from_chars(s.data(), s.data() + s.size(), v).ptr == s.data() + s.size();
    };
    if (x == std::string::npos || !ok(std::string_view(item).substr(0, x), d.n_out) ||
        !ok(std::string_view(item).substr(x + 1), d.n_in) || d.n_out == 0 || d.n_in == 0)
      throw sell::ConfigError("--dims expects entries like 256x128, got '" + item + "'");
    out.push_back(d);
    pos = comma + 1;
  }
  return out;
}

nlohmann::json estimate_json(const sell::MonteCarloEstimate &m) {
  return {{"mean", m.mean}, {"stderr", m.stderr_}};
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Structured efficient linear layer benchmarks"};
  app.require_subcommand(1);

  auto *run_cmd = app.add_subcommand("run", "Run an experiment from a JSON config");
  std::string config_path;
  std::optional<int> epochs_override;
  int jobs = 1;
  std::string output_dir;
  run_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run_cmd->add_option("--epochs-override", epochs_override, "Train for N epochs, rescaling the schedule");
  run_cmd->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  run_cmd->add_option("--output-dir", output_dir, "Override the config's output_dir");

  auto *analyze = app.add_subcommand("analyze", "Closed-form analyses");
  analyze->require_subcommand(1);
  auto *excl = analyze->add_subcommand("exclusion", "Expected excluded HashedNet weights");
  std::uint64_t n_real = 0, n_virtual = 0, mc_seed = 0;
  int trials = 0;
  excl->add_option("--n-real", n_real)->required();
  excl->add_option("--n-virtual", n_virtual)->required();
  excl->add_option("--trials", trials, "Monte-Carlo trials (0 = skip)");
  excl->add_option("--seed", mc_seed);
  auto *cross = analyze->add_subcommand("crossover", "Width where ACDC undercuts dense mult-adds");
  std::size_t layers = 12;
  double kappa = sell::default_dct_kappa();
  cross->add_option("--layers", layers)->required();
  cross->add_option("--kappa", kappa, "DCT cost constant");

  auto *budget = app.add_subcommand("budget", "Parameter budget tools");
  budget->require_subcommand(1);
  auto *solve = budget->add_subcommand("solve", "Find the knob setting nearest a parameter target");
  std::string kind_text, dims_text;
  double target = 0.0, tol = 0.0;
  solve->add_option("--kind", kind_text)->required();
  solve->add_option("--dims", dims_text, "Layer shapes, e.g. 256x256,128x256")->required();
  solve->add_option("--target", target)->required();
  solve->add_option("--tol", tol, "Relative tolerance reported as within_tol");

  auto *plots = app.add_subcommand("emit-plots", "Write plot CSVs from results.json");
  std::string results_path;
  plots->add_option("--results", results_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? 0 : sell::kExitConfig;
  }

  try {
    if (*run_cmd) {
      auto config = sell::load_experiment_config(config_path);
      if (!output_dir.empty())
        config.output_dir = output_dir;
      const auto summary = sell::run(config, {epochs_override, jobs});
      std::size_t ok = 0, diverged = 0, unsupported = 0;
      for (const auto &r : summary.results) {
        ok += r.status == "ok";
        diverged += r.status == "diverged";
        unsupported += r.status == "unsupported";
      }
      std::cout << "wrote " << (config.output_dir / "results.json").string() << ": " << ok
                << " ok, " << diverged << " diverged, " << unsupported << " unsupported\n";
      return summary.exit_code;
    }
    if (*excl) {
      const auto r = sell::exclusion_report(n_real, n_virtual, trials, mc_seed);
      nlohmann::json j{{"n_real", r.n_real},
                       {"n_virtual", r.n_virtual},
                       {"expected_excluded", r.exact_expected_excluded},
                       {"excluded_fraction", r.exact_ratio},
                       {"limit_fraction", r.limit_ratio}};
      if (r.montecarlo)
        j["montecarlo"] = estimate_json(*r.montecarlo);
      std::cout << j.dump(2) << "\n";
      return 0;
    }
    if (*cross) {
      sell::CostModel model;
      model.dct_kappa = kappa;
      std::cout << nlohmann::json{{"layers", layers},
                                  {"kappa", kappa},
                                  {"crossover_width", sell::acdc_crossover(layers, model)}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*solve) {
      const auto kind = sell::parse_kind(kind_text);
      const auto sol = sell::solve_budget(kind, parse_dims(dims_text), target, tol);
      std::cout << nlohmann::json{{"kind", std::string(sell::kind_name(kind))},
                                  {"t", sol.t},
                                  {"params", sol.params},
                                  {"target", target},
                                  {"within_tol", sol.within_tol},
                                  {"specs", sol.specs}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*plots) {
      for (const auto &p : sell::emit_plotdata(results_path))
        std::cout << "wrote " << p.string() << "\n";
      return 0;
    }
  } catch (const sell::ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sell::kExitConfig;
  } catch (const sell::IoError &e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return sell::kExitIo;
  } catch (const sell::ParseError &e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return sell::kExitIo;
  } catch (const sell::Error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return sell::kExitConfig;
  }
  return 0;
}
