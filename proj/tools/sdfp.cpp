// Command-line front end: oracle, train, eval and compare.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "sdfp/experiment.hpp"

using namespace sdfp;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::vector<std::string> configs;
  std::vector<std::string> presets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& o, bool pair) {
  auto* config = cmd->add_option("--config", o.configs, "Experiment JSON file");
  auto* preset = cmd->add_option("--preset", o.presets, "Preset name (baseline-10, sdfp-10, sdfp-500, superlinear-100)");
  if (!pair) {
    config->expected(1);
    preset->expected(1);
  }
  cmd->add_option("--seed", o.seed, "Run this seed only");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--set", o.sets, "Override a config key, e.g. train.lr=1e-4");
  cmd->add_flag("--dry-run", o.dry_run, "Print the resolved config and exit");
}

ExperimentConfig finish(ExperimentConfig c, const Common& o) {
  for (const auto& s : o.sets) c = apply_override(c, s);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.out = o.out;
  return c;
}

std::vector<ExperimentConfig> resolve(const Common& o) {
  std::vector<ExperimentConfig> out;
  for (const auto& p : o.configs) out.push_back(finish(load_config(p), o));
  for (const auto& p : o.presets) out.push_back(finish(load_preset(p), o));
  if (out.empty()) out.push_back(finish(load_preset("sdfp-10"), o));
  return out;
}

void write(const fs::path& p, const nlohmann::ordered_json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump(2) << "\n";
}

int cmd_oracle(const ExperimentConfig& c) {
  nlohmann::ordered_json report;
  const bool pass = run_oracle(c, report);
  write(fs::path(c.out) / "oracle_report.json", report);
  for (const auto& [name, check] : report["checks"].items())
    std::cout << (check["pass"].get<bool>() ? "pass " : "FAIL ") << name << "\n";
  return pass ? 0 : 1;
}

int cmd_train(const ExperimentConfig& c) {
  const auto runs = run_train(c);
  const auto summary = summarize(c, runs);
  std::cout << summary.dump(2) << "\n";
  return summary["aborted"].get<bool>() ? 1 : 0;
}

int cmd_eval(const ExperimentConfig& c, const std::string& checkpoint) {
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = fs::path(c.out) / ("seed_" + std::to_string(seed));
    const fs::path ckpt = checkpoint.empty()
        ? dir / "checkpoints" / ("stage_" + std::to_string(c.train.stages) + ".ckpt")
        : fs::path(checkpoint);
    SimGrid grid = c.grid;
    grid.seed = seed;
    AgentNet net(c.train.net_config(c.game.n, grid.steps), seed);
    net.load_state_dict(load_checkpoint(ckpt.string()));
    const auto e = evaluate_terminal(c.game, grid, c.train, net, c.terminal_batch, seed);
    const fs::path out = dir / "eval";
    fs::create_directories(out);
    std::ofstream(out / "terminal_hist.csv") << kHistogramHeader << "\n" << histogram_csv(e.stats);
    nlohmann::ordered_json j;
    j["checkpoint"] = ckpt.string();
    j["batch"] = e.batch;
    j["terminal_state_mean"] = e.stats.state.mean;
    j["terminal_state_std"] = e.stats.state.std;
    j["terminal_control_mean"] = e.stats.control.mean;
    j["terminal_control_std"] = e.stats.control.std;
    j["cumulative_loss"] = e.cost.mean;
    j["cumulative_loss_std_error"] = e.cost.std_error;
    j["rse"] = e.rse ? nlohmann::ordered_json(*e.rse) : nlohmann::ordered_json(nullptr);
    j["rse_conventional"] =
        e.rse_conventional ? nlohmann::ordered_json(*e.rse_conventional) : nlohmann::ordered_json(nullptr);
    write(out / "eval.json", j);
    std::cout << j.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Deep fictitious play for symmetric stochastic differential games"};
  app.require_subcommand(1);
  Common oracle_opts, train_opts, eval_opts, compare_opts;
  std::string checkpoint;
  auto* oracle = app.add_subcommand("oracle", "Check the analytic solution and the FBSDE discretisation");
  add_common(oracle, oracle_opts, false);
  auto* train = app.add_subcommand("train", "Run fictitious play for every seed");
  add_common(train, train_opts, false);
  auto* eval = app.add_subcommand("eval", "Closed-loop statistics of a checkpoint on a large batch");
  add_common(eval, eval_opts, false);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default: final stage)");
  auto* compare = app.add_subcommand("compare", "Train two configs and report per-stage differences");
  add_common(compare, compare_opts, true);
  CLI11_PARSE(app, argc, argv);

  try {
    const Common& o = oracle->parsed() ? oracle_opts : train->parsed() ? train_opts
                                                     : eval->parsed()  ? eval_opts
                                                                       : compare_opts;
    if (o.configs.size() + o.presets.size() > (compare->parsed() ? 2u : 1u))
      throw ConfigError("too many --config/--preset arguments");
    const auto configs = resolve(o);
    if (compare->parsed() && configs.size() != 2) throw ConfigError("compare needs two configs");
    if (o.dry_run) {
      for (const auto& c : configs) std::cout << to_json(c).dump(2) << "\n";
      return 0;
    }
    if (oracle->parsed()) return cmd_oracle(configs[0]);
    if (train->parsed()) return cmd_train(configs[0]);
    if (eval->parsed()) return cmd_eval(configs[0], checkpoint);
    const fs::path out = compare_opts.out.empty() ? fs::path("runs/compare") : fs::path(compare_opts.out);
    std::cout << run_compare(configs[0], configs[1], out).dump(2) << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
