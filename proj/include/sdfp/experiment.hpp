#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdfp/oracle.hpp"
#include "sdfp/train.hpp"

namespace sdfp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One experiment: game, grid, training and output settings. Serialised as a
/// single JSON document; every key has an explicit default and unknown keys
/// are rejected. grid.seed is ignored in favour of `seeds`.
struct ExperimentConfig {
  std::string preset;
  GameSpec game;
  SimGrid grid;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "runs/default";
  /// eval subcommand: closed-loop batch for terminal statistics.
  std::size_t terminal_batch = 50000;
  /// Paths written to trajectories.csv.
  std::size_t trajectories = 8;
  /// oracle subcommand batches.
  std::size_t consistency_batch = 4096;
  std::size_t cumulative_batch = 50000;

  void validate() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Searches $SDFP_PRESET_DIR, then the presets/ directory of the source tree.
ExperimentConfig load_preset(const std::string& name);
/// Applies `key=value` with a dotted key (train.lr=1e-4). The value is read
/// as JSON when it parses, else as a string.
ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment);

/// Closed-loop statistics of a trained network on a large fresh batch,
/// simulated in chunks.
struct TerminalEvaluation {
  std::size_t batch = 0;
  TerminalStats stats;
  CostEstimate cost;
  std::optional<double> rse;
  std::optional<double> rse_conventional;
};
TerminalEvaluation evaluate_terminal(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config,
                                     const AgentNet& net, std::size_t batch, std::uint64_t seed,
                                     std::size_t chunk_rows = 10000);

/// Mean of a metric over the last `last` stages, skipping absent values.
std::optional<double> tail_mean(const std::vector<MetricsRecord>& stages, double MetricsRecord::*field,
                                std::size_t last = 10);
std::optional<double> tail_mean(const std::vector<MetricsRecord>& stages,
                                std::optional<double> MetricsRecord::*field, std::size_t last = 10);

inline constexpr const char* kTrajectoryHeader = "path,sample,agent,t,state,control,state_analytic,control_analytic";

struct SeedRun {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  TrainResult result;
};

/// Trains one seed and writes metrics.csv (appended per stage),
/// checkpoints/, terminal_hist.csv, trajectories.csv and summary.json into
/// `dir`.
SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir);
/// All seeds under c.out/seed_<s>, then c.out/summary.json and config.json.
std::vector<SeedRun> run_train(const ExperimentConfig& c);
nlohmann::ordered_json summarize(const ExperimentConfig& c, const std::vector<SeedRun>& runs);

/// The oracle suite; `report` receives the JSON document.
bool run_oracle(const ExperimentConfig& c, nlohmann::ordered_json& report);

/// Rejects pairs that differ in game or grid.
void check_comparable(const ExperimentConfig& a, const ExperimentConfig& b);
/// Runs both configs under c.out/a and c.out/b and writes compare.csv and
/// compare.json.
nlohmann::ordered_json run_compare(const ExperimentConfig& a, const ExperimentConfig& b,
                                   const std::filesystem::path& out);

inline constexpr const char* kCompareHeader =
    "stage,a_eval_loss,b_eval_loss,a_rse,b_rse,a_cumulative_loss,b_cumulative_loss";

}  // namespace sdfp
