#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sdfp/fbsde.hpp"
#include "sdfp/metrics.hpp"
#include "sdfp/optim.hpp"

namespace sdfp {

/// When fresh (x0, noise) are drawn: every gradient step, or once per stage.
enum class Resample { iteration, stage };

/// Batch size, horizon steps and seed come from the SimGrid.
struct TrainConfig {
  std::size_t stages = 30;
  std::size_t iterations = 100;
  Backbone backbone = Backbone::lstm;
  bool use_is = true;
  bool use_il = true;
  OpponentScheme scheme = OpponentScheme::batch;
  Resample resample = Resample::iteration;
  double lr = 1e-3;
  double u_max = 1e3;
  double delta0 = 0.65;
  std::size_t eval_batch = 256;
  /// Layer sizes; agents, steps, backbone and use_il are overwritten.
  NetConfig net;

  void validate() const;
  NetConfig net_config(std::size_t agents, std::size_t steps) const;
};

TrainConfig baseline_preset();
TrainConfig sdfp_preset();

/// Fixed evaluation data for one run. Analytic fields are filled only when
/// the game has the Riccati oracle.
struct EvalSet {
  Tensor x0;
  BrownianBatch noise;
  std::optional<RiccatiSolution> riccati;
  Tensor y_true;       // analytic V(0, x0) per agent, [B x N]
  ForwardPaths analytic;  // closed-loop analytic play on the evaluation noise
};

EvalSet make_eval_set(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config);

struct TrainHooks {
  /// Called after each stage with the trained network.
  std::function<void(const MetricsRecord&, AgentNet&)> on_stage;
  /// Writes stage_<m>.ckpt here when non-empty.
  std::string checkpoint_dir;
  /// Off: only training losses are recorded.
  bool evaluate = true;
  /// Replaces the freshly initialised network.
  std::optional<AgentNet> initial_net;
};

struct TrainResult {
  AgentNet net;
  std::vector<MetricsRecord> stages;
  std::vector<double> losses;  // every gradient step
  std::size_t clamped = 0;
  bool aborted = false;
  std::string failure;
};

/// Evaluation of `net` after a stage trained against `stage_policy`.
/// `prev_error` carries the control error of the previous stage for the
/// convergence ratio and is updated.
MetricsRecord evaluate_stage(const GameSpec& spec, const TrainConfig& config, AgentNet& net, AgentNet& stage_policy,
                             const EvalSet& eval, std::optional<double>& prev_error, bool use_is);

TrainResult fictitious_play_train(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config,
                                  const TrainHooks& hooks = {});

}  // namespace sdfp
