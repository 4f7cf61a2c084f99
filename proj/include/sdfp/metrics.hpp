#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sdfp/fbsde.hpp"

namespace sdfp {

/// Per-stage evaluation record. Metrics that need the analytic oracle are
/// empty for games without one.
struct MetricsRecord {
  std::size_t stage = 0;
  double train_loss = 0.0;  // mean over the stage's gradient steps
  double eval_loss = 0.0;
  std::optional<double> rse;
  std::optional<double> rse_conventional;
  double cumulative_loss = 0.0;
  std::optional<double> convergence_ratio;
  double wall_seconds = 0.0;
  double terminal_state_mean = 0.0;
  double terminal_state_std = 0.0;
  double terminal_control_mean = 0.0;
  double terminal_control_std = 0.0;
  std::size_t clamped = 0;
  bool aborted = false;
};

/// Per-agent batch means of a [B x N] tensor, [N].
Tensor column_means(const Tensor& x);

/// sum (Ŷ - Y)^2 / sum (Ŷ - Ȳ)^2 over samples and agents; Ȳ is per agent.
/// `predicted`, `truth` are [B x N], `truth_mean` [N]. Throws
/// std::domain_error on a zero denominator.
double rse(const Tensor& predicted, const Tensor& truth, const Tensor& truth_mean);
/// Same numerator over sum (Y - Ȳ)^2.
double rse_conventional(const Tensor& predicted, const Tensor& truth, const Tensor& truth_mean);

/// (1/B) sum (Ŷ_T - Y_T)^2.
double eval_loss(const Tensor& predicted, const Tensor& target);

struct CostEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Per-sample g(X_T) + sum_t C(X_t, U_t) dt for agent 0, [B].
Tensor path_costs(const GameSpec& spec, const ForwardPaths& paths, double dt);
/// g(X_T) + sum_t C(X_t, U_t) dt for agent 0 along closed-loop paths
/// (left-endpoint rule), averaged over the batch.
CostEstimate path_cost(const GameSpec& spec, const ForwardPaths& paths, double dt);
/// Monte Carlo cost of agent 0 when every agent plays `policy`.
CostEstimate cumulative_loss(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise);

/// sum_t E|u_t - u*_t|^2 dt along fixed reference paths; the expectation
/// averages over samples and agents. `policy` is queried on the recorded
/// states, `reference` holds the analytic controls on the same states.
double control_error(Policy& policy, const ForwardPaths& reference, double dt);

/// Returned by convergence_ratio when the previous error is exactly zero.
inline constexpr double kConvergedSentinel = 0.0;
/// error(m+1) / error(m).
double convergence_ratio(double next_error, double prev_error);

struct Histogram {
  double mean = 0.0;
  double std = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

/// Moments and a fixed-bin histogram over [min, max] of the data. A point
/// mass lands entirely in the middle bin.
Histogram terminal_distribution(const Tensor& values, std::size_t bins = 101);

/// Closed-loop statistics of agent 0: X(T) and the control at the final
/// decision step.
struct TerminalStats {
  Histogram state;
  Histogram control;
};
TerminalStats terminal_stats(const ForwardPaths& paths);

inline constexpr const char* kMetricsHeader =
    "stage,eval_loss,rse,rse_conventional,cumulative_loss,convergence_ratio,wall_seconds";
inline constexpr const char* kHistogramHeader = "variable,bin_left,bin_right,count";

/// 17 significant digits, enough to round-trip a double.
std::string format_number(double v);
/// One metrics.csv row; empty fields for absent optional values.
std::string metrics_csv_row(const MetricsRecord& r);
/// terminal_hist.csv rows for the state and control histograms.
std::string histogram_csv(const TerminalStats& stats);

}  // namespace sdfp
