#include "sdfp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace sdfp {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

struct SquaredSums {
  double err = 0.0, pred_spread = 0.0, true_spread = 0.0;
};

SquaredSums squared_sums(const Tensor& predicted, const Tensor& truth, const Tensor& truth_mean, const char* op) {
  require_same(predicted, truth, op);
  if (truth.rank() != 2 || truth_mean.shape() != Shape{truth.dim(1)})
    throw ShapeError(std::string(op) + ": expected [B x N] values and [N] means");
  const std::size_t n = truth.dim(1);
  const auto p = predicted.data();
  const auto y = truth.data();
  const auto m = truth_mean.data();
  SquaredSums s;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double ybar = m[k % n];
    s.err += (p[k] - y[k]) * (p[k] - y[k]);
    s.pred_spread += (p[k] - ybar) * (p[k] - ybar);
    s.true_spread += (y[k] - ybar) * (y[k] - ybar);
  }
  return s;
}

}  // namespace

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

Tensor column_means(const Tensor& x) { return mean_over_axis(x.detached(), 0); }

double rse(const Tensor& predicted, const Tensor& truth, const Tensor& truth_mean) {
  const auto s = squared_sums(predicted, truth, truth_mean, "rse");
  if (s.pred_spread == 0.0) throw std::domain_error("rse: predictions equal the per-agent mean everywhere");
  return s.err / s.pred_spread;
}

double rse_conventional(const Tensor& predicted, const Tensor& truth, const Tensor& truth_mean) {
  const auto s = squared_sums(predicted, truth, truth_mean, "rse_conventional");
  if (s.true_spread == 0.0) throw std::domain_error("rse_conventional: analytic values are constant");
  return s.err / s.true_spread;
}

double eval_loss(const Tensor& predicted, const Tensor& target) {
  require_same(predicted, target, "eval_loss");
  const auto p = predicted.data();
  const auto y = target.data();
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) acc += (p[k] - y[k]) * (p[k] - y[k]);
  return acc / static_cast<double>(p.size());
}

Tensor path_costs(const GameSpec& spec, const ForwardPaths& paths, double dt) {
  const std::size_t batch = paths.states.front().dim(0);
  std::vector<double> total = terminal_cost(spec, paths.states.back(), 0).to_vector();
  for (std::size_t k = 0; k < paths.controls.size(); ++k) {
    const Tensor u0 = reshape(slice(paths.controls[k], 1, 0, 1), {batch});
    const Tensor cost = running_cost(spec, paths.states[k], u0, 0);
    const auto c = cost.data();
    for (std::size_t b = 0; b < batch; ++b) total[b] += c[b] * dt;
  }
  return Tensor({batch}, std::move(total));
}

CostEstimate path_cost(const GameSpec& spec, const ForwardPaths& paths, double dt) {
  const Tensor costs = path_costs(spec, paths, dt);
  const auto total = costs.data();
  const std::size_t batch = total.size();
  double m = 0.0;
  for (double v : total) m += v;
  m /= static_cast<double>(batch);
  double var = 0.0;
  for (double v : total) var += (v - m) * (v - m);
  var /= static_cast<double>(batch > 1 ? batch - 1 : 1);
  return {m, std::sqrt(var / static_cast<double>(batch))};
}

CostEstimate cumulative_loss(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise) {
  return path_cost(spec, simulate_closed_loop(spec, policy, x0, noise), noise.dt);
}

double control_error(Policy& policy, const ForwardPaths& reference, double dt) {
  const std::size_t batch = reference.states.front().dim(0);
  policy.begin(batch);
  double acc = 0.0;
  for (std::size_t k = 0; k < reference.controls.size(); ++k) {
    const Tensor u = policy.controls(reference.states[k], k, dt * static_cast<double>(k));
    require_same(u, reference.controls[k], "control_error");
    const auto a = u.data();
    const auto b = reference.controls[k].data();
    double step = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) step += (a[j] - b[j]) * (a[j] - b[j]);
    acc += step / static_cast<double>(a.size()) * dt;
  }
  return acc;
}

double convergence_ratio(double next_error, double prev_error) {
  if (prev_error == 0.0) return kConvergedSentinel;
  return next_error / prev_error;
}

Histogram terminal_distribution(const Tensor& values, std::size_t bins) {
  if (bins == 0) throw ContractError("terminal_distribution: zero bins");
  const auto v = values.data();
  Histogram h;
  h.counts.assign(bins, 0);
  if (v.empty()) return h;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  h.mean = m;
  h.std = std::sqrt(var / static_cast<double>(v.size()));
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  h.lo = *lo;
  h.hi = *hi;
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double x : v) {
    std::size_t b = bins / 2;
    if (width > 0.0) b = std::min(bins - 1, static_cast<std::size_t>((x - h.lo) / width));
    ++h.counts[b];
  }
  return h;
}

TerminalStats terminal_stats(const ForwardPaths& paths) {
  const std::size_t batch = paths.states.front().dim(0);
  TerminalStats s;
  s.state = terminal_distribution(reshape(slice(paths.states.back(), 1, 0, 1), {batch}));
  if (!paths.controls.empty())
    s.control = terminal_distribution(reshape(slice(paths.controls.back(), 1, 0, 1), {batch}));
  return s;
}

std::string metrics_csv_row(const MetricsRecord& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  return std::to_string(r.stage) + "," + format_number(r.eval_loss) + "," + opt(r.rse) + "," + opt(r.rse_conventional) + "," +
         format_number(r.cumulative_loss) + "," + opt(r.convergence_ratio) + "," + format_number(r.wall_seconds);
}

std::string histogram_csv(const TerminalStats& stats) {
  std::string out;
  const auto emit = [&](const char* name, const Histogram& h) {
    const std::size_t bins = h.counts.size();
    const double width = bins ? (h.hi - h.lo) / static_cast<double>(bins) : 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
      const double left = h.lo + width * static_cast<double>(b);
      const double right = b + 1 == bins ? h.hi : h.lo + width * static_cast<double>(b + 1);
      out += std::string(name) + "," + format_number(left) + "," + format_number(right) + "," + std::to_string(h.counts[b]) + "\n";
    }
  };
  emit("state", stats.state);
  emit("control", stats.control);
  return out;
}

}  // namespace sdfp
