#include "sdfp/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "sdfp/metrics.hpp"

namespace sdfp {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Moments {
  double mean = 0.0, std_error = 0.0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m.mean) * (x - m.mean);
  var /= static_cast<double>(v.size() > 1 ? v.size() - 1 : 1);
  m.std_error = std::sqrt(var / static_cast<double>(v.size()));
  return m;
}

double batch_mean_value(const GameSpec& spec, const RiccatiSolution& r, const Tensor& x0) {
  const Tensor v = analytic_value(spec, r, 0.0, x0, 0);
  double m = 0.0;
  for (double x : v.data()) m += x;
  return m / static_cast<double>(v.size());
}

ConsistencyLevel level(const GameSpec& spec, const RiccatiSolution& r, const Tensor& x0, const BrownianBatch& noise,
                       bool use_is) {
  AnalyticPolicy star(spec, r);
  AnalyticGradient grad(spec, r);
  const Tensor y0 = analytic_value(spec, r, 0.0, x0, 0);
  const auto roll = rollout(spec, star, grad, y0, x0, noise, use_is);
  const auto yt = roll.y.back().data();
  const auto g = roll.terminal_target.data();
  const auto y = y0.data();
  ConsistencyLevel out;
  out.steps = noise.steps;
  std::vector<double> value(yt.size());
  for (std::size_t b = 0; b < yt.size(); ++b) {
    out.mean_abs_error += std::abs(yt[b] - g[b]);
    out.mean_error += yt[b] - g[b];
    value[b] = y[b] + g[b] - yt[b];
  }
  out.mean_abs_error /= static_cast<double>(yt.size());
  out.mean_error /= static_cast<double>(yt.size());
  const Moments m = moments(value);
  out.value = m.mean;
  out.value_std_error = m.std_error;
  return out;
}

}  // namespace

RiccatiCheck check_riccati(const GameSpec& spec, std::size_t points) {
  const auto start = Clock::now();
  RiccatiCheck c;
  c.points = points;
  const EtaGrid grid = eta_rk4_oracle(spec, points);
  for (std::size_t k = 0; k < grid.t.size(); ++k)
    c.max_error = std::max(c.max_error, std::abs(eta_closed_form(spec, grid.t[k]) - grid.eta[k]));
  c.seconds = since(start);
  return c;
}

ConsistencyCheck check_consistency(const GameSpec& spec, std::size_t coarse_steps, std::size_t batch,
                                   std::uint64_t seed, bool use_is, double delta0) {
  spec.validate(true);
  const auto start = Clock::now();
  const RiccatiSolution r(spec, 50 * coarse_steps);
  std::mt19937_64 rng(seed);
  const Tensor x0 = sample_initial_states(spec, batch, delta0, rng);
  const auto fine = sample_brownian(batch, 2 * coarse_steps, spec.n, spec.T / static_cast<double>(2 * coarse_steps), rng);
  ConsistencyCheck c;
  c.use_is = use_is;
  c.batch = batch;
  c.analytic_value = batch_mean_value(spec, r, x0);
  c.coarse = level(spec, r, x0, coarsen(fine), use_is);
  c.fine = level(spec, r, x0, fine, use_is);
  c.seconds = since(start);
  return c;
}

bool values_agree(const ConsistencyCheck& a, const ConsistencyCheck& b) {
  const double se = std::hypot(a.fine.value_std_error, b.fine.value_std_error);
  return std::abs(a.fine.value - b.fine.value) <= kAgreementSigmas * se;
}

CumulativeCheck check_cumulative(const GameSpec& spec, std::size_t coarse_steps, std::size_t batch,
                                 std::uint64_t seed, double delta0, std::size_t chunk) {
  spec.validate(true);
  const auto start = Clock::now();
  const RiccatiSolution r(spec, 50 * coarse_steps);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(seed);
  std::vector<double> coarse, fine;
  double value = 0.0;
  for (std::size_t done = 0; done < batch; done += chunk) {
    const std::size_t rows = std::min(chunk, batch - done);
    const Tensor x0 = sample_initial_states(spec, rows, delta0, rng);
    const auto noise = sample_brownian(rows, 2 * coarse_steps, spec.n, spec.T / static_cast<double>(2 * coarse_steps), rng);
    value += batch_mean_value(spec, r, x0) * static_cast<double>(rows);
    for (auto* level : {&coarse, &fine}) {
      const BrownianBatch w = level == &coarse ? coarsen(noise) : noise;
      const auto paths = simulate_closed_loop(spec, star, x0, w);
      const Tensor total = path_costs(spec, paths, w.dt);
      for (double x : total.data()) level->push_back(x);
    }
  }
  CumulativeCheck c;
  c.batch = batch;
  c.coarse = moments(coarse).mean;
  const Moments f = moments(fine);
  c.fine = f.mean;
  c.fine_std_error = f.std_error;
  c.analytic_value = value / static_cast<double>(batch);
  c.seconds = since(start);
  return c;
}

}  // namespace sdfp
