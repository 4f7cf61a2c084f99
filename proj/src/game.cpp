#include "sdfp/game.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sdfp {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("game spec: " + what);
}

// 1 - 1/N^2 and 1 - 1/N.
double kappa2(const GameSpec& s) { return 1.0 - 1.0 / static_cast<double>(s.n * s.n); }
double kappa1(const GameSpec& s) { return 1.0 - 1.0 / static_cast<double>(s.n); }

double eta_rhs(const GameSpec& s, double eta) {
  return 2.0 * (s.a + s.q) * eta + kappa2(s) * eta * eta - (s.eps - s.q * s.q);
}

}  // namespace

void GameSpec::validate(bool analytic) const {
  require(n >= 1, "N must be at least 1");
  require(std::isfinite(sigma) && sigma >= 0.0, "sigma must be finite and non-negative");
  require(std::isfinite(T) && T > 0.0, "T must be positive");
  require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
  require(std::isfinite(a) && std::isfinite(q) && std::isfinite(eps) && std::isfinite(c), "constants must be finite");
  if (analytic) {
    require(eps >= q * q, "eps >= q^2 is required for the analytic solution");
    require(drift == DriftKind::linear, "the analytic solution needs linear drift");
  }
}

double SimGrid::time(std::size_t k, double horizon) const {
  // Exact at k = steps.
  return k == steps ? horizon : horizon * static_cast<double>(k) / static_cast<double>(steps);
}

void SimGrid::validate() const {
  if (steps < 1) throw std::invalid_argument("grid: steps must be at least 1");
  if (batch < 1) throw std::invalid_argument("grid: batch must be at least 1");
}

Tensor BrownianBatch::common_at(std::size_t k) const {
  std::vector<double> v(batch);
  for (std::size_t b = 0; b < batch; ++b) v[b] = common[b * steps + k];
  return Tensor({batch}, std::move(v));
}

Tensor BrownianBatch::idio_at(std::size_t k) const {
  std::vector<double> v(batch * agents);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(idio.begin() + static_cast<std::ptrdiff_t>((b * steps + k) * agents), agents,
                v.begin() + static_cast<std::ptrdiff_t>(b * agents));
  return Tensor({batch, agents}, std::move(v));
}

BrownianBatch sample_brownian(std::size_t batch, std::size_t steps, std::size_t agents, double dt,
                              std::mt19937_64& rng) {
  BrownianBatch w{batch, steps, agents, dt, std::vector<double>(batch * steps),
                  std::vector<double>(batch * steps * agents)};
  std::normal_distribution<double> normal(0.0, std::sqrt(dt));
  for (auto& v : w.common) v = normal(rng);
  for (auto& v : w.idio) v = normal(rng);
  return w;
}

BrownianBatch coarsen(const BrownianBatch& fine) {
  if (fine.steps % 2 != 0) throw std::invalid_argument("coarsen: step count must be even");
  BrownianBatch w{fine.batch, fine.steps / 2, fine.agents, 2.0 * fine.dt, {}, {}};
  w.common.resize(w.batch * w.steps);
  w.idio.resize(w.batch * w.steps * w.agents);
  for (std::size_t b = 0; b < w.batch; ++b)
    for (std::size_t k = 0; k < w.steps; ++k) {
      w.common[b * w.steps + k] = fine.common[b * fine.steps + 2 * k] + fine.common[b * fine.steps + 2 * k + 1];
      for (std::size_t i = 0; i < w.agents; ++i)
        w.idio[(b * w.steps + k) * w.agents + i] = fine.idio[(b * fine.steps + 2 * k) * w.agents + i] +
                                                   fine.idio[(b * fine.steps + 2 * k + 1) * w.agents + i];
    }
  return w;
}

Tensor sample_initial_states(const GameSpec& spec, std::size_t batch, double delta0, std::mt19937_64& rng) {
  if (!(delta0 >= 0.0)) throw std::invalid_argument("sample_initial_states: delta0 must be non-negative");
  std::vector<double> v(batch * spec.n, 0.0);
  if (delta0 > 0.0) {
    std::uniform_real_distribution<double> u(-delta0, delta0);
    for (auto& x : v) x = u(rng);
  }
  return Tensor({batch, spec.n}, std::move(v));
}

double estimate_delta0(const GameSpec& spec, std::size_t steps, std::size_t batch, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const double dt = spec.T / static_cast<double>(steps);
  const BrownianBatch w = sample_brownian(batch, steps, spec.n, dt, rng);
  Tensor x = Tensor::zeros({batch, spec.n});
  const Tensor zero = Tensor::zeros({batch, spec.n});
  std::vector<double> stds{0.0};
  for (std::size_t k = 0; k < steps; ++k) {
    x = add(add(x, scale(drift(spec, x, zero), dt)), diffusion_increment(spec, w.common_at(k), w.idio_at(k)));
    double m = 0.0, m2 = 0.0;
    for (double v : x.data()) m += v;
    m /= static_cast<double>(x.size());
    for (double v : x.data()) m2 += (v - m) * (v - m);
    stds.push_back(std::sqrt(m2 / static_cast<double>(x.size())));
  }
  double area = 0.0;
  for (std::size_t k = 0; k < steps; ++k) area += 0.5 * (stds[k] + stds[k + 1]) * dt;
  return area / spec.T;
}

Tensor mean_field(const Tensor& states) {
  return broadcast_to(mean_over_axis(states, 1, true), states.shape());
}

Tensor deviation(const Tensor& states) { return sub(mean_over_axis(states, 1, true), states); }

Tensor deviation(const Tensor& states, std::size_t agent) {
  if (agent >= states.dim(1))
    throw ShapeError("deviation: agent " + std::to_string(agent) + " out of range for " + to_string(states.shape()));
  const Tensor d = deviation(states);
  return reshape(slice(d, 1, agent, 1), {states.dim(0)});
}

Tensor drift(const GameSpec& spec, const Tensor& states, const Tensor& controls) {
  const Tensor d = deviation(states);
  const Tensor pull = spec.drift == DriftKind::linear ? scale(d, spec.a) : scale(mul(mul(d, d), d), spec.a);
  return add(pull, controls);
}

Tensor diffusion_increment(const GameSpec& spec, const Tensor& common, const Tensor& idio) {
  if (common.rank() != 1 || idio.rank() != 2 || common.dim(0) != idio.dim(0))
    throw ShapeError("diffusion_increment: expected [B] and [B x N], got " + to_string(common.shape()) + " and " +
                     to_string(idio.shape()));
  const Tensor c = reshape(scale(common, spec.sigma * spec.rho), {common.dim(0), 1});
  return add(c, scale(idio, spec.sigma * std::sqrt(1.0 - spec.rho * spec.rho)));
}

Tensor running_cost(const GameSpec& spec, const Tensor& states, const Tensor& control, std::size_t agent) {
  const Tensor d = deviation(states, agent);
  return add(sub(scale(square(control), 0.5), scale(mul(control, d), spec.q)), scale(square(d), 0.5 * spec.eps));
}

Tensor terminal_cost(const GameSpec& spec, const Tensor& states, std::size_t agent) {
  return scale(square(deviation(states, agent)), 0.5 * spec.c);
}

double eta_closed_form(const GameSpec& spec, double t) {
  const double k2 = kappa2(spec);
  const double r = (spec.a + spec.q) * (spec.a + spec.q) + k2 * (spec.eps - spec.q * spec.q);
  if (r < 0.0) throw std::domain_error("eta_closed_form: R < 0 (eps < q^2)");
  const double dp = -(spec.a + spec.q) + std::sqrt(r);
  const double dm = -(spec.a + spec.q) - std::sqrt(r);
  // Numerator and denominator divided by E = exp((d+ - d-)(T - t)) >= 1.
  const double inv_e = std::exp(-(dp - dm) * (spec.T - t));
  const double num = -(spec.eps - spec.q * spec.q) * (1.0 - inv_e) - spec.c * (dp - dm * inv_e);
  const double den = (dm - dp * inv_e) - spec.c * k2 * (1.0 - inv_e);
  if (std::abs(den) < 1e-14) throw std::domain_error("eta_closed_form: singular denominator at t = " + std::to_string(t));
  return num / den;
}

EtaGrid eta_rk4_oracle(const GameSpec& spec, std::size_t points) {
  if (points < 2) throw std::invalid_argument("eta_rk4_oracle: need at least 2 points");
  EtaGrid g;
  g.t.resize(points);
  g.eta.resize(points);
  const double h = spec.T / static_cast<double>(points - 1);
  g.t[points - 1] = spec.T;
  g.eta[points - 1] = spec.c;
  double y = spec.c;
  for (std::size_t k = points - 1; k > 0; --k) {
    // Backward in time: step -h.
    const double k1 = eta_rhs(spec, y);
    const double k2 = eta_rhs(spec, y - 0.5 * h * k1);
    const double k3 = eta_rhs(spec, y - 0.5 * h * k2);
    const double k4 = eta_rhs(spec, y - h * k3);
    y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!std::isfinite(y) || std::abs(y) > 1e6)
      throw std::runtime_error("eta_rk4_oracle: unstable at node " + std::to_string(k - 1));
    g.t[k - 1] = static_cast<double>(k - 1) * h;
    g.eta[k - 1] = y;
  }
  return g;
}

std::vector<double> mu_numeric(const GameSpec& spec, const std::vector<double>& t, const std::vector<double>& eta) {
  if (t.size() != eta.size() || t.empty()) throw std::invalid_argument("mu_numeric: grid size mismatch");
  const double coef = -0.5 * spec.sigma * spec.sigma * (1.0 - spec.rho * spec.rho) * kappa1(spec);
  std::vector<double> mu(t.size(), 0.0);
  for (std::size_t k = t.size() - 1; k > 0; --k)
    mu[k - 1] = mu[k] - coef * 0.5 * (eta[k] + eta[k - 1]) * (t[k] - t[k - 1]);
  return mu;
}

RiccatiSolution::RiccatiSolution(const GameSpec& spec, std::size_t mu_points) : spec_(spec) {
  spec.validate(true);
  if (mu_points < 2) throw std::invalid_argument("RiccatiSolution: need at least 2 quadrature points");
  r_ = (spec.a + spec.q) * (spec.a + spec.q) + kappa2(spec) * (spec.eps - spec.q * spec.q);
  dp_ = -(spec.a + spec.q) + std::sqrt(r_);
  dm_ = -(spec.a + spec.q) - std::sqrt(r_);
  t_.resize(mu_points);
  std::vector<double> eta(mu_points);
  for (std::size_t k = 0; k < mu_points; ++k) {
    t_[k] = k + 1 == mu_points ? spec.T : spec.T * static_cast<double>(k) / static_cast<double>(mu_points - 1);
    eta[k] = eta_closed_form(spec, t_[k]);
  }
  mu_ = mu_numeric(spec, t_, eta);
}

double RiccatiSolution::eta(double t) const { return eta_closed_form(spec_, t); }

double RiccatiSolution::mu(double t) const {
  if (t <= t_.front()) return mu_.front();
  if (t >= t_.back()) return mu_.back();
  const double pos = t / spec_.T * static_cast<double>(t_.size() - 1);
  const auto k = std::min(static_cast<std::size_t>(pos), t_.size() - 2);
  const double w = (t - t_[k]) / (t_[k + 1] - t_[k]);
  return (1.0 - w) * mu_[k] + w * mu_[k + 1];
}

Tensor analytic_control(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states,
                        std::size_t agent) {
  return scale(deviation(states, agent), spec.q + r.eta(t) * kappa1(spec));
}

Tensor analytic_controls(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states) {
  return scale(deviation(states), spec.q + r.eta(t) * kappa1(spec));
}

Tensor analytic_value(const GameSpec&, const RiccatiSolution& r, double t, const Tensor& states,
                      std::size_t agent) {
  return add_scalar(scale(square(deviation(states, agent)), 0.5 * r.eta(t)), r.mu(t));
}

Tensor analytic_vx(const GameSpec&, const RiccatiSolution& r, double t, const Tensor& states,
                   std::size_t agent) {
  const std::size_t n = states.dim(1);
  std::vector<double> coef(n, 1.0 / static_cast<double>(n));
  coef[agent] -= 1.0;
  const Tensor d = reshape(scale(deviation(states, agent), r.eta(t)), {states.dim(0), 1});
  return mul(d, Tensor({n}, std::move(coef)));
}

}  // namespace sdfp
