#include "sdfp/fbsde.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace sdfp {

namespace {

void check_finite(const Tensor& t, const char* what, std::size_t step) {
  const auto d = t.data();
  const std::size_t cols = t.rank() > 1 ? t.dim(1) : 1;
  for (std::size_t k = 0; k < d.size(); ++k)
    if (!std::isfinite(d[k])) throw NonFiniteError(what, step, k / cols);
}

// Column `col` of a [B x N] tensor as [B].
Tensor column(const Tensor& x, std::size_t col) {
  return reshape(slice(x, 1, col, 1), {x.dim(0)});
}

// Agent-major [N*B] to [B x N].
Tensor agent_major_to_rows(const Tensor& v, std::size_t batch, std::size_t n) {
  const auto d = v.data();
  std::vector<double> out(batch * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < batch; ++b) out[b * n + i] = d[i * batch + b];
  return Tensor({batch, n}, std::move(out));
}

}  // namespace

Tensor control_from_vx(const GameSpec& spec, const Tensor& states, const Tensor& own_vx, double u_max,
                       std::size_t* clamped) {
  const Tensor dev = deviation(states);
  if (own_vx.shape() != dev.shape())
    throw ShapeError("control_from_vx: gradient " + to_string(own_vx.shape()) + " vs states " +
                     to_string(states.shape()));
  const auto d = dev.data();
  const auto v = own_vx.data();
  std::vector<double> u(d.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double raw = spec.q * d[k] - v[k];
    u[k] = std::clamp(raw, -u_max, u_max);
    if (clamped && u[k] != raw) ++*clamped;
  }
  return Tensor(dev.shape(), std::move(u));
}

NetPolicy::NetPolicy(AgentNet net, const GameSpec& spec, OpponentScheme scheme, double u_max)
    : net_(std::move(net)), spec_(spec), scheme_(scheme), u_max_(u_max) {}

void NetPolicy::begin(std::size_t batch) {
  const std::size_t n = net_.config().agents;
  if (scheme_ == OpponentScheme::batch) {
    joint_ = net_.start(batch * n);
  } else {
    single_.clear();
    for (std::size_t i = 0; i < n; ++i) single_.push_back(net_.start(batch));
  }
}

Tensor NetPolicy::controls(const Tensor& states, std::size_t step, double) {
  const std::size_t batch = states.dim(0), n = states.dim(1);
  const Tensor x = states.detached();
  Tensor own;
  if (scheme_ == OpponentScheme::batch) {
    std::vector<std::size_t> agents(n);
    std::iota(agents.begin(), agents.end(), 0);
    own = net_.own_gradient(x, agents, step, joint_, Mode::eval);
  } else {
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t one[] = {i};
      parts.push_back(net_.own_gradient(x, one, step, single_[i], Mode::eval));
    }
    own = concat(parts, 0);
  }
  return control_from_vx(spec_, x, agent_major_to_rows(stop_gradient(own), batch, n), u_max_, &clamped_);
}

Tensor AnalyticPolicy::controls(const Tensor& states, std::size_t, double t) {
  return analytic_controls(spec_, riccati_, t, states);
}

Tensor fsde_step(const GameSpec& spec, const Tensor& states, const Tensor& controls, const Tensor& common,
                 const Tensor& idio, double dt, std::size_t step) {
  const Tensor next = states + drift(spec, states, controls) * dt + diffusion_increment(spec, common, idio);
  check_finite(next, "non-finite state", step);
  return next;
}

Tensor bsde_step(const GameSpec& spec, const Tensor& y, const Tensor& states, const Tensor& vx, const Tensor& ubar,
                 bool use_is, const Tensor& common, const Tensor& idio, double dt, std::size_t step) {
  const Tensor dev = deviation(states, 0);
  const Tensor v0 = column(vx, 0);
  Tensor drive = square(dev * spec.q - v0) * 0.5 - square(dev) * (0.5 * spec.eps);
  if (use_is) drive = drive + v0 * ubar;
  const Tensor z = sum_over_axis(vx * diffusion_increment(spec, common, idio), 1);
  const Tensor next = y + drive * dt + z;
  check_finite(next, "non-finite value process", step);
  return next;
}

namespace {

ForwardPaths simulate(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise,
                      bool closed_loop, bool use_is) {
  const std::size_t batch = x0.dim(0), n = x0.dim(1);
  if (noise.batch != batch || noise.agents != n)
    throw ShapeError("simulate: noise batch " + std::to_string(noise.batch) + "x" + std::to_string(noise.agents) +
                     " vs states " + to_string(x0.shape()));
  const double dt = noise.dt;
  ForwardPaths out;
  out.states.push_back(x0.detached());
  policy.begin(batch);
  for (std::size_t k = 0; k < noise.steps; ++k) {
    const Tensor& x = out.states.back();
    const Tensor u = policy.controls(x, k, dt * static_cast<double>(k)).detached();
    out.ubar.push_back(column(u, 0));
    Tensor applied = u;
    if (!closed_loop && !use_is) {
      std::vector<double> v = u.to_vector();
      for (std::size_t b = 0; b < batch; ++b) v[b * n] = 0.0;
      applied = Tensor(u.shape(), std::move(v));
    }
    out.controls.push_back(applied);
    out.states.push_back(fsde_step(spec, x, applied, noise.common_at(k), noise.idio_at(k), dt, k));
  }
  return out;
}

}  // namespace

ForwardPaths simulate_forward(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise,
                              bool use_is) {
  return simulate(spec, policy, x0, noise, false, use_is);
}

ForwardPaths simulate_closed_loop(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise) {
  return simulate(spec, policy, x0, noise, true, true);
}

RolloutResult propagate_bsde(const GameSpec& spec, GradientSource& grad, const Tensor& y0, ForwardPaths paths,
                             const BrownianBatch& noise, bool use_is) {
  const std::size_t batch = paths.states.front().dim(0);
  if (y0.shape() != Shape{batch}) throw ShapeError("propagate_bsde: Y0 " + to_string(y0.shape()));
  RolloutResult r;
  r.y.push_back(y0);
  grad.begin(batch);
  for (std::size_t k = 0; k < noise.steps; ++k) {
    const Tensor& x = paths.states[k];
    const Tensor vx = grad.vx(x, k, noise.dt * static_cast<double>(k));
    r.y.push_back(bsde_step(spec, r.y.back(), x, vx, paths.ubar[k], use_is, noise.common_at(k), noise.idio_at(k),
                            noise.dt, k));
  }
  r.terminal_target = terminal_cost(spec, paths.states.back(), 0);
  r.loss = mean(square(r.y.back() - r.terminal_target));
  r.paths = std::move(paths);
  return r;
}

RolloutResult rollout(const GameSpec& spec, Policy& policy, GradientSource& grad, const Tensor& y0, const Tensor& x0,
                      const BrownianBatch& noise, bool use_is) {
  return propagate_bsde(spec, grad, y0, simulate_forward(spec, policy, x0, noise, use_is), noise, use_is);
}

RolloutResult training_rollout(const GameSpec& spec, AgentNet& learner, Policy& stage_policy, const Tensor& x0,
                               const BrownianBatch& noise, bool use_is) {
  const std::size_t rep[] = {0};
  const Tensor y0 = learner.initial_value(x0, rep);
  NetGradient grad(learner, Mode::train);
  return rollout(spec, stage_policy, grad, y0, x0, noise, use_is);
}

}  // namespace sdfp
