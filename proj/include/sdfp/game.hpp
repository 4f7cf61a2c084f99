#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sdfp/tensor.hpp"

namespace sdfp {

enum class DriftKind { linear, superlinear };

/// Constants of the symmetric inter-bank game. Defaults are the 10-bank
/// linear configuration.
struct GameSpec {
  std::size_t n = 10;
  double a = 0.1;
  double q = 0.1;
  double eps = 0.5;
  double c = 0.5;
  double rho = 0.2;
  double sigma = 1.0;
  double T = 1.0;
  DriftKind drift = DriftKind::linear;

  /// Throws std::invalid_argument naming the offending field. `analytic`
  /// additionally requires eps >= q^2 and linear drift.
  void validate(bool analytic = false) const;
};

struct SimGrid {
  std::size_t steps = 40;
  std::size_t batch = 64;
  std::uint64_t seed = 0;

  double dt(double horizon) const { return horizon / static_cast<double>(steps); }
  double time(std::size_t k, double horizon) const;
  void validate() const;
};

/// Increments with variance dt: common [B x NT], idiosyncratic [B x NT x N].
struct BrownianBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::size_t agents = 0;
  double dt = 0.0;
  std::vector<double> common;
  std::vector<double> idio;

  /// Common increments of step k, [B].
  Tensor common_at(std::size_t k) const;
  /// Idiosyncratic increments of step k, [B x N].
  Tensor idio_at(std::size_t k) const;
};

BrownianBatch sample_brownian(std::size_t batch, std::size_t steps, std::size_t agents, double dt,
                              std::mt19937_64& rng);
/// Sums consecutive pairs of increments: the same paths on a grid with half
/// as many steps. Requires an even step count.
BrownianBatch coarsen(const BrownianBatch& fine);

/// i.i.d. uniform on [-delta0, delta0], shape [B x N].
Tensor sample_initial_states(const GameSpec& spec, std::size_t batch, double delta0, std::mt19937_64& rng);

/// Uncontrolled pilot simulation from X0 = 0: time average (trapezoid) of
/// the cross-sectional standard deviation of X_i(t).
double estimate_delta0(const GameSpec& spec, std::size_t steps, std::size_t batch = 10000,
                       std::uint64_t seed = 1);

/// Row means repeated across columns, [B x N].
Tensor mean_field(const Tensor& states);
/// X̄ - X_i for every agent, [B x N].
Tensor deviation(const Tensor& states);
/// X̄ - X_i for one agent, [B].
Tensor deviation(const Tensor& states, std::size_t agent);

Tensor drift(const GameSpec& spec, const Tensor& states, const Tensor& controls);
/// sigma (rho dW0 + sqrt(1 - rho^2) dW^i), [B x N].
Tensor diffusion_increment(const GameSpec& spec, const Tensor& common, const Tensor& idio);
/// 1/2 U^2 - q U D + eps/2 D^2 with D = X̄ - X_i, [B].
Tensor running_cost(const GameSpec& spec, const Tensor& states, const Tensor& control, std::size_t agent);
/// c/2 D^2, [B].
Tensor terminal_cost(const GameSpec& spec, const Tensor& states, std::size_t agent);

/// Closed-form eta(t), evaluated with the dominant exponential factored out.
/// Throws std::domain_error when the denominator is numerically singular.
double eta_closed_form(const GameSpec& spec, double t);

struct EtaGrid {
  std::vector<double> t;
  std::vector<double> eta;
};
/// Classic RK4 integrated backward from eta(T) = c on `points` nodes.
EtaGrid eta_rk4_oracle(const GameSpec& spec, std::size_t points);

/// eta(t), mu(t) of the quadratic value ansatz. mu is integrated backward by
/// the trapezoid rule and linearly interpolated between nodes.
class RiccatiSolution {
 public:
  RiccatiSolution() = default;
  RiccatiSolution(const GameSpec& spec, std::size_t mu_points);

  double eta(double t) const;
  double mu(double t) const;
  double R() const { return r_; }
  double delta_plus() const { return dp_; }
  double delta_minus() const { return dm_; }
  const std::vector<double>& mu_grid() const { return mu_; }

 private:
  GameSpec spec_;
  double r_ = 0.0, dp_ = 0.0, dm_ = 0.0;
  std::vector<double> t_;
  std::vector<double> mu_;
};

/// mu on the nodes of `t`, trapezoid rule backward from mu(T) = 0.
std::vector<double> mu_numeric(const GameSpec& spec, const std::vector<double>& t, const std::vector<double>& eta);

/// [q + eta (1 - 1/N)] D, [B].
Tensor analytic_control(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states,
                        std::size_t agent);
/// eta/2 D^2 + mu, [B].
Tensor analytic_value(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states,
                      std::size_t agent);
/// V_{x_j} = eta D (1/N - [j = i]), [B x N].
Tensor analytic_vx(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states,
                   std::size_t agent);
/// Analytic control of every agent, [B x N].
Tensor analytic_controls(const GameSpec& spec, const RiccatiSolution& r, double t, const Tensor& states);

}  // namespace sdfp
