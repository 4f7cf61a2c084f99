#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdfp/agent_net.hpp"
#include "sdfp/game.hpp"

namespace sdfp {

enum class OpponentScheme { batch, iterative };

/// Raised by the Euler steps on NaN/Inf; carries the first bad location.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::size_t step, std::size_t sample)
      : std::runtime_error(what + " at step " + std::to_string(step) + ", sample " + std::to_string(sample)),
        step_(step),
        sample_(sample) {}
  std::size_t step() const { return step_; }
  std::size_t sample() const { return sample_; }

 private:
  std::size_t step_, sample_;
};

/// Feedback controls of all agents along a rollout. Stateful policies (LSTM)
/// are reset by begin().
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin(std::size_t batch) = 0;
  /// Controls of every agent at step k, [B x N]. Never tracked.
  virtual Tensor controls(const Tensor& states, std::size_t step, double t) = 0;
};

/// V_x of the representative agent (index 0) along a rollout, [B x N].
class GradientSource {
 public:
  virtual ~GradientSource() = default;
  virtual void begin(std::size_t batch) = 0;
  virtual Tensor vx(const Tensor& states, std::size_t step, double t) = 0;
};

/// U_i = q (X̄ - X_i) - V_{x_i}, clamped to |U| <= u_max. `clamped`, when
/// given, is incremented per clamped entry.
Tensor control_from_vx(const GameSpec& spec, const Tensor& states, const Tensor& own_vx, double u_max,
                       std::size_t* clamped = nullptr);

/// Frozen network playing every agent through permuted views.
class NetPolicy : public Policy {
 public:
  NetPolicy(AgentNet net, const GameSpec& spec, OpponentScheme scheme, double u_max);
  void begin(std::size_t batch) override;
  Tensor controls(const Tensor& states, std::size_t step, double t) override;
  std::size_t clamped() const { return clamped_; }
  AgentNet& net() { return net_; }

 private:
  AgentNet net_;
  GameSpec spec_;
  OpponentScheme scheme_;
  double u_max_;
  Session joint_;
  std::vector<Session> single_;
  std::size_t clamped_ = 0;
};

class AnalyticPolicy : public Policy {
 public:
  AnalyticPolicy(const GameSpec& spec, const RiccatiSolution& riccati) : spec_(spec), riccati_(riccati) {}
  void begin(std::size_t) override {}
  Tensor controls(const Tensor& states, std::size_t step, double t) override;

 private:
  GameSpec spec_;
  RiccatiSolution riccati_;
};

class ZeroPolicy : public Policy {
 public:
  void begin(std::size_t) override {}
  Tensor controls(const Tensor& states, std::size_t, double) override { return Tensor::zeros(states.shape()); }
};

/// Trainable network as the representative agent's V_x.
class NetGradient : public GradientSource {
 public:
  NetGradient(AgentNet& net, Mode mode) : net_(net), mode_(mode) {}
  void begin(std::size_t batch) override { session_ = net_.start(batch); }
  Tensor vx(const Tensor& states, std::size_t step, double) override {
    return net_.full_gradient(states, 0, step, session_, mode_);
  }

 private:
  AgentNet& net_;
  Mode mode_;
  Session session_;
};

class AnalyticGradient : public GradientSource {
 public:
  AnalyticGradient(const GameSpec& spec, const RiccatiSolution& riccati) : spec_(spec), riccati_(riccati) {}
  void begin(std::size_t) override {}
  Tensor vx(const Tensor& states, std::size_t, double t) override { return analytic_vx(spec_, riccati_, t, states, 0); }

 private:
  GameSpec spec_;
  RiccatiSolution riccati_;
};

/// X_{t+1} = X_t + drift(X_t, U) dt + diffusion increment.
Tensor fsde_step(const GameSpec& spec, const Tensor& states, const Tensor& controls, const Tensor& common,
                 const Tensor& idio, double dt, std::size_t step);

/// Y_{t+1} = Y_t + (-h + use_is V_{x_0} Ū) dt + sum_j V_{x_j} sigma (rho dW0 + sqrt(1-rho^2) dW^j),
/// h = eps/2 D^2 - 1/2 (q D - V_{x_0})^2 for the representative agent 0.
Tensor bsde_step(const GameSpec& spec, const Tensor& y, const Tensor& states, const Tensor& vx, const Tensor& ubar,
                 bool use_is, const Tensor& common, const Tensor& idio, double dt, std::size_t step);

/// Forward paths under a policy profile. Agents 1..N-1 play the policy;
/// agent 0 applies Ū (the policy's own control) when `use_is`, else zero.
struct ForwardPaths {
  std::vector<Tensor> states;    // NT+1 of [B x N]
  std::vector<Tensor> controls;  // NT of [B x N], as applied
  std::vector<Tensor> ubar;      // NT of [B], policy control of agent 0
};
ForwardPaths simulate_forward(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise,
                              bool use_is);

/// All agents apply the policy (closed loop), no IS distinction.
ForwardPaths simulate_closed_loop(const GameSpec& spec, Policy& policy, const Tensor& x0, const BrownianBatch& noise);

struct RolloutResult {
  ForwardPaths paths;
  std::vector<Tensor> y;  // NT+1 of [B]
  Tensor terminal_target;  // g(X_T) for agent 0, [B]
  Tensor loss;             // mean (Y_T - g)^2
};

/// Propagates the BSDE for agent 0 along given forward paths.
RolloutResult propagate_bsde(const GameSpec& spec, GradientSource& grad, const Tensor& y0, ForwardPaths paths,
                             const BrownianBatch& noise, bool use_is);

/// Full rollout: forward paths from `policy`, BSDE from `grad`, Y_0 from `y0`.
RolloutResult rollout(const GameSpec& spec, Policy& policy, GradientSource& grad, const Tensor& y0, const Tensor& x0,
                      const BrownianBatch& noise, bool use_is);

/// One training step's loss on the tape: learner (tracked params) against a
/// frozen stage policy. Returns the rollout; the caller runs backward.
RolloutResult training_rollout(const GameSpec& spec, AgentNet& learner, Policy& stage_policy, const Tensor& x0,
                               const BrownianBatch& noise, bool use_is);

}  // namespace sdfp
