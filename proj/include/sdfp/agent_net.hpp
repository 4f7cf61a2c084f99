#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdfp/nn.hpp"

namespace sdfp {

enum class Backbone { fc, lstm };

struct NetConfig {
  std::size_t agents = 10;
  std::size_t steps = 40;
  Backbone backbone = Backbone::lstm;
  bool use_il = true;
  std::size_t features = 256;
  std::size_t own_width = 64;
  std::size_t lstm_hidden = 128;
  std::size_t lstm_layers = 2;
  std::size_t fc_hidden = 64;
  std::size_t fc_layers = 3;
  std::size_t iv_hidden = 128;
  std::size_t iv_layers = 2;
};

/// Output head producing V_x for the viewing agent. With the invariant layer
/// the own coordinate comes from `own` on the backbone context and every
/// other coordinate j from a shared map of [context || phi(X_j)]; without it
/// a single dense map emits all N coordinates in view order.
struct GradientHead {
  Dense own;
  Dense other_context;
  Tensor other_feature;  // [F x 1]
  Dense view;

  void visit(const std::string& prefix, const ParamVisitor& fn, bool use_il);
};

/// V_x in global order [B x N] for `agent`. `embedded` is phi of all states
/// [B x N x F] (ignored when `use_il` is false).
Tensor agent_gradient_head(const GradientHead& head, const Tensor& context, const Tensor& embedded,
                           std::size_t agent, std::size_t n, bool use_il);

/// Recurrent state for one sequence of calls (one rollout).
struct Session {
  std::size_t rows = 0;
  LstmState lstm;
};

/// The shared symmetric network: f_IV plus the value-gradient network f_BF.
/// Rows of multi-agent calls are agent-major: row k*B + b belongs to
/// agents[k] in sample b.
class AgentNet {
 public:
  AgentNet() = default;
  AgentNet(const NetConfig& config, std::uint64_t seed);

  const NetConfig& config() const { return config_; }
  Session start(std::size_t rows) const;

  /// Initial values Y_0 for the listed agents, shape [K*B].
  Tensor initial_value(const Tensor& states, std::span<const std::size_t> agents) const;
  /// Own coordinate of V_x for the listed agents, shape [K*B]. Advances the
  /// session by one time step.
  Tensor own_gradient(const Tensor& states, std::span<const std::size_t> agents, std::size_t step,
                      Session& session, Mode mode);
  /// Full V_x of one agent in global order [B x N]. Advances the session.
  Tensor full_gradient(const Tensor& states, std::size_t agent, std::size_t step, Session& session, Mode mode);

  void visit(const ParamVisitor& fn);
  std::vector<std::pair<std::string, Tensor>> state_dict();
  /// Throws std::runtime_error on missing names or shape mismatch.
  void load_state_dict(const std::vector<std::pair<std::string, Tensor>>& tensors);
  std::size_t parameter_count();
  /// Trainable tensors in visit order.
  std::vector<Tensor> parameters();
  void set_parameters(std::span<const Tensor> values);

 private:
  Tensor backbone_input(const Tensor& states, const Tensor& embedded, std::span<const std::size_t> agents) const;
  Tensor context(const Tensor& input, std::size_t step, Session& session, Mode mode);

  NetConfig config_;
  InitialValueNet iv_;
  InvariantLayer il_;
  Dense own_encoder_;
  LstmStack lstm_;
  std::vector<std::vector<Dense>> fc_;
  std::vector<std::vector<BatchNorm>> bn_;
  GradientHead head_;
};

/// Rows of `states` gathered in agent view order, agent-major [K*B x N].
Tensor gather_views(const Tensor& states, std::span<const std::size_t> agents);

}  // namespace sdfp
