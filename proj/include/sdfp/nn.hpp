#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sdfp/tensor.hpp"

namespace sdfp {

enum class Mode { train, eval };

/// Callback used to enumerate parameters and persistent state. `trainable`
/// is false for buffers such as batch-norm running statistics.
using ParamVisitor = std::function<void(const std::string& name, Tensor& value, bool trainable)>;

/// Affine map y = x W + b, W of shape [in x out]. Glorot-uniform weights,
/// zero bias.
class Dense {
 public:
  Dense() = default;
  Dense(std::size_t in, std::size_t out, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const;
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  void visit(const std::string& prefix, const ParamVisitor& fn);

  Tensor weight;
  Tensor bias;
};

/// Batch normalization over the leading (batch) axis of a [B x F] input.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t features, double momentum = 0.9, double eps = 1e-5);

  /// Train mode normalizes with batch statistics and updates the running
  /// averages; requires B >= 2. Eval mode is a fixed affine map.
  Tensor forward(const Tensor& x, Mode mode);
  void visit(const std::string& prefix, const ParamVisitor& fn);

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

struct LstmState {
  std::vector<Tensor> h;
  std::vector<Tensor> c;
};

/// One LSTM cell update from gate pre-activations [R x 4H] (bias added
/// here), gate order i, f, g, o. Returns [R x 2H]: new h, then new c.
Tensor lstm_cell(const Tensor& pre, const Tensor& bias, const Tensor& c_prev);

/// Stacked LSTM. Gate order in the fused weight is (input, forget, cell,
/// output); each layer maps [x || h] through one [in+H x 4H] matrix.
class LstmStack {
 public:
  LstmStack() = default;
  LstmStack(std::size_t input, std::size_t hidden, std::size_t layers, std::mt19937_64& rng);

  LstmState initial_state(std::size_t rows) const;
  /// Advances every layer one step; returns the top-layer hidden state.
  Tensor step(const Tensor& x, LstmState& state) const;
  std::size_t hidden() const { return hidden_; }
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

 private:
  std::size_t hidden_ = 0;
};

/// f_IV: agent view [R x N] -> initial value [R x 1].
class InitialValueNet {
 public:
  InitialValueNet() = default;
  InitialValueNet(std::size_t inputs, std::size_t hidden, std::size_t layers, std::mt19937_64& rng);

  Tensor operator()(const Tensor& views) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);

  std::vector<Dense> layers;
};

/// Deep-sets feature extractor: phi is one dense layer 1 -> F applied to
/// each agent's state, pooled by a leave-one-out mean followed by ReLU.
class InvariantLayer {
 public:
  InvariantLayer() = default;
  InvariantLayer(std::size_t features, std::mt19937_64& rng);

  /// phi applied to every state: [B x N] -> [B x N x F].
  Tensor embed(const Tensor& states) const;
  std::size_t features() const { return phi.out_dim(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);

  Dense phi;
};

/// (X_i, X_1..X_{i-1}, X_{i+1}..X_N) for agent i.
std::vector<std::size_t> view_order(std::size_t n, std::size_t agent);

/// [B x N] -> [B x N x N]; row (b, i) is agent i's view.
Tensor build_agent_view(const Tensor& states);

/// Reference O(N^2) pooling over agent views [B x N x N]. N = 1 pools the
/// empty set to zeros.
Tensor invariant_features_naive(const InvariantLayer& layer, const Tensor& views);

/// Leave-one-out pooling from global states [B x N] using (N Fbar - F)/(N-1).
/// Never materializes an N x N x F buffer. Throws ContractError for N = 1.
Tensor invariant_features_fast(const InvariantLayer& layer, const Tensor& states);

/// Same pooling for a subset of agents, rows ordered agent-major
/// (row k*B + b is agent agents[k] in sample b). `embedded` is embed(states).
Tensor pooled_features(const Tensor& embedded, std::span<const std::size_t> agents);

/// Parameter checkpoint: 8-byte little-endian header length, JSON header
/// {"tensors":[{"name","shape","offset"}]}, then little-endian doubles.
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

}  // namespace sdfp
