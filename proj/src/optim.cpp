#include "sdfp/optim.hpp"

#include <cmath>
#include <string>

namespace sdfp {

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), 0.0);
      state.second.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter set");

  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.first[i].size() != params[i].size())
      throw ShapeError("adam_step: gradient " + to_string(grads[i].shape()) + " does not match parameter " +
                       to_string(params[i].shape()));
    auto& m = state.first[i];
    auto& v = state.second[i];
    const auto g = grads[i].data();
    std::vector<double> w = params[i].to_vector();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      w[k] -= o.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + o.epsilon);
    }
    params[i] = Tensor(params[i].shape(), std::move(w));
  }
}

}  // namespace sdfp
