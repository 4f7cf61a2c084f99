#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sdfp/tensor.hpp"

namespace sdfp {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter moment accumulators for Adam. Moments are created lazily on
/// the first step with the shapes of the parameters they track.
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

/// One bias-corrected Adam update; `params[i]` is replaced by its updated
/// value. Throws ShapeError when a gradient does not match its parameter.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace sdfp
