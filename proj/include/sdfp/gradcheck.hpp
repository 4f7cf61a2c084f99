#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sdfp/tensor.hpp"

namespace sdfp {

/// Scalar objective of a list of inputs. It is called with tracked inputs
/// for the reverse-mode pass and with plain inputs for finite differences.
using Objective = std::function<Tensor(std::span<const Tensor> inputs)>;

struct GradCheckOptions {
  double step = 1e-6;
  /// Check at most this many coordinates per input (0 = all), chosen with a
  /// fixed seed.
  std::size_t max_coords = 0;
  std::uint64_t seed = 7;
  /// Lower bound on the error denominator (0 = purely relative).
  double floor = 0.0;
};

struct GradCheckResult {
  /// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||) per input, over the checked
  /// coordinates.
  std::vector<double> relative_error;
  double max_relative_error = 0.0;
};

GradCheckResult check_gradients(const Objective& f, std::span<const Tensor> inputs,
                                const GradCheckOptions& options = {});

}  // namespace sdfp
