#pragma once

#include <cstddef>
#include <cstdint>

#include "sdfp/fbsde.hpp"

namespace sdfp {

// Verification checks of the linear game against its Riccati solution.

inline constexpr double kRiccatiTolerance = 1e-8;
inline constexpr double kHalvingLow = 1.5;
inline constexpr double kHalvingHigh = 3.0;
inline constexpr double kAgreementSigmas = 3.0;

struct RiccatiCheck {
  std::size_t points = 0;
  double max_error = 0.0;  // closed form vs RK4 over the grid
  double seconds = 0.0;
  bool pass() const { return max_error < kRiccatiTolerance; }
};
RiccatiCheck check_riccati(const GameSpec& spec, std::size_t points = 1000);

struct ConsistencyLevel {
  std::size_t steps = 0;
  double mean_abs_error = 0.0;  // mean |Y_T - g(X_T)|
  double mean_error = 0.0;      // mean (Y_T - g(X_T))
  double value = 0.0;           // mean of Y_0 + g(X_T) - Y_T, an estimate of V(0, x0)
  double value_std_error = 0.0;
};

/// BSDE propagated with the analytic V_x from Y_0 = V(0, x0) along paths
/// where the other agents play the analytic control. With `use_is` agent 0
/// is driven by the analytic control as well and the BSDE carries the
/// compensating term. The fine level has twice the steps of the coarse one,
/// on the same Brownian paths.
struct ConsistencyCheck {
  bool use_is = false;
  std::size_t batch = 0;
  ConsistencyLevel coarse, fine;
  double analytic_value = 0.0;  // batch mean of V(0, x0)
  double seconds = 0.0;
  double ratio() const { return coarse.mean_abs_error / fine.mean_abs_error; }
  /// Both errors exactly zero (sigma = 0) counts as a pass.
  bool pass() const {
    if (coarse.mean_abs_error == 0.0 && fine.mean_abs_error == 0.0) return true;
    return ratio() >= kHalvingLow && ratio() <= kHalvingHigh;
  }
};
ConsistencyCheck check_consistency(const GameSpec& spec, std::size_t coarse_steps, std::size_t batch,
                                   std::uint64_t seed, bool use_is, double delta0 = 0.65);

/// |a - b| within kAgreementSigmas combined standard errors, on the fine level.
bool values_agree(const ConsistencyCheck& a, const ConsistencyCheck& b);

/// Monte Carlo cost of agent 0 under analytic play at the coarse and fine
/// step counts, against the batch mean of V(0, x0). The left-endpoint bias
/// is estimated by |J_coarse - J_fine|. Simulated in chunks to bound memory.
struct CumulativeCheck {
  std::size_t batch = 0;
  double coarse = 0.0;
  double fine = 0.0;
  double fine_std_error = 0.0;
  double analytic_value = 0.0;
  double seconds = 0.0;
  double bias() const { return coarse > fine ? coarse - fine : fine - coarse; }
  double tolerance() const { return kAgreementSigmas * fine_std_error + bias(); }
  bool pass() const { return (fine > analytic_value ? fine - analytic_value : analytic_value - fine) < tolerance(); }
};
CumulativeCheck check_cumulative(const GameSpec& spec, std::size_t coarse_steps, std::size_t batch,
                                 std::uint64_t seed, double delta0 = 0.65, std::size_t chunk = 5000);

}  // namespace sdfp
