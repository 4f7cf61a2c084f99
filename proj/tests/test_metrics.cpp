#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sdfp/metrics.hpp"

using namespace sdfp;

namespace {

Tensor random_values(std::size_t batch, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::vector<double> v(batch * n);
  for (auto& x : v) x = z(rng);
  return Tensor({batch, n}, std::move(v));
}

Tensor affine(const Tensor& y, const Tensor& ybar, double k, double offset) {
  const std::size_t n = y.dim(1);
  std::vector<double> v(y.size());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = ybar[j % n] + k * (y[j] - ybar[j % n]) + offset;
  return Tensor(y.shape(), std::move(v));
}

}  // namespace

TEST(Rse, PerfectPredictionIsZero) {
  const Tensor y = random_values(8, 3, 1);
  EXPECT_EQ(rse(y, y, column_means(y)), 0.0);
  EXPECT_EQ(rse_conventional(y, y, column_means(y)), 0.0);
}

TEST(Rse, DoubledDeviationGivesQuarter) {
  const Tensor y = random_values(16, 4, 2);
  const Tensor ybar = column_means(y);
  const Tensor yhat = affine(y, ybar, 2.0, 0.0);
  EXPECT_NEAR(rse(yhat, y, ybar), 0.25, 1e-14);
  EXPECT_NEAR(rse_conventional(yhat, y, ybar), 1.0, 1e-14);
}

TEST(Rse, PrintedFormulaUnderScaling) {
  // Yhat = Ybar + k (Y - Ybar): numerator (k-1)^2 S, denominator k^2 S.
  const Tensor y = random_values(32, 5, 3);
  const Tensor ybar = column_means(y);
  for (double k : {0.5, 3.0, -1.5}) {
    const double expected = (k - 1.0) * (k - 1.0) / (k * k);
    EXPECT_NEAR(rse(affine(y, ybar, k, 0.0), y, ybar), expected, 1e-13) << k;
  }
}

TEST(Rse, ConstantPredictionsAreRejected) {
  const Tensor y = random_values(4, 2, 4);
  const Tensor ybar = column_means(y);
  EXPECT_THROW(rse(affine(y, ybar, 0.0, 0.0), y, ybar), std::domain_error);
  const Tensor flat = affine(y, ybar, 0.0, 0.0);
  EXPECT_THROW(rse_conventional(y, flat, column_means(flat)), std::domain_error);
}

TEST(Rse, ShapeMismatchIsRejected) {
  const Tensor y = random_values(4, 2, 5);
  EXPECT_THROW(rse(random_values(4, 3, 6), y, column_means(y)), ShapeError);
}

TEST(EvalLoss, PerfectAndConstantOffset) {
  const Tensor y = Tensor::vector({0.5, -1.0, 2.0, 3.5});
  EXPECT_EQ(eval_loss(y, y), 0.0);
  EXPECT_NEAR(eval_loss(y + Tensor::full({4}, 0.3), y), 0.09, 1e-15);
}

TEST(CumulativeLoss, NoNoiseConsensusZeroPolicyIsZero) {
  GameSpec spec;
  spec.n = 4;
  spec.sigma = 0.0;
  std::mt19937_64 rng(1);
  const Tensor x0 = Tensor::full({6, 4}, 0.375);
  const auto noise = sample_brownian(6, 10, 4, 0.1, rng);
  ZeroPolicy zero;
  const auto c = cumulative_loss(spec, zero, x0, noise);
  EXPECT_EQ(c.mean, 0.0);
  EXPECT_EQ(c.std_error, 0.0);
}

TEST(CumulativeLoss, HandComputedTwoSteps) {
  GameSpec spec;
  spec.n = 2;
  spec.a = 0.0;
  spec.sigma = 0.0;
  // Constant control +1 for agent 0 and -1 for agent 1, agent 0 starting at
  // -1 and agent 1 at 1.
  struct Push : Policy {
    void begin(std::size_t) override {}
    Tensor controls(const Tensor& s, std::size_t, double) override {
      std::vector<double> v(s.size());
      for (std::size_t b = 0; b < s.dim(0); ++b) v[b * 2] = 1.0, v[b * 2 + 1] = -1.0;
      return Tensor(s.shape(), std::move(v));
    }
  } push;
  std::mt19937_64 rng(2);
  const auto noise = sample_brownian(1, 2, 2, 0.25, rng);
  const auto c = cumulative_loss(spec, push, Tensor::matrix({{-1.0, 1.0}}), noise);
  // Xbar stays 0, so D = 1, 0.75, 0.5; C = 1/2 U^2 - q U D + eps/2 D^2.
  const double c0 = 0.5 - spec.q * 1.0 + 0.5 * spec.eps * 1.0;
  const double c1 = 0.5 - spec.q * 0.75 + 0.5 * spec.eps * 0.5625;
  EXPECT_NEAR(c.mean, (c0 + c1) * 0.25 + 0.5 * spec.c * 0.25, 1e-15);
}

TEST(CumulativeLoss, AnalyticPolicyMatchesAnalyticValue) {
  const GameSpec spec;
  const RiccatiSolution r(spec, 4000);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(3);
  const std::size_t batch = 8192;
  const Tensor x0 = sample_initial_states(spec, batch, 0.65, rng);
  const auto fine = sample_brownian(batch, 80, spec.n, 1.0 / 80.0, rng);
  const auto coarse = coarsen(fine);
  const auto j40 = cumulative_loss(spec, star, x0, coarse);
  const auto j80 = cumulative_loss(spec, star, x0, fine);
  double v = 0.0;
  const Tensor values = analytic_value(spec, r, 0.0, x0, 0);
  const auto v0 = values.data();
  for (double x : v0) v += x;
  v /= static_cast<double>(batch);
  // Left-endpoint bias is first order; the halving difference estimates it.
  const double bias = 2.0 * std::abs(j40.mean - j80.mean);
  EXPECT_LT(std::abs(j80.mean - v), 3.0 * j80.std_error + bias);
}

TEST(ControlError, AnalyticPolicyOnItsOwnPathsIsZero) {
  const GameSpec spec;
  const RiccatiSolution r(spec, 400);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(4);
  const Tensor x0 = sample_initial_states(spec, 32, 0.65, rng);
  const auto noise = sample_brownian(32, 10, spec.n, 0.1, rng);
  const auto paths = simulate_closed_loop(spec, star, x0, noise);
  EXPECT_EQ(control_error(star, paths, 0.1), 0.0);
  ZeroPolicy zero;
  EXPECT_GT(control_error(zero, paths, 0.1), 0.0);
}

TEST(ConvergenceRatio, Examples) {
  EXPECT_EQ(convergence_ratio(0.7, 0.7), 1.0);
  EXPECT_EQ(convergence_ratio(0.0, 0.7), 0.0);
  EXPECT_EQ(convergence_ratio(0.3, 0.0), kConvergedSentinel);
  EXPECT_NEAR(convergence_ratio(0.2, 0.8), 0.25, 1e-16);
}

TEST(TerminalDistribution, PointMassInMiddleBin) {
  const auto h = terminal_distribution(Tensor::full({9}, 1.25));
  EXPECT_EQ(h.mean, 1.25);
  EXPECT_EQ(h.std, 0.0);
  ASSERT_EQ(h.counts.size(), 101u);
  EXPECT_EQ(h.counts[50], 9u);
}

TEST(TerminalDistribution, MomentsAndCountsOfKnownData) {
  const auto h = terminal_distribution(Tensor::vector({0.0, 1.0, 2.0, 3.0}), 3);
  EXPECT_EQ(h.mean, 1.5);
  EXPECT_NEAR(h.std, std::sqrt(1.25), 1e-15);
  EXPECT_EQ(h.lo, 0.0);
  EXPECT_EQ(h.hi, 3.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{1, 1, 2}));
}

TEST(TerminalStats, NoNoiseConsensusZeroControlIsPointMass) {
  GameSpec spec;
  spec.sigma = 0.0;
  std::mt19937_64 rng(5);
  ZeroPolicy zero;
  const auto paths = simulate_closed_loop(spec, zero, Tensor::full({7, spec.n}, -0.375), sample_brownian(7, 5, spec.n, 0.2, rng));
  const auto s = terminal_stats(paths);
  EXPECT_EQ(s.state.std, 0.0);
  EXPECT_EQ(s.state.counts[50], 7u);
  EXPECT_EQ(s.control.mean, 0.0);
  EXPECT_EQ(s.control.counts[50], 7u);
}

TEST(TerminalStats, AnalyticStdMatchesIndependentSimulation) {
  // Scalar recursion for agent 0 alone under analytic play, written out
  // without the tensor simulator.
  const GameSpec spec;
  const RiccatiSolution r(spec, 400);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(6);
  const std::size_t batch = 512, steps = 20, n = spec.n;
  const double dt = 1.0 / steps;
  const Tensor x0 = sample_initial_states(spec, batch, 0.65, rng);
  const auto noise = sample_brownian(batch, steps, n, dt, rng);
  const auto s = terminal_stats(simulate_closed_loop(spec, star, x0, noise));
  std::vector<double> xt(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> x(x0.data().begin() + b * n, x0.data().begin() + (b + 1) * n);
    for (std::size_t k = 0; k < steps; ++k) {
      const double t = dt * static_cast<double>(k);
      double xbar = 0.0;
      for (double v : x) xbar += v;
      xbar /= static_cast<double>(n);
      const double gain = spec.q + r.eta(t) * (1.0 - 1.0 / static_cast<double>(n));
      std::vector<double> next(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = xbar - x[i];
        const double dw = spec.sigma * (spec.rho * noise.common[b * steps + k] +
                                        std::sqrt(1.0 - spec.rho * spec.rho) * noise.idio[(b * steps + k) * n + i]);
        next[i] = x[i] + (spec.a * d + gain * d) * dt + dw;
      }
      x = next;
    }
    xt[b] = x[0];
  }
  double m = 0.0, v = 0.0;
  for (double x : xt) m += x;
  m /= static_cast<double>(batch);
  for (double x : xt) v += (x - m) * (x - m);
  EXPECT_NEAR(s.state.mean, m, 1e-12);
  EXPECT_NEAR(s.state.std, std::sqrt(v / static_cast<double>(batch)), 1e-12);
}

TEST(Csv, HeadersAndRowFormat) {
  EXPECT_STREQ(kMetricsHeader, "stage,eval_loss,rse,rse_conventional,cumulative_loss,convergence_ratio,wall_seconds");
  EXPECT_STREQ(kHistogramHeader, "variable,bin_left,bin_right,count");
  MetricsRecord r;
  r.stage = 3;
  r.eval_loss = 0.5;
  r.cumulative_loss = 1.25;
  r.wall_seconds = 2.0;
  EXPECT_EQ(metrics_csv_row(r), "3,0.5,,,1.25,,2");
  r.rse = 0.125;
  r.rse_conventional = 0.25;
  r.convergence_ratio = 0.75;
  EXPECT_EQ(metrics_csv_row(r), "3,0.5,0.125,0.25,1.25,0.75,2");
}

TEST(Csv, HistogramRowsCoverRange) {
  TerminalStats s;
  s.state = terminal_distribution(Tensor::vector({0.0, 1.0}), 2);
  s.control = terminal_distribution(Tensor::vector({2.0, 2.0}), 3);
  EXPECT_EQ(histogram_csv(s), "state,0,0.5,1\nstate,0.5,1,1\ncontrol,2,2,0\ncontrol,2,2,2\ncontrol,2,2,0\n");
}
