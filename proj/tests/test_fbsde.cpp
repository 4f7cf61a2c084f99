#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "sdfp/gradcheck.hpp"
#include "sdfp/train.hpp"

using namespace sdfp;

namespace {

NetConfig small_net(Backbone backbone, bool use_il, std::size_t n, std::size_t steps) {
  NetConfig c;
  c.agents = n;
  c.steps = steps;
  c.backbone = backbone;
  c.use_il = use_il;
  c.features = 6;
  c.own_width = 3;
  c.lstm_hidden = 5;
  c.fc_hidden = 5;
  c.iv_hidden = 7;
  return c;
}

TrainConfig small_train(Backbone backbone, bool use_il, bool use_is) {
  TrainConfig c;
  c.stages = 2;
  c.iterations = 3;
  c.backbone = backbone;
  c.use_il = use_il;
  c.use_is = use_is;
  c.eval_batch = 16;
  c.net = small_net(backbone, use_il, 3, 5);
  return c;
}

GameSpec three_banks() {
  GameSpec s;
  s.n = 3;
  return s;
}

Tensor constant_rows(std::size_t batch, std::size_t n, double first, double step) {
  std::vector<double> v(batch * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) v[b * n + i] = first + step * static_cast<double>(b);
  return Tensor({batch, n}, std::move(v));
}

BrownianBatch noise_for(std::size_t batch, std::size_t steps, std::size_t n, double T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_brownian(batch, steps, n, T / static_cast<double>(steps), rng);
}

// Names of FC biases feeding train-mode batch norm; their gradient is exactly
// zero, so they are left out of relative checks.
std::vector<std::size_t> live_parameters(AgentNet& net) {
  std::vector<std::string> names;
  net.visit([&](const std::string& name, Tensor&, bool trainable) {
    if (trainable) names.push_back(name);
  });
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const bool dead =
        names[i].rfind("fc.", 0) == 0 && names[i].find(".bn.") == std::string::npos && names[i].ends_with(".bias");
    if (!dead) live.push_back(i);
  }
  return live;
}

std::vector<Tensor> parameter_gradients(const GameSpec& spec, AgentNet& learner, Policy& policy, const Tensor& x0,
                                        const BrownianBatch& noise, bool use_is) {
  Tape tape;
  const auto params = learner.parameters();
  std::vector<Tensor> watched;
  for (const auto& p : params) watched.push_back(tape.watch(p));
  AgentNet copy = learner;
  copy.set_parameters(watched);
  const auto roll = training_rollout(spec, copy, policy, x0, noise, use_is);
  const Gradients g = tape.backward(roll.loss);
  std::vector<Tensor> out;
  for (const auto& w : watched) out.push_back(g.of(w));
  return out;
}

}  // namespace

TEST(ControlFromVx, ConsensusAndZeroGradientGiveZero) {
  const GameSpec spec = three_banks();
  const Tensor x = constant_rows(2, 3, 0.5, 1.0);
  const Tensor u = control_from_vx(spec, x, Tensor::zeros({2, 3}), 1e3);
  for (std::size_t k = 0; k < u.size(); ++k) EXPECT_EQ(u[k], 0.0);
}

TEST(ControlFromVx, GradientEqualToMeanReversionCancels) {
  GameSpec spec = three_banks();
  spec.q = 0.25;
  const Tensor x = Tensor::matrix({{1.0, 2.0, 6.0}});
  const Tensor vx = deviation(x) * spec.q;
  const Tensor u = control_from_vx(spec, x, vx, 1e3);
  for (std::size_t k = 0; k < u.size(); ++k) EXPECT_EQ(u[k], 0.0);
}

TEST(ControlFromVx, AnalyticGradientGivesAnalyticControl) {
  const GameSpec spec = three_banks();
  const RiccatiSolution r(spec, 400);
  std::mt19937_64 rng(3);
  const Tensor x = sample_initial_states(spec, 5, 0.8, rng);
  for (double t : {0.0, 0.3, 0.9}) {
    std::vector<double> own(5 * 3);
    for (std::size_t i = 0; i < 3; ++i) {
      const Tensor v = analytic_vx(spec, r, t, x, i);
      for (std::size_t b = 0; b < 5; ++b) own[b * 3 + i] = v[b * 3 + i];
    }
    const Tensor u = control_from_vx(spec, x, Tensor({5, 3}, own), 1e3);
    const Tensor star = analytic_controls(spec, r, t, x);
    for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(u[k], star[k], 1e-14);
  }
}

TEST(ControlFromVx, ClampIsCounted) {
  const GameSpec spec = three_banks();
  const Tensor x = Tensor::matrix({{0.0, 0.0, 0.0}});
  std::size_t clamped = 0;
  const Tensor u = control_from_vx(spec, x, Tensor::matrix({{5.0, -0.5, -7.0}}), 2.0, &clamped);
  EXPECT_EQ(u[0], -2.0);
  EXPECT_EQ(u[1], 0.5);
  EXPECT_EQ(u[2], 2.0);
  EXPECT_EQ(clamped, 2u);
}

TEST(Fsde, NoNoiseNoDriftKeepsStates) {
  GameSpec spec = three_banks();
  spec.sigma = 0.0;
  spec.a = 0.0;
  std::mt19937_64 rng(1);
  const Tensor x0 = sample_initial_states(spec, 4, 1.0, rng);
  ZeroPolicy zero;
  const auto paths = simulate_forward(spec, zero, x0, noise_for(4, 6, 3, 1.0, 2), false);
  ASSERT_EQ(paths.states.size(), 7u);
  for (const auto& s : paths.states)
    for (std::size_t k = 0; k < s.size(); ++k) EXPECT_EQ(s[k], x0[k]);
}

TEST(Fsde, FullCorrelationKeepsIdenticalRowsIdentical) {
  GameSpec spec = three_banks();
  spec.rho = 1.0;
  const RiccatiSolution r(spec, 200);
  AnalyticPolicy star(spec, r);
  const auto paths = simulate_closed_loop(spec, star, constant_rows(4, 3, -0.5, 0.3), noise_for(4, 8, 3, 1.0, 5));
  for (const auto& s : paths.states)
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_EQ(s[b * 3 + 1], s[b * 3]);
      EXPECT_EQ(s[b * 3 + 2], s[b * 3]);
    }
}

TEST(Fsde, AnalyticPlayKeepsMeanStateInMonteCarloBand) {
  const GameSpec spec;
  const RiccatiSolution r(spec, 400);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(11);
  const std::size_t batch = 4096;
  const Tensor x0 = sample_initial_states(spec, batch, 0.65, rng);
  const auto noise = sample_brownian(batch, 40, spec.n, 1.0 / 40.0, rng);
  const auto paths = simulate_closed_loop(spec, star, x0, noise);
  // Controls sum to zero across agents, so Xbar moves only with the noise:
  // Var(Xbar_T - Xbar_0) = sigma^2 (rho^2 + (1 - rho^2) / N) T.
  double m = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double d = 0.0;
    for (std::size_t i = 0; i < spec.n; ++i) d += paths.states.back()[b * spec.n + i] - x0[b * spec.n + i];
    m += d / static_cast<double>(spec.n);
  }
  m /= static_cast<double>(batch);
  const double var = spec.rho * spec.rho + (1.0 - spec.rho * spec.rho) / static_cast<double>(spec.n);
  EXPECT_LT(std::abs(m), 4.0 * std::sqrt(var / static_cast<double>(batch)));
}

TEST(Fsde, RepresentativeAgentIsUncontrolledWithoutImportanceSampling) {
  const GameSpec spec = three_banks();
  const RiccatiSolution r(spec, 200);
  AnalyticPolicy star(spec, r);
  std::mt19937_64 rng(4);
  const Tensor x0 = sample_initial_states(spec, 3, 0.7, rng);
  const auto noise = noise_for(3, 4, 3, 1.0, 6);
  const auto plain = simulate_forward(spec, star, x0, noise, false);
  const auto shifted = simulate_forward(spec, star, x0, noise, true);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(plain.controls[k][b * 3], 0.0);
      EXPECT_EQ(shifted.controls[k][b * 3], shifted.ubar[k][b]);
    }
  EXPECT_NE(plain.states.back()[0], shifted.states.back()[0]);
}

TEST(Fsde, NonFiniteStateReportsStepAndSample) {
  const GameSpec spec = three_banks();
  const Tensor x = Tensor::matrix({{0.0, 0.0, 0.0}, {0.0, 1.0, 0.0}});
  const Tensor u = Tensor::matrix({{0.0, 0.0, 0.0}, {0.0, std::numeric_limits<double>::infinity(), 0.0}});
  try {
    fsde_step(spec, x, u, Tensor::zeros({2}), Tensor::zeros({2, 3}), 0.1, 7);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.step(), 7u);
    EXPECT_EQ(e.sample(), 1u);
  }
}

TEST(Bsde, ConsensusWithoutNoiseKeepsValue) {
  GameSpec spec = three_banks();
  spec.sigma = 0.0;
  const Tensor x = constant_rows(2, 3, 0.25, 0.5);
  const Tensor y = Tensor::vector({1.5, -0.25});
  const Tensor next = bsde_step(spec, y, x, Tensor::zeros({2, 3}), Tensor::vector({0.3, 0.4}), true,
                                Tensor::vector({0.1, 0.2}), Tensor::zeros({2, 3}), 0.05, 0);
  EXPECT_EQ(next[0], 1.5);
  EXPECT_EQ(next[1], -0.25);
}

TEST(Bsde, HandComputedStep) {
  GameSpec spec;
  spec.n = 2;
  spec.q = 0.5;
  spec.eps = 2.0;
  spec.sigma = 2.0;
  spec.rho = 0.6;
  // Agent 0 at 0, agent 1 at 2: D = 1. V_x = (0.25, -0.5), U = 0.5.
  const Tensor x = Tensor::matrix({{0.0, 2.0}});
  const Tensor vx = Tensor::matrix({{0.25, -0.5}});
  const Tensor common = Tensor::vector({0.1});
  const Tensor idio = Tensor::matrix({{0.2, -0.3}});
  const double dt = 0.1;
  const double h = 0.5 * 2.0 * 1.0 - 0.5 * (0.5 - 0.25) * (0.5 - 0.25);
  const double dw0 = 2.0 * (0.6 * 0.1 + 0.8 * 0.2), dw1 = 2.0 * (0.6 * 0.1 + 0.8 * -0.3);
  const double z = 0.25 * dw0 - 0.5 * dw1;
  const Tensor plain = bsde_step(spec, Tensor::vector({1.0}), x, vx, Tensor::vector({0.5}), false, common, idio, dt, 0);
  const Tensor is = bsde_step(spec, Tensor::vector({1.0}), x, vx, Tensor::vector({0.5}), true, common, idio, dt, 0);
  EXPECT_NEAR(plain[0], 1.0 - h * dt + z, 1e-15);
  EXPECT_NEAR(is[0], 1.0 + (-h + 0.25 * 0.5) * dt + z, 1e-15);
}

TEST(Rollout, AnalyticOraclesReproduceTerminalCondition) {
  const GameSpec spec;
  const RiccatiSolution r(spec, 2000);
  AnalyticPolicy star(spec, r);
  AnalyticGradient grad(spec, r);
  std::mt19937_64 rng(8);
  const std::size_t batch = 2048;
  const Tensor x0 = sample_initial_states(spec, batch, 0.65, rng);
  const auto fine = sample_brownian(batch, 80, spec.n, 1.0 / 80.0, rng);
  const auto coarse = coarsen(fine);
  const Tensor y0 = analytic_value(spec, r, 0.0, x0, 0);
  const double g_var = [&] {
    const auto paths = simulate_forward(spec, star, x0, coarse, false);
    const auto g = terminal_cost(spec, paths.states.back(), 0).to_vector();
    double m = 0.0, v = 0.0;
    for (double x : g) m += x;
    m /= static_cast<double>(g.size());
    for (double x : g) v += (x - m) * (x - m);
    return v / static_cast<double>(g.size());
  }();
  for (bool use_is : {false, true}) {
    const double l40 = rollout(spec, star, grad, y0, x0, coarse, use_is).loss.item();
    const double l80 = rollout(spec, star, grad, y0, x0, fine, use_is).loss.item();
    EXPECT_LT(l40, 0.05 * g_var) << "is " << use_is;
    EXPECT_LT(l80, l40) << "is " << use_is;
  }
}

TEST(Rollout, InitialValueIsNetworkOutputAndLossIsTerminalError) {
  const GameSpec spec = three_banks();
  AgentNet net(small_net(Backbone::lstm, true, 3, 5), 4);
  NetPolicy policy(net, spec, OpponentScheme::batch, 1e3);
  std::mt19937_64 rng(2);
  const Tensor x0 = sample_initial_states(spec, 6, 0.65, rng);
  const auto noise = sample_brownian(6, 5, 3, 0.2, rng);
  const auto a = training_rollout(spec, net, policy, x0, noise, true);
  const std::size_t rep[] = {0};
  const Tensor y0 = net.initial_value(x0, rep);
  for (std::size_t b = 0; b < 6; ++b) EXPECT_EQ(a.y.front()[b], y0[b]);
  double mse = 0.0;
  for (std::size_t b = 0; b < 6; ++b) mse += std::pow(a.y.back()[b] - a.terminal_target[b], 2);
  EXPECT_NEAR(a.loss.item(), mse / 6.0, 1e-14);
  ASSERT_TRUE(std::isfinite(a.loss.item()));
  const auto b = training_rollout(spec, net, policy, x0, noise, true);
  EXPECT_EQ(a.loss.item(), b.loss.item());
}

TEST(Rollout, OpponentSchemesGiveIdenticalPathsAndGradients) {
  const GameSpec spec = three_banks();
  for (auto backbone : {Backbone::lstm, Backbone::fc})
    for (bool il : {true, false}) {
      AgentNet stage(small_net(backbone, il, 3, 5), 12);
      AgentNet learner(small_net(backbone, il, 3, 5), 13);
      NetPolicy batch(stage, spec, OpponentScheme::batch, 1e3);
      NetPolicy iterative(stage, spec, OpponentScheme::iterative, 1e3);
      std::mt19937_64 rng(9);
      const Tensor x0 = sample_initial_states(spec, 5, 0.65, rng);
      const auto noise = sample_brownian(5, 5, 3, 0.2, rng);
      const auto pa = simulate_forward(spec, batch, x0, noise, true);
      const auto pb = simulate_forward(spec, iterative, x0, noise, true);
      for (std::size_t k = 0; k < pa.states.size(); ++k)
        for (std::size_t j = 0; j < pa.states[k].size(); ++j) EXPECT_EQ(pa.states[k][j], pb.states[k][j]);
      const auto ga = parameter_gradients(spec, learner, batch, x0, noise, true);
      const auto gb = parameter_gradients(spec, learner, iterative, x0, noise, true);
      ASSERT_EQ(ga.size(), gb.size());
      for (std::size_t p = 0; p < ga.size(); ++p)
        for (std::size_t j = 0; j < ga[p].size(); ++j) EXPECT_EQ(ga[p][j], gb[p][j]);
    }
}

TEST(Rollout, FiveStepLossMatchesFiniteDifferences) {
  const GameSpec spec = three_banks();
  struct Case {
    Backbone backbone;
    bool il, is;
  };
  for (const Case c : {Case{Backbone::lstm, true, true}, Case{Backbone::lstm, false, false},
                       Case{Backbone::fc, true, false}, Case{Backbone::fc, false, true}}) {
    AgentNet stage(small_net(c.backbone, c.il, 3, 5), 31);
    AgentNet learner(small_net(c.backbone, c.il, 3, 5), 32);
    NetPolicy policy(stage, spec, OpponentScheme::batch, 1e3);
    std::mt19937_64 rng(10);
    const Tensor x0 = sample_initial_states(spec, 4, 0.65, rng);
    const auto noise = sample_brownian(4, 5, 3, 0.2, rng);
    const auto params = learner.parameters();
    const auto live = live_parameters(learner);
    std::vector<Tensor> inputs;
    for (std::size_t i : live) inputs.push_back(params[i]);
    const auto r = check_gradients(
        [&](std::span<const Tensor> in) {
          std::vector<Tensor> all = params;
          for (std::size_t k = 0; k < live.size(); ++k) all[live[k]] = in[k];
          AgentNet copy = learner;
          copy.set_parameters(all);
          return training_rollout(spec, copy, policy, x0, noise, c.is).loss;
        },
        inputs);
    EXPECT_LT(r.max_relative_error, 1e-5) << "backbone " << int(c.backbone) << " il " << c.il << " is " << c.is;
  }
}

TEST(Train, SingleStageGivesFiniteRecord) {
  const GameSpec spec = three_banks();
  SimGrid grid;
  grid.steps = 5;
  grid.batch = 8;
  TrainConfig config = small_train(Backbone::lstm, true, true);
  config.stages = 1;
  config.iterations = 2;
  const auto res = fictitious_play_train(spec, grid, config);
  ASSERT_EQ(res.stages.size(), 1u);
  ASSERT_EQ(res.losses.size(), 2u);
  const auto& rec = res.stages[0];
  EXPECT_FALSE(res.aborted);
  EXPECT_TRUE(std::isfinite(rec.train_loss));
  EXPECT_TRUE(std::isfinite(rec.eval_loss));
  ASSERT_TRUE(rec.rse.has_value());
  EXPECT_GE(*rec.rse, 0.0);
  ASSERT_TRUE(rec.convergence_ratio.has_value());
  EXPECT_TRUE(std::isfinite(rec.cumulative_loss));
  EXPECT_GT(rec.wall_seconds, 0.0);
}

TEST(Train, FixedSeedIsDeterministic) {
  const GameSpec spec = three_banks();
  SimGrid grid;
  grid.steps = 5;
  grid.batch = 8;
  grid.seed = 17;
  for (auto resample : {Resample::iteration, Resample::stage}) {
    TrainConfig config = small_train(Backbone::fc, true, true);
    config.resample = resample;
    const auto a = fictitious_play_train(spec, grid, config);
    const auto b = fictitious_play_train(spec, grid, config);
    EXPECT_EQ(a.losses, b.losses);
    ASSERT_EQ(a.stages.size(), b.stages.size());
    for (std::size_t m = 0; m < a.stages.size(); ++m) {
      EXPECT_EQ(a.stages[m].eval_loss, b.stages[m].eval_loss);
      EXPECT_EQ(a.stages[m].rse, b.stages[m].rse);
      EXPECT_EQ(a.stages[m].cumulative_loss, b.stages[m].cumulative_loss);
    }
  }
}

TEST(Train, SeedChangesTheRun) {
  const GameSpec spec = three_banks();
  SimGrid grid;
  grid.steps = 5;
  grid.batch = 8;
  TrainConfig config = small_train(Backbone::fc, false, false);
  config.stages = 1;
  TrainHooks hooks;
  hooks.evaluate = false;
  const auto a = fictitious_play_train(spec, grid, config, hooks);
  grid.seed = 1;
  const auto b = fictitious_play_train(spec, grid, config, hooks);
  EXPECT_NE(a.losses, b.losses);
}

TEST(Train, BlowupRollsBackToStageSnapshot) {
  const GameSpec spec = three_banks();
  SimGrid grid;
  grid.steps = 5;
  grid.batch = 8;
  TrainConfig config = small_train(Backbone::fc, true, false);
  config.stages = 1;
  config.iterations = 4;
  config.lr = 1e200;
  const AgentNet initial(config.net_config(spec.n, grid.steps), grid.seed);
  const auto res = fictitious_play_train(spec, grid, config);
  EXPECT_TRUE(res.aborted);
  ASSERT_EQ(res.stages.size(), 1u);
  EXPECT_TRUE(res.stages[0].aborted);
  EXPECT_FALSE(res.failure.empty());
  AgentNet restored = res.net;
  AgentNet start = initial;
  const auto p = restored.parameters();
  const auto q = start.parameters();
  ASSERT_EQ(p.size(), q.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j) EXPECT_EQ(p[i][j], q[i][j]);
}

TEST(Train, CheckpointPerStage) {
  const GameSpec spec = three_banks();
  SimGrid grid;
  grid.steps = 5;
  grid.batch = 8;
  TrainConfig config = small_train(Backbone::fc, false, false);
  TrainHooks hooks;
  hooks.evaluate = false;
  hooks.checkpoint_dir = (std::filesystem::temp_directory_path() / "sdfp_ckpt_test").string();
  std::filesystem::remove_all(hooks.checkpoint_dir);
  std::vector<std::size_t> seen;
  hooks.on_stage = [&](const MetricsRecord& r, AgentNet&) { seen.push_back(r.stage); };
  auto res = fictitious_play_train(spec, grid, config, hooks);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
  for (int m : {1, 2}) EXPECT_TRUE(std::filesystem::exists(hooks.checkpoint_dir + "/stage_" + std::to_string(m) + ".ckpt"));
  AgentNet loaded(config.net_config(spec.n, grid.steps), 99);
  loaded.load_state_dict(load_checkpoint(hooks.checkpoint_dir + "/stage_2.ckpt"));
  const auto a = loaded.parameters();
  const auto b = res.net.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) EXPECT_EQ(a[i][j], b[i][j]);
  std::filesystem::remove_all(hooks.checkpoint_dir);
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig c;
  c.stages = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.eval_batch = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
