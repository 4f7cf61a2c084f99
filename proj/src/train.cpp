#include "sdfp/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace sdfp {

void TrainConfig::validate() const {
  if (stages < 1) throw std::invalid_argument("stages must be >= 1");
  if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(u_max > 0.0)) throw std::invalid_argument("u_max must be > 0");
  if (!(delta0 >= 0.0)) throw std::invalid_argument("delta0 must be >= 0");
  if (eval_batch < 2) throw std::invalid_argument("eval_batch must be >= 2");
}

NetConfig TrainConfig::net_config(std::size_t agents, std::size_t steps) const {
  NetConfig c = net;
  c.agents = agents;
  c.steps = steps;
  c.backbone = backbone;
  c.use_il = use_il;
  return c;
}

TrainConfig baseline_preset() {
  TrainConfig c;
  c.backbone = Backbone::fc;
  c.use_is = false;
  c.use_il = false;
  return c;
}

TrainConfig sdfp_preset() { return TrainConfig{}; }

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t which) {
  std::seed_seq seq{seed, which};
  return std::mt19937_64(seq);
}

std::vector<std::size_t> all_agents(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

EvalSet make_eval_set(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config) {
  auto rng = stream(grid.seed, 2);
  EvalSet e;
  e.x0 = sample_initial_states(spec, config.eval_batch, config.delta0, rng);
  e.noise = sample_brownian(config.eval_batch, grid.steps, spec.n, grid.dt(spec.T), rng);
  bool analytic = true;
  try {
    spec.validate(true);
  } catch (const std::invalid_argument&) {
    analytic = false;
  }
  if (!analytic) return e;
  e.riccati = RiccatiSolution(spec, grid.steps * 25);
  std::vector<double> y(config.eval_batch * spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const Tensor value = analytic_value(spec, *e.riccati, 0.0, e.x0, i);
    const auto v = value.data();
    for (std::size_t b = 0; b < config.eval_batch; ++b) y[b * spec.n + i] = v[b];
  }
  e.y_true = Tensor({config.eval_batch, spec.n}, std::move(y));
  AnalyticPolicy star(spec, *e.riccati);
  e.analytic = simulate_closed_loop(spec, star, e.x0, e.noise);
  return e;
}

MetricsRecord evaluate_stage(const GameSpec& spec, const TrainConfig& config, AgentNet& net, AgentNet& stage_policy,
                             const EvalSet& eval, std::optional<double>& prev_error, bool use_is) {
  MetricsRecord r;
  const std::size_t batch = eval.x0.dim(0), n = spec.n;

  NetPolicy opponents(stage_policy, spec, config.scheme, config.u_max);
  NetGradient grad(net, Mode::eval);
  const std::size_t rep[] = {0};
  const auto roll = rollout(spec, opponents, grad, net.initial_value(eval.x0, rep), eval.x0, eval.noise, use_is);
  r.eval_loss = eval_loss(roll.y.back(), roll.terminal_target);

  NetPolicy play(net, spec, config.scheme, config.u_max);
  const auto paths = simulate_closed_loop(spec, play, eval.x0, eval.noise);
  r.cumulative_loss = path_cost(spec, paths, eval.noise.dt).mean;
  const auto term = terminal_stats(paths);
  r.terminal_state_mean = term.state.mean;
  r.terminal_state_std = term.state.std;
  r.terminal_control_mean = term.control.mean;
  r.terminal_control_std = term.control.std;

  if (eval.riccati) {
    const auto agents = all_agents(n);
    std::vector<double> pred(batch * n);
    const Tensor values = net.initial_value(eval.x0, agents);
    const auto v = values.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < batch; ++b) pred[b * n + i] = v[i * batch + b];
    const Tensor yhat({batch, n}, std::move(pred));
    const Tensor ybar = column_means(eval.y_true);
    r.rse = rse(yhat, eval.y_true, ybar);
    r.rse_conventional = rse_conventional(yhat, eval.y_true, ybar);
    NetPolicy probe(net, spec, config.scheme, config.u_max);
    const double err = control_error(probe, eval.analytic, eval.noise.dt);
    if (prev_error) r.convergence_ratio = convergence_ratio(err, *prev_error);
    prev_error = err;
  }
  r.clamped = opponents.clamped() + play.clamped();
  return r;
}

TrainResult fictitious_play_train(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config,
                                  const TrainHooks& hooks) {
  spec.validate();
  grid.validate();
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const double dt = grid.dt(spec.T);

  TrainResult result;
  result.net = hooks.initial_net ? *hooks.initial_net : AgentNet(config.net_config(spec.n, grid.steps), grid.seed);
  AgentNet& net = result.net;
  auto data_rng = stream(grid.seed, 1);

  std::optional<EvalSet> eval;
  std::optional<double> prev_error;
  if (hooks.evaluate) {
    eval = make_eval_set(spec, grid, config);
    if (eval->riccati) {
      NetPolicy probe(net, spec, config.scheme, config.u_max);
      prev_error = control_error(probe, eval->analytic, dt);
    }
  }

  AdamState adam;
  adam.options.learning_rate = config.lr;
  Tape tape;

  for (std::size_t m = 1; m <= config.stages; ++m) {
    const AgentNet snapshot = net;
    const AdamState adam_snapshot = adam;
    const bool is_on = config.use_is && m > 1;
    NetPolicy policy(snapshot, spec, config.scheme, config.u_max);

    Tensor x0;
    BrownianBatch noise;
    const auto draw = [&] {
      x0 = sample_initial_states(spec, grid.batch, config.delta0, data_rng);
      noise = sample_brownian(grid.batch, grid.steps, spec.n, dt, data_rng);
    };
    if (config.resample == Resample::stage) draw();

    MetricsRecord rec;
    rec.stage = m;
    double loss_sum = 0.0;
    try {
      for (std::size_t l = 0; l < config.iterations; ++l) {
        if (config.resample == Resample::iteration) draw();
        tape.clear();
        std::vector<Tensor> params = net.parameters();
        std::vector<Tensor> watched;
        watched.reserve(params.size());
        for (const auto& p : params) watched.push_back(tape.watch(p));
        net.set_parameters(watched);
        const auto roll = training_rollout(spec, net, policy, x0, noise, is_on);
        const double loss = roll.loss.item();
        if (!std::isfinite(loss)) throw NonFiniteError("non-finite loss", grid.steps, 0);
        const Gradients grads = tape.backward(roll.loss);
        std::vector<Tensor> g;
        g.reserve(watched.size());
        for (const auto& w : watched) g.push_back(grads.of(w));
        adam_step(params, g, adam);
        net.set_parameters(params);
        result.losses.push_back(loss);
        loss_sum += loss;
      }
      rec.train_loss = loss_sum / static_cast<double>(config.iterations);
    } catch (const NonFiniteError& e) {
      tape.clear();
      net = snapshot;
      adam = adam_snapshot;
      rec.aborted = true;
      result.aborted = true;
      if (result.failure.empty()) result.failure = "stage " + std::to_string(m) + ": " + e.what();
      std::cerr << "stage " << m << " aborted and rolled back: " << e.what() << "\n";
    }
    tape.clear();

    if (eval) {
      AgentNet frozen = snapshot;
      try {
        const auto stats = evaluate_stage(spec, config, net, frozen, *eval, prev_error, is_on);
        const double train_loss = rec.train_loss;
        const bool aborted = rec.aborted;
        rec = stats;
        rec.stage = m;
        rec.train_loss = train_loss;
        rec.aborted = aborted;
      } catch (const NonFiniteError& e) {
        rec.aborted = true;
        result.aborted = true;
        if (result.failure.empty()) result.failure = "stage " + std::to_string(m) + " evaluation: " + e.what();
        std::cerr << "stage " << m << " evaluation failed: " << e.what() << "\n";
      }
    }
    rec.clamped += policy.clamped();
    result.clamped += rec.clamped;
    if (rec.clamped > 0) std::cerr << "stage " << m << ": control clamp active on " << rec.clamped << " entries\n";
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (!hooks.checkpoint_dir.empty()) {
      std::filesystem::create_directories(hooks.checkpoint_dir);
      save_checkpoint((std::filesystem::path(hooks.checkpoint_dir) / ("stage_" + std::to_string(m) + ".ckpt")).string(),
                      net.state_dict());
    }
    result.stages.push_back(rec);
    if (hooks.on_stage) hooks.on_stage(rec, net);
  }
  return result;
}

}  // namespace sdfp
