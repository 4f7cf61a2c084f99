#include "sdfp/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

namespace sdfp {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the keys of one JSON object into fields and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }
  // Call after every known key has been read.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + prefix() + key + "'");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("bad value for '" + prefix() + key + "': " + e.what());
    }
  }

  template <typename E>
  void read_enum(const char* key, E& field, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    bool present = j_.contains(key);
    read(key, s);
    if (!present) return;
    for (const auto& [name, value] : names)
      if (s == name) {
        field = value;
        return;
      }
    throw ConfigError("bad value for '" + prefix() + key + "': " + s);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  std::string prefix() const { return where_.empty() ? "" : where_ + "."; }
  std::string label() const { return where_.empty() ? "config" : where_; }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* name(Backbone b) { return b == Backbone::lstm ? "lstm" : "fc"; }
const char* name(OpponentScheme s) { return s == OpponentScheme::batch ? "batch" : "iterative"; }
const char* name(Resample r) { return r == Resample::iteration ? "iteration" : "stage"; }
const char* name(DriftKind d) { return d == DriftKind::linear ? "linear" : "superlinear"; }

ordered_json optional_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

void write_json(const fs::path& p, const ordered_json& j) { open_out(p) << j.dump(2) << "\n"; }

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t which) {
  std::seed_seq seq{seed, which};
  return std::mt19937_64(seq);
}

std::optional<double> as_optional(double v) { return v; }
std::optional<double> as_optional(const std::optional<double>& v) { return v; }

std::string cell(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

}  // namespace

void ExperimentConfig::validate() const {
  game.validate();
  grid.validate();
  train.validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (out.empty()) throw ConfigError("out must not be empty");
  if (terminal_batch < 2 || consistency_batch < 2 || cumulative_batch < 2)
    throw ConfigError("evaluation batches must be >= 2");
}

ordered_json to_json(const ExperimentConfig& c) {
  const NetConfig& n = c.train.net;
  ordered_json j;
  j["preset"] = c.preset;
  j["game"] = {{"n", c.game.n},     {"a", c.game.a},         {"q", c.game.q},
               {"eps", c.game.eps}, {"c", c.game.c},         {"rho", c.game.rho},
               {"sigma", c.game.sigma}, {"T", c.game.T},     {"drift", name(c.game.drift)}};
  j["grid"] = {{"steps", c.grid.steps}, {"batch", c.grid.batch}};
  j["train"] = {{"stages", c.train.stages},
                {"iterations", c.train.iterations},
                {"backbone", name(c.train.backbone)},
                {"use_is", c.train.use_is},
                {"use_il", c.train.use_il},
                {"scheme", name(c.train.scheme)},
                {"resample", name(c.train.resample)},
                {"lr", c.train.lr},
                {"u_max", c.train.u_max},
                {"delta0", c.train.delta0},
                {"eval_batch", c.train.eval_batch},
                {"net",
                 {{"features", n.features},
                  {"own_width", n.own_width},
                  {"lstm_hidden", n.lstm_hidden},
                  {"lstm_layers", n.lstm_layers},
                  {"fc_hidden", n.fc_hidden},
                  {"fc_layers", n.fc_layers},
                  {"iv_hidden", n.iv_hidden},
                  {"iv_layers", n.iv_layers}}}};
  j["seeds"] = c.seeds;
  j["out"] = c.out;
  j["eval"] = {{"terminal_batch", c.terminal_batch}, {"trajectories", c.trajectories}};
  j["oracle"] = {{"consistency_batch", c.consistency_batch}, {"cumulative_batch", c.cumulative_batch}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  {
    Reader top(j, "");
    top.read("preset", c.preset);
    if (const json* g = top.child("game")) {
      Reader r(*g, "game");
      r.read("n", c.game.n);
      r.read("a", c.game.a);
      r.read("q", c.game.q);
      r.read("eps", c.game.eps);
      r.read("c", c.game.c);
      r.read("rho", c.game.rho);
      r.read("sigma", c.game.sigma);
      r.read("T", c.game.T);
      r.read_enum("drift", c.game.drift, {{"linear", DriftKind::linear}, {"superlinear", DriftKind::superlinear}});
      r.finish();
    }
    if (const json* g = top.child("grid")) {
      Reader r(*g, "grid");
      r.read("steps", c.grid.steps);
      r.read("batch", c.grid.batch);
      r.finish();
    }
    if (const json* t = top.child("train")) {
      Reader r(*t, "train");
      r.read("stages", c.train.stages);
      r.read("iterations", c.train.iterations);
      r.read_enum("backbone", c.train.backbone, {{"lstm", Backbone::lstm}, {"fc", Backbone::fc}});
      r.read("use_is", c.train.use_is);
      r.read("use_il", c.train.use_il);
      r.read_enum("scheme", c.train.scheme,
                  {{"batch", OpponentScheme::batch}, {"iterative", OpponentScheme::iterative}});
      r.read_enum("resample", c.train.resample, {{"iteration", Resample::iteration}, {"stage", Resample::stage}});
      r.read("lr", c.train.lr);
      r.read("u_max", c.train.u_max);
      r.read("delta0", c.train.delta0);
      r.read("eval_batch", c.train.eval_batch);
      if (const json* n = r.child("net")) {
        Reader rn(*n, "train.net");
        NetConfig& net = c.train.net;
        rn.read("features", net.features);
        rn.read("own_width", net.own_width);
        rn.read("lstm_hidden", net.lstm_hidden);
        rn.read("lstm_layers", net.lstm_layers);
        rn.read("fc_hidden", net.fc_hidden);
        rn.read("fc_layers", net.fc_layers);
        rn.read("iv_hidden", net.iv_hidden);
        rn.read("iv_layers", net.iv_layers);
        rn.finish();
      }
      r.finish();
    }
    top.read("seeds", c.seeds);
    top.read("out", c.out);
    if (const json* e = top.child("eval")) {
      Reader r(*e, "eval");
      r.read("terminal_batch", c.terminal_batch);
      r.read("trajectories", c.trajectories);
      r.finish();
    }
    if (const json* o = top.child("oracle")) {
      Reader r(*o, "oracle");
      r.read("consistency_batch", c.consistency_batch);
      r.read("cumulative_batch", c.cumulative_batch);
      r.finish();
    }
    top.finish();
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

ExperimentConfig load_preset(const std::string& preset) {
  std::vector<fs::path> dirs;
  if (const char* env = std::getenv("SDFP_PRESET_DIR")) dirs.emplace_back(env);
#ifdef SDFP_PRESET_DIR
  dirs.emplace_back(SDFP_PRESET_DIR);
#endif
  for (const auto& d : dirs) {
    const fs::path p = d / (preset + ".json");
    if (fs::exists(p)) return load_config(p);
  }
  throw ConfigError("unknown preset '" + preset + "'");
}

ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json j = to_json(c);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  return config_from_json(j);
}

TerminalEvaluation evaluate_terminal(const GameSpec& spec, const SimGrid& grid, const TrainConfig& config,
                                     const AgentNet& net, std::size_t batch, std::uint64_t seed,
                                     std::size_t chunk_rows) {
  const std::size_t n = spec.n;
  const std::size_t chunk = std::max<std::size_t>(1, chunk_rows / n);
  const double dt = grid.dt(spec.T);
  auto rng = stream(seed, 3);
  bool analytic = true;
  try {
    spec.validate(true);
  } catch (const std::invalid_argument&) {
    analytic = false;
  }
  std::optional<RiccatiSolution> riccati;
  if (analytic) riccati.emplace(spec, grid.steps * 25);

  std::vector<double> state, control, cost;
  // Per-agent sums for the RSE terms over the whole batch.
  std::vector<double> sy(n), syy(n), sp(n), spp(n), se(n);
  std::vector<std::size_t> agents(n);
  std::iota(agents.begin(), agents.end(), 0);
  for (std::size_t done = 0; done < batch; done += chunk) {
    const std::size_t rows = std::min(chunk, batch - done);
    const Tensor x0 = sample_initial_states(spec, rows, config.delta0, rng);
    const auto noise = sample_brownian(rows, grid.steps, n, dt, rng);
    NetPolicy play(net, spec, config.scheme, config.u_max);
    const auto paths = simulate_closed_loop(spec, play, x0, noise);
    for (std::size_t b = 0; b < rows; ++b) {
      state.push_back(paths.states.back()[b * n]);
      control.push_back(paths.controls.back()[b * n]);
    }
    const Tensor c = path_costs(spec, paths, dt);
    for (double v : c.data()) cost.push_back(v);
    if (riccati) {
      AgentNet copy = net;
      const Tensor pred = copy.initial_value(x0, agents);
      for (std::size_t i = 0; i < n; ++i) {
        const Tensor truth = analytic_value(spec, *riccati, 0.0, x0, i);
        for (std::size_t b = 0; b < rows; ++b) {
          const double y = truth[b], p = pred[i * rows + b];
          sy[i] += y;
          syy[i] += y * y;
          sp[i] += p;
          spp[i] += p * p;
          se[i] += (p - y) * (p - y);
        }
      }
    }
  }
  TerminalEvaluation e;
  e.batch = batch;
  e.stats.state = terminal_distribution(Tensor({state.size()}, state));
  e.stats.control = terminal_distribution(Tensor({control.size()}, control));
  double m = 0.0;
  for (double v : cost) m += v;
  m /= static_cast<double>(cost.size());
  double var = 0.0;
  for (double v : cost) var += (v - m) * (v - m);
  var /= static_cast<double>(cost.size() > 1 ? cost.size() - 1 : 1);
  e.cost = {m, std::sqrt(var / static_cast<double>(cost.size()))};
  if (riccati) {
    const double b = static_cast<double>(batch);
    double err = 0.0, pred_spread = 0.0, true_spread = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ybar = sy[i] / b;
      err += se[i];
      pred_spread += spp[i] - 2.0 * ybar * sp[i] + b * ybar * ybar;
      true_spread += syy[i] - b * ybar * ybar;
    }
    if (pred_spread > 0.0) e.rse = err / pred_spread;
    if (true_spread > 0.0) e.rse_conventional = err / true_spread;
  }
  return e;
}

std::optional<double> tail_mean(const std::vector<MetricsRecord>& stages, double MetricsRecord::*field,
                                std::size_t last) {
  const std::size_t from = stages.size() > last ? stages.size() - last : 0;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t k = from; k < stages.size(); ++k) {
    acc += stages[k].*field;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return acc / static_cast<double>(count);
}

std::optional<double> tail_mean(const std::vector<MetricsRecord>& stages,
                                std::optional<double> MetricsRecord::*field, std::size_t last) {
  const std::size_t from = stages.size() > last ? stages.size() - last : 0;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t k = from; k < stages.size(); ++k)
    if (const auto& v = stages[k].*field) {
      acc += *v;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return acc / static_cast<double>(count);
}

namespace {

ordered_json seed_summary(const SeedRun& run) {
  const auto& s = run.result.stages;
  ordered_json j;
  j["seed"] = run.seed;
  j["stages"] = s.size();
  j["rse"] = optional_number(tail_mean(s, &MetricsRecord::rse));
  j["rse_conventional"] = optional_number(tail_mean(s, &MetricsRecord::rse_conventional));
  j["eval_loss"] = optional_number(tail_mean(s, &MetricsRecord::eval_loss));
  j["cumulative_loss"] = optional_number(tail_mean(s, &MetricsRecord::cumulative_loss));
  j["convergence_ratio"] = optional_number(tail_mean(s, &MetricsRecord::convergence_ratio));
  j["wall_seconds"] = s.empty() ? 0.0 : s.back().wall_seconds;
  j["clamped"] = run.result.clamped;
  j["aborted"] = run.result.aborted;
  j["failure"] = run.result.failure.empty() ? ordered_json(nullptr) : ordered_json(run.result.failure);
  return j;
}

void write_trajectories(const fs::path& p, const GameSpec& spec, const EvalSet& eval, const ForwardPaths& learned,
                        std::size_t count) {
  auto out = open_out(p);
  out << kTrajectoryHeader << "\n";
  const std::size_t n = spec.n, batch = eval.x0.dim(0), steps = learned.controls.size();
  const double dt = eval.noise.dt;
  const bool analytic = eval.riccati.has_value();
  count = std::min(count, n * batch);
  for (std::size_t path = 0; path < count; ++path) {
    const std::size_t sample = path / n, agent = path % n, at = sample * n + agent;
    for (std::size_t k = 0; k <= steps; ++k) {
      out << path << "," << sample << "," << agent << "," << format_number(dt * static_cast<double>(k)) << ","
          << format_number(learned.states[k][at]) << ",";
      if (k < steps) out << format_number(learned.controls[k][at]);
      out << ",";
      if (analytic) out << format_number(eval.analytic.states[k][at]);
      out << ",";
      if (analytic && k < steps) out << format_number(eval.analytic.controls[k][at]);
      out << "\n";
    }
  }
}

}  // namespace

SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir);
  SimGrid grid = c.grid;
  grid.seed = seed;
  auto metrics = open_out(dir / "metrics.csv");
  metrics << kMetricsHeader << "\n" << std::flush;
  TrainHooks hooks;
  hooks.checkpoint_dir = (dir / "checkpoints").string();
  hooks.on_stage = [&](const MetricsRecord& r, AgentNet&) {
    metrics << metrics_csv_row(r) << "\n" << std::flush;
    std::cerr << "seed " << seed << " stage " << r.stage << ": train " << format_number(r.train_loss) << " eval "
              << format_number(r.eval_loss) << " rse " << cell(r.rse) << " (" << r.wall_seconds << " s)\n";
  };
  SeedRun run;
  run.seed = seed;
  run.dir = dir;
  run.result = fictitious_play_train(c.game, grid, c.train, hooks);

  const EvalSet eval = make_eval_set(c.game, grid, c.train);
  NetPolicy play(run.result.net, c.game, c.train.scheme, c.train.u_max);
  try {
    const ForwardPaths paths = simulate_closed_loop(c.game, play, eval.x0, eval.noise);
    open_out(dir / "terminal_hist.csv") << kHistogramHeader << "\n" << histogram_csv(terminal_stats(paths));
    write_trajectories(dir / "trajectories.csv", c.game, eval, paths, c.trajectories);
  } catch (const NonFiniteError& e) {
    run.result.aborted = true;
    if (run.result.failure.empty()) run.result.failure = std::string("final evaluation: ") + e.what();
  }
  write_json(dir / "summary.json", seed_summary(run));
  return run;
}

ordered_json summarize(const ExperimentConfig& c, const std::vector<SeedRun>& runs) {
  ordered_json j;
  j["preset"] = c.preset;
  j["seeds"] = c.seeds;
  j["stages_averaged"] = std::min<std::size_t>(10, c.train.stages);
  ordered_json per = ordered_json::array();
  for (const auto& r : runs) per.push_back(seed_summary(r));
  for (const char* key : {"rse", "rse_conventional", "eval_loss", "cumulative_loss", "convergence_ratio"}) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& s : per)
      if (!s[key].is_null()) {
        acc += s[key].get<double>();
        ++count;
      }
    j[key] = count ? ordered_json(acc / static_cast<double>(count)) : ordered_json(nullptr);
  }
  bool aborted = false;
  ordered_json failures = ordered_json::array();
  for (const auto& r : runs) {
    aborted = aborted || r.result.aborted;
    if (!r.result.failure.empty()) failures.push_back("seed " + std::to_string(r.seed) + ": " + r.result.failure);
  }
  j["aborted"] = aborted;
  j["failures"] = failures;
  j["per_seed"] = per;
  return j;
}

std::vector<SeedRun> run_train(const ExperimentConfig& c) {
  const fs::path out(c.out);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(c));
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : c.seeds) runs.push_back(run_seed(c, seed, out / ("seed_" + std::to_string(seed))));
  write_json(out / "summary.json", summarize(c, runs));
  return runs;
}

bool run_oracle(const ExperimentConfig& c, ordered_json& report) {
  c.game.validate(true);
  const std::uint64_t seed = c.seeds.front();
  const RiccatiCheck riccati = check_riccati(c.game, 1000);
  const ConsistencyCheck plain =
      check_consistency(c.game, c.grid.steps, c.consistency_batch, seed, false, c.train.delta0);
  const ConsistencyCheck is = check_consistency(c.game, c.grid.steps, c.consistency_batch, seed, true, c.train.delta0);
  const bool agree = values_agree(plain, is);
  const CumulativeCheck cumulative =
      check_cumulative(c.game, c.grid.steps, c.cumulative_batch, seed, c.train.delta0);

  const auto level = [](const ConsistencyLevel& l) {
    return ordered_json{{"steps", l.steps},
                        {"mean_abs_error", l.mean_abs_error},
                        {"mean_error", l.mean_error},
                        {"value", l.value},
                        {"value_std_error", l.value_std_error}};
  };
  const auto consistency = [&](const ConsistencyCheck& k) {
    return ordered_json{{"pass", k.pass()},
                        {"batch", k.batch},
                        {"ratio", k.ratio()},
                        {"band", {kHalvingLow, kHalvingHigh}},
                        {"coarse", level(k.coarse)},
                        {"fine", level(k.fine)},
                        {"analytic_value", k.analytic_value},
                        {"seconds", k.seconds}};
  };
  report = ordered_json::object();
  report["preset"] = c.preset;
  report["checks"] = {
      {"riccati",
       {{"pass", riccati.pass()},
        {"points", riccati.points},
        {"max_error", riccati.max_error},
        {"tolerance", kRiccatiTolerance},
        {"seconds", riccati.seconds}}},
      {"feynman_kac", consistency(plain)},
      {"importance_sampling", consistency(is)},
      {"value_agreement",
       {{"pass", agree},
        {"plain", plain.fine.value},
        {"importance_sampling", is.fine.value},
        {"combined_std_error", std::hypot(plain.fine.value_std_error, is.fine.value_std_error)},
        {"sigmas", kAgreementSigmas}}},
      {"cumulative_loss",
       {{"pass", cumulative.pass()},
        {"batch", cumulative.batch},
        {"coarse", cumulative.coarse},
        {"fine", cumulative.fine},
        {"fine_std_error", cumulative.fine_std_error},
        {"analytic_value", cumulative.analytic_value},
        {"bias", cumulative.bias()},
        {"tolerance", cumulative.tolerance()},
        {"seconds", cumulative.seconds}}}};
  const bool pass = riccati.pass() && plain.pass() && is.pass() && agree && cumulative.pass();
  report["pass"] = pass;
  return pass;
}

void check_comparable(const ExperimentConfig& a, const ExperimentConfig& b) {
  const auto ja = to_json(a), jb = to_json(b);
  for (const char* key : {"game", "grid", "seeds"})
    if (ja[key] != jb[key]) throw ConfigError(std::string("compare: configs differ in '") + key + "'");
  if (a.train.stages != b.train.stages || a.train.iterations != b.train.iterations)
    throw ConfigError("compare: configs differ in stage or iteration counts");
}

ordered_json run_compare(const ExperimentConfig& a, const ExperimentConfig& b, const fs::path& out) {
  check_comparable(a, b);
  ExperimentConfig ca = a, cb = b;
  ca.out = (out / "a").string();
  cb.out = (out / "b").string();
  const auto ra = run_train(ca);
  const auto rb = run_train(cb);

  const auto stage_mean = [](const std::vector<SeedRun>& runs, std::size_t k, auto field) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& r : runs)
      if (k < r.result.stages.size()) {
        const std::optional<double> v = as_optional(r.result.stages[k].*field);
        if (v) {
          acc += *v;
          ++count;
        }
      }
    return count ? std::optional<double>(acc / static_cast<double>(count)) : std::nullopt;
  };
  auto csv = open_out(out / "compare.csv");
  csv << kCompareHeader << "\n";
  for (std::size_t k = 0; k < a.train.stages; ++k) {
    csv << k + 1 << "," << cell(stage_mean(ra, k, &MetricsRecord::eval_loss)) << ","
        << cell(stage_mean(rb, k, &MetricsRecord::eval_loss)) << "," << cell(stage_mean(ra, k, &MetricsRecord::rse))
        << "," << cell(stage_mean(rb, k, &MetricsRecord::rse)) << ","
        << cell(stage_mean(ra, k, &MetricsRecord::cumulative_loss)) << ","
        << cell(stage_mean(rb, k, &MetricsRecord::cumulative_loss)) << "\n";
  }
  const auto sa = summarize(ca, ra), sb = summarize(cb, rb);
  ordered_json j;
  j["a"] = a.preset;
  j["b"] = b.preset;
  j["stages_averaged"] = sa["stages_averaged"];
  ordered_json final = ordered_json::object();
  for (const char* key : {"eval_loss", "rse", "cumulative_loss", "convergence_ratio"}) {
    ordered_json m{{"a", sa[key]}, {"b", sb[key]}, {"delta", nullptr}};
    if (!sa[key].is_null() && !sb[key].is_null()) m["delta"] = sb[key].get<double>() - sa[key].get<double>();
    final[key] = m;
  }
  j["final"] = final;
  write_json(out / "compare.json", j);
  return j;
}

}  // namespace sdfp
