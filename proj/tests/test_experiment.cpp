#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sdfp/experiment.hpp"

using namespace sdfp;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c;
  c.game.n = 3;
  c.grid.steps = 4;
  c.grid.batch = 8;
  c.train.stages = 2;
  c.train.iterations = 2;
  c.train.eval_batch = 16;
  c.train.net.features = 8;
  c.train.net.own_width = 8;
  c.train.net.lstm_hidden = 8;
  c.train.net.fc_hidden = 8;
  c.train.net.iv_hidden = 8;
  c.trajectories = 2;
  c.seeds = {4};
  c.out = out.string();
  return c;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sdfp_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = load_preset("superlinear-100");
  c.train.lr = 3e-4;
  c.seeds = {7, 9};
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.game.drift, DriftKind::superlinear);
  EXPECT_EQ(back.game.n, 100u);
  EXPECT_DOUBLE_EQ(back.game.a, 1.0);
}

TEST(Config, MissingKeysKeepDefaults) {
  const ExperimentConfig c = config_from_json(nlohmann::json::parse(R"({"game": {"n": 5}})"));
  EXPECT_EQ(c.game.n, 5u);
  EXPECT_DOUBLE_EQ(c.game.q, ExperimentConfig{}.game.q);
  EXPECT_EQ(c.train.stages, ExperimentConfig{}.train.stages);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"gmae": {}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train": {"net": {"width": 3}}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train": {"backbone": "gru"}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"grid": {"steps": "forty"}})")), ConfigError);
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"game": {"n": 0}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train": {"iterations": 0}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"seeds": []})")), ConfigError);
}

TEST(Config, Overrides) {
  ExperimentConfig c = load_preset("sdfp-10");
  c = apply_override(c, "train.lr=1e-4");
  c = apply_override(c, "train.backbone=fc");
  c = apply_override(c, "game.drift=superlinear");
  c = apply_override(c, "seeds=[3,4]");
  EXPECT_DOUBLE_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.backbone, Backbone::fc);
  EXPECT_EQ(c.game.drift, DriftKind::superlinear);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_THROW(apply_override(c, "train.learning_rate=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "train=1"), ConfigError);
}

TEST(Config, PresetsLoad) {
  for (const char* name : {"baseline-10", "sdfp-10", "sdfp-500", "superlinear-100"}) {
    const ExperimentConfig c = load_preset(name);
    EXPECT_EQ(c.preset, name);
    EXPECT_NO_THROW(c.validate());
  }
  EXPECT_EQ(load_preset("sdfp-500").game.n, 500u);
  EXPECT_EQ(load_preset("baseline-10").train.backbone, Backbone::fc);
  EXPECT_FALSE(load_preset("baseline-10").train.use_is);
  EXPECT_THROW(load_preset("nope"), ConfigError);
}

TEST(Config, ComparabilityRequiresSameGame) {
  ExperimentConfig a = tiny("a"), b = tiny("b");
  b.train.backbone = Backbone::fc;
  EXPECT_NO_THROW(check_comparable(a, b));
  b.game.rho = 0.3;
  EXPECT_THROW(check_comparable(a, b), ConfigError);
}

TEST(Run, TrainWritesArtifacts) {
  const fs::path out = scratch("train");
  const ExperimentConfig c = tiny(out);
  const auto runs = run_train(c);
  ASSERT_EQ(runs.size(), 1u);
  const fs::path dir = out / "seed_4";
  EXPECT_EQ(first_line(dir / "metrics.csv"), kMetricsHeader);
  EXPECT_EQ(line_count(dir / "metrics.csv"), 1 + c.train.stages);
  EXPECT_EQ(first_line(dir / "terminal_hist.csv"), kHistogramHeader);
  EXPECT_EQ(first_line(dir / "trajectories.csv"), kTrajectoryHeader);
  // two paths, steps + 1 time points each
  EXPECT_EQ(line_count(dir / "trajectories.csv"), 1 + 2 * (c.grid.steps + 1));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "stage_2.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));

  std::ifstream in(out / "config.json");
  const ExperimentConfig saved = config_from_json(nlohmann::json::parse(in));
  EXPECT_EQ(to_json(saved).dump(), to_json(c).dump());

  std::ifstream s(out / "summary.json");
  const auto summary = nlohmann::json::parse(s);
  EXPECT_FALSE(summary["aborted"].get<bool>());
  EXPECT_TRUE(summary["rse"].is_number());
  fs::remove_all(out);
}

TEST(Run, TerminalEvaluationIsDeterministic) {
  const ExperimentConfig c = tiny("unused");
  AgentNet net(c.train.net_config(c.game.n, c.grid.steps), 1);
  const auto a = evaluate_terminal(c.game, c.grid, c.train, net, 40, 2, 30);
  const auto b = evaluate_terminal(c.game, c.grid, c.train, net, 40, 2, 30);
  EXPECT_EQ(a.batch, 40u);
  EXPECT_EQ(a.cost.mean, b.cost.mean);
  EXPECT_EQ(a.stats.state.std, b.stats.state.std);
  ASSERT_TRUE(a.rse.has_value());
  EXPECT_GT(*a.rse, 0.0);
}

TEST(Run, CompareWritesBothSides) {
  const fs::path out = scratch("compare");
  ExperimentConfig a = tiny(out), b = tiny(out);
  b.train.use_is = false;
  const auto j = run_compare(a, b, out);
  EXPECT_EQ(first_line(out / "compare.csv"), kCompareHeader);
  EXPECT_EQ(line_count(out / "compare.csv"), 1 + a.train.stages);
  EXPECT_TRUE(fs::exists(out / "a" / "seed_4" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "b" / "seed_4" / "metrics.csv"));
  EXPECT_TRUE(j["final"]["eval_loss"]["delta"].is_number());
  EXPECT_TRUE(fs::exists(out / "compare.json"));
  fs::remove_all(out);
}
