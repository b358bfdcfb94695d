#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mapkd/config.hpp"

using namespace mapkd;

namespace {

ExperimentConfig load(const std::string& text, std::vector<std::string> overrides = {}) {
  return load_config_text(text, overrides);
}

}  // namespace

TEST(Schedule, DeskPresetIsPiecewise) {
  const SchedulePair d = schedule_preset("desk");
  EXPECT_EQ(d.lambda_fd.at(0), 10.0);
  EXPECT_EQ(d.lambda_fd.at(4), 10.0);
  EXPECT_EQ(d.lambda_fd.at(5), 0.1);
  EXPECT_EQ(d.lambda_fd.at(31), 0.1);
  EXPECT_EQ(d.lambda_od.at(4), 1.0);
  EXPECT_DOUBLE_EQ(d.lambda_od.at(5), 0.1);
  EXPECT_DOUBLE_EQ(d.lambda_od.at(10), 0.01);
  EXPECT_DOUBLE_EQ(d.lambda_od.at(19), 0.01);
  EXPECT_DOUBLE_EQ(d.lambda_od.at(20), 0.001);
}

TEST(Schedule, PaperPresetDecaysAtTenTwentyForty) {
  const SchedulePair h = schedule_preset("hivt-paper");
  EXPECT_EQ(h.lambda_fd.at(9), 10.0);
  EXPECT_EQ(h.lambda_fd.at(10), 0.1);
  EXPECT_EQ(h.lambda_od.at(9), 1.0);
  EXPECT_DOUBLE_EQ(h.lambda_od.at(10), 0.1);
  EXPECT_DOUBLE_EQ(h.lambda_od.at(39), 0.01);
  EXPECT_DOUBLE_EQ(h.lambda_od.at(40), 0.001);
  EXPECT_NO_THROW(schedule_preset("vectornet"));
  EXPECT_NO_THROW(schedule_preset("lanegcn"));
  EXPECT_THROW(schedule_preset("nope"), ConfigError);
}

TEST(Schedule, Validation) {
  using E = Schedule::Event;
  EXPECT_NO_THROW((Schedule{1.0, {E{2, true, 0.5}, E{4, false, 0.0}}}.validate()));
  EXPECT_THROW((Schedule{1.0, {E{4, true, 0.5}, E{4, true, 0.5}}}.validate()), ConfigError);
  EXPECT_THROW((Schedule{-1.0, {}}.validate()), ConfigError);
  EXPECT_THROW((Schedule{1.0, {E{1, false, -2.0}}}.validate()), ConfigError);
  EXPECT_EQ(Schedule::constant(3.0).at(100), 3.0);
}

TEST(Load, EmptyTextGivesTheDefaults) {
  const ExperimentConfig c = load("");
  EXPECT_EQ(config_hash(c), config_hash(ExperimentConfig{}));
  EXPECT_EQ(c.train.lambda_fd, schedule_preset("desk").lambda_fd);
  EXPECT_EQ(c.model.hidden, 64);
}

TEST(Load, FileValuesAndOverrides) {
  const ExperimentConfig c = load(R"({"train": {"epochs": 4}, "model": {"hidden": 8}})",
                                  {"train.batch_size=7", "loss.density=gaussian", "experiment.seeds=[5,6]"});
  EXPECT_EQ(c.train.epochs, 4);
  EXPECT_EQ(c.model.hidden, 8);
  EXPECT_EQ(c.train.batch_size, 7);
  EXPECT_EQ(c.loss.density, losses::Density::kGaussian);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{5, 6}));
  // overrides win over the file
  EXPECT_EQ(load(R"({"train": {"epochs": 4}})", {"train.epochs=9"}).train.epochs, 9);
}

TEST(Load, ConstantScheduleFromANumber) {
  const ExperimentConfig c = load("", {"train.lambda_fd=0", "train.lambda_od=0.5"});
  EXPECT_EQ(c.train.lambda_fd.at(0), 0.0);
  EXPECT_EQ(c.train.lambda_fd.at(50), 0.0);
  EXPECT_EQ(c.train.lambda_od.at(50), 0.5);
}

TEST(Load, PresetChoosesSchedulesUnlessGiven) {
  const ExperimentConfig v = load(R"({"experiment": {"schedule_preset": "vectornet"}})");
  EXPECT_EQ(v.train.lambda_od.at(0), 50.0);
  const ExperimentConfig explicit_fd =
      load(R"({"experiment": {"schedule_preset": "vectornet"}, "train": {"lambda_fd": 2.0}})");
  EXPECT_EQ(explicit_fd.train.lambda_fd.at(20), 2.0);
  EXPECT_EQ(explicit_fd.train.lambda_od.at(0), 50.0);
}

TEST(Load, UnknownKeysAndTypeMismatchesAreRejected) {
  EXPECT_THROW(load(R"({"train": {"epoch": 4}})"), ConfigError);
  EXPECT_THROW(load(R"({"bogus": 1})"), ConfigError);
  EXPECT_THROW(load(R"({"train": {"epochs": "four"}})"), ConfigError);
  EXPECT_THROW(load(R"({"train": {"epochs": 2.5}})"), ConfigError);
  EXPECT_THROW(load(R"({"train": 3})"), ConfigError);
  EXPECT_THROW(load("{not json"), ConfigError);
  EXPECT_THROW(load("", {"train.nope=1"}), ConfigError);
  EXPECT_THROW(load("", {"train.epochs"}), ConfigError);
  EXPECT_THROW(load("", {"train.epochs=abc"}), ConfigError);
  EXPECT_THROW(load("", {"model.decoder=transformer"}), ConfigError);
}

TEST(Load, SemanticValidation) {
  EXPECT_THROW(load("", {"train.epochs=0"}), ConfigError);
  EXPECT_THROW(load("", {"experiment.eval_k=[1,7]"}), ConfigError);
  EXPECT_THROW(load("", {"experiment.seeds=[]"}), ConfigError);
  EXPECT_THROW(load("", {"train.history_length=21"}), ConfigError);
  EXPECT_THROW(load("", {"loss.temperature=0"}), ConfigError);
}

TEST(Load, EchoedConfigReproducesItself) {
  const ExperimentConfig c = load("", {"train.epochs=3", "world.intersection_density=0.8", "model.modes=4",
                                       "experiment.eval_k=[1,4]"});
  const std::string echoed = config_to_json(c);
  const ExperimentConfig back = load(echoed);
  EXPECT_EQ(config_to_json(back), echoed);
  EXPECT_EQ(config_hash(back), config_hash(c));

  const auto path = std::filesystem::temp_directory_path() / "mapkd_config_echo.json";
  std::ofstream(path) << echoed;
  const std::vector<std::string> none;
  EXPECT_EQ(config_hash(load_config(path, none)), config_hash(c));
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path, none), ConfigError);
}

TEST(Hash, StableAndSensitive) {
  const ExperimentConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  ExperimentConfig c;
  c.train.learning_rate *= 1.0 + 1e-12;
  EXPECT_NE(config_hash(a), config_hash(c));
}
