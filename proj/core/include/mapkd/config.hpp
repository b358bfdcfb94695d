#pragma once

// Experiment configuration: world generation, model, loss and training
// settings, loaded from JSON with dotted-key overrides.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapkd/losses.hpp"
#include "mapkd/nets.hpp"
#include "mapkd/synthworld.hpp"

namespace mapkd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value that changes at given epochs, either by a factor or to a new value.
struct Schedule {
  struct Event {
    int epoch = 0;
    bool multiply = true;
    double value = 1.0;
    friend bool operator==(const Event&, const Event&) = default;
  };
  double initial = 0.0;
  std::vector<Event> events;

  // Every event with event.epoch <= epoch has been applied (epochs count from 0).
  double at(int epoch) const;
  void validate() const;
  static Schedule constant(double v) { return {v, {}}; }
  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct SchedulePair {
  Schedule lambda_fd;
  Schedule lambda_od;
};

// Named schedules: "hivt-paper", "desk", "vectornet", "lanegcn".
SchedulePair schedule_preset(const std::string& name);

struct TrainConfig {
  int epochs = 32;
  int batch_size = 32;
  double learning_rate = 3e-3;
  // Cosine decay from learning_rate down to learning_rate * final_lr_fraction.
  double final_lr_fraction = 0.05;
  double weight_decay = 1e-4;
  double clip_norm = 10.0;
  std::uint64_t seed = 1;
  Schedule lambda_fd;
  Schedule lambda_od;
  // Student steps visible to the model (teacher always sees the full history).
  int history_length = world::kDefaultObsSteps;
  int eval_every = 0;
  std::string checkpoint;
  // Evaluate distillation terms even when both weights are zero.
  bool always_compute_distill_terms = false;

  void validate() const;
};

// Training defaults with the "desk" schedules.
TrainConfig default_train_config();

struct ExperimentConfig {
  world::DatasetConfig world;
  int train_scenes = 2000;
  int eval_scenes = 500;
  nets::ModelConfig model;
  losses::LossConfig loss;
  TrainConfig train = default_train_config();
  std::string schedule_preset = "desk";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<int> eval_k{1, 6};
  std::vector<int> kscan_k{1, 6, 20};
  std::vector<int> history_lengths{5, 10, 20};

  void validate() const;
};

// Canonical JSON text of the full configuration.
std::string config_to_json(const ExperimentConfig& c, int indent = 2);

// Defaults, then the file (if any), then "a.b.c=value" overrides. Unknown
// keys and type mismatches raise ConfigError. When the file does not set
// the lambda schedules, they come from schedule_preset.
ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides);
ExperimentConfig load_config_text(const std::string& text, std::span<const std::string> overrides);

// FNV-1a over the canonical JSON dump.
std::uint64_t config_hash(const ExperimentConfig& c);

}  // namespace mapkd
