#pragma once

// Small encoder-decoder trajectory predictors. The teacher consumes agent
// histories and the vector map; the student replaces the map branch with an
// attention pool over agent features. Both expose the agent (f_a), map (f_m)
// and fused (f_f) features for distillation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mapkd/diffcore.hpp"
#include "mapkd/synthworld.hpp"

namespace mapkd::nets {

using diff::Parameter;
using diff::ParameterStore;
using diff::Tape;
using diff::Tensor;
using diff::Var;

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DecoderKind { kRegressionGaussian, kRegressionLaplace, kGoalBased };
enum class TapId { kAgent, kMap, kFused };

std::string_view decoder_name(DecoderKind k);
DecoderKind parse_decoder(std::string_view name);
std::string_view tap_name(TapId t);
TapId parse_tap(std::string_view name);

struct ModelConfig {
  int hidden = 64;
  int modes = 6;
  DecoderKind decoder = DecoderKind::kRegressionLaplace;
  std::vector<TapId> taps{TapId::kAgent, TapId::kMap, TapId::kFused};
  bool has_map_branch = true;
  int t_obs = world::kDefaultObsSteps;
  int t_pred = world::kDefaultPredSteps;
  int max_agents = 8;
  int max_segments = 40;
  int segment_points = 8;
  int goal_count = 100;
  double goal_reach = 50.0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Model-input view of a batch of scenes, in each target's local frame.
struct Batch {
  std::size_t size = 0;
  Tensor agent_steps;      // [B, A, T, 5]: x, y, dx, dy, relative time
  Tensor agent_step_pool;  // [B*A, T]: masked-mean weights over valid steps
  Tensor agent_state;      // [B, A, 4]: last valid position and velocity
  Tensor agent_mask;       // [B, A]
  Tensor segments;         // [B, M, 2P+2] (map batches only)
  Tensor segment_mask;     // [B, M]
  Tensor goals;            // [B, N, 2] (map batches only)
  Tensor goal_mask;        // [B, N]
  Tensor cv_prior;         // [B, T_pred, 2] constant-velocity rollout
  Tensor gt;               // [B, T_pred, 2] (empty when futures are unknown)
  std::vector<world::Frame> frames;
  bool has_map = false;
};

struct BatchOptions {
  bool with_map = true;
  bool with_future = true;
  // Observed steps visible to the model, counted back from the last one.
  int history_length = world::kDefaultObsSteps;
};

Batch build_batch(std::span<const world::Scene* const> scenes, const ModelConfig& config,
                  const BatchOptions& options);

struct MixtureOutput {
  Var mu;        // [B, K, T, 2]
  Var sigma;     // [B, K, T, 2]
  Var pi_logits; // [B, K]
  std::optional<Var> sigma_prime;  // [B, K, T, 2], training heads only
};

struct GoalOutput {
  Var logits;  // [B, N]
  Var probs;   // [B, N]
};

// Taps are the pre-activation outputs of each branch's last layer.
struct FeatureTaps {
  Var f_a;  // [B, H]
  Var f_m;  // [B, H]; student: after the projector
  Var f_f;  // [B, H]
  std::optional<Var> delta_a, delta_m, delta_f;

  Var tap(TapId id) const;
  std::optional<Var> delta(TapId id) const;
};

// A tap together with the layer input it was computed from, which feeds the
// training-only delta heads.
struct TapParts {
  Var tap;
  Var hidden;
};

struct ForwardOutput {
  FeatureTaps taps;
  MixtureOutput pred;
  std::optional<GoalOutput> goal;
  Var agent_features;   // [B, A, H] per-agent sub-features
  Var map_token;        // [B, H] map or pseudo-map feature entering fusion
  std::optional<Var> pseudo_map_weights;  // [B, A], student only
};

struct ForwardOptions {
  // Evaluate the distillation-only heads (delta, sigma', projector).
  bool training_heads = false;
};

class Predictor {
 public:
  Predictor(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  ForwardOutput forward(Tape& tape, const Batch& batch, const ForwardOptions& options = {});

  // Individual stages, exposed for tests.
  // Returns activated per-agent features [B, A, H]; target_feature receives
  // the target's row.
  Var encode_agents(Tape& tape, const Batch& batch, Var* target_feature, TapParts* target_tap = nullptr);
  Var encode_map(Tape& tape, const Batch& batch, Var f_a);
  Var pseudo_map_branch(Tape& tape, const Batch& batch, Var agent_features, Var f_a, Var* weights);
  Var project_pseudo_map(Tape& tape, Var pseudo_map, Var* hidden = nullptr);
  // Returns the activated fused feature that feeds the decoders.
  Var fuse(Tape& tape, const Batch& batch, Var f_a, Var map_token, Var agent_features, TapParts* tap = nullptr);
  MixtureOutput decode_regression(Tape& tape, const Batch& batch, Var f_f, bool training_heads);
  GoalOutput decode_goal(Tape& tape, const Batch& batch, Var f_f);

  // Names of parameters used only while distilling.
  static bool is_training_only(const std::string& name);

  void save(const std::filesystem::path& path, bool inference_only = false) const;
  static Predictor load(const std::filesystem::path& path);

  std::uint64_t parameter_hash() const;

 private:
  struct Linear {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    Var operator()(Tape& tape, Var x) const;
  };
  Linear linear(const std::string& name, std::size_t in, std::size_t out);

  ModelConfig config_;
  std::uint64_t seed_;
  ParameterStore params_;
};

// ---- equivalent-feature decomposition ----------------------------------

// A joint pooling layer over agent and map sub-features splits into an
// equivalent agent feature and an equivalent map feature.
struct EquivalentFeatureDecomposition {
  std::vector<double> f_global;
  Tensor f_sub_a;  // [Na, H]
  Tensor f_sub_m;  // [Nm, H]
  std::vector<double> w_a, w_m;
  double agent_weight = 0.0;  // sum of w_a
  double map_weight = 0.0;    // sum of w_m
  // Undefined (empty) when the corresponding total weight is zero.
  std::vector<double> f_e_a, f_e_m;
  std::vector<double> w_a_renorm, w_m_renorm;

  // agent_weight * f_e_a + map_weight * f_e_m
  std::vector<double> reconstruct() const;
};

EquivalentFeatureDecomposition decompose_equivalent(const Tensor& f_sub_a, const Tensor& f_sub_m,
                                                    std::span<const double> w_a, std::span<const double> w_m);

// Joint softmax of agent and map attention scores.
std::pair<std::vector<double>, std::vector<double>> joint_attention_weights(std::span<const double> scores_a,
                                                                            std::span<const double> scores_m);

// Lane points within reach of the origin in the scene's local frame, thinned
// to at most count points.
std::vector<world::Point2> sample_goal_candidates(const world::Scene& scene, const world::Frame& frame,
                                                  double reach, int count);

}  // namespace mapkd::nets
