#pragma once

// Two-stage training: a map-aware teacher trained on prediction loss, then a
// mapless student trained against the frozen teacher with feature and output
// distillation. Also the experiment harnesses built on top of it.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mapkd/config.hpp"
#include "mapkd/losses.hpp"
#include "mapkd/metrics.hpp"
#include "mapkd/nets.hpp"

namespace mapkd::train {

using nets::Predictor;
using world::Scene;

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Adam with decoupled weight decay on weight matrices (".w" parameters):
//   m = b1*m + (1-b1)*g,  v = b2*v + (1-b2)*g^2
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(diff::ParameterStore& params, double lr);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Scales all gradients so their global norm is at most max_norm; returns the
// norm before scaling.
double clip_gradients(diff::ParameterStore& params, double max_norm);

// Cosine decay over the run, evaluated at the start of each epoch.
double learning_rate_at(const TrainConfig& t, int epoch);

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0.0;
  double lambda_fd = 0.0;
  double lambda_od = 0.0;
  losses::LossReport mean;
  double grad_norm = 0.0;  // mean pre-clip global norm
};

struct RunRecord {
  std::string kind;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  double wall_seconds = 0.0;
  std::vector<EpochLog> epochs;
  std::vector<std::pair<int, metrics::MetricReport>> evals;
  std::uint64_t model_hash = 0;
  std::optional<std::uint64_t> teacher_hash_before;
  std::optional<std::uint64_t> teacher_hash_after;

  // Everything except wall time is reproducible from (config, seed).
  std::string to_json(bool include_wall_time = true, int indent = 2) const;
};

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> eval;
};

// Scenes [0, train) for training and [train, train+eval) for evaluation, all
// drawn from one master seed.
Dataset make_dataset(const ExperimentConfig& config, std::uint64_t seed);

nets::ModelConfig teacher_model_config(const ExperimentConfig& config);
nets::ModelConfig student_model_config(const ExperimentConfig& config);

using EpochHook = std::function<void(const RunRecord&, const EpochLog&)>;

struct RunOptions {
  const std::vector<Scene>* eval = nullptr;  // used when train.eval_every > 0
  EpochHook on_epoch;
};

Predictor train_teacher(std::span<const Scene> train, const ExperimentConfig& config, std::uint64_t seed,
                        RunRecord& record, const RunOptions& options = {});

// Teacher outputs computed once per scene; the teacher is frozen.
struct TeacherCache {
  std::vector<diff::Tensor> mu, sigma, pi_logits;    // [K,T,2], [K,T,2], [K]
  std::map<nets::TapId, std::vector<diff::Tensor>> taps;  // [H]
  std::vector<diff::Tensor> goals, goal_probs, goal_mask;  // goal-based teachers only
};
TeacherCache cache_teacher(Predictor& teacher, std::span<const Scene> scenes, int batch_size);

// With teacher == nullptr this is the plain mapless baseline: only the
// prediction loss is built. Otherwise the scheduled distillation terms are
// added (and skipped while their weight is zero, unless
// train.always_compute_distill_terms).
Predictor train_student(std::span<const Scene> train, Predictor* teacher, const ExperimentConfig& config,
                        std::uint64_t seed, RunRecord& record, const RunOptions& options = {});

std::vector<metrics::Prediction> predict(Predictor& model, std::span<const Scene> scenes, int batch_size,
                                         int history_length);
std::vector<metrics::Trajectory> ground_truths(std::span<const Scene> scenes);
metrics::MetricReport evaluate_model(Predictor& model, std::span<const Scene> scenes, std::span<const int> ks,
                                     int batch_size, int history_length);

// ---- experiments -------------------------------------------------------

struct SeedModels {
  std::uint64_t seed = 0;
  RunRecord teacher_record, baseline_record, fokd_record;
  metrics::MetricReport teacher, baseline, fokd;
};

struct Comparison {
  std::vector<SeedModels> seeds;
  metrics::SeedSummary teacher, baseline, fokd;
  double seconds = 0.0;

  double relative_gain(int k) const;  // (baseline - fokd) / baseline on seed-mean minFDE_k
};

using Progress = std::function<void(const std::string&)>;

// Teacher, mapless baseline and distilled student for every configured seed.
// Teachers can be supplied (one per seed) to skip pretraining.
Comparison run_comparison(const ExperimentConfig& config, const Dataset& data, const Progress& progress = {},
                          std::vector<Predictor>* teachers_out = nullptr);

struct AblationCell {
  bool fkd = false;
  bool okd = false;
  std::vector<metrics::MetricReport> per_seed;
  metrics::SeedSummary summary;
};

struct Ablation {
  std::vector<AblationCell> cells;  // (off,off), (on,off), (off,on), (on,on)
  // Seeds where the both-on cell is <= each single-on cell on minFDE_6.
  int both_best_seeds = 0;
  std::string table(int k) const;
};

// The baseline and both-on cells are taken from `done` when given.
Ablation run_ablation(const ExperimentConfig& config, const Dataset& data, std::vector<Predictor>& teachers,
                      const Comparison* done = nullptr, const Progress& progress = {});

struct CurvePoint {
  int x = 0;  // K or history length
  double baseline = 0.0;
  double fokd = 0.0;
  double improvement = 0.0;  // relative
};

struct Curve {
  std::string axis;
  std::vector<CurvePoint> points;
  std::string csv() const;
};

// minFDE_K of two models over a list of K.
Curve k_scaling(Predictor& student, Predictor& baseline, std::span<const Scene> scenes, std::span<const int> ks,
                int batch_size);

// Trains teacher, baseline and distilled student with max(ks) modes (first
// seed only) and evaluates them over ks.
Curve run_k_scaling(const ExperimentConfig& config, const Dataset& data, const Progress& progress = {});

// Baseline vs distilled student with the student history truncated to each
// length; the teacher keeps the full history.
Curve run_history_sweep(const ExperimentConfig& config, const Dataset& data, Predictor& teacher,
                        const Progress& progress = {});

}  // namespace mapkd::train
