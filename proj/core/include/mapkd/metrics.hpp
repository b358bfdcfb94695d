#pragma once

// Multi-modal forecasting metrics: minADE_K, minFDE_K, miss rate and
// brier-minFDE_K, per scene and aggregated over a dataset or over seeds.

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapkd/synthworld.hpp"

namespace mapkd::metrics {

using world::Point2;

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kMissThreshold = 2.0;

using Trajectory = std::vector<Point2>;

struct Prediction {
  std::vector<Trajectory> modes;
  std::vector<double> probs;  // may be empty when only geometry is scored
};

// Modes reordered by probability, highest first (stable on ties).
Prediction sort_by_probability(const Prediction& p);

// Both use the first K modes in the given order.
double min_ade(std::span<const Trajectory> modes, const Trajectory& gt, int k);
double min_fde(std::span<const Trajectory> modes, const Trajectory& gt, int k);
// Index of the first-K mode with the smallest endpoint error (lower index on ties).
int best_endpoint_mode(std::span<const Trajectory> modes, const Trajectory& gt, int k);

bool is_miss(double min_fde_value);
double miss_rate(std::span<const double> min_fde_values);

// probs must sum to one over the first K modes.
double brier_min_fde(std::span<const Trajectory> modes, std::span<const double> probs, const Trajectory& gt, int k);

struct SceneMetrics {
  double min_ade = 0.0;
  double min_fde = 0.0;
  bool miss = false;
  double brier_min_fde = 0.0;
};

// Sorts by probability, keeps the first K and renormalises their
// probabilities before scoring.
SceneMetrics score_scene(const Prediction& pred, const Trajectory& gt, int k);

struct Aggregate {
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss_rate = 0.0;
  double brier_min_fde = 0.0;
};

struct MetricReport {
  std::map<int, Aggregate> by_k;
  std::vector<std::map<int, SceneMetrics>> per_scene;
};

MetricReport evaluate(std::span<const Prediction> preds, std::span<const Trajectory> gts, std::span<const int> ks);

struct SeedSummary {
  std::map<int, Aggregate> mean;
  std::map<int, Aggregate> stddev;  // sample standard deviation; zero for one run
  int runs = 0;
};

SeedSummary summarize_seeds(std::span<const MetricReport> reports);

// key=value lines, one metric per line, e.g. "minFDE_6=1.234".
std::string to_text(const MetricReport& report, const std::string& prefix = "");
std::string to_text(const SeedSummary& summary, const std::string& prefix = "");
// k,minADE,minFDE,MR,brier_minFDE rows.
std::string to_csv(const MetricReport& report);

}  // namespace mapkd::metrics
