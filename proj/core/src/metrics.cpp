#include "mapkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace mapkd::metrics {

namespace {

void check_k(std::span<const Trajectory> modes, const Trajectory& gt, int k) {
  if (k < 1) throw MetricError("K must be at least 1");
  if (static_cast<std::size_t>(k) > modes.size()) {
    throw MetricError("K=" + std::to_string(k) + " exceeds the " + std::to_string(modes.size()) + " predicted modes");
  }
  if (gt.empty()) throw MetricError("empty ground truth");
  for (int i = 0; i < k; ++i) {
    if (modes[i].size() != gt.size()) throw MetricError("mode length differs from ground truth");
  }
}

double ade(const Trajectory& a, const Trajectory& b) {
  double s = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) s += world::distance(a[t], b[t]);
  return s / static_cast<double>(a.size());
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

Prediction sort_by_probability(const Prediction& p) {
  if (p.probs.empty()) return p;
  if (p.probs.size() != p.modes.size()) throw MetricError("one probability per mode required");
  std::vector<std::size_t> order(p.modes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.probs[a] > p.probs[b]; });
  Prediction out;
  for (std::size_t i : order) {
    out.modes.push_back(p.modes[i]);
    out.probs.push_back(p.probs[i]);
  }
  return out;
}

double min_ade(std::span<const Trajectory> modes, const Trajectory& gt, int k) {
  check_k(modes, gt, k);
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i) best = std::min(best, ade(modes[i], gt));
  return best;
}

int best_endpoint_mode(std::span<const Trajectory> modes, const Trajectory& gt, int k) {
  check_k(modes, gt, k);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i) {
    const double d = world::distance(modes[i].back(), gt.back());
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

double min_fde(std::span<const Trajectory> modes, const Trajectory& gt, int k) {
  return world::distance(modes[best_endpoint_mode(modes, gt, k)].back(), gt.back());
}

bool is_miss(double min_fde_value) { return min_fde_value > kMissThreshold; }

double miss_rate(std::span<const double> min_fde_values) {
  if (min_fde_values.empty()) throw MetricError("miss rate of an empty dataset");
  const auto misses = std::count_if(min_fde_values.begin(), min_fde_values.end(), is_miss);
  return static_cast<double>(misses) / static_cast<double>(min_fde_values.size());
}

double brier_min_fde(std::span<const Trajectory> modes, std::span<const double> probs, const Trajectory& gt, int k) {
  check_k(modes, gt, k);
  if (probs.size() < static_cast<std::size_t>(k)) throw MetricError("missing mode probabilities");
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    if (probs[i] < 0.0) throw MetricError("negative mode probability");
    total += probs[i];
  }
  if (std::fabs(total - 1.0) > 1e-6) throw MetricError("mode probabilities are not normalised over K");
  const int best = best_endpoint_mode(modes, gt, k);
  const double miss_p = 1.0 - probs[best];
  return world::distance(modes[best].back(), gt.back()) + miss_p * miss_p;
}

SceneMetrics score_scene(const Prediction& pred, const Trajectory& gt, int k) {
  const Prediction sorted = sort_by_probability(pred);
  SceneMetrics m;
  m.min_ade = min_ade(sorted.modes, gt, k);
  m.min_fde = min_fde(sorted.modes, gt, k);
  m.miss = is_miss(m.min_fde);
  std::vector<double> probs(k, 1.0 / k);
  if (!sorted.probs.empty()) {
    const double total = std::accumulate(sorted.probs.begin(), sorted.probs.begin() + k, 0.0);
    if (!(total > 0.0)) throw MetricError("mode probabilities sum to zero");
    for (int i = 0; i < k; ++i) probs[i] = sorted.probs[i] / total;
  }
  m.brier_min_fde = brier_min_fde(sorted.modes, probs, gt, k);
  return m;
}

MetricReport evaluate(std::span<const Prediction> preds, std::span<const Trajectory> gts, std::span<const int> ks) {
  if (preds.empty()) throw MetricError("empty dataset");
  if (preds.size() != gts.size()) throw MetricError("one ground truth per prediction required");
  MetricReport report;
  report.per_scene.resize(preds.size());
  for (int k : ks) {
    Aggregate agg;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const SceneMetrics m = score_scene(preds[i], gts[i], k);
      report.per_scene[i][k] = m;
      agg.min_ade += m.min_ade;
      agg.min_fde += m.min_fde;
      agg.miss_rate += m.miss ? 1.0 : 0.0;
      agg.brier_min_fde += m.brier_min_fde;
    }
    const double n = static_cast<double>(preds.size());
    agg.min_ade /= n;
    agg.min_fde /= n;
    agg.miss_rate /= n;
    agg.brier_min_fde /= n;
    report.by_k[k] = agg;
  }
  return report;
}

SeedSummary summarize_seeds(std::span<const MetricReport> reports) {
  if (reports.empty()) throw MetricError("no runs to summarise");
  SeedSummary s;
  s.runs = static_cast<int>(reports.size());
  const double n = static_cast<double>(reports.size());
  for (const auto& [k, _] : reports.front().by_k) {
    std::vector<Aggregate> xs;
    for (const auto& r : reports) {
      auto it = r.by_k.find(k);
      if (it == r.by_k.end()) throw MetricError("runs report different K sets");
      xs.push_back(it->second);
    }
    auto stat = [&](double Aggregate::*field, double& mean, double& sd) {
      mean = 0.0;
      for (const auto& x : xs) mean += x.*field;
      mean /= n;
      double ss = 0.0;
      for (const auto& x : xs) ss += (x.*field - mean) * (x.*field - mean);
      sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    };
    Aggregate& m = s.mean[k];
    Aggregate& d = s.stddev[k];
    stat(&Aggregate::min_ade, m.min_ade, d.min_ade);
    stat(&Aggregate::min_fde, m.min_fde, d.min_fde);
    stat(&Aggregate::miss_rate, m.miss_rate, d.miss_rate);
    stat(&Aggregate::brier_min_fde, m.brier_min_fde, d.brier_min_fde);
  }
  return s;
}

std::string to_text(const MetricReport& report, const std::string& prefix) {
  std::ostringstream out;
  for (const auto& [k, a] : report.by_k) {
    const std::string s = "_" + std::to_string(k) + "=";
    out << prefix << "minADE" << s << fmt(a.min_ade) << '\n'
        << prefix << "minFDE" << s << fmt(a.min_fde) << '\n'
        << prefix << "MR" << s << fmt(a.miss_rate) << '\n'
        << prefix << "brier_minFDE" << s << fmt(a.brier_min_fde) << '\n';
  }
  return out.str();
}

std::string to_text(const SeedSummary& summary, const std::string& prefix) {
  std::ostringstream out;
  for (const auto& [k, m] : summary.mean) {
    const Aggregate& d = summary.stddev.at(k);
    const std::string s = "_" + std::to_string(k) + "=";
    out << prefix << "minADE" << s << fmt(m.min_ade) << " +- " << fmt(d.min_ade) << '\n'
        << prefix << "minFDE" << s << fmt(m.min_fde) << " +- " << fmt(d.min_fde) << '\n'
        << prefix << "MR" << s << fmt(m.miss_rate) << " +- " << fmt(d.miss_rate) << '\n'
        << prefix << "brier_minFDE" << s << fmt(m.brier_min_fde) << " +- " << fmt(d.brier_min_fde) << '\n';
  }
  return out.str();
}

std::string to_csv(const MetricReport& report) {
  std::ostringstream out;
  out << "k,minADE,minFDE,MR,brier_minFDE\n";
  for (const auto& [k, a] : report.by_k) {
    out << k << ',' << fmt(a.min_ade) << ',' << fmt(a.min_fde) << ',' << fmt(a.miss_rate) << ','
        << fmt(a.brier_min_fde) << '\n';
  }
  return out.str();
}

}  // namespace mapkd::metrics
