#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mapkd/metrics.hpp"

using namespace mapkd::metrics;

namespace {

Trajectory line(int T, double x0, double y0, double dx = 1.0) {
  Trajectory t;
  for (int i = 0; i < T; ++i) t.push_back({x0 + dx * i, y0});
  return t;
}

Prediction random_prediction(std::mt19937_64& rng, int modes, int T) {
  std::uniform_real_distribution<double> u(-4.0, 4.0), p(0.01, 1.0);
  Prediction pr;
  double z = 0.0;
  for (int k = 0; k < modes; ++k) {
    Trajectory t;
    for (int i = 0; i < T; ++i) t.push_back({u(rng), u(rng)});
    pr.modes.push_back(t);
    z += pr.probs.emplace_back(p(rng));
  }
  for (double& v : pr.probs) v /= z;
  return pr;
}

// Independent re-statement of the metric definitions.
struct Oracle {
  double ade, fde, brier;
  bool miss;
};

Oracle oracle(const Prediction& pred, const Trajectory& gt, int k) {
  std::vector<int> order(pred.modes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  // insertion sort, descending probability, stable
  for (std::size_t i = 1; i < order.size(); ++i)
    for (std::size_t j = i; j > 0 && pred.probs[order[j]] > pred.probs[order[j - 1]]; --j) std::swap(order[j], order[j - 1]);
  double mass = 0.0;
  for (int i = 0; i < k; ++i) mass += pred.probs[order[i]];
  Oracle o{INFINITY, INFINITY, 0.0, false};
  double p_best = 0.0;
  for (int i = 0; i < k; ++i) {
    const Trajectory& m = pred.modes[order[i]];
    double ade = 0.0;
    for (std::size_t t = 0; t < gt.size(); ++t) ade += std::hypot(m[t].x - gt[t].x, m[t].y - gt[t].y);
    ade /= static_cast<double>(gt.size());
    o.ade = std::min(o.ade, ade);
    const double fde = std::hypot(m.back().x - gt.back().x, m.back().y - gt.back().y);
    if (fde < o.fde) o.fde = fde, p_best = pred.probs[order[i]] / mass;
  }
  o.miss = o.fde > 2.0;
  o.brier = o.fde + (1.0 - p_best) * (1.0 - p_best);
  return o;
}

}  // namespace

TEST(MinAde, ExactAndOffsetModes) {
  const Trajectory gt = line(30, 0.0, 0.0);
  const std::vector<Trajectory> exact{gt};
  EXPECT_EQ(min_ade(exact, gt, 1), 0.0);
  const std::vector<Trajectory> offset{line(30, 0.0, 1.0)};
  EXPECT_DOUBLE_EQ(min_ade(offset, gt, 1), 1.0);
  EXPECT_THROW(min_ade(offset, gt, 2), MetricError);
  EXPECT_THROW(min_ade(offset, gt, 0), MetricError);
  const std::vector<Trajectory> short_mode{line(29, 0.0, 0.0)};
  EXPECT_THROW(min_ade(short_mode, gt, 1), MetricError);
}

TEST(MinFde, OrderDecidesTheFirstK) {
  const Trajectory gt = line(5, 0.0, 0.0);
  const std::vector<Trajectory> modes{line(5, 0.0, 3.0), line(5, 0.0, -1.0)};
  EXPECT_DOUBLE_EQ(min_fde(modes, gt, 2), 1.0);
  EXPECT_DOUBLE_EQ(min_fde(modes, gt, 1), 3.0);
  EXPECT_EQ(best_endpoint_mode(modes, gt, 2), 1);
  const std::vector<Trajectory> tie{line(5, 0.0, 1.0), line(5, 0.0, -1.0)};
  EXPECT_EQ(best_endpoint_mode(tie, gt, 2), 0);
}

TEST(MissRate, StrictThreshold) {
  EXPECT_TRUE(is_miss(2.5));
  EXPECT_FALSE(is_miss(2.0));
  const std::vector<double> all_exact{0.0, 0.0, 0.0};
  EXPECT_EQ(miss_rate(all_exact), 0.0);
  const std::vector<double> mixed{2.0, 2.0000001, 0.5, 7.0};
  EXPECT_DOUBLE_EQ(miss_rate(mixed), 0.5);
  EXPECT_THROW(miss_rate(std::vector<double>{}), MetricError);
}

TEST(Brier, PenalisesLowConfidenceInTheBestMode) {
  const Trajectory gt = line(4, 0.0, 0.0);
  const std::vector<Trajectory> two{line(4, 0.0, 1.0), line(4, 0.0, 5.0)};
  EXPECT_NEAR(brier_min_fde(two, std::vector<double>{0.6, 0.4}, gt, 2), 1.16, 1e-15);
  EXPECT_DOUBLE_EQ(brier_min_fde(two, std::vector<double>{1.0, 0.0}, gt, 2), 1.0);
  std::vector<Trajectory> six;
  for (int k = 0; k < 6; ++k) six.push_back(line(4, 0.0, 1.0 + k));
  EXPECT_NEAR(brier_min_fde(six, std::vector<double>(6, 1.0 / 6.0), gt, 6), 1.0 + 25.0 / 36.0, 1e-15);
  EXPECT_THROW(brier_min_fde(two, std::vector<double>{0.6, 0.6}, gt, 2), MetricError);
  EXPECT_THROW(brier_min_fde(two, std::vector<double>{1.2, -0.2}, gt, 2), MetricError);
}

TEST(SceneScore, SortsTruncatesAndRenormalises) {
  const Trajectory gt = line(3, 0.0, 0.0);
  Prediction p;
  p.modes = {line(3, 0.0, 4.0), line(3, 0.0, 1.0), line(3, 0.0, 9.0)};
  p.probs = {0.2, 0.3, 0.5};
  const auto s = score_scene(p, gt, 2);
  // first two by probability are the 9 m and 1 m modes; 0.3 / 0.8 on the best
  EXPECT_DOUBLE_EQ(s.min_fde, 1.0);
  EXPECT_NEAR(s.brier_min_fde, 1.0 + (1.0 - 0.375) * (1.0 - 0.375), 1e-15);
  EXPECT_FALSE(s.miss);
  EXPECT_DOUBLE_EQ(score_scene(p, gt, 1).min_fde, 9.0);
  EXPECT_TRUE(score_scene(p, gt, 1).miss);
}

TEST(Oracle, TwoHundredRandomScenes) {
  std::mt19937_64 rng(42);
  std::vector<Prediction> preds;
  std::vector<Trajectory> gts;
  for (int s = 0; s < 200; ++s) {
    preds.push_back(random_prediction(rng, 6, 8));
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    Trajectory gt;
    for (int i = 0; i < 8; ++i) gt.push_back({u(rng), u(rng)});
    gts.push_back(gt);
  }
  const std::vector<int> ks{1, 3, 6};
  const MetricReport r = evaluate(preds, gts, ks);
  for (int k : ks) {
    double ade = 0.0, fde = 0.0, brier = 0.0, miss = 0.0;
    for (int s = 0; s < 200; ++s) {
      const Oracle o = oracle(preds[s], gts[s], k);
      const SceneMetrics& m = r.per_scene[s].at(k);
      EXPECT_NEAR(m.min_ade, o.ade, 1e-12);
      EXPECT_NEAR(m.min_fde, o.fde, 1e-12);
      EXPECT_NEAR(m.brier_min_fde, o.brier, 1e-12);
      EXPECT_EQ(m.miss, o.miss);
      ade += o.ade, fde += o.fde, brier += o.brier, miss += o.miss;
    }
    EXPECT_NEAR(r.by_k.at(k).min_ade, ade / 200, 1e-12);
    EXPECT_NEAR(r.by_k.at(k).min_fde, fde / 200, 1e-12);
    EXPECT_NEAR(r.by_k.at(k).brier_min_fde, brier / 200, 1e-12);
    EXPECT_NEAR(r.by_k.at(k).miss_rate, miss / 200, 1e-12);
  }
}

TEST(Properties, MonotoneInK) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Prediction p = random_prediction(rng, 6, 5);
    const Trajectory gt = random_prediction(rng, 1, 5).modes[0];
    std::vector<Prediction> preds{p};
    std::vector<Trajectory> gts{gt};
    const std::vector<int> ks{1, 2, 3, 4, 5, 6};
    const MetricReport r = evaluate(preds, gts, ks);
    for (int k = 2; k <= 6; ++k) {
      const auto& a = r.by_k.at(k - 1);
      const auto& b = r.by_k.at(k);
      EXPECT_LE(b.min_ade, a.min_ade);
      EXPECT_LE(b.min_fde, a.min_fde);
      EXPECT_LE(b.miss_rate, a.miss_rate);
      EXPECT_GE(b.brier_min_fde, b.min_fde);
      EXPECT_GE(b.miss_rate, 0.0);
      EXPECT_LE(b.miss_rate, 1.0);
    }
  }
}

TEST(Seeds, MeanAndSampleStd) {
  std::mt19937_64 rng(1);
  std::vector<MetricReport> runs;
  const Trajectory gt = line(3, 0.0, 0.0);
  for (double off : {1.0, 2.0, 4.0}) {
    Prediction p;
    p.modes = {line(3, 0.0, off)};
    p.probs = {1.0};
    std::vector<Prediction> preds{p};
    std::vector<Trajectory> gts{gt};
    const std::vector<int> ks{1};
    runs.push_back(evaluate(preds, gts, ks));
  }
  const SeedSummary s = summarize_seeds(runs);
  EXPECT_EQ(s.runs, 3);
  EXPECT_NEAR(s.mean.at(1).min_fde, 7.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.stddev.at(1).min_fde, std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                                 (4 - 7.0 / 3) * (4 - 7.0 / 3)) / 2.0),
              1e-14);
  EXPECT_EQ(summarize_seeds(std::span(runs).first(1)).stddev.at(1).min_fde, 0.0);
  EXPECT_THROW(summarize_seeds(std::vector<MetricReport>{}), MetricError);
}

TEST(Output, TextAndCsv) {
  Prediction p;
  p.modes = {line(3, 0.0, 1.0)};
  p.probs = {1.0};
  std::vector<Prediction> preds{p};
  std::vector<Trajectory> gts{line(3, 0.0, 0.0)};
  const std::vector<int> ks{1};
  const MetricReport r = evaluate(preds, gts, ks);
  const std::string text = to_text(r);
  EXPECT_NE(text.find("minFDE_1=1"), std::string::npos) << text;
  EXPECT_NE(to_csv(r).find("k,minADE,minFDE,MR,brier_minFDE"), std::string::npos);
}
