// End-to-end acceptance run. Prints one PASS/FAIL line per check and exits
// non-zero when any check fails. Extra arguments are dotted config overrides
// applied to the desk-scale experiment (e.g. train.epochs=4 for a dry run).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <malloc.h>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mapkd/config.hpp"
#include "mapkd/gradsuite.hpp"
#include "mapkd/losses.hpp"
#include "mapkd/metrics.hpp"
#include "mapkd/nets.hpp"
#include "mapkd/trainer.hpp"

using namespace mapkd;
using diff::Tape;
using diff::Tensor;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%2d] %-28s %s  %s\n", id, name.c_str(), ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void note(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- gradient checks ----

void check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_gradcheck_suite("all", 100, 2024);
  const double secs = seconds_since(t0);
  bool ok = !rows.empty() && secs <= 120.0;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : rows) {
    ok = ok && r.pass() && r.trials == 100;
    if (r.max_rel_error / r.tolerance > worst) worst = r.max_rel_error / r.tolerance, worst_name = r.name;
  }
  if (!ok) std::cout << format_gradcheck_table(rows);
  report(1, "gradient checks", ok,
         std::to_string(rows.size()) + " checks x 100 trials, worst err/tol " + fmt("%.2e", worst) + " (" +
             worst_name + "), " + fmt("%.1f s", secs));
}

// ---- stationarity by scan ----

double argmin_scan(const std::function<double(double)>& f, double lo, double hi) {
  const int n = 4000;
  double best = lo, best_v = INFINITY;
  for (int i = 0; i <= n; ++i) {
    const double x = lo * std::pow(hi / lo, static_cast<double>(i) / n);
    const double v = f(x);
    if (v < best_v) best_v = v, best = x;
  }
  const double step = std::pow(hi / lo, 1.0 / n);
  double a = best / step, b = best * step;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) b = d;
    else a = c;
  }
  return 0.5 * (a + b);
}

void check_stationarity() {
  double worst_fkd = 0.0, worst_gauss = 0.0, worst_laplace = 0.0;
  for (double r : {0.03, 0.2, 0.7, 1.0, 2.4, 6.0}) {
    auto fkd = [r](double delta) {
      Tape t;
      return losses::fkd_loss(t.constant(Tensor({1, 1}, r)), t.constant(Tensor({1, 1}, 0.0)),
                              t.constant(Tensor({1, 1}, delta)))
          .item();
    };
    const double d = argmin_scan(fkd, 1e-3, 1e3);
    worst_fkd = std::max(worst_fkd, std::abs(d * d / (2.0 * r * r) - 1.0));

    auto okd = [r](losses::Density density, double s) {
      losses::LossConfig c;
      c.density = density;
      Tape t;
      const Tensor mu_t({1, 1, 1, 2}, {r, 0.0}), logits({1, 1}, 0.0);
      return losses::okd_regression(mu_t, logits, t.constant(Tensor({1, 1, 1, 2}, 0.0)),
                                    t.constant(Tensor({1, 1, 1, 2}, {s, 1.0})), t.constant(logits), c)
          .regression.item();
    };
    const double g = argmin_scan([&](double s) { return okd(losses::Density::kGaussian, s); }, 1e-3, 1e3);
    worst_gauss = std::max(worst_gauss, std::abs(g * g / (r * r) - 1.0));
    const double l = argmin_scan([&](double s) { return okd(losses::Density::kLaplace, s); }, 1e-3, 1e3);
    worst_laplace = std::max(worst_laplace, std::abs(l / r - 1.0));
  }
  const bool ok = worst_fkd <= 1e-6 && worst_gauss <= 1e-6 && worst_laplace <= 1e-6;
  report(2, "stationarity scans", ok,
         "rel err delta^2=2r^2 " + fmt("%.1e", worst_fkd) + ", gaussian " + fmt("%.1e", worst_gauss) +
             ", laplace " + fmt("%.1e", worst_laplace));
}

// ---- metrics against brute force ----

struct Brute {
  double ade, fde, brier;
  bool miss;
};

Brute brute(const metrics::Prediction& p, const metrics::Trajectory& gt, int k) {
  // choose the k most probable modes by repeated selection (first index wins ties)
  std::vector<bool> taken(p.modes.size(), false);
  std::vector<int> chosen;
  for (int i = 0; i < k; ++i) {
    int best = -1;
    for (std::size_t j = 0; j < p.modes.size(); ++j)
      if (!taken[j] && (best < 0 || p.probs[j] > p.probs[best])) best = static_cast<int>(j);
    taken[best] = true;
    chosen.push_back(best);
  }
  double mass = 0.0;
  for (int j : chosen) mass += p.probs[j];
  Brute b{INFINITY, INFINITY, 0.0, false};
  double p_best = 0.0;
  for (int j : chosen) {
    double ade = 0.0;
    for (std::size_t t = 0; t < gt.size(); ++t) ade += std::hypot(p.modes[j][t].x - gt[t].x, p.modes[j][t].y - gt[t].y);
    b.ade = std::min(b.ade, ade / static_cast<double>(gt.size()));
    const double fde = std::hypot(p.modes[j].back().x - gt.back().x, p.modes[j].back().y - gt.back().y);
    if (fde < b.fde) b.fde = fde, p_best = p.probs[j] / mass;
  }
  b.miss = b.fde > 2.0;
  b.brier = b.fde + (1.0 - p_best) * (1.0 - p_best);
  return b;
}

void check_metrics() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-5.0, 5.0), w(0.01, 1.0);
  std::vector<metrics::Prediction> preds;
  std::vector<metrics::Trajectory> gts;
  for (int s = 0; s < 200; ++s) {
    metrics::Prediction p;
    double z = 0.0;
    for (int k = 0; k < 6; ++k) {
      metrics::Trajectory t;
      for (int i = 0; i < 30; ++i) t.push_back({u(rng), u(rng)});
      p.modes.push_back(t);
      z += p.probs.emplace_back(w(rng));
    }
    for (double& v : p.probs) v /= z;
    preds.push_back(p);
    metrics::Trajectory gt;
    for (int i = 0; i < 30; ++i) gt.push_back({u(rng), u(rng)});
    gts.push_back(gt);
  }
  const std::vector<int> ks{1, 2, 3, 4, 5, 6};
  const auto r = metrics::evaluate(preds, gts, ks);
  double worst = 0.0;
  bool ok = true;
  for (int k : ks) {
    double ade = 0, fde = 0, brier = 0, miss = 0;
    for (int s = 0; s < 200; ++s) {
      const Brute b = brute(preds[s], gts[s], k);
      const auto& m = r.per_scene[s].at(k);
      worst = std::max({worst, std::abs(m.min_ade - b.ade), std::abs(m.min_fde - b.fde),
                        std::abs(m.brier_min_fde - b.brier)});
      ok = ok && m.miss == b.miss;
      ade += b.ade, fde += b.fde, brier += b.brier, miss += b.miss;
    }
    const auto& a = r.by_k.at(k);
    worst = std::max({worst, std::abs(a.min_ade - ade / 200), std::abs(a.min_fde - fde / 200),
                      std::abs(a.brier_min_fde - brier / 200), std::abs(a.miss_rate - miss / 200)});
    if (k > 1) {
      const auto& prev = r.by_k.at(k - 1);
      ok = ok && a.min_ade <= prev.min_ade && a.min_fde <= prev.min_fde && a.miss_rate <= prev.miss_rate;
    }
  }
  ok = ok && worst <= 1e-12;
  report(3, "metric oracle", ok, "200 scenes, K=1..6, max abs diff " + fmt("%.1e", worst) + ", monotone in K");
}

// ---- decomposition ----

void check_decomposition() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t na = 1 + rng() % 8, nm = 1 + rng() % 12, H = 1 + rng() % 32;
    Tensor fa({na, H}), fm({nm, H});
    for (std::size_t i = 0; i < fa.size(); ++i) fa[i] = u(rng);
    for (std::size_t i = 0; i < fm.size(); ++i) fm[i] = u(rng);
    std::vector<double> sa(na), sm(nm);
    for (double& s : sa) s = 2.0 * u(rng);
    for (double& s : sm) s = 2.0 * u(rng);
    const auto [wa, wm] = nets::joint_attention_weights(sa, sm);
    const auto d = nets::decompose_equivalent(fa, fm, wa, wm);
    // independent pooled feature
    for (std::size_t h = 0; h < H; ++h) {
      double g = 0.0;
      for (std::size_t i = 0; i < na; ++i) g += wa[i] * fa[i * H + h];
      for (std::size_t i = 0; i < nm; ++i) g += wm[i] * fm[i * H + h];
      worst = std::max({worst, std::abs(d.reconstruct()[h] - g), std::abs(d.f_global[h] - g)});
    }
  }
  report(10, "feature decomposition", worst <= 1e-9, "100 instances, max abs err " + fmt("%.1e", worst));
}

// ---- training runs ----

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.train_scenes = 96;
  c.eval_scenes = 32;
  c.model.hidden = 16;
  c.model.modes = 6;
  c.train.epochs = 3;
  c.train.batch_size = 16;
  c.seeds = {11};
  return c;
}

void check_baseline_recovery() {
  ExperimentConfig c = small_config();
  const auto data = train::make_dataset(c, 11);
  train::RunRecord tr;
  nets::Predictor teacher = train::train_teacher(data.train, c, 11, tr);
  train::RunRecord base;
  const nets::Predictor baseline = train::train_student(data.train, nullptr, c, 5, base);
  c.train.lambda_fd = Schedule::constant(0.0);
  c.train.lambda_od = Schedule::constant(0.0);
  bool ok = true;
  for (bool computed : {false, true}) {
    c.train.always_compute_distill_terms = computed;
    train::RunRecord off;
    const nets::Predictor distilled = train::train_student(data.train, &teacher, c, 5, off);
    ok = ok && off.model_hash == base.model_hash;
    for (const auto& [name, p] : baseline.params()) ok = ok && distilled.params().at(name).value == p.value;
    for (std::size_t e = 0; e < base.epochs.size(); ++e)
      ok = ok && off.epochs[e].mean.pred == base.epochs[e].mean.pred;
  }
  report(4, "zero-weight recovery", ok, "parameters bitwise equal to the baseline, terms skipped and computed");
}

void check_contracts(const train::Comparison& cmp, const train::Dataset& data, const ExperimentConfig& cfg,
                     std::vector<nets::Predictor>& teachers) {
  bool ok = true;
  for (const auto& s : cmp.seeds) {
    ok = ok && s.fokd_record.teacher_hash_before && s.fokd_record.teacher_hash_after &&
         *s.fokd_record.teacher_hash_before == *s.fokd_record.teacher_hash_after &&
         *s.fokd_record.teacher_hash_before == s.teacher_record.model_hash;
  }
  for (std::size_t i = 0; i < teachers.size(); ++i)
    ok = ok && teachers[i].parameter_hash() == cmp.seeds[i].teacher_record.model_hash;

  std::vector<const world::Scene*> ptrs;
  for (std::size_t i = 0; i < 4; ++i) ptrs.push_back(&data.eval[i]);
  nets::Predictor student(train::student_model_config(cfg), 3);
  nets::BatchOptions with_map, mapless;
  mapless.with_map = false;
  Tape t1, t2;
  const auto ot = teachers.front().forward(t1, nets::build_batch(ptrs, teachers.front().config(), with_map));
  const auto os = student.forward(t2, nets::build_batch(ptrs, student.config(), mapless), {.training_heads = true});
  int taps = 0;
  for (nets::TapId id : {nets::TapId::kAgent, nets::TapId::kMap, nets::TapId::kFused}) {
    ok = ok && ot.taps.tap(id).shape() == os.taps.tap(id).shape() && os.taps.delta(id).has_value() &&
         os.taps.delta(id)->value().shape() == os.taps.tap(id).shape();
    ++taps;
  }
  report(5, "frozen teacher, tap shapes", ok,
         std::to_string(cmp.seeds.size()) + " teacher hashes unchanged, " + std::to_string(taps) + " taps matched");
}

void check_gap(const train::Comparison& cmp) {
  const double teacher = cmp.teacher.mean.at(6).min_fde, fokd = cmp.fokd.mean.at(6).min_fde,
               base = cmp.baseline.mean.at(6).min_fde, gain = cmp.relative_gain(6);
  const bool ok = teacher < fokd && fokd < base && gain >= 0.03 && cmp.seconds <= 1800.0;
  std::ostringstream os;
  os << "minFDE6 teacher " << fmt("%.3f", teacher) << " < distilled " << fmt("%.3f", fokd) << " < baseline "
     << fmt("%.3f", base) << ", gain " << fmt("%.1f%%", 100.0 * gain) << ", " << fmt("%.0f s", cmp.seconds);
  report(6, "gap narrowing", ok, os.str());
}

void check_ablation(const train::Ablation& ab, std::size_t seeds) {
  const bool ok = ab.cells.size() == 4 && ab.both_best_seeds >= 2;
  std::ostringstream os;
  for (const auto& c : ab.cells)
    os << (c.fkd ? "F" : "-") << (c.okd ? "O" : "-") << " " << fmt("%.3f", c.summary.mean.at(6).min_fde) << "  ";
  os << "both-on best in " << ab.both_best_seeds << "/" << seeds << " seeds";
  report(7, "ablation grid", ok, os.str());
}

void check_k_scaling(const train::Curve& curve) {
  bool ok = curve.points.size() >= 2;
  std::ostringstream os;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const auto& p = curve.points[i];
    if (i > 0) ok = ok && p.baseline <= curve.points[i - 1].baseline && p.fokd <= curve.points[i - 1].fokd;
    os << "K=" << p.x << " " << fmt("%.3f", p.baseline) << "->" << fmt("%.3f", p.fokd) << " ("
       << fmt("%+.1f%%", 100.0 * p.improvement) << ")  ";
  }
  report(8, "K scaling", ok, os.str());
}

void check_determinism() {
  ExperimentConfig c = small_config();
  const auto data = train::make_dataset(c, 21);
  const auto again = train::make_dataset(c, 21);
  bool ok = data.train.size() == again.train.size();
  const auto a = train::run_comparison(c, data);
  const auto b = train::run_comparison(c, again);
  double worst = 0.0;
  auto cmp_reports = [&](const metrics::MetricReport& x, const metrics::MetricReport& y) {
    for (const auto& [k, m] : x.by_k) {
      const auto& n = y.by_k.at(k);
      worst = std::max({worst, std::abs(m.min_ade - n.min_ade), std::abs(m.min_fde - n.min_fde),
                        std::abs(m.miss_rate - n.miss_rate), std::abs(m.brier_min_fde - n.brier_min_fde)});
    }
  };
  for (std::size_t i = 0; i < a.seeds.size(); ++i) {
    cmp_reports(a.seeds[i].teacher, b.seeds[i].teacher);
    cmp_reports(a.seeds[i].baseline, b.seeds[i].baseline);
    cmp_reports(a.seeds[i].fokd, b.seeds[i].fokd);
    ok = ok && a.seeds[i].fokd_record.to_json(false) == b.seeds[i].fokd_record.to_json(false) &&
         a.seeds[i].teacher_record.to_json(false) == b.seeds[i].teacher_record.to_json(false);
  }
  ok = ok && worst <= 1e-9;
  report(9, "determinism", ok, "repeat run max metric diff " + fmt("%.1e", worst) + ", run records identical");
}

}  // namespace

int main(int argc, char** argv) {
  // Tape tensors are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> overrides(argv + 1, argv + argc);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    check_gradients();
    check_stationarity();
    check_metrics();
    check_baseline_recovery();

    const ExperimentConfig cfg = load_config_text("", overrides);
    note("desk-scale comparison: " + std::to_string(cfg.train_scenes) + " train / " +
         std::to_string(cfg.eval_scenes) + " eval scenes, " + std::to_string(cfg.seeds.size()) + " seeds");
    const auto data = train::make_dataset(cfg, cfg.seeds.front());
    std::vector<nets::Predictor> teachers;
    const auto cmp = train::run_comparison(cfg, data, note, &teachers);
    check_contracts(cmp, data, cfg, teachers);
    check_gap(cmp);
    const auto ab = train::run_ablation(cfg, data, teachers, &cmp, note);
    check_ablation(ab, cfg.seeds.size());
    check_k_scaling(train::run_k_scaling(cfg, data, note));
    check_determinism();
    check_decomposition();
  } catch (const std::exception& e) {
    std::printf("aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d check(s) failed, %.0f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
