#include "mapkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace mapkd::train {

using diff::Tape;
using diff::Tensor;
using diff::Var;
using nlohmann::json;

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(diff::ParameterStore& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (p.grad.size() != p.value.size()) continue;
    Moments& s = state_[name];
    if (s.m.empty()) {
      s.m.assign(p.value.size(), 0.0);
      s.v.assign(p.value.size(), 0.0);
    }
    const bool decay = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g;
      s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g * g;
      double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
      if (decay) update += wd_ * p.value[i];
      p.value[i] -= lr * update;
    }
  }
}

double clip_gradients(diff::ParameterStore& params, double max_norm) {
  double ss = 0.0;
  for (auto& [_, p] : params)
    for (double g : p.grad.data()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (!std::isfinite(norm)) throw TrainError("non-finite gradient norm");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : params)
      for (double& g : p.grad.data()) g *= s;
  }
  return norm;
}

double learning_rate_at(const TrainConfig& t, int epoch) {
  const double progress = t.epochs > 1 ? static_cast<double>(epoch) / t.epochs : 0.0;
  const double f = t.final_lr_fraction;
  return t.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

namespace {

json report_json(const losses::LossReport& r) {
  json fkd = json::object();
  for (const auto& [name, v] : r.fkd) fkd[name] = v;
  return {{"pred", r.pred}, {"fkd", fkd}, {"okd", r.okd}, {"total", r.total}};
}

json metric_json(const metrics::MetricReport& m) {
  json j = json::object();
  for (const auto& [k, a] : m.by_k) {
    j[std::to_string(k)] = {
        {"minADE", a.min_ade}, {"minFDE", a.min_fde}, {"MR", a.miss_rate}, {"brier_minFDE", a.brier_min_fde}};
  }
  return j;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

losses::Density decoder_density(const nets::ModelConfig& m) {
  return m.decoder == nets::DecoderKind::kRegressionGaussian ? losses::Density::kGaussian : losses::Density::kLaplace;
}

std::vector<const Scene*> pick(std::span<const Scene> scenes, std::span<const std::size_t> idx) {
  std::vector<const Scene*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&scenes[i]);
  return out;
}

Tensor stack(const std::vector<Tensor>& per_scene, std::span<const std::size_t> idx) {
  diff::Shape shape = per_scene.at(idx.front()).shape();
  shape.insert(shape.begin(), idx.size());
  Tensor out(shape);
  const std::size_t n = per_scene[idx.front()].size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& t = per_scene[idx[b]];
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + b * n);
  }
  return out;
}

// Row b of a [B, ...] tensor.
Tensor row(const Tensor& t, std::size_t b) {
  diff::Shape shape(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = diff::shape_size(shape);
  return Tensor(shape, std::vector<double>(t.data().begin() + b * n, t.data().begin() + (b + 1) * n));
}

// Cross-entropy of the goal nearest to each ground-truth endpoint.
Var goal_ce(Tape& tape, Var probs, const nets::Batch& batch) {
  const std::size_t B = batch.size, N = batch.goals.dim(1), T = batch.gt.dim(1);
  Tensor w({B, N});
  for (std::size_t b = 0; b < B; ++b) {
    const double gx = batch.gt[(b * T + T - 1) * 2], gy = batch.gt[(b * T + T - 1) * 2 + 1];
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < N; ++n) {
      if (batch.goal_mask[b * N + n] == 0.0) continue;
      const double d = std::hypot(batch.goals[(b * N + n) * 2] - gx, batch.goals[(b * N + n) * 2 + 1] - gy);
      if (d < best_d) {
        best_d = d;
        best = n;
      }
    }
    w[b * N + best] = 1.0 / static_cast<double>(B);
  }
  return diff::neg(diff::sum(diff::mul(diff::log(diff::clamp(probs, 1e-12, 1.0)), tape.constant(w))));
}

using StepFn = std::function<losses::LossReport(Tape&, std::span<const std::size_t>, int epoch, long step)>;

void run_epochs(Predictor& model, std::size_t scene_count, const ExperimentConfig& cfg, std::uint64_t seed,
                RunRecord& record, const RunOptions& options, const StepFn& step) {
  const TrainConfig& t = cfg.train;
  const auto start = std::chrono::steady_clock::now();
  AdamW adam(t.weight_decay);
  std::mt19937_64 rng(world::derive_seed(seed, 0x7261696eULL));
  std::vector<std::size_t> order(scene_count);
  std::iota(order.begin(), order.end(), 0);
  long step_index = 0;
  for (int epoch = 0; epoch < t.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = learning_rate_at(t, epoch);
    log.lambda_fd = t.lambda_fd.at(epoch);
    log.lambda_od = t.lambda_od.at(epoch);
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += t.batch_size) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(t.batch_size));
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      model.params().zero_grad();
      losses::LossReport r;
      {
        Tape tape;
        r = step(tape, idx, epoch, step_index++);
      }
      log.grad_norm += clip_gradients(model.params(), t.clip_norm);
      adam.step(model.params(), log.learning_rate);
      log.mean.pred += r.pred;
      log.mean.okd += r.okd;
      log.mean.total += r.total;
      if (log.mean.fkd.empty()) log.mean.fkd = r.fkd;
      else
        for (std::size_t i = 0; i < r.fkd.size(); ++i) log.mean.fkd[i].second += r.fkd[i].second;
      ++batches;
    }
    const double n = static_cast<double>(batches);
    log.mean.pred /= n;
    log.mean.okd /= n;
    log.mean.total /= n;
    for (auto& [_, v] : log.mean.fkd) v /= n;
    log.grad_norm /= n;
    record.epochs.push_back(log);
    if (t.eval_every > 0 && options.eval && ((epoch + 1) % t.eval_every == 0 || epoch + 1 == t.epochs)) {
      const int history = model.config().has_map_branch ? cfg.model.t_obs : t.history_length;
      record.evals.emplace_back(epoch, evaluate_model(model, *options.eval, cfg.eval_k, t.batch_size, history));
    }
    if (options.on_epoch) options.on_epoch(record, log);
  }
  record.model_hash = model.parameter_hash();
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string RunRecord::to_json(bool include_wall_time, int indent) const {
  json eps = json::array();
  for (const auto& e : epochs) {
    eps.push_back({{"epoch", e.epoch},
                   {"learning_rate", e.learning_rate},
                   {"lambda_fd", e.lambda_fd},
                   {"lambda_od", e.lambda_od},
                   {"loss", report_json(e.mean)},
                   {"grad_norm", e.grad_norm}});
  }
  json ev = json::array();
  for (const auto& [epoch, m] : evals) ev.push_back({{"epoch", epoch}, {"metrics", metric_json(m)}});
  json j = {{"kind", kind},
            {"seed", seed},
            {"config_hash", hex(config_hash)},
            {"model_hash", hex(model_hash)},
            {"epochs", eps},
            {"evals", ev}};
  if (teacher_hash_before) j["teacher_hash_before"] = hex(*teacher_hash_before);
  if (teacher_hash_after) j["teacher_hash_after"] = hex(*teacher_hash_after);
  if (include_wall_time) j["wall_seconds"] = wall_seconds;
  return j.dump(indent);
}

Dataset make_dataset(const ExperimentConfig& config, std::uint64_t seed) {
  Dataset d;
  d.train = world::generate_scenes(config.world, seed, config.train_scenes, 0);
  d.eval = world::generate_scenes(config.world, seed, config.eval_scenes, config.train_scenes);
  return d;
}

nets::ModelConfig teacher_model_config(const ExperimentConfig& config) {
  nets::ModelConfig m = config.model;
  m.has_map_branch = true;
  return m;
}

nets::ModelConfig student_model_config(const ExperimentConfig& config) {
  nets::ModelConfig m = config.model;
  m.has_map_branch = false;
  if (m.decoder == nets::DecoderKind::kGoalBased) m.decoder = nets::DecoderKind::kRegressionLaplace;
  return m;
}

Predictor train_teacher(std::span<const Scene> train, const ExperimentConfig& config, std::uint64_t seed,
                        RunRecord& record, const RunOptions& options) {
  config.validate();
  if (train.empty()) throw TrainError("empty training set");
  for (const auto& s : train) {
    if (!s.map) throw TrainError("teacher training scene without a map");
  }
  Predictor model(teacher_model_config(config), seed);
  record.kind = "teacher";
  record.seed = seed;
  record.config_hash = config_hash(config);
  const losses::Density density = decoder_density(model.config());
  const bool goal = model.config().decoder == nets::DecoderKind::kGoalBased;
  nets::BatchOptions bo;
  bo.history_length = config.model.t_obs;
  run_epochs(model, train.size(), config, seed, record, options,
             [&](Tape& tape, std::span<const std::size_t> idx, int, long) {
               const auto scenes = pick(train, idx);
               const nets::Batch batch = nets::build_batch(scenes, model.config(), bo);
               const nets::ForwardOutput out = model.forward(tape, batch);
               Var pred = losses::pred_loss_wta(out.pred.mu, out.pred.sigma, out.pred.pi_logits, batch.gt, density).total;
               if (goal) pred = diff::add(pred, goal_ce(tape, out.goal->probs, batch));
               const losses::TotalLoss total = losses::total_loss(pred, {}, std::nullopt, 0.0, 0.0);
               tape.backward(total.total);
               return total.report;
             });
  return model;
}

TeacherCache cache_teacher(Predictor& teacher, std::span<const Scene> scenes, int batch_size) {
  TeacherCache c;
  nets::BatchOptions bo;
  bo.with_future = false;
  bo.history_length = teacher.config().t_obs;
  const bool goal = teacher.config().decoder == nets::DecoderKind::kGoalBased;
  for (std::size_t begin = 0; begin < scenes.size(); begin += batch_size) {
    const std::size_t end = std::min(scenes.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<const Scene*> ptr;
    for (std::size_t i = begin; i < end; ++i) ptr.push_back(&scenes[i]);
    const nets::Batch batch = nets::build_batch(ptr, teacher.config(), bo);
    Tape tape;
    const nets::ForwardOutput out = teacher.forward(tape, batch);
    for (std::size_t b = 0; b < batch.size; ++b) {
      c.mu.push_back(row(out.pred.mu.value(), b));
      c.sigma.push_back(row(out.pred.sigma.value(), b));
      c.pi_logits.push_back(row(out.pred.pi_logits.value(), b));
      for (nets::TapId t : {nets::TapId::kAgent, nets::TapId::kMap, nets::TapId::kFused}) {
        c.taps[t].push_back(row(out.taps.tap(t).value(), b));
      }
      if (goal) {
        c.goals.push_back(row(batch.goals, b));
        c.goal_probs.push_back(row(out.goal->probs.value(), b));
        c.goal_mask.push_back(row(batch.goal_mask, b));
      }
    }
  }
  return c;
}

Predictor train_student(std::span<const Scene> train, Predictor* teacher, const ExperimentConfig& config,
                        std::uint64_t seed, RunRecord& record, const RunOptions& options) {
  config.validate();
  if (train.empty()) throw TrainError("empty training set");
  Predictor model(student_model_config(config), seed);
  record.kind = teacher ? "student" : "baseline";
  record.seed = seed;
  record.config_hash = config_hash(config);
  const losses::Density density = decoder_density(model.config());
  const TrainConfig& tc = config.train;
  nets::BatchOptions bo;
  bo.with_map = false;
  bo.history_length = tc.history_length;

  TeacherCache cache;
  bool goal_teacher = false;
  if (teacher) {
    record.teacher_hash_before = teacher->parameter_hash();
    const auto& tcfg = teacher->config();
    if (!tcfg.has_map_branch) throw TrainError("teacher has no map branch");
    if (tcfg.modes != model.config().modes || tcfg.t_pred != model.config().t_pred) {
      throw TrainError("teacher and student predict different mode counts or horizons");
    }
    if (tcfg.hidden != model.config().hidden) {
      throw TrainError("tap-shape mismatch: teacher width " + std::to_string(tcfg.hidden) + ", student width " +
                       std::to_string(model.config().hidden));
    }
    goal_teacher = tcfg.decoder == nets::DecoderKind::kGoalBased;
    cache = cache_teacher(*teacher, train, tc.batch_size);
  }

  run_epochs(model, train.size(), config, seed, record, options,
             [&](Tape& tape, std::span<const std::size_t> idx, int epoch, long step) {
               const auto scenes = pick(train, idx);
               const nets::Batch batch = nets::build_batch(scenes, model.config(), bo);
               const double lfd = tc.lambda_fd.at(epoch), lod = tc.lambda_od.at(epoch);
               const bool use_fkd = teacher && (lfd > 0.0 || tc.always_compute_distill_terms);
               const bool use_okd = teacher && (lod > 0.0 || tc.always_compute_distill_terms);
               nets::ForwardOptions fo;
               fo.training_heads = use_fkd || use_okd;
               const nets::ForwardOutput out = model.forward(tape, batch, fo);
               Var pred =
                   losses::pred_loss_wta(out.pred.mu, out.pred.sigma, out.pred.pi_logits, batch.gt, density).total;
               std::vector<losses::NamedTerm> fkd;
               if (use_fkd) {
                 for (nets::TapId t : config.model.taps) {
                   Var f_s = out.taps.tap(t);
                   Var f_t = tape.constant(stack(cache.taps.at(t), idx));
                   if (f_s.shape() != f_t.value().shape()) throw TrainError("tap-shape mismatch");
                   fkd.push_back({std::string(nets::tap_name(t)), losses::fkd_loss(f_t, f_s, *out.taps.delta(t), config.loss.z)});
                 }
               }
               std::optional<Var> okd;
               if (use_okd) {
                 if (goal_teacher) {
                   const losses::GoalTargets targets = losses::renormalize_teacher_goals(
                       stack(cache.goals, idx), stack(cache.goal_probs, idx), stack(cache.goal_mask, idx),
                       config.loss.top_n);
                   Var probs = losses::render_student_goal_heatmap(out.pred.mu, out.pred.sigma, targets.goals,
                                                                   targets.mask, density);
                   okd = losses::okd_goal(probs, targets.probs, targets.mask);
                 } else {
                   losses::LossConfig lc = config.loss;
                   lc.sample_seed = world::derive_seed(config.loss.sample_seed ^ seed, static_cast<std::uint64_t>(step));
                   const Tensor samples = losses::teacher_samples(stack(cache.mu, idx), stack(cache.sigma, idx), lc);
                   okd = losses::okd_regression(samples, stack(cache.pi_logits, idx), out.pred.mu,
                                                *out.pred.sigma_prime, out.pred.pi_logits, lc)
                             .total;
                 }
               }
               const losses::TotalLoss total = losses::total_loss(pred, fkd, okd, lfd, lod);
               tape.backward(total.total);
               return total.report;
             });
  if (teacher) {
    record.teacher_hash_after = teacher->parameter_hash();
    if (record.teacher_hash_after != record.teacher_hash_before) throw TrainError("teacher parameters changed");
  }
  return model;
}

std::vector<metrics::Prediction> predict(Predictor& model, std::span<const Scene> scenes, int batch_size,
                                         int history_length) {
  nets::BatchOptions bo;
  bo.with_map = model.config().has_map_branch;
  bo.with_future = false;
  bo.history_length = history_length;
  const std::size_t K = model.config().modes, T = model.config().t_pred;
  std::vector<metrics::Prediction> preds;
  preds.reserve(scenes.size());
  for (std::size_t begin = 0; begin < scenes.size(); begin += batch_size) {
    const std::size_t end = std::min(scenes.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<const Scene*> ptr;
    for (std::size_t i = begin; i < end; ++i) ptr.push_back(&scenes[i]);
    const nets::Batch batch = nets::build_batch(ptr, model.config(), bo);
    Tape tape;
    const nets::ForwardOutput out = model.forward(tape, batch);
    const Tensor& mu = out.pred.mu.value();
    const Tensor& logits = out.pred.pi_logits.value();
    for (std::size_t b = 0; b < batch.size; ++b) {
      metrics::Prediction p;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits[b * K + k]);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += p.probs.emplace_back(std::exp(logits[b * K + k] - mx));
      for (double& v : p.probs) v /= z;
      for (std::size_t k = 0; k < K; ++k) {
        metrics::Trajectory tr;
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t o = ((b * K + k) * T + t) * 2;
          tr.push_back(batch.frames[b].to_world({mu[o], mu[o + 1]}));
        }
        p.modes.push_back(std::move(tr));
      }
      preds.push_back(std::move(p));
    }
  }
  return preds;
}

std::vector<metrics::Trajectory> ground_truths(std::span<const Scene> scenes) {
  std::vector<metrics::Trajectory> out;
  for (const auto& s : scenes) out.push_back(s.target_future());
  return out;
}

metrics::MetricReport evaluate_model(Predictor& model, std::span<const Scene> scenes, std::span<const int> ks,
                                     int batch_size, int history_length) {
  const auto preds = predict(model, scenes, batch_size, history_length);
  const auto gts = ground_truths(scenes);
  return metrics::evaluate(preds, gts, ks);
}

// ---- experiments -------------------------------------------------------

namespace {

int headline_k(const ExperimentConfig& c) {
  for (int k : c.eval_k)
    if (k == 6) return 6;
  return c.eval_k.back();
}

void say(const Progress& p, const std::string& msg) {
  if (p) p(msg);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

double Comparison::relative_gain(int k) const {
  const double b = baseline.mean.at(k).min_fde, f = fokd.mean.at(k).min_fde;
  return (b - f) / b;
}

Comparison run_comparison(const ExperimentConfig& config, const Dataset& data, const Progress& progress,
                          std::vector<Predictor>* teachers_out) {
  const auto start = std::chrono::steady_clock::now();
  Comparison c;
  const int bs = config.train.batch_size;
  const int k = headline_k(config);
  std::vector<metrics::MetricReport> t_reports, b_reports, f_reports;
  for (std::uint64_t seed : config.seeds) {
    SeedModels s;
    s.seed = seed;
    Predictor teacher = train_teacher(data.train, config, seed, s.teacher_record);
    s.teacher = evaluate_model(teacher, data.eval, config.eval_k, bs, config.model.t_obs);
    say(progress, "seed " + std::to_string(seed) + " teacher minFDE_" + std::to_string(k) + "=" +
                      fmt(s.teacher.by_k.at(k).min_fde));
    Predictor baseline = train_student(data.train, nullptr, config, seed, s.baseline_record);
    s.baseline = evaluate_model(baseline, data.eval, config.eval_k, bs, config.train.history_length);
    say(progress, "seed " + std::to_string(seed) + " baseline minFDE_" + std::to_string(k) + "=" +
                      fmt(s.baseline.by_k.at(k).min_fde));
    Predictor student = train_student(data.train, &teacher, config, seed, s.fokd_record);
    s.fokd = evaluate_model(student, data.eval, config.eval_k, bs, config.train.history_length);
    say(progress, "seed " + std::to_string(seed) + " fokd minFDE_" + std::to_string(k) + "=" +
                      fmt(s.fokd.by_k.at(k).min_fde));
    t_reports.push_back(s.teacher);
    b_reports.push_back(s.baseline);
    f_reports.push_back(s.fokd);
    c.seeds.push_back(std::move(s));
    if (teachers_out) teachers_out->push_back(std::move(teacher));
  }
  c.teacher = metrics::summarize_seeds(t_reports);
  c.baseline = metrics::summarize_seeds(b_reports);
  c.fokd = metrics::summarize_seeds(f_reports);
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return c;
}

std::string Ablation::table(int k) const {
  std::ostringstream out;
  out << "FKD,OKD,minADE_" << k << ",minFDE_" << k << ",MR_" << k << ",minFDE_std\n";
  for (const auto& c : cells) {
    const auto& m = c.summary.mean.at(k);
    out << (c.fkd ? "on" : "off") << ',' << (c.okd ? "on" : "off") << ',' << fmt(m.min_ade) << ','
        << fmt(m.min_fde) << ',' << fmt(m.miss_rate) << ',' << fmt(c.summary.stddev.at(k).min_fde) << '\n';
  }
  return out.str();
}

Ablation run_ablation(const ExperimentConfig& config, const Dataset& data, std::vector<Predictor>& teachers,
                      const Comparison* done, const Progress& progress) {
  if (teachers.size() != config.seeds.size()) throw TrainError("one teacher per seed required");
  const int k = headline_k(config);
  Ablation a;
  for (int cell = 0; cell < 4; ++cell) {
    AblationCell c;
    c.fkd = cell == 1 || cell == 3;
    c.okd = cell == 2 || cell == 3;
    ExperimentConfig cfg = config;
    if (!c.fkd) cfg.train.lambda_fd = Schedule::constant(0.0);
    if (!c.okd) cfg.train.lambda_od = Schedule::constant(0.0);
    for (std::size_t i = 0; i < config.seeds.size(); ++i) {
      if (done && cell == 0) {
        c.per_seed.push_back(done->seeds.at(i).baseline);
        continue;
      }
      if (done && cell == 3) {
        c.per_seed.push_back(done->seeds.at(i).fokd);
        continue;
      }
      RunRecord rec;
      Predictor m = train_student(data.train, cell == 0 ? nullptr : &teachers[i], cfg, config.seeds[i], rec);
      c.per_seed.push_back(evaluate_model(m, data.eval, config.eval_k, config.train.batch_size,
                                          config.train.history_length));
      say(progress, std::string("ablation fkd=") + (c.fkd ? "on" : "off") + " okd=" + (c.okd ? "on" : "off") +
                        " seed " + std::to_string(config.seeds[i]) + " minFDE_" + std::to_string(k) + "=" +
                        fmt(c.per_seed.back().by_k.at(k).min_fde));
    }
    c.summary = metrics::summarize_seeds(c.per_seed);
    a.cells.push_back(std::move(c));
  }
  for (std::size_t i = 0; i < config.seeds.size(); ++i) {
    const double both = a.cells[3].per_seed[i].by_k.at(k).min_fde;
    if (both <= a.cells[1].per_seed[i].by_k.at(k).min_fde && both <= a.cells[2].per_seed[i].by_k.at(k).min_fde) {
      ++a.both_best_seeds;
    }
  }
  return a;
}

std::string Curve::csv() const {
  std::ostringstream out;
  out << axis << ",baseline_minFDE,fokd_minFDE,improvement\n";
  for (const auto& p : points) {
    out << p.x << ',' << fmt(p.baseline) << ',' << fmt(p.fokd) << ',' << fmt(p.improvement) << '\n';
  }
  return out.str();
}

Curve k_scaling(Predictor& student, Predictor& baseline, std::span<const Scene> scenes, std::span<const int> ks,
                int batch_size) {
  for (int k : ks) {
    if (k > student.config().modes || k > baseline.config().modes) {
      throw TrainError("K=" + std::to_string(k) + " exceeds the decoder modes");
    }
  }
  const auto s = evaluate_model(student, scenes, ks, batch_size, student.config().t_obs);
  const auto b = evaluate_model(baseline, scenes, ks, batch_size, baseline.config().t_obs);
  Curve c;
  c.axis = "K";
  for (int k : ks) {
    CurvePoint p;
    p.x = k;
    p.baseline = b.by_k.at(k).min_fde;
    p.fokd = s.by_k.at(k).min_fde;
    p.improvement = (p.baseline - p.fokd) / p.baseline;
    c.points.push_back(p);
  }
  return c;
}

Curve run_k_scaling(const ExperimentConfig& config, const Dataset& data, const Progress& progress) {
  ExperimentConfig cfg = config;
  cfg.model.modes = *std::max_element(config.kscan_k.begin(), config.kscan_k.end());
  cfg.eval_k = config.kscan_k;
  const std::uint64_t seed = config.seeds.front();
  RunRecord rt, rb, rs;
  Predictor teacher = train_teacher(data.train, cfg, seed, rt);
  say(progress, "kscan teacher trained");
  Predictor baseline = train_student(data.train, nullptr, cfg, seed, rb);
  say(progress, "kscan baseline trained");
  Predictor student = train_student(data.train, &teacher, cfg, seed, rs);
  say(progress, "kscan student trained");
  return k_scaling(student, baseline, data.eval, cfg.kscan_k, cfg.train.batch_size);
}

Curve run_history_sweep(const ExperimentConfig& config, const Dataset& data, Predictor& teacher,
                        const Progress& progress) {
  const int k = headline_k(config);
  const std::uint64_t seed = config.seeds.front();
  Curve c;
  c.axis = "history";
  for (int len : config.history_lengths) {
    ExperimentConfig cfg = config;
    cfg.train.history_length = len;
    RunRecord rb, rs;
    Predictor baseline = train_student(data.train, nullptr, cfg, seed, rb);
    Predictor student = train_student(data.train, &teacher, cfg, seed, rs);
    CurvePoint p;
    p.x = len;
    p.baseline = evaluate_model(baseline, data.eval, cfg.eval_k, cfg.train.batch_size, len).by_k.at(k).min_fde;
    p.fokd = evaluate_model(student, data.eval, cfg.eval_k, cfg.train.batch_size, len).by_k.at(k).min_fde;
    p.improvement = (p.baseline - p.fokd) / p.baseline;
    say(progress, "history " + std::to_string(len) + " improvement " + fmt(p.improvement));
    c.points.push_back(p);
  }
  return c;
}

}  // namespace mapkd::train
