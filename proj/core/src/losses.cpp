#include "mapkd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace mapkd::losses {

namespace {

Var detach(Var v) { return v.tape().constant(v.value()); }

void require_shape(const Var& v, const diff::Shape& shape, const char* what) {
  if (v.shape() != shape) {
    throw LossError(std::string(what) + " has shape " + diff::shape_str(v.shape()) + ", expected " +
                    diff::shape_str(shape));
  }
}

}  // namespace

std::string_view density_name(Density d) { return d == Density::kGaussian ? "gaussian" : "laplace"; }

Density parse_density(std::string_view name) {
  if (name == "gaussian") return Density::kGaussian;
  if (name == "laplace") return Density::kLaplace;
  throw LossError("unknown distribution kind " + std::string(name));
}

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw LossError("temperature must be positive");
  if (lambda_fd < 0.0 || lambda_od < 0.0) throw LossError("loss weights must be non-negative");
  if (samples < 0) throw LossError("sample count must be non-negative");
  if (top_n < 1) throw LossError("top_n must be positive");
}

Var coord_nll(Var x, Var mu, Var scale, Density density) {
  Var r = diff::sub(x, mu);
  if (density == Density::kLaplace) {
    return diff::add_scalar(diff::add(diff::log(scale), diff::div(diff::abs(r), scale)), std::numbers::ln2);
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  return diff::add_scalar(
      diff::add(diff::log(scale), diff::scale(diff::div(diff::square(r), diff::square(scale)), 0.5)), half_log_2pi);
}

std::vector<int> best_modes(const Tensor& mu, const Tensor& gt) {
  if (mu.rank() != 4 || gt.rank() != 3 || mu.dim(0) != gt.dim(0) || mu.dim(2) != gt.dim(1)) {
    throw LossError("best_modes expects mu [B,K,T,2] and gt [B,T,2]");
  }
  const std::size_t B = mu.dim(0), K = mu.dim(1), T = mu.dim(2);
  std::vector<int> best(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double dx = mu[((b * K + k) * T + t) * 2] - gt[(b * T + t) * 2];
        const double dy = mu[((b * K + k) * T + t) * 2 + 1] - gt[(b * T + t) * 2 + 1];
        d += std::hypot(dx, dy);
      }
      d /= static_cast<double>(T);
      if (d < best_d) {
        best_d = d;
        best[b] = static_cast<int>(k);
      }
    }
  }
  return best;
}

WtaTerms pred_loss_wta(Var mu, Var sigma, Var pi_logits, const Tensor& gt, Density density) {
  Tape& tape = mu.tape();
  if (mu.shape().size() != 4) throw LossError("mu must be [B,K,T,2]");
  const std::size_t B = mu.shape()[0], K = mu.shape()[1], T = mu.shape()[2];
  require_shape(sigma, mu.shape(), "sigma");
  require_shape(pi_logits, {B, K}, "pi logits");
  if (gt.shape() != diff::Shape{B, T, 2}) throw LossError("ground truth must be [B,T,2]");
  if (!gt.all_finite()) throw LossError("ground truth is not finite");

  WtaTerms out;
  out.best = best_modes(mu.value(), gt);
  Tensor onehot({B, K});
  for (std::size_t b = 0; b < B; ++b) onehot[b * K + out.best[b]] = 1.0 / static_cast<double>(B);
  Var target = diff::expand(tape.constant(gt), 1, K);
  Var nll = coord_nll(target, mu, sigma, density);
  Var per_mode = diff::sum_axis(diff::reshape(nll, {B, K, T * 2}), -1);
  Var w = tape.constant(onehot);
  out.nll = diff::sum(diff::mul(per_mode, w));
  out.ce = diff::neg(diff::sum(diff::mul(diff::log_softmax(pi_logits), w)));
  out.total = diff::add(out.nll, out.ce);
  return out;
}

Var fkd_loss(Var f_t, Var f_s, Var delta, double z) {
  if (f_t.shape() != f_s.shape() || f_s.shape() != delta.shape()) {
    throw LossError("feature distillation needs equal shapes, got " + diff::shape_str(f_t.shape()) + ", " +
                    diff::shape_str(f_s.shape()) + ", " + diff::shape_str(delta.shape()));
  }
  if (f_s.shape().empty()) throw LossError("features need a batch axis");
  const double batch = static_cast<double>(f_s.shape()[0]);
  Var r2 = diff::square(diff::sub(detach(f_t), f_s));
  Var per = diff::add(diff::log(delta), diff::div(r2, diff::square(delta)));
  if (z != 0.0) per = diff::add_scalar(per, z);
  return diff::scale(diff::sum(per), 1.0 / batch);
}

Tensor teacher_samples(const Tensor& mu_t, const Tensor& sigma_t, const LossConfig& config) {
  if (config.samples == 0) return mu_t;
  if (mu_t.shape() != sigma_t.shape()) throw LossError("teacher mean and scale shapes differ");
  std::mt19937_64 rng(config.sample_seed);
  std::normal_distribution<double> normal;
  std::exponential_distribution<double> expo;
  Tensor out(mu_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (int s = 0; s < config.samples; ++s) {
      const double eps = config.density == Density::kGaussian ? normal(rng) : expo(rng) - expo(rng);
      acc += mu_t[i] + sigma_t[i] * eps;
    }
    out[i] = acc / config.samples;
  }
  return out;
}

Var temperature_ce(const Tensor& logits_t, Var logits_s, double temperature) {
  if (logits_t.shape() != logits_s.shape() || logits_t.rank() != 2) {
    throw LossError("mode logits must be [B,K] on both sides");
  }
  const std::size_t B = logits_t.dim(0), K = logits_t.dim(1);
  Tensor soft({B, K});
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits_t[b * K + k] / temperature);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += soft[b * K + k] = std::exp(logits_t[b * K + k] / temperature - mx);
    for (std::size_t k = 0; k < K; ++k) soft[b * K + k] /= z * static_cast<double>(B);
  }
  Var log_s = diff::log_softmax(diff::scale(logits_s, 1.0 / temperature));
  return diff::neg(diff::sum(diff::mul(log_s, logits_s.tape().constant(soft))));
}

OkdTerms okd_regression(const Tensor& samples_t, const Tensor& pi_logits_t, Var mu_s, Var sigma_prime,
                        Var pi_logits_s, const LossConfig& config) {
  config.validate();
  if (samples_t.rank() != 4 || mu_s.shape().size() != 4 || samples_t.dim(1) != mu_s.shape()[1]) {
    throw LossError("teacher and student must predict the same number of modes");
  }
  if (samples_t.shape() != mu_s.shape()) throw LossError("teacher and student trajectory shapes differ");
  require_shape(sigma_prime, mu_s.shape(), "sigma'");
  Tape& tape = mu_s.tape();
  const double batch = static_cast<double>(mu_s.shape()[0]);
  Var r = diff::sub(tape.constant(samples_t), mu_s);
  Var per;
  if (config.density == Density::kGaussian) {
    per = diff::add(diff::log(sigma_prime), diff::scale(diff::div(diff::square(r), diff::square(sigma_prime)), 0.5));
  } else {
    per = diff::add(diff::log(sigma_prime), diff::div(diff::abs(r), sigma_prime));
  }
  if (config.z != 0.0) per = diff::add_scalar(per, config.z);
  OkdTerms out;
  out.regression = diff::scale(diff::sum(per), 1.0 / batch);
  out.ce = temperature_ce(pi_logits_t, pi_logits_s, config.temperature);
  out.total = diff::add(out.regression, out.ce);
  return out;
}

Var render_student_goal_heatmap(Var mu, Var sigma, const Tensor& goals, const Tensor& goal_mask, Density density) {
  if (mu.shape().size() != 4) throw LossError("mu must be [B,K,T,2]");
  require_shape(sigma, mu.shape(), "sigma");
  const std::size_t B = mu.shape()[0], K = mu.shape()[1], T = mu.shape()[2];
  if (goals.rank() != 3 || goals.dim(0) != B || goals.dim(2) != 2) throw LossError("goals must be [B,N,2]");
  const std::size_t N = goals.dim(1);
  if (goal_mask.shape() != diff::Shape{B, N}) throw LossError("goal mask must be [B,N]");
  for (std::size_t b = 0; b < B; ++b) {
    double any = 0.0;
    for (std::size_t n = 0; n < N; ++n) any += goal_mask[b * N + n];
    if (any == 0.0) throw LossError("empty goal set");
  }
  Tape& tape = mu.tape();
  auto final_step = [&](Var v) { return diff::expand(diff::reshape(diff::slice(v, 2, T - 1, T), {B, K, 2}), 1, N); };
  Var g = diff::expand(tape.constant(goals), 2, K);  // [B,N,K,2]
  Var nll = coord_nll(g, final_step(mu), final_step(sigma), density);
  Var log_density = diff::neg(diff::sum_axis(nll, -1));  // [B,N,K]
  return diff::softmax(diff::max_axis(log_density, -1), &goal_mask);
}

std::vector<double> renormalize_top(std::span<const double> probs, int top_n) {
  if (top_n < 1 || static_cast<std::size_t>(top_n) > probs.size()) throw LossError("top_n exceeds the goal set");
  std::vector<double> sorted(probs.begin(), probs.end());
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());
  sorted.resize(top_n);
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  if (!(total > 0.0)) throw LossError("teacher goal probabilities are all zero");
  for (double& p : sorted) p /= total;
  return sorted;
}

GoalTargets renormalize_teacher_goals(const Tensor& goals, const Tensor& probs, const Tensor& goal_mask, int top_n) {
  if (probs.rank() != 2 || goal_mask.shape() != probs.shape() || goals.rank() != 3 ||
      goals.dim(0) != probs.dim(0) || goals.dim(1) != probs.dim(1)) {
    throw LossError("teacher goals must be [B,N,2] with probs and mask [B,N]");
  }
  if (top_n < 1) throw LossError("top_n must be positive");
  const std::size_t B = probs.dim(0), N = probs.dim(1), n = static_cast<std::size_t>(top_n);
  GoalTargets out;
  out.goals = Tensor({B, n, 2});
  out.probs = Tensor({B, n});
  out.mask = Tensor({B, n});
  out.index.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < N; ++i)
      if (goal_mask[b * N + i] != 0.0) idx.push_back(static_cast<int>(i));
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return probs[b * N + x] > probs[b * N + y]; });
    if (idx.size() > n) idx.resize(n);
    double total = 0.0;
    for (int i : idx) total += probs[b * N + i];
    if (!(total > 0.0)) throw LossError("teacher goal probabilities are all zero");
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.goals[(b * n + j) * 2] = goals[(b * N + idx[j]) * 2];
      out.goals[(b * n + j) * 2 + 1] = goals[(b * N + idx[j]) * 2 + 1];
      out.probs[b * n + j] = probs[b * N + idx[j]] / total;
      out.mask[b * n + j] = 1.0;
    }
    out.index[b] = std::move(idx);
  }
  return out;
}

Var okd_goal(Var student_probs, const Tensor& teacher_probs, const Tensor& mask) {
  if (student_probs.shape() != teacher_probs.shape() || mask.shape() != teacher_probs.shape() ||
      teacher_probs.rank() != 2) {
    throw LossError("goal distributions must share one [B,N] shape");
  }
  const std::size_t B = teacher_probs.dim(0), N = teacher_probs.dim(1);
  Tape& tape = student_probs.tape();
  Tensor pos(teacher_probs.shape()), neg(teacher_probs.shape());
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t i = 0; i < N; ++i) count += mask[b * N + i];
    if (count == 0.0) throw LossError("empty goal set");
    for (std::size_t i = 0; i < N; ++i) {
      const double w = mask[b * N + i] / (count * static_cast<double>(B));
      const double p = std::clamp(teacher_probs[b * N + i], kBceClamp, 1.0 - kBceClamp);
      pos[b * N + i] = w * p;
      neg[b * N + i] = w * (1.0 - p);
    }
  }
  Var ps = diff::clamp(student_probs, kBceClamp, 1.0 - kBceClamp);
  Var log_p = diff::log(ps);
  Var log_q = diff::log(diff::add_scalar(diff::neg(ps), 1.0));
  return diff::neg(diff::add(diff::sum(diff::mul(log_p, tape.constant(pos))),
                             diff::sum(diff::mul(log_q, tape.constant(neg)))));
}

TotalLoss total_loss(Var pred, std::span<const NamedTerm> fkd, std::optional<Var> okd, double lambda_fd,
                     double lambda_od) {
  if (lambda_fd < 0.0 || lambda_od < 0.0) throw LossError("loss weights must be non-negative");
  TotalLoss out;
  out.report.pred = pred.item();
  Var total = pred;
  if (!fkd.empty()) {
    Var acc = fkd.front().value;
    for (std::size_t i = 1; i < fkd.size(); ++i) acc = diff::add(acc, fkd[i].value);
    for (const auto& t : fkd) out.report.fkd.emplace_back(t.name, t.value.item());
    total = diff::add(total, diff::scale(acc, lambda_fd));
  }
  if (okd) {
    out.report.okd = okd->item();
    total = diff::add(total, diff::scale(*okd, lambda_od));
  }
  out.total = total;
  out.report.total = total.item();
  return out;
}

}  // namespace mapkd::losses
