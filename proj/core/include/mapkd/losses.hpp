#pragma once

// Training objectives: winner-take-all mixture loss for plain training, and
// the feature / output distillation terms used when training a mapless
// student against a frozen teacher.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mapkd/diffcore.hpp"

namespace mapkd::losses {

using diff::Tape;
using diff::Tensor;
using diff::Var;

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Density { kGaussian, kLaplace };
std::string_view density_name(Density d);
Density parse_density(std::string_view name);

struct LossConfig {
  double lambda_fd = 10.0;
  double lambda_od = 1.0;
  double temperature = 0.5;
  // Teacher draws per mode for output distillation; 0 uses the teacher means.
  int samples = 0;
  std::uint64_t sample_seed = 0;
  Density density = Density::kLaplace;
  // Per-coordinate constant added to the distillation likelihoods. Carries no
  // gradient.
  double z = 0.0;
  int top_n = 100;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

// Elementwise negative log density of x under (mu, scale), fully normalised.
Var coord_nll(Var x, Var mu, Var scale, Density density);

// Index of the mode with the lowest mean displacement to gt over the whole
// horizon, per batch row; ties go to the lower index.
// mu: [B, K, T, 2], gt: [B, T, 2]
std::vector<int> best_modes(const Tensor& mu, const Tensor& gt);

struct WtaTerms {
  Var nll;  // best-mode NLL, summed over steps and coordinates
  Var ce;   // mode classification against the best-mode index
  Var total;
  std::vector<int> best;
};

// Batch mean of best-mode NLL plus mode cross-entropy.
WtaTerms pred_loss_wta(Var mu, Var sigma, Var pi_logits, const Tensor& gt, Density density);

// Variational feature matching: log(delta) + (f_t - f_s)^2 / delta^2 + z,
// summed over feature dimensions and averaged over the batch. f_t is treated
// as a constant.
Var fkd_loss(Var f_t, Var f_s, Var delta, double z = 0.0);

// Teacher targets for output distillation: the teacher means, or the mean of
// config.samples reparameterised draws per mode.
Tensor teacher_samples(const Tensor& mu_t, const Tensor& sigma_t, const LossConfig& config);

struct OkdTerms {
  Var regression;
  Var ce;
  Var total;
};

// Mode-ordered likelihood of teacher samples under the student (mu_s,
// sigma_prime) plus temperature cross-entropy between the mode
// distributions. Teacher tensors carry no gradient.
OkdTerms okd_regression(const Tensor& samples_t, const Tensor& pi_logits_t, Var mu_s, Var sigma_prime,
                        Var pi_logits_s, const LossConfig& config);

// Soft-target cross-entropy -sum softmax(t/tau) * log_softmax(s/tau), batch mean.
Var temperature_ce(const Tensor& logits_t, Var logits_s, double temperature);

// Per-goal maximum over modes of the final-step density, renormalised over
// the valid goals of each row. mu, sigma: [B, K, T, 2]; goals: [B, N, 2].
Var render_student_goal_heatmap(Var mu, Var sigma, const Tensor& goals, const Tensor& goal_mask, Density density);

// Top-n teacher goals per row, sorted by probability descending and
// renormalised to sum to one.
struct GoalTargets {
  Tensor goals;  // [B, n, 2]
  Tensor probs;  // [B, n]
  Tensor mask;   // [B, n]
  std::vector<std::vector<int>> index;
};
GoalTargets renormalize_teacher_goals(const Tensor& goals, const Tensor& probs, const Tensor& goal_mask, int top_n);
// Single-row form: the renormalised top-n probabilities, descending.
std::vector<double> renormalize_top(std::span<const double> probs, int top_n);

inline constexpr double kBceClamp = 1e-6;

// Mean over valid goals of binary cross-entropy, averaged over the batch.
Var okd_goal(Var student_probs, const Tensor& teacher_probs, const Tensor& mask);

struct LossReport {
  double pred = 0.0;
  std::vector<std::pair<std::string, double>> fkd;
  double okd = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  Var total;
  LossReport report;
};

struct NamedTerm {
  std::string name;
  Var value;
};

// L_pred + lambda_fd * sum(fkd) + lambda_od * okd.
TotalLoss total_loss(Var pred, std::span<const NamedTerm> fkd, std::optional<Var> okd, double lambda_fd,
                     double lambda_od);

}  // namespace mapkd::losses
