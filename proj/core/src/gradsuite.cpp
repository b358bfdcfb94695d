#include "mapkd/gradsuite.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "mapkd/losses.hpp"
#include "mapkd/nets.hpp"

namespace mapkd {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

constexpr double kPrimitiveTol = 1e-6;
constexpr double kLossTol = 1e-4;

struct Rng {
  std::mt19937_64 gen;
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
  std::size_t dim(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
  }
  Tensor tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (double& v : t.data()) v = uniform(lo, hi);
    return t;
  }
  Tensor mask(Shape s) {
    Tensor t(s);
    const std::size_t last = s.back();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(0.0, 1.0) < 0.7 ? 1.0 : 0.0;
    for (std::size_t r = 0; r < t.size() / last; ++r) t[r * last] = 1.0;
    return t;
  }
};

// A check builds fresh random inputs and a scalar function per trial.
struct Case {
  std::string name;
  double tolerance;
  std::function<std::pair<diff::ScalarFn, std::vector<Tensor>>(Rng&)> make;
};

// Fixed irregular weights turn a tensor output into a scalar.
Var project(Tape& tape, Var v) {
  Tensor w(v.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(1.7 * static_cast<double>(i) + 0.3);
  return diff::sum(diff::mul(v, tape.constant(w)));
}

Case unary(const std::string& name, std::function<Var(Var)> f, double lo, double hi) {
  return {name, kPrimitiveTol, [=](Rng& r) {
            Shape s{r.dim(1, 4), r.dim(1, 4)};
            diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) { return project(t, f(x[0])); };
            return std::make_pair(fn, std::vector<Tensor>{r.tensor(s, lo, hi)});
          }};
}

Case binary(const std::string& name, std::function<Var(Var, Var)> f, bool positive_b) {
  return {name, kPrimitiveTol, [=](Rng& r) {
            Shape s{r.dim(1, 4), r.dim(1, 4), r.dim(1, 4)};
            Shape sb = s;
            const auto mode = r.dim(0, 2);
            if (mode == 1) sb = {};
            if (mode == 2) sb = {s[1], s[2]};
            diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) { return project(t, f(x[0], x[1])); };
            return std::make_pair(fn, std::vector<Tensor>{r.tensor(s), positive_b ? r.tensor(sb, 0.5, 2.0)
                                                                                  : r.tensor(sb)});
          }};
}

std::vector<Case> primitive_cases() {
  std::vector<Case> c;
  c.push_back(binary("add", [](Var a, Var b) { return diff::add(a, b); }, false));
  c.push_back(binary("sub", [](Var a, Var b) { return diff::sub(a, b); }, false));
  c.push_back(binary("mul", [](Var a, Var b) { return diff::mul(a, b); }, false));
  c.push_back(binary("div", [](Var a, Var b) { return diff::div(a, b); }, true));
  c.push_back(unary("exp", [](Var a) { return diff::exp(a); }, -2.0, 2.0));
  c.push_back(unary("log", [](Var a) { return diff::log(a); }, 0.5, 3.0));
  c.push_back(unary("abs", [](Var a) { return diff::abs(a); }, -1.0, 1.0));
  c.push_back(unary("square", [](Var a) { return diff::square(a); }, -2.0, 2.0));
  c.push_back(unary("relu", [](Var a) { return diff::relu(a); }, -1.0, 1.0));
  c.push_back(unary("tanh", [](Var a) { return diff::tanh(a); }, -2.0, 2.0));
  c.push_back(unary("clamp", [](Var a) { return diff::clamp(a, -0.5, 0.5); }, -1.0, 1.0));
  c.push_back(unary("softmax", [](Var a) { return diff::softmax(a); }, -2.0, 2.0));
  c.push_back(unary("log_softmax", [](Var a) { return diff::log_softmax(a); }, -2.0, 2.0));
  c.push_back(unary("sum_axis", [](Var a) { return diff::sum_axis(a, 0); }, -1.0, 1.0));
  c.push_back(unary("mean_axis", [](Var a) { return diff::mean_axis(a, -1); }, -1.0, 1.0));
  c.push_back(unary("max_axis", [](Var a) { return diff::max_axis(a, -1); }, -1.0, 1.0));
  c.push_back(unary("expand", [](Var a) { return diff::expand(a, 1, 3); }, -1.0, 1.0));
  c.push_back(unary("slice", [](Var a) { return diff::slice(a, 1, 0, 1); }, -1.0, 1.0));
  c.push_back({"masked_softmax", kPrimitiveTol, [](Rng& r) {
                 Shape s{r.dim(1, 4), r.dim(2, 5)};
                 Tensor m = r.mask(s);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return project(t, diff::softmax(x[0], &m));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor(s, -2.0, 2.0)});
               }});
  c.push_back({"matmul", kPrimitiveTol, [](Rng& r) {
                 const std::size_t b = r.dim(1, 4), k = r.dim(1, 5), n = r.dim(1, 5);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return project(t, diff::matmul(x[0], x[1]));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({b, 2, k}), r.tensor({k, n})});
               }});
  c.push_back({"concat", kPrimitiveTol, [](Rng& r) {
                 const std::size_t a = r.dim(1, 3), b = r.dim(1, 3), m = r.dim(1, 4);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   const Var parts[] = {x[0], x[1]};
                   return project(t, diff::concat(parts, 1));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({m, a}), r.tensor({m, b})});
               }});
  c.push_back({"batched_dot", kPrimitiveTol, [](Rng& r) {
                 const std::size_t b = r.dim(1, 3), a = r.dim(1, 5), h = r.dim(1, 5);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return project(t, diff::batched_dot(x[0], x[1]));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({b, a, h}), r.tensor({b, h})});
               }});
  c.push_back({"weighted_sum", kPrimitiveTol, [](Rng& r) {
                 const std::size_t b = r.dim(1, 3), a = r.dim(1, 5), h = r.dim(1, 5);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return project(t, diff::weighted_sum(x[0], x[1]));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({b, a}), r.tensor({b, a, h})});
               }});
  c.push_back({"attention_pool", kPrimitiveTol, [](Rng& r) {
                 const std::size_t b = r.dim(1, 3), a = r.dim(2, 5), h = r.dim(1, 5);
                 Tensor m = r.mask({b, a});
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return project(t, diff::attention_pool(x[0], m, x[1]));
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({b, a}), r.tensor({b, a, h})});
               }});
  return c;
}

std::vector<Case> loss_cases() {
  using losses::Density;
  std::vector<Case> c;
  const std::size_t B = 2, K = 3, T = 4;
  for (Density d : {Density::kGaussian, Density::kLaplace}) {
    const std::string dn(losses::density_name(d));
    c.push_back({"pred_loss_wta_" + dn, kLossTol, [=](Rng& r) {
                   Tensor gt = r.tensor({B, T, 2}, -3.0, 3.0);
                   diff::ScalarFn fn = [=](Tape&, std::span<const Var> x) {
                     return losses::pred_loss_wta(x[0], diff::exp(x[1]), x[2], gt, d).total;
                   };
                   return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, K, T, 2}, -3.0, 3.0),
                                                                 r.tensor({B, K, T, 2}, -0.5, 0.5),
                                                                 r.tensor({B, K})});
                 }});
    c.push_back({"okd_regression_" + dn, kLossTol, [=](Rng& r) {
                   Tensor mu_t = r.tensor({B, K, T, 2}, -3.0, 3.0), pi_t = r.tensor({B, K});
                   losses::LossConfig cfg;
                   cfg.density = d;
                   diff::ScalarFn fn = [=](Tape&, std::span<const Var> x) {
                     return losses::okd_regression(mu_t, pi_t, x[0], diff::exp(x[1]), x[2], cfg).total;
                   };
                   return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, K, T, 2}, -3.0, 3.0),
                                                                 r.tensor({B, K, T, 2}, -0.5, 0.5),
                                                                 r.tensor({B, K})});
                 }});
    c.push_back({"goal_heatmap_" + dn, kLossTol, [=](Rng& r) {
                   const std::size_t N = 5;
                   Tensor goals = r.tensor({B, N, 2}, -4.0, 4.0), mask = r.mask({B, N});
                   diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                     return project(t, losses::render_student_goal_heatmap(x[0], diff::exp(x[1]), goals, mask, d));
                   };
                   return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, K, T, 2}, -3.0, 3.0),
                                                                 r.tensor({B, K, T, 2}, -0.3, 0.5)});
                 }});
  }
  c.push_back({"fkd_loss", kLossTol, [=](Rng& r) {
                 Tensor f_t = r.tensor({B, 6});
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   return losses::fkd_loss(t.constant(f_t), x[0], diff::exp(x[1]), 0.0);
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, 6}), r.tensor({B, 6}, -0.5, 0.5)});
               }});
  c.push_back({"temperature_ce", kLossTol, [=](Rng& r) {
                 Tensor pi_t = r.tensor({B, K}, -2.0, 2.0);
                 diff::ScalarFn fn = [=](Tape&, std::span<const Var> x) {
                   return losses::temperature_ce(pi_t, x[0], 0.5);
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, K}, -2.0, 2.0)});
               }});
  c.push_back({"okd_goal", kLossTol, [=](Rng& r) {
                 const std::size_t N = 5;
                 Tensor p_t = r.tensor({B, N}, 0.05, 0.95), mask = r.mask({B, N});
                 diff::ScalarFn fn = [=](Tape&, std::span<const Var> x) {
                   return losses::okd_goal(diff::softmax(x[0]), p_t, mask);
                 };
                 return std::make_pair(fn, std::vector<Tensor>{r.tensor({B, N}, -2.0, 2.0)});
               }});
  c.push_back({"total_loss", kLossTol, [=](Rng& r) {
                 Tensor gt = r.tensor({B, T, 2}, -3.0, 3.0), mu_t = r.tensor({B, K, T, 2}, -3.0, 3.0);
                 Tensor pi_t = r.tensor({B, K}), f_t = r.tensor({B, 4});
                 const double lfd = r.uniform(0.0, 10.0), lod = r.uniform(0.0, 2.0);
                 diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                   Var pred = losses::pred_loss_wta(x[0], diff::exp(x[1]), x[2], gt, Density::kLaplace).total;
                   const losses::NamedTerm fkd[] = {{"f", losses::fkd_loss(t.constant(f_t), x[3], diff::exp(x[4]))}};
                   losses::LossConfig cfg;
                   Var okd = losses::okd_regression(mu_t, pi_t, x[0], diff::exp(x[5]), x[2], cfg).total;
                   return losses::total_loss(pred, fkd, okd, lfd, lod).total;
                 };
                 return std::make_pair(
                     fn, std::vector<Tensor>{r.tensor({B, K, T, 2}, -3.0, 3.0), r.tensor({B, K, T, 2}, -0.5, 0.5),
                                             r.tensor({B, K}), r.tensor({B, 4}), r.tensor({B, 4}, -0.5, 0.5),
                                             r.tensor({B, K, T, 2}, -0.5, 0.5)});
               }});
  return c;
}

std::vector<Case> decoder_cases() {
  std::vector<Case> c;
  auto model_config = [](nets::DecoderKind kind, bool map) {
    nets::ModelConfig m;
    m.hidden = 4;
    m.modes = 2;
    m.t_obs = 4;
    m.t_pred = 3;
    m.decoder = kind;
    m.has_map_branch = map;
    m.goal_count = 4;
    return m;
  };
  auto batch_for = [](const nets::ModelConfig& m, Rng& r) {
    nets::Batch b;
    b.size = 2;
    b.cv_prior = r.tensor({2, static_cast<std::size_t>(m.t_pred), 2});
    b.goals = r.tensor({2, static_cast<std::size_t>(m.goal_count), 2}, -20.0, 20.0);
    b.goal_mask = r.mask({2, static_cast<std::size_t>(m.goal_count)});
    b.has_map = true;
    return b;
  };
  struct Output {
    std::string name;
    std::function<Var(nets::Predictor&, Tape&, const nets::Batch&, Var)> get;
    bool student;
    bool goal;
  };
  const std::vector<Output> outputs{
      {"decoder_mu", [](nets::Predictor& p, Tape& t, const nets::Batch& b,
                        Var f) { return p.decode_regression(t, b, f, false).mu; }, false, false},
      {"decoder_sigma", [](nets::Predictor& p, Tape& t, const nets::Batch& b,
                           Var f) { return p.decode_regression(t, b, f, false).sigma; }, false, false},
      {"decoder_pi", [](nets::Predictor& p, Tape& t, const nets::Batch& b,
                        Var f) { return diff::softmax(p.decode_regression(t, b, f, false).pi_logits); }, false, false},
      {"decoder_sigma_prime", [](nets::Predictor& p, Tape& t, const nets::Batch& b,
                                 Var f) { return *p.decode_regression(t, b, f, true).sigma_prime; }, true, false},
      {"decoder_goal_probs", [](nets::Predictor& p, Tape& t, const nets::Batch& b,
                                Var f) { return p.decode_goal(t, b, f).probs; }, false, true},
  };
  for (const auto& o : outputs) {
    c.push_back({o.name, kLossTol, [=](Rng& r) {
                   const auto m = model_config(o.goal ? nets::DecoderKind::kGoalBased
                                                      : nets::DecoderKind::kRegressionLaplace,
                                               !o.student);
                   auto model = std::make_shared<nets::Predictor>(m, r.gen());
                   const nets::Batch batch = batch_for(m, r);
                   diff::ScalarFn fn = [=](Tape& t, std::span<const Var> x) {
                     return project(t, o.get(*model, t, batch, x[0]));
                   };
                   return std::make_pair(fn, std::vector<Tensor>{r.tensor({2, 4})});
                 }});
  }
  return c;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck_suite(const std::string& module, int trials, std::uint64_t seed) {
  std::vector<std::pair<std::string, std::vector<Case>>> groups;
  const bool all = module == "all";
  if (all || module == "diffcore") groups.emplace_back("diffcore", primitive_cases());
  if (all || module == "losses") groups.emplace_back("losses", loss_cases());
  if (all || module == "nets") groups.emplace_back("nets", decoder_cases());
  if (groups.empty()) throw std::invalid_argument("unknown gradcheck module " + module);

  std::vector<GradcheckRow> rows;
  Rng rng{std::mt19937_64(seed)};
  for (auto& [name, cases] : groups) {
    for (auto& c : cases) {
      GradcheckRow row{name, c.name, trials, 0.0, c.tolerance};
      for (int i = 0; i < trials; ++i) {
        auto [fn, inputs] = c.make(rng);
        diff::GradcheckOptions opt;
        opt.seed = rng.gen();
        try {
          row.max_rel_error =
              std::max(row.max_rel_error, diff::gradcheck(fn, std::move(inputs), opt).max_rel_error);
        } catch (const diff::DiffError& e) {
          throw diff::DiffError(name + "/" + c.name + ": " + e.what());
        }
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string format_gradcheck_table(const std::vector<GradcheckRow>& rows) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-26s %7s %14s %10s %s\n", "module", "check", "trials", "max_rel_err",
                "tol", "result");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %-26s %7d %14.3e %10.0e %s\n", r.module.c_str(), r.name.c_str(), r.trials,
                  r.max_rel_error, r.tolerance, r.pass() ? "PASS" : "FAIL");
    out << buf;
  }
  return out.str();
}

}  // namespace mapkd
