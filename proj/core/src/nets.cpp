#include "mapkd/nets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"

namespace mapkd::nets {

using nlohmann::json;
using world::Point2;

namespace {

constexpr double kPositionScale = 0.1;  // meters -> network units
constexpr double kMeanScale = 5.0;      // network units -> meters for decoded offsets
constexpr double kLogScaleBound = 10.0;

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Var positive_scale(Var raw) { return diff::exp(diff::clamp(raw, -kLogScaleBound, kLogScaleBound)); }

}  // namespace

std::string_view decoder_name(DecoderKind k) {
  switch (k) {
    case DecoderKind::kRegressionGaussian: return "regression_gaussian";
    case DecoderKind::kRegressionLaplace: return "regression_laplace";
    case DecoderKind::kGoalBased: return "goal_based";
  }
  return "unknown";
}

DecoderKind parse_decoder(std::string_view name) {
  for (auto k : {DecoderKind::kRegressionGaussian, DecoderKind::kRegressionLaplace, DecoderKind::kGoalBased})
    if (decoder_name(k) == name) return k;
  throw ModelError("unknown decoder kind " + std::string(name));
}

std::string_view tap_name(TapId t) {
  switch (t) {
    case TapId::kAgent: return "f_a";
    case TapId::kMap: return "f_m";
    case TapId::kFused: return "f_f";
  }
  return "unknown";
}

TapId parse_tap(std::string_view name) {
  for (auto t : {TapId::kAgent, TapId::kMap, TapId::kFused})
    if (tap_name(t) == name) return t;
  throw ModelError("unknown tap " + std::string(name));
}

void ModelConfig::validate() const {
  if (hidden < 1) throw ModelError("hidden width must be positive");
  if (modes < 1) throw ModelError("K must be at least 1");
  if (decoder == DecoderKind::kGoalBased && !has_map_branch) {
    throw ModelError("goal-based decoding requires a map branch");
  }
  if (t_obs < 1 || t_pred < 1) throw ModelError("t_obs and t_pred must be positive");
  if (max_agents < 1 || max_segments < 1 || segment_points < 2 || goal_count < 1) {
    throw ModelError("batch limits must be positive");
  }
}

Var FeatureTaps::tap(TapId id) const {
  switch (id) {
    case TapId::kAgent: return f_a;
    case TapId::kMap: return f_m;
    case TapId::kFused: return f_f;
  }
  throw ModelError("bad tap");
}

std::optional<Var> FeatureTaps::delta(TapId id) const {
  switch (id) {
    case TapId::kAgent: return delta_a;
    case TapId::kMap: return delta_m;
    case TapId::kFused: return delta_f;
  }
  return std::nullopt;
}

// ---- batches -----------------------------------------------------------

std::vector<Point2> sample_goal_candidates(const world::Scene& scene, const world::Frame& frame, double reach,
                                           int count) {
  std::vector<Point2> pts;
  if (!scene.map) return pts;
  for (const auto& seg : scene.map->segments) {
    const double len = seg.length();
    for (double s = 0.0; s < len; s += 1.0) {
      const Point2 p = frame.to_local(seg.point_at(s));
      if (std::hypot(p.x, p.y) <= reach) pts.push_back(p);
    }
  }
  if (static_cast<int>(pts.size()) <= count) return pts;
  std::vector<Point2> thinned;
  thinned.reserve(count);
  for (int i = 0; i < count; ++i) thinned.push_back(pts[i * pts.size() / count]);
  return thinned;
}

Batch build_batch(std::span<const world::Scene* const> scenes, const ModelConfig& cfg, const BatchOptions& opt) {
  cfg.validate();
  if (scenes.empty()) throw ModelError("empty batch");
  if (opt.history_length < 1 || opt.history_length > cfg.t_obs) {
    throw ModelError("history length must lie in [1, t_obs]");
  }
  const std::size_t B = scenes.size(), A = cfg.max_agents, T = cfg.t_obs, M = cfg.max_segments,
                    P = cfg.segment_points, N = cfg.goal_count, TP = cfg.t_pred;
  Batch b;
  b.size = B;
  b.agent_steps = Tensor({B, A, T, 5});
  b.agent_step_pool = Tensor({B * A, T});
  b.agent_state = Tensor({B, A, 4});
  b.agent_mask = Tensor({B, A});
  b.cv_prior = Tensor({B, TP, 2});
  b.has_map = opt.with_map;
  if (opt.with_map) {
    b.segments = Tensor({B, M, 2 * P + 2});
    b.segment_mask = Tensor({B, M});
    b.goals = Tensor({B, N, 2});
    b.goal_mask = Tensor({B, N});
  }
  if (opt.with_future) b.gt = Tensor({B, TP, 2});

  const int first_visible = static_cast<int>(T) - opt.history_length;
  for (std::size_t bi = 0; bi < B; ++bi) {
    const world::Scene& scene = *scenes[bi];
    if (scene.t_obs != cfg.t_obs || scene.t_pred != cfg.t_pred) {
      throw ModelError("scene horizon does not match the model");
    }
    const world::Frame frame = world::Frame::for_scene(scene);
    b.frames.push_back(frame);

    // target first, then the nearest context agents
    std::vector<const world::AgentTrack*> order;
    std::vector<std::pair<double, const world::AgentTrack*>> others;
    for (const auto& tr : scene.tracks) {
      if (tr.id == scene.target_id) {
        order.push_back(&tr);
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      for (int t = static_cast<int>(T) - 1; t >= first_visible; --t) {
        if (tr.valid[t]) {
          best = world::distance(tr.positions[t], frame.origin);
          break;
        }
      }
      if (std::isfinite(best)) others.emplace_back(best, &tr);
    }
    if (order.empty()) throw ModelError("scene has no target track");
    std::stable_sort(others.begin(), others.end(),
                     [](const auto& x, const auto& y) { return x.first < y.first; });
    for (const auto& [_, tr] : others) {
      if (order.size() >= A) break;
      order.push_back(tr);
    }

    for (std::size_t a = 0; a < order.size(); ++a) {
      const world::AgentTrack& tr = *order[a];
      int count = 0, last = -1, prev = -1;
      for (std::size_t t = 0; t < T; ++t) {
        if (static_cast<int>(t) < first_visible || !tr.valid[t]) continue;
        const Point2 p = frame.to_local(tr.positions[t]);
        double* f = &b.agent_steps[((bi * A + a) * T + t) * 5];
        f[0] = p.x * kPositionScale;
        f[1] = p.y * kPositionScale;
        if (last >= 0 && last == static_cast<int>(t) - 1) {
          const Point2 q = frame.to_local(tr.positions[last]);
          f[2] = p.x - q.x;
          f[3] = p.y - q.y;
        }
        f[4] = (static_cast<double>(t) - T + 1) / static_cast<double>(T);
        b.agent_step_pool[(bi * A + a) * T + t] = 1.0;
        prev = last;
        last = static_cast<int>(t);
        ++count;
      }
      if (count == 0) continue;
      for (std::size_t t = 0; t < T; ++t) b.agent_step_pool[(bi * A + a) * T + t] /= count;
      b.agent_mask[bi * A + a] = 1.0;
      const Point2 p = frame.to_local(tr.positions[last]);
      double* s = &b.agent_state[(bi * A + a) * 4];
      s[0] = p.x * kPositionScale;
      s[1] = p.y * kPositionScale;
      if (prev >= 0) {
        const Point2 q = frame.to_local(tr.positions[prev]);
        const double steps = last - prev;
        s[2] = (p.x - q.x) / steps;
        s[3] = (p.y - q.y) / steps;
      }
    }

    // constant-velocity prior from the target's recent consecutive steps
    {
      const world::AgentTrack& tr = *order.front();
      Point2 vel{0.0, 0.0};
      int last = -1;
      for (int t = static_cast<int>(T) - 1; t >= first_visible; --t) {
        if (tr.valid[t]) {
          last = t;
          break;
        }
      }
      int first = last;
      while (first - 1 >= std::max(first_visible, last - 5) && tr.valid[first - 1]) --first;
      if (last >= 0 && first < last) {
        const Point2 d = frame.to_local(tr.positions[last]) - frame.to_local(tr.positions[first]);
        vel = (1.0 / (last - first)) * d;
      }
      for (std::size_t t = 0; t < TP; ++t) {
        b.cv_prior[(bi * TP + t) * 2] = vel.x * (t + 1.0);
        b.cv_prior[(bi * TP + t) * 2 + 1] = vel.y * (t + 1.0);
      }
    }

    if (opt.with_future) {
      const auto& fut = scene.target_future();
      for (std::size_t t = 0; t < TP; ++t) {
        const Point2 p = frame.to_local(fut[t]);
        b.gt[(bi * TP + t) * 2] = p.x;
        b.gt[(bi * TP + t) * 2 + 1] = p.y;
      }
    }

    if (opt.with_map && scene.map) {
      const auto& segs = scene.map->segments;
      std::vector<std::pair<double, std::size_t>> near;
      for (std::size_t k = 0; k < segs.size(); ++k) {
        double d = std::numeric_limits<double>::infinity();
        for (const Point2& p : segs[k].centerline) d = std::min(d, world::distance(p, frame.origin));
        near.emplace_back(d, k);
      }
      std::stable_sort(near.begin(), near.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
      const std::size_t F = 2 * P + 2;
      for (std::size_t m = 0; m < std::min<std::size_t>(M, near.size()); ++m) {
        const auto& seg = segs[near[m].second];
        const double len = seg.length();
        double* f = &b.segments[(bi * M + m) * F];
        for (std::size_t k = 0; k < P; ++k) {
          const Point2 p = frame.to_local(seg.point_at(len * k / (P - 1.0)));
          f[2 * k] = p.x * kPositionScale;
          f[2 * k + 1] = p.y * kPositionScale;
        }
        f[2 * P] = seg.flags.is_intersection ? 1.0 : 0.0;
        f[2 * P + 1] = seg.flags.has_control ? 1.0 : 0.0;
        b.segment_mask[bi * M + m] = 1.0;
      }
      const auto goals = sample_goal_candidates(scene, frame, cfg.goal_reach, cfg.goal_count);
      for (std::size_t n = 0; n < goals.size(); ++n) {
        b.goals[(bi * N + n) * 2] = goals[n].x;
        b.goals[(bi * N + n) * 2 + 1] = goals[n].y;
        b.goal_mask[bi * N + n] = 1.0;
      }
    }
  }
  return b;
}

// ---- predictor ---------------------------------------------------------

Predictor::Linear Predictor::linear(const std::string& name, std::size_t in, std::size_t out) {
  std::mt19937_64 rng(world::derive_seed(seed_, fnv1a(name)));
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor w({in, out});
  for (double& v : w.data()) v = u(rng);
  Linear l;
  l.w = &params_.add(name + ".w", std::move(w));
  l.b = &params_.add(name + ".b", Tensor({out}));
  return l;
}

Var Predictor::Linear::operator()(Tape& tape, Var x) const {
  return diff::add(diff::matmul(x, tape.param(*w)), tape.param(*b));
}

bool Predictor::is_training_only(const std::string& name) { return name.rfind("train.", 0) == 0; }

Predictor::Predictor(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  const std::size_t H = config_.hidden, K = config_.modes, T = config_.t_pred;
  linear("agent.step1", 5, H);
  linear("agent.step2", H, H);
  linear("agent.merge", H + 4, H);
  if (config_.has_map_branch) {
    linear("map.seg1", 2 * config_.segment_points + 2, H);
    linear("map.seg2", H, H);
    linear("map.query", H, H);
    linear("map.key", H, H);
    linear("map.value", H, H);
  } else {
    linear("pseudo.query", H, H);
    linear("pseudo.key", H, H);
    linear("pseudo.value", H, H);
    linear("train.proj1", H, H);
    linear("train.proj2", H, H);
    linear("train.delta_a", H + 4, H);
    linear("train.delta_m", H, H);
    linear("train.delta_f", H, H);
    linear("train.sigma_prime", 2 * H, K * T * 2);
  }
  linear("fuse.query", H, H);
  linear("fuse.key", H, H);
  linear("fuse.value", H, H);
  linear("fuse.mlp1", 3 * H, H);
  linear("fuse.mlp2", H, H);
  linear("dec.hidden", H, 2 * H);
  linear("dec.mu", 2 * H, K * T * 2);
  linear("dec.scale", 2 * H, K * T * 2);
  linear("dec.pi", 2 * H, K);
  if (config_.decoder == DecoderKind::kGoalBased) {
    linear("goal.embed", 2, H);
    linear("goal.query", H, H);
    linear("goal.score", H, 1);
  }
}

namespace {

struct Lin {
  ParameterStore& store;
  Tape& tape;
  Var operator()(const std::string& name, Var x) const {
    return diff::add(diff::matmul(x, tape.param(store.at(name + ".w"))), tape.param(store.at(name + ".b")));
  }
};

}  // namespace

Var Predictor::encode_agents(Tape& tape, const Batch& batch, Var* target_feature, TapParts* target_tap) {
  const std::size_t B = batch.size, A = config_.max_agents, T = config_.t_obs, H = config_.hidden;
  if (batch.agent_steps.shape() != diff::Shape{B, A, T, 5}) throw ModelError("batch does not match the model");
  for (std::size_t b = 0; b < B; ++b) {
    if (batch.agent_mask[b * A] == 0.0) throw ModelError("target has no valid observed step");
  }
  Lin L{params_, tape};
  Var steps = tape.constant(batch.agent_steps);
  Var h = diff::relu(L("agent.step1", steps));
  h = diff::relu(L("agent.step2", h));
  h = diff::reshape(h, {B * A, T, H});
  Var pooled = diff::reshape(diff::weighted_sum(tape.constant(batch.agent_step_pool), h), {B, A, H});
  const Var parts[] = {pooled, tape.constant(batch.agent_state)};
  Var merged = diff::concat(parts, -1);
  Var pre = L("agent.merge", merged);
  Var sub = diff::relu(pre);
  auto target_row = [&](Var v) { return diff::reshape(diff::slice(v, 1, 0, 1), {B, v.shape().back()}); };
  if (target_feature) *target_feature = target_row(sub);
  if (target_tap) *target_tap = {target_row(pre), target_row(merged)};
  return sub;
}

Var Predictor::encode_map(Tape& tape, const Batch& batch, Var f_a) {
  if (!config_.has_map_branch) throw ModelError("encode_map called on a mapless model");
  if (!batch.has_map) throw ModelError("map branch needs a map batch");
  const std::size_t B = batch.size, M = config_.max_segments, H = config_.hidden;
  for (std::size_t b = 0; b < B; ++b) {
    double any = 0.0;
    for (std::size_t m = 0; m < M; ++m) any += batch.segment_mask[b * M + m];
    if (any == 0.0) throw ModelError("empty map");
  }
  Lin L{params_, tape};
  Var e = diff::relu(L("map.seg1", tape.constant(batch.segments)));
  e = diff::relu(L("map.seg2", e));
  Var scores = diff::scale(diff::batched_dot(L("map.key", e), L("map.query", f_a)), 1.0 / std::sqrt(double(H)));
  return diff::attention_pool(scores, batch.segment_mask, L("map.value", e));
}

Var Predictor::pseudo_map_branch(Tape& tape, const Batch& batch, Var agent_features, Var f_a, Var* weights) {
  if (config_.has_map_branch) throw ModelError("pseudo-map branch belongs to the mapless student");
  const double H = config_.hidden;
  Lin L{params_, tape};
  Var scores = diff::scale(diff::batched_dot(L("pseudo.key", agent_features), L("pseudo.query", f_a)),
                           1.0 / std::sqrt(H));
  Var w = diff::softmax(scores, &batch.agent_mask);
  if (weights) *weights = w;
  return diff::weighted_sum(w, L("pseudo.value", agent_features));
}

Var Predictor::project_pseudo_map(Tape& tape, Var pseudo_map, Var* hidden) {
  Lin L{params_, tape};
  Var h = diff::relu(L("train.proj1", pseudo_map));
  if (hidden) *hidden = h;
  return L("train.proj2", h);
}

Var Predictor::fuse(Tape& tape, const Batch& batch, Var f_a, Var map_token, Var agent_features, TapParts* tap) {
  const std::size_t B = batch.size, A = config_.max_agents, H = config_.hidden;
  Lin L{params_, tape};
  const Var tok_parts[] = {diff::reshape(map_token, {B, 1, H}), agent_features};
  Var tokens = diff::concat(tok_parts, 1);
  Tensor mask({B, A + 1});
  for (std::size_t b = 0; b < B; ++b) {
    mask[b * (A + 1)] = 1.0;
    for (std::size_t a = 0; a < A; ++a) mask[b * (A + 1) + a + 1] = batch.agent_mask[b * A + a];
  }
  Var scores = diff::scale(diff::batched_dot(L("fuse.key", tokens), L("fuse.query", f_a)), 1.0 / std::sqrt(double(H)));
  Var ctx = diff::attention_pool(scores, mask, L("fuse.value", tokens));
  const Var parts[] = {f_a, ctx, map_token};
  Var h = diff::relu(L("fuse.mlp1", diff::concat(parts, -1)));
  Var pre = L("fuse.mlp2", h);
  if (tap) *tap = {pre, h};
  return diff::relu(pre);
}

MixtureOutput Predictor::decode_regression(Tape& tape, const Batch& batch, Var f_f, bool training_heads) {
  const std::size_t B = batch.size, K = config_.modes, T = config_.t_pred;
  Lin L{params_, tape};
  Var d = diff::relu(L("dec.hidden", f_f));
  MixtureOutput out;
  Var offsets = diff::scale(diff::reshape(L("dec.mu", d), {B, K, T, 2}), kMeanScale);
  out.mu = diff::add(offsets, diff::expand(tape.constant(batch.cv_prior), 1, K));
  out.sigma = positive_scale(diff::reshape(L("dec.scale", d), {B, K, T, 2}));
  out.pi_logits = L("dec.pi", d);
  if (training_heads && !config_.has_map_branch) {
    out.sigma_prime = positive_scale(diff::reshape(L("train.sigma_prime", d), {B, K, T, 2}));
  }
  return out;
}

GoalOutput Predictor::decode_goal(Tape& tape, const Batch& batch, Var f_f) {
  if (config_.decoder != DecoderKind::kGoalBased) throw ModelError("model has no goal decoder");
  if (!batch.has_map) throw ModelError("goal decoding needs a map batch");
  const std::size_t B = batch.size, N = config_.goal_count;
  for (std::size_t b = 0; b < B; ++b) {
    double any = 0.0;
    for (std::size_t n = 0; n < N; ++n) any += batch.goal_mask[b * N + n];
    if (any == 0.0) throw ModelError("empty goal set");
  }
  Lin L{params_, tape};
  Var g = diff::relu(L("goal.embed", diff::scale(tape.constant(batch.goals), kPositionScale)));
  Var q = diff::expand(L("goal.query", f_f), 1, N);
  Var h = diff::relu(diff::add(g, q));
  GoalOutput out;
  out.logits = diff::reshape(L("goal.score", h), {B, N});
  out.probs = diff::softmax(out.logits, &batch.goal_mask);
  return out;
}

ForwardOutput Predictor::forward(Tape& tape, const Batch& batch, const ForwardOptions& options) {
  ForwardOutput out;
  Var f_a;
  TapParts agent_tap, fused_tap;
  out.agent_features = encode_agents(tape, batch, &f_a, &agent_tap);
  out.taps.f_a = agent_tap.tap;
  const bool heads = options.training_heads && !config_.has_map_branch;
  Var map_hidden;
  if (config_.has_map_branch) {
    out.map_token = encode_map(tape, batch, f_a);
    out.taps.f_m = out.map_token;
  } else {
    Var w;
    out.map_token = pseudo_map_branch(tape, batch, out.agent_features, f_a, &w);
    out.pseudo_map_weights = w;
    out.taps.f_m = heads ? project_pseudo_map(tape, out.map_token, &map_hidden) : out.map_token;
  }
  Var fused = fuse(tape, batch, f_a, out.map_token, out.agent_features, &fused_tap);
  out.taps.f_f = fused_tap.tap;
  if (heads) {
    Lin L{params_, tape};
    out.taps.delta_a = positive_scale(L("train.delta_a", agent_tap.hidden));
    out.taps.delta_m = positive_scale(L("train.delta_m", map_hidden));
    out.taps.delta_f = positive_scale(L("train.delta_f", fused_tap.hidden));
  }
  out.pred = decode_regression(tape, batch, fused, heads);
  if (config_.decoder == DecoderKind::kGoalBased) out.goal = decode_goal(tape, batch, fused);
  return out;
}

// ---- checkpoints -------------------------------------------------------

namespace {

json config_json(const ModelConfig& c) {
  json taps = json::array();
  for (TapId t : c.taps) taps.push_back(std::string(tap_name(t)));
  return {{"hidden", c.hidden},
          {"modes", c.modes},
          {"decoder", std::string(decoder_name(c.decoder))},
          {"taps", taps},
          {"has_map_branch", c.has_map_branch},
          {"t_obs", c.t_obs},
          {"t_pred", c.t_pred},
          {"max_agents", c.max_agents},
          {"max_segments", c.max_segments},
          {"segment_points", c.segment_points},
          {"goal_count", c.goal_count},
          {"goal_reach", c.goal_reach}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.hidden = j.at("hidden").get<int>();
  c.modes = j.at("modes").get<int>();
  c.decoder = parse_decoder(j.at("decoder").get<std::string>());
  c.taps.clear();
  for (const auto& t : j.at("taps")) c.taps.push_back(parse_tap(t.get<std::string>()));
  c.has_map_branch = j.at("has_map_branch").get<bool>();
  c.t_obs = j.at("t_obs").get<int>();
  c.t_pred = j.at("t_pred").get<int>();
  c.max_agents = j.at("max_agents").get<int>();
  c.max_segments = j.at("max_segments").get<int>();
  c.segment_points = j.at("segment_points").get<int>();
  c.goal_count = j.at("goal_count").get<int>();
  c.goal_reach = j.at("goal_reach").get<double>();
  return c;
}

constexpr std::string_view kMagic = "MAPKD-CHECKPOINT";

}  // namespace

void Predictor::save(const std::filesystem::path& path, bool inference_only) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint blocks are little-endian");
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, p] : params_) {
    if (inference_only && is_training_only(name)) continue;
    const std::size_t bytes = p.value.size() * sizeof(double);
    manifest.push_back({{"name", name}, {"shape", p.value.shape()}, {"dtype", "f64le"}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  json header = {{"format", kMagic}, {"version", 1}, {"seed", seed_}, {"model", config_json(config_)}, {"params", manifest}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const auto& [name, p] : params_) {
    if (inference_only && is_training_only(name)) continue;
    out.write(reinterpret_cast<const char*>(p.value.data().data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw ModelError("checkpoint write failed for " + path.string());
}

Predictor Predictor::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot read checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw ModelError("checkpoint header is not valid: " + std::string(e.what()));
  }
  if (header.value("format", "") != kMagic || header.value("version", 0) != 1) {
    throw ModelError("not a version-1 checkpoint: " + path.string());
  }
  Predictor model(config_from(header.at("model")), header.at("seed").get<std::uint64_t>());
  const std::streampos data_start = in.tellg();
  std::set<std::string> seen;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    if (!model.params_.contains(name)) throw ModelError("checkpoint has unknown parameter " + name);
    Parameter& p = model.params_.at(name);
    if (entry.at("shape").get<diff::Shape>() != p.value.shape() || entry.at("dtype").get<std::string>() != "f64le") {
      throw ModelError("checkpoint parameter " + name + " has the wrong shape");
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::size_t>()));
    in.read(reinterpret_cast<char*>(p.value.data().data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw ModelError("checkpoint truncated at " + name);
    seen.insert(name);
  }
  for (const auto& [name, _] : model.params_) {
    if (!seen.count(name) && !is_training_only(name)) throw ModelError("checkpoint lacks parameter " + name);
  }
  return model;
}

std::uint64_t Predictor::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : params_) {
    h = fnv1a(name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(p.value.data().data()), p.value.size() * sizeof(double)), h);
  }
  return h;
}

// ---- equivalent features -----------------------------------------------

std::vector<double> EquivalentFeatureDecomposition::reconstruct() const {
  std::vector<double> out(f_global.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!f_e_a.empty()) out[i] += agent_weight * f_e_a[i];
    if (!f_e_m.empty()) out[i] += map_weight * f_e_m[i];
  }
  return out;
}

EquivalentFeatureDecomposition decompose_equivalent(const Tensor& f_sub_a, const Tensor& f_sub_m,
                                                    std::span<const double> w_a, std::span<const double> w_m) {
  if (f_sub_a.rank() != 2 || f_sub_m.rank() != 2 || f_sub_a.dim(1) != f_sub_m.dim(1)) {
    throw ModelError("sub-features must be [N, H] with a shared width");
  }
  if (w_a.size() != f_sub_a.dim(0) || w_m.size() != f_sub_m.dim(0)) throw ModelError("one weight per sub-feature");
  const std::size_t H = f_sub_a.dim(1);
  EquivalentFeatureDecomposition d;
  d.f_sub_a = f_sub_a;
  d.f_sub_m = f_sub_m;
  d.w_a.assign(w_a.begin(), w_a.end());
  d.w_m.assign(w_m.begin(), w_m.end());
  for (double w : w_a) {
    if (w < 0.0) throw ModelError("attention weights must be non-negative");
    d.agent_weight += w;
  }
  for (double w : w_m) {
    if (w < 0.0) throw ModelError("attention weights must be non-negative");
    d.map_weight += w;
  }
  if (std::fabs(d.agent_weight + d.map_weight - 1.0) > 1e-9) throw ModelError("joint weights must sum to 1");
  d.f_global.assign(H, 0.0);
  for (std::size_t i = 0; i < w_a.size(); ++i)
    for (std::size_t h = 0; h < H; ++h) d.f_global[h] += w_a[i] * f_sub_a[i * H + h];
  for (std::size_t i = 0; i < w_m.size(); ++i)
    for (std::size_t h = 0; h < H; ++h) d.f_global[h] += w_m[i] * f_sub_m[i * H + h];

  auto equivalent = [H](const Tensor& sub, std::span<const double> w, double total, std::vector<double>& renorm,
                        std::vector<double>& feat) {
    if (total <= 0.0) return;
    feat.assign(H, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      renorm.push_back(w[i] / total);
      for (std::size_t h = 0; h < H; ++h) feat[h] += renorm.back() * sub[i * H + h];
    }
  };
  equivalent(f_sub_a, w_a, d.agent_weight, d.w_a_renorm, d.f_e_a);
  equivalent(f_sub_m, w_m, d.map_weight, d.w_m_renorm, d.f_e_m);
  return d;
}

std::pair<std::vector<double>, std::vector<double>> joint_attention_weights(std::span<const double> scores_a,
                                                                            std::span<const double> scores_m) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores_a) mx = std::max(mx, s);
  for (double s : scores_m) mx = std::max(mx, s);
  std::vector<double> wa, wm;
  double z = 0.0;
  for (double s : scores_a) z += wa.emplace_back(std::exp(s - mx));
  for (double s : scores_m) z += wm.emplace_back(std::exp(s - mx));
  for (double& w : wa) w /= z;
  for (double& w : wm) w /= z;
  return {wa, wm};
}

}  // namespace mapkd::nets
