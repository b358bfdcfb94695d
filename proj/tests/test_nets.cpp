#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mapkd/losses.hpp"
#include "mapkd/nets.hpp"

using namespace mapkd;
using namespace mapkd::nets;

namespace {

ModelConfig small_config(bool map_branch, DecoderKind decoder = DecoderKind::kRegressionLaplace) {
  ModelConfig c;
  c.hidden = 16;
  c.modes = 3;
  c.has_map_branch = map_branch;
  c.decoder = decoder;
  c.goal_count = 40;
  return c;
}

std::vector<world::Scene> some_scenes(int n, std::uint64_t seed = 4) {
  world::DatasetConfig d;
  return world::generate_scenes(d, seed, n);
}

Batch batch_of(const std::vector<world::Scene>& scenes, const ModelConfig& c, bool with_map = true) {
  std::vector<const world::Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  BatchOptions o;
  o.with_map = with_map;
  return build_batch(ptrs, c, o);
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

// Moves the block of width w at slot `from` to slot `to` in a [B, S, w] tensor.
void copy_slot(const Tensor& src, Tensor& dst, std::size_t b, std::size_t S, std::size_t w, std::size_t from,
               std::size_t to) {
  for (std::size_t k = 0; k < w; ++k) dst[(b * S + to) * w + k] = src[(b * S + from) * w + k];
}

}  // namespace

TEST(Shapes, TeacherAndStudentTapsAgree) {
  const auto scenes = some_scenes(3);
  Predictor teacher(small_config(true), 1), student(small_config(false), 2);
  Tape t1, t2;
  const auto ot = teacher.forward(t1, batch_of(scenes, teacher.config()));
  const auto os = student.forward(t2, batch_of(scenes, student.config(), false), {.training_heads = true});
  for (TapId id : {TapId::kAgent, TapId::kMap, TapId::kFused}) {
    EXPECT_EQ(ot.taps.tap(id).shape(), (diff::Shape{3, 16}));
    EXPECT_EQ(ot.taps.tap(id).shape(), os.taps.tap(id).shape()) << tap_name(id);
    ASSERT_TRUE(os.taps.delta(id).has_value());
    for (double v : os.taps.delta(id)->value().data()) EXPECT_GT(v, 0.0);
  }
  EXPECT_FALSE(ot.taps.delta_a.has_value());
}

TEST(Decoder, ScalesPositiveAndModesNormalised) {
  const auto scenes = some_scenes(2);
  Predictor student(small_config(false), 3);
  Tape t;
  const auto o = student.forward(t, batch_of(scenes, student.config(), false), {.training_heads = true});
  EXPECT_EQ(o.pred.mu.shape(), (diff::Shape{2, 3, 30, 2}));
  EXPECT_EQ(o.pred.pi_logits.shape(), (diff::Shape{2, 3}));
  for (double v : o.pred.sigma.value().data()) EXPECT_GT(v, 0.0);
  ASSERT_TRUE(o.pred.sigma_prime.has_value());
  for (double v : o.pred.sigma_prime->value().data()) EXPECT_GT(v, 0.0);
  Var p = diff::softmax(o.pred.pi_logits);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(p.value()[b * 3] + p.value()[b * 3 + 1] + p.value()[b * 3 + 2], 1.0, 1e-12);

  Tape t2;
  const auto inference = student.forward(t2, batch_of(scenes, student.config(), false));
  EXPECT_FALSE(inference.pred.sigma_prime.has_value());
}

TEST(Agents, ContextOrderDoesNotMatter) {
  auto scenes = some_scenes(2, 8);
  Predictor m(small_config(true), 5);
  Tape t1;
  const Tensor mu1 = m.forward(t1, batch_of(scenes, m.config())).pred.mu.value();
  for (auto& s : scenes) std::reverse(s.tracks.begin(), s.tracks.end());
  Tape t2;
  EXPECT_EQ(m.forward(t2, batch_of(scenes, m.config())).pred.mu.value(), mu1);
}

TEST(Agents, SlotPermutationIsInvariant) {
  const auto scenes = some_scenes(2, 9);
  Predictor m(small_config(true), 6);
  const ModelConfig& c = m.config();
  const Batch b = batch_of(scenes, c);
  Batch p = b;
  const std::size_t A = c.max_agents, T = c.t_obs;
  std::vector<std::size_t> perm(A);
  for (std::size_t a = 0; a < A; ++a) perm[a] = a;
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin() + 1, perm.end(), rng);
  for (std::size_t bi = 0; bi < b.size; ++bi) {
    for (std::size_t a = 0; a < A; ++a) {
      copy_slot(b.agent_steps, p.agent_steps, bi, A, T * 5, perm[a], a);
      copy_slot(b.agent_state, p.agent_state, bi, A, 4, perm[a], a);
      copy_slot(b.agent_mask, p.agent_mask, bi, A, 1, perm[a], a);
      for (std::size_t t = 0; t < T; ++t) p.agent_step_pool[(bi * A + a) * T + t] = b.agent_step_pool[(bi * A + perm[a]) * T + t];
    }
  }
  Tape t1, t2;
  const auto o1 = m.forward(t1, b), o2 = m.forward(t2, p);
  expect_near(o1.pred.mu.value(), o2.pred.mu.value(), 1e-10);
  expect_near(o1.taps.f_f.value(), o2.taps.f_f.value(), 1e-12);
}

TEST(Agents, TargetFeatureIgnoresContext) {
  const auto scenes = some_scenes(1, 10);
  Predictor m(small_config(true), 7);
  const std::size_t A = m.config().max_agents, T = m.config().t_obs;
  Batch b = batch_of(scenes, m.config());
  Batch masked = b;
  for (std::size_t a = 1; a < A; ++a) {
    masked.agent_mask[a] = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      masked.agent_step_pool[a * T + t] = 0.0;
      for (std::size_t k = 0; k < 5; ++k) masked.agent_steps[(a * T + t) * 5 + k] = 0.0;
    }
  }
  Tape t1, t2;
  Var f1, f2;
  m.encode_agents(t1, b, &f1);
  m.encode_agents(t2, masked, &f2);
  EXPECT_EQ(f1.shape(), (diff::Shape{1, 16}));
  EXPECT_EQ(f1.value(), f2.value());
}

TEST(Agents, MissingTargetHistoryIsAnError) {
  const auto scenes = some_scenes(1);
  Predictor m(small_config(true), 1);
  Batch b = batch_of(scenes, m.config());
  b.agent_mask[0] = 0.0;
  Tape t;
  Var f;
  EXPECT_THROW(m.encode_agents(t, b, &f), ModelError);
}

TEST(Map, DuplicatedSegmentPoolsLikeASingleOne) {
  const auto scenes = some_scenes(1, 11);
  Predictor m(small_config(true), 8);
  const std::size_t M = m.config().max_segments, F = 2 * m.config().segment_points + 2;
  Batch one = batch_of(scenes, m.config());
  for (std::size_t s = 1; s < M; ++s) one.segment_mask[s] = 0.0;
  Batch five = one;
  for (std::size_t s = 1; s < 5; ++s) {
    copy_slot(one.segments, five.segments, 0, M, F, 0, s);
    five.segment_mask[s] = 1.0;
  }
  Tape t1, t2;
  Var fa1, fa2;
  m.encode_agents(t1, one, &fa1);
  m.encode_agents(t2, five, &fa2);
  expect_near(m.encode_map(t1, one, fa1).value(), m.encode_map(t2, five, fa2).value(), 1e-12);
}

TEST(Map, SegmentOrderDoesNotMatter) {
  const auto scenes = some_scenes(1, 12);
  Predictor m(small_config(true), 9);
  const std::size_t M = m.config().max_segments, F = 2 * m.config().segment_points + 2;
  const Batch b = batch_of(scenes, m.config());
  Batch r = b;
  for (std::size_t s = 0; s < M; ++s) {
    copy_slot(b.segments, r.segments, 0, M, F, M - 1 - s, s);
    r.segment_mask[s] = b.segment_mask[M - 1 - s];
  }
  Tape t1, t2;
  Var fa1, fa2;
  m.encode_agents(t1, b, &fa1);
  m.encode_agents(t2, r, &fa2);
  expect_near(m.encode_map(t1, b, fa1).value(), m.encode_map(t2, r, fa2).value(), 1e-12);
}

TEST(Map, EmptyMapAndMaplessModelAreErrors) {
  const auto scenes = some_scenes(1);
  Predictor teacher(small_config(true), 1), student(small_config(false), 1);
  Batch b = batch_of(scenes, teacher.config());
  for (std::size_t s = 0; s < teacher.config().max_segments; ++s) b.segment_mask[s] = 0.0;
  Tape t;
  Var f;
  teacher.encode_agents(t, b, &f);
  EXPECT_THROW(teacher.encode_map(t, b, f), ModelError);
  EXPECT_THROW(student.encode_map(t, batch_of(scenes, student.config()), f), ModelError);
}

TEST(PseudoMap, SingleAgentGetsAllTheWeight) {
  auto scenes = some_scenes(1, 13);
  auto& s = scenes[0];
  std::erase_if(s.tracks, [&](const world::AgentTrack& tr) { return tr.id != s.target_id; });
  Predictor m(small_config(false), 10);
  const std::size_t H = m.config().hidden;
  Tape t;
  const auto o = m.forward(t, batch_of(scenes, m.config(), false), {.training_heads = true});
  ASSERT_TRUE(o.pseudo_map_weights.has_value());
  EXPECT_DOUBLE_EQ(o.pseudo_map_weights->value()[0], 1.0);
  for (std::size_t a = 1; a < m.config().max_agents; ++a) EXPECT_EQ(o.pseudo_map_weights->value()[a], 0.0);

  // value projection of the lone agent feature
  const Tensor& feat = o.agent_features.value();
  const Tensor& w = m.params().at("pseudo.value.w").value;
  const Tensor& bias = m.params().at("pseudo.value.b").value;
  for (std::size_t j = 0; j < H; ++j) {
    double v = bias[j];
    for (std::size_t i = 0; i < H; ++i) v += feat[i] * w[i * H + j];
    EXPECT_NEAR(o.map_token.value()[j], v, 1e-12);
  }
  Tape t2;
  EXPECT_EQ(m.project_pseudo_map(t2, t2.constant(o.map_token.value())).value(), o.taps.f_m.value());
}

TEST(Fusion, MapTokenMatters) {
  const auto scenes = some_scenes(1, 14);
  Predictor m(small_config(true), 11);
  const Batch b = batch_of(scenes, m.config());
  Tape t;
  Var fa;
  Var agents = m.encode_agents(t, b, &fa);
  Var fm = m.encode_map(t, b, fa);
  const Tensor with = m.fuse(t, b, fa, fm, agents).value();
  const Tensor without = m.fuse(t, b, fa, t.constant(Tensor(fm.shape())), agents).value();
  EXPECT_NE(with, without);
  EXPECT_EQ(with, m.fuse(t, b, fa, fm, agents).value());
}

TEST(Goals, ProbabilitiesNormalisedAndDuplicatesTie) {
  const auto scenes = some_scenes(2, 15);
  Predictor m(small_config(true, DecoderKind::kGoalBased), 12);
  Batch b = batch_of(scenes, m.config());
  const std::size_t N = m.config().goal_count;
  b.goals[2] = b.goals[0];
  b.goals[3] = b.goals[1];
  b.goal_mask[1] = 1.0;
  Tape t;
  const auto o = m.forward(t, b);
  ASSERT_TRUE(o.goal.has_value());
  for (std::size_t bi = 0; bi < 2; ++bi) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) s += o.goal->probs.value()[bi * N + n];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(o.goal->logits.value()[0], o.goal->logits.value()[1]);

  for (std::size_t n = 0; n < N; ++n) b.goal_mask[n] = 0.0;
  Tape t2;
  EXPECT_THROW(m.forward(t2, b), ModelError);
}

TEST(Goals, CandidatesStayWithinReach) {
  const auto scenes = some_scenes(3, 16);
  for (const auto& s : scenes) {
    const auto f = world::Frame::for_scene(s);
    const auto g = sample_goal_candidates(s, f, 50.0, 100);
    EXPECT_LE(g.size(), 100u);
    EXPECT_FALSE(g.empty());
    for (auto p : g) EXPECT_LE(std::hypot(p.x, p.y), 50.0 + 1e-9);
  }
}

TEST(Gradients, EveryParameterReceivesAFiniteGradient) {
  const auto scenes = some_scenes(4, 17);
  Predictor teacher(small_config(true), 13), student(small_config(false), 14);
  Tape tt;
  const auto ot = teacher.forward(tt, batch_of(scenes, teacher.config()));
  Tape t;
  const Batch b = batch_of(scenes, student.config(), false);
  const auto os = student.forward(t, b, {.training_heads = true});
  const auto pred = losses::pred_loss_wta(os.pred.mu, os.pred.sigma, os.pred.pi_logits, b.gt, losses::Density::kLaplace);
  std::vector<losses::NamedTerm> fkd;
  for (TapId id : {TapId::kAgent, TapId::kMap, TapId::kFused}) {
    fkd.push_back({std::string(tap_name(id)),
                   losses::fkd_loss(t.constant(ot.taps.tap(id).value()), os.taps.tap(id), *os.taps.delta(id))});
  }
  losses::LossConfig lc;
  const auto okd = losses::okd_regression(ot.pred.mu.value(), ot.pred.pi_logits.value(), os.pred.mu,
                                          *os.pred.sigma_prime, os.pred.pi_logits, lc);
  const auto total = losses::total_loss(pred.total, fkd, okd.total, 10.0, 1.0);
  student.params().zero_grad();
  t.backward(total.total);
  for (const auto& [name, p] : student.params()) {
    double norm = 0.0;
    for (double g : p.grad.data()) {
      ASSERT_TRUE(std::isfinite(g)) << name;
      norm += g * g;
    }
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Predictor m(small_config(false), 21);
  for (auto& [name, p] : m.params())
    for (double& v : p.value.data()) v = std::nextafter(v, 1.0);
  const auto path = std::filesystem::temp_directory_path() / "mapkd_ckpt_test.bin";
  m.save(path);
  const Predictor back = Predictor::load(path);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.parameter_hash(), m.parameter_hash());
  for (const auto& [name, p] : m.params()) EXPECT_EQ(back.params().at(name).value, p.value) << name;

  m.save(path, true);
  const Predictor slim = Predictor::load(path);
  for (const auto& [name, p] : m.params())
    if (!Predictor::is_training_only(name)) EXPECT_EQ(slim.params().at(name).value, p.value) << name;
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedOrForeignFilesAreRejected) {
  Predictor m(small_config(true), 22);
  const auto path = std::filesystem::temp_directory_path() / "mapkd_ckpt_trunc.bin";
  m.save(path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(Predictor::load(path), ModelError);
  std::ofstream(path) << "{\"format\":\"other\"}\n";
  EXPECT_THROW(Predictor::load(path), ModelError);
  std::ofstream(path) << "not json\n";
  EXPECT_THROW(Predictor::load(path), ModelError);
  std::filesystem::remove(path);
  EXPECT_THROW(Predictor::load(path), ModelError);
}

TEST(Config, InvalidModelsAreRejected) {
  ModelConfig c;
  c.modes = 0;
  EXPECT_THROW(Predictor(c, 1), ModelError);
  c = ModelConfig{};
  c.has_map_branch = false;
  c.decoder = DecoderKind::kGoalBased;
  EXPECT_THROW(c.validate(), ModelError);
  EXPECT_THROW(parse_decoder("nope"), ModelError);
  EXPECT_EQ(parse_tap(tap_name(TapId::kFused)), TapId::kFused);
}

TEST(Decomposition, ReconstructsTheGlobalFeature) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t na = 1 + rng() % 6, nm = 1 + rng() % 9, H = 1 + rng() % 12;
    Tensor fa({na, H}), fm({nm, H});
    for (double& v : fa.data()) v = u(rng);
    for (double& v : fm.data()) v = u(rng);
    std::vector<double> sa(na), sm(nm);
    for (double& s : sa) s = 3.0 * u(rng);
    for (double& s : sm) s = 3.0 * u(rng);
    const auto [wa, wm] = joint_attention_weights(sa, sm);
    const auto d = decompose_equivalent(fa, fm, wa, wm);
    EXPECT_NEAR(d.agent_weight + d.map_weight, 1.0, 1e-12);
    const auto r = d.reconstruct();
    for (std::size_t h = 0; h < H; ++h) EXPECT_NEAR(r[h], d.f_global[h], 1e-9);
    double ra = 0.0, rm = 0.0;
    for (double w : d.w_a_renorm) ra += w;
    for (double w : d.w_m_renorm) rm += w;
    EXPECT_NEAR(ra, 1.0, 1e-12);
    EXPECT_NEAR(rm, 1.0, 1e-12);
  }
}

TEST(Decomposition, AllWeightOnAgents) {
  Tensor fa({2, 2}, {1.0, 2.0, 3.0, 4.0}), fm({1, 2}, {9.0, 9.0});
  const std::vector<double> wa{0.25, 0.75}, wm{0.0};
  const auto d = decompose_equivalent(fa, fm, wa, wm);
  EXPECT_TRUE(d.f_e_m.empty());
  ASSERT_EQ(d.f_e_a.size(), 2u);
  EXPECT_DOUBLE_EQ(d.f_e_a[0], d.f_global[0]);
  EXPECT_DOUBLE_EQ(d.f_e_a[1], d.f_global[1]);
  EXPECT_DOUBLE_EQ(d.f_global[0], 2.5);
  const std::vector<double> negative{-0.5, 1.5};
  EXPECT_THROW(decompose_equivalent(fa, fm, negative, wm), ModelError);
  const std::vector<double> unnormalised{0.5, 0.6};
  EXPECT_THROW(decompose_equivalent(fa, fm, unnormalised, wm), ModelError);
}
