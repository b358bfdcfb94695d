#include <benchmark/benchmark.h>

#include <random>

#include "mapkd/config.hpp"
#include "mapkd/metrics.hpp"
#include "mapkd/nets.hpp"
#include "mapkd/trainer.hpp"

using namespace mapkd;

namespace {

diff::Tensor random_tensor(diff::Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  diff::Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const diff::Tensor a = random_tensor({32, n}, 1), w = random_tensor({n, n}, 2);
  for (auto _ : state) {
    diff::Tape t;
    diff::Var x = t.input(a), y = t.input(w);
    diff::Var out = diff::sum(diff::matmul(x, y));
    t.backward(out);
    benchmark::DoNotOptimize(t.grad(y));
  }
  state.SetItemsProcessed(state.iterations() * 32 * state.range(0) * state.range(0));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(16)->Arg(64)->Arg(128);

void BM_GenerateScenes(benchmark::State& state) {
  world::DatasetConfig c;
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(world::generate_scenes(c, ++seed, 32));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_GenerateScenes);

void BM_TeacherForward(benchmark::State& state) {
  world::DatasetConfig d;
  const auto scenes = world::generate_scenes(d, 3, 32);
  std::vector<const world::Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  nets::ModelConfig c;
  c.hidden = static_cast<int>(state.range(0));
  nets::Predictor model(c, 1);
  const nets::Batch batch = nets::build_batch(ptrs, c, {});
  for (auto _ : state) {
    diff::Tape t;
    benchmark::DoNotOptimize(model.forward(t, batch));
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TeacherForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_DistillEpoch(benchmark::State& state) {
  ExperimentConfig c;
  c.train_scenes = 128;
  c.eval_scenes = 8;
  c.model.hidden = 32;
  c.train.epochs = 1;
  const auto data = train::make_dataset(c, 1);
  train::RunRecord r;
  nets::Predictor teacher = train::train_teacher(data.train, c, 1, r);
  for (auto _ : state) {
    train::RunRecord s;
    benchmark::DoNotOptimize(train::train_student(data.train, &teacher, c, 2, s));
  }
  state.SetItemsProcessed(state.iterations() * c.train_scenes);
}
BENCHMARK(BM_DistillEpoch)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  std::vector<metrics::Prediction> preds(500);
  std::vector<metrics::Trajectory> gts(500);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (int k = 0; k < 6; ++k) {
      metrics::Trajectory t;
      for (int i = 0; i < 30; ++i) t.push_back({u(rng), u(rng)});
      preds[s].modes.push_back(t);
      preds[s].probs.push_back(1.0 / 6.0);
    }
    for (int i = 0; i < 30; ++i) gts[s].push_back({u(rng), u(rng)});
  }
  const std::vector<int> ks{1, 6};
  for (auto _ : state) benchmark::DoNotOptimize(metrics::evaluate(preds, gts, ks));
  state.SetItemsProcessed(state.iterations() * 500);
}
BENCHMARK(BM_Metrics);

}  // namespace

BENCHMARK_MAIN();
