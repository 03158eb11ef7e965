#include <benchmark/benchmark.h>

#include <random>

#include "lbba/attack.hpp"
#include "lbba/data.hpp"
#include "lbba/nets.hpp"
#include "lbba/ops.hpp"

using namespace lbba;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> d(0, 1);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

NetworkSpec surrogate_spec(int width) {
  NetworkSpec s;
  s.widths = {width, 2 * width, 4 * width, 8 * width};
  return s;
}

}  // namespace

static void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor x = random_tensor({8, c, 32, 32}, 1);
  Tensor w = random_tensor({c, c, 3, 3}, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {1, 1, 1}));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor x = random_tensor({8, c, 32, 32}, 1);
  Tensor w = random_tensor({c, c, 3, 3}, 2);
  x.set_requires_grad();
  w.set_requires_grad();
  for (auto _ : state) {
    Tensor y = sum(conv2d(x, w, {1, 1, 1}));
    backward(y);
    x.zero_grad();
    w.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor({n, n}, 3);
  Tensor b = random_tensor({n, n}, 4);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * int64_t(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

static void BM_SurrogateForward(benchmark::State& state) {
  Model m = build(surrogate_spec(static_cast<int>(state.range(0))), 0);
  m.eval();
  Tensor x = random_tensor({32, 3, 32, 32}, 5);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_logits(x));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_SurrogateForward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_EtfAttackStep(benchmark::State& state) {
  Surrogate s(build(surrogate_spec(16), 0));
  SyntheticSpec spec;
  spec.n_per_class = 2;
  SampleSet pool = make_synthetic(spec);
  std::vector<int64_t> idx(16);
  for (int i = 0; i < 16; ++i) idx[i] = i;
  AttackConfig cfg;
  cfg.surface = state.range(0) ? Surface::etf : Surface::shallow;
  cfg.steps = 1;
  const auto guides = select_guides(idx, pool, cfg.guide, 0);
  for (auto _ : state) benchmark::DoNotOptimize(attack_pool(s, pool, idx, guides, cfg));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_EtfAttackStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
