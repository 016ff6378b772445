#include <benchmark/benchmark.h>

#include <array>
#include <random>

#include "cosim/csmodel.hpp"
#include "cosim/ensemble.hpp"
#include "cosim/numerics.hpp"
#include "cosim/rng.hpp"
#include "cosim/synthbench.hpp"

using namespace cosim;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(gen);
  }
  return m;
}

const synth::World& bench_world() {
  static const synth::World world = [] {
    synth::WorldConfig cfg;
    cfg.n_images = 2000;
    cfg.triples_per_cluster = 1000;
    cfg.cc_val_size = 4000;
    cfg.cc_test_size = 900;
    cfg.seed = 1;
    return synth::generate_world(cfg);
  }();
  return world;
}

}  // namespace

static void BM_CosineDistance(benchmark::State& state) {
  const auto d = static_cast<Eigen::Index>(state.range(0));
  const Matrix m = random_matrix(d, 2, 1);
  const Vector u = m.col(0), v = m.col(1);
  for (auto _ : state) benchmark::DoNotOptimize(cosine_distance(u, v));
}
BENCHMARK(BM_CosineDistance)->Arg(64)->Arg(512)->Arg(2048);

static void BM_MlpForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<Eigen::Index>(state.range(0));
  Rng rng(3);
  const std::array<std::size_t, 4> dims{384, 256, 64, 2};
  const auto net = nets::make_mlp(dims, nets::OutputActivation::Softmax, rng);
  const Matrix x = random_matrix(384, batch, 4);
  const Matrix d_logits = random_matrix(2, batch, 5);
  auto grads = nets::zeros_like(net);
  for (auto _ : state) {
    nets::ForwardTrace trace;
    benchmark::DoNotOptimize(nets::forward_batch(net, x, &trace));
    benchmark::DoNotOptimize(nets::backward_batch(net, trace, d_logits, grads));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForwardBackward)->Arg(8)->Arg(64);

static void BM_JacobiPca(benchmark::State& state) {
  const auto d = static_cast<Eigen::Index>(state.range(0));
  const Matrix x = random_matrix(4 * d, d, 6);
  for (auto _ : state) benchmark::DoNotOptimize(pca_fit(x, static_cast<std::size_t>(d)));
}
BENCHMARK(BM_JacobiPca)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_PreferenceCycles(benchmark::State& state) {
  const auto n_triples = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 gen(7);
  std::uniform_int_distribution<int> pick(0, 99), ref(0, 9), coin(0, 1);
  std::vector<Triple> triples;
  while (triples.size() < n_triples) {
    const int a = pick(gen), b = pick(gen);
    if (a == b) continue;
    triples.push_back({"r" + std::to_string(ref(gen)), "c" + std::to_string(a), "c" + std::to_string(b),
                       coin(gen) ? Label::ACloser : Label::BCloser});
  }
  for (auto _ : state) benchmark::DoNotOptimize(detect_preference_cycles(triples));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n_triples));
}
BENCHMARK(BM_PreferenceCycles)->Arg(1000)->Arg(12000)->Unit(benchmark::kMillisecond);

static void BM_CredibilityMapBuild(benchmark::State& state) {
  const auto& world = bench_world();
  const auto& val = world.bundle.cc_validation;
  const auto& emb = world.bundle.embeddings;
  const auto pca = fit_reference_pca(val, emb, 8);
  const Matrix features = reference_features(pca, val, emb);
  std::vector<std::uint8_t> correct(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) correct[i] = i % 3 != 0;
  const std::vector<std::size_t> axes{0, 1};
  for (auto _ : state) benchmark::DoNotOptimize(build_credibility_map("m", features, correct, axes));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(val.size()));
}
BENCHMARK(BM_CredibilityMapBuild)->Unit(benchmark::kMillisecond);

static void BM_TrainEpoch(benchmark::State& state) {
  const auto& world = bench_world();
  const auto split = split_cluster(world.bundle.clusters[0], 667, 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train_cs_model(split.train.triples, world.bundle.embeddings, cfg));
  state.SetItemsProcessed(state.iterations() * 667);
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
