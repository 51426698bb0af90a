#include <benchmark/benchmark.h>

#include <random>

#include "emask/buffer.hpp"
#include "emask/datagen.hpp"
#include "emask/masking.hpp"
#include "emask/model.hpp"

using namespace emask;

namespace {

const Dataset& data() {
  static const Dataset d = [] {
    SyntheticSpec s;
    s.n_classes = 4;
    s.train_per_class = 8;
    s.test_per_class = 0;
    return generate(s);
  }();
  return d;
}

Model make_model() {
  Model m(ModelConfig{}, 1);
  Rng rng(1);
  m.extend_classifier(4, rng);
  m.trainable_params(Regime::SSF);
  return m;
}

void BM_Forward(benchmark::State& state) {
  Model m = make_model();
  const auto seq = m.embed(data().train[0]);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(seq));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
  Model m = make_model();
  const auto seq = m.embed(data().train[0]);
  for (auto _ : state) {
    nk::Graph g;
    const auto nodes = m.build(g, seq);
    g.backward(g.masked_cross_entropy(nodes.logits, 0, {0, 0, 0, 0}));
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_MaskExemplar(benchmark::State& state) {
  Model m = make_model();
  const auto& s = data().train[3];
  for (auto _ : state) benchmark::DoNotOptimize(mask_exemplar(s, m, MaskingConfig{}, 0));
}
BENCHMARK(BM_MaskExemplar)->Unit(benchmark::kMillisecond);

void BM_AttentionMasks(benchmark::State& state) {
  Model m = make_model();
  const auto& s = data().train[3];
  const auto bundle = m.forward(m.embed(s)).attention;
  for (auto _ : state) benchmark::DoNotOptimize(attention_masks(bundle, s.caption, MaskingConfig{}));
}
BENCHMARK(BM_AttentionMasks);

void BM_SelectExemplars(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  const PatchGeometry g;
  std::vector<Candidate> cands(n);
  for (std::size_t i = 0; i < n; ++i) {
    cands[i].exemplar = raw_exemplar(data().train[i % data().train.size()], g);
    cands[i].feature.resize(64);
    for (double& v : cands[i].feature) v = d(rng);
  }
  std::vector<double> mean(64, 0.1);
  const CostModel cm = CostModel::for_geometry(g);
  for (auto _ : state) benchmark::DoNotOptimize(select_exemplars(cands, mean, 5 * 12360, cm));
}
BENCHMARK(BM_SelectExemplars)->Arg(30)->Arg(300);

void BM_SerializeBuffer(benchmark::State& state) {
  const PatchGeometry g;
  MemoryBuffer buf(CostModel::for_geometry(g), g, 5 * 12360);
  const std::uint32_t classes[] = {0, 1, 2, 3};
  buf.register_classes(classes);
  for (std::size_t i = 0; i < data().train.size(); i += 2) buf.insert(raw_exemplar(data().train[i], g));
  for (auto _ : state) {
    const auto bytes = serialize(buf);
    benchmark::DoNotOptimize(deserialize(bytes));
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * buf.total_bytes()));
}
BENCHMARK(BM_SerializeBuffer);

}  // namespace

BENCHMARK_MAIN();
