#include <benchmark/benchmark.h>

#include <vector>

#include "r3d/decoder.hpp"
#include "r3d/kernels.hpp"

using namespace r3d;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

struct SegmentData {
  std::vector<int> point_to_segment, offsets, members;
  kernels::Segments view() const { return {point_to_segment, offsets, members}; }
};

// n points dealt round-robin into m segments.
SegmentData segments(std::size_t n, std::size_t m) {
  SegmentData s;
  s.offsets.assign(m + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    s.point_to_segment.push_back(static_cast<int>(i % m));
    ++s.offsets[i % m + 1];
  }
  for (std::size_t k = 0; k < m; ++k) s.offsets[k + 1] += s.offsets[k];
  s.members.resize(n);
  std::vector<int> fill(s.offsets.begin(), s.offsets.end() - 1);
  for (std::size_t i = 0; i < n; ++i) s.members[static_cast<std::size_t>(fill[i % m]++)] = static_cast<int>(i);
  return s;
}

template <void (*Gemm)(const kernels::GemmArgs&)>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), k = static_cast<std::size_t>(state.range(1));
  const auto a = random_values(n * k, 1), b = random_values(k * k, 2);
  std::vector<double> c(n * k);
  for (auto _ : state) {
    Gemm({a.data(), b.data(), c.data(), n, k, k});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * k));
}

template <void (*Max)(const double*, std::size_t, const kernels::Segments&, double*, int*)>
void BM_ScatterMax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = std::size_t{32}, m = n / 40;
  const auto f = random_values(n * c, 3);
  const SegmentData seg = segments(n, m);
  std::vector<double> out(m * c);
  std::vector<int> arg(m * c);
  for (auto _ : state) {
    Max(f.data(), c, seg.view(), out.data(), arg.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <void (*Softmax)(const double*, const kernels::Segments&, double*)>
void BM_SegmentSoftmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), m = n / 40;
  const auto s = random_values(n, 4);
  const SegmentData seg = segments(n, m);
  std::vector<double> out(n);
  for (auto _ : state) {
    Softmax(s.data(), seg.view(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <void (*Attention)(const kernels::AttentionArgs&)>
void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), m = static_cast<std::size_t>(state.range(1));
  const std::size_t h = 8, c = 4;
  const auto q = random_values(h * n * c, 5), k = random_values(h * m * c, 6), v = random_values(h * m * c, 7);
  std::vector<double> out(h * n * c), probs(h * n * m);
  for (auto _ : state) {
    Attention({q.data(), k.data(), v.data(), nullptr, nullptr, h, n, m, c, out.data(), probs.data()});
    benchmark::DoNotOptimize(out.data());
  }
}

// Whole desk-scale decoder step through the default (parallel when built
// with OpenMP) kernels.
void BM_DecoderStep(benchmark::State& state) {
  SynthConfig sc;
  const Scene scene = voxelize(synth_scene(sc, 0), 0.02);
  const SceneInput in = prepare_scene(scene);
  const DecoderConfig cfg;
  const ParamStore store = init_decoder(cfg, 1);
  for (auto _ : state) {
    Graph g;
    BoundParams bp(g, store);
    const DecoderOutput out = decoder_forward(in, bind_decoder(bp, cfg), cfg);
    g.backward(sum_all(out.layers.back().mask_logits));
    benchmark::DoNotOptimize(bp.gradients());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<kernels::serial::gemm>)->Name("gemm/serial")->Args({600, 32})->Args({4096, 128});
BENCHMARK(BM_Gemm<kernels::parallel::gemm>)->Name("gemm/parallel")->Args({600, 32})->Args({4096, 128});
BENCHMARK(BM_ScatterMax<kernels::serial::scatter_max>)->Name("scatter_max/serial")->Arg(600)->Arg(40000);
BENCHMARK(BM_ScatterMax<kernels::parallel::scatter_max>)->Name("scatter_max/parallel")->Arg(600)->Arg(40000);
BENCHMARK(BM_SegmentSoftmax<kernels::serial::segment_softmax>)->Name("segment_softmax/serial")->Arg(600)->Arg(40000);
BENCHMARK(BM_SegmentSoftmax<kernels::parallel::segment_softmax>)->Name("segment_softmax/parallel")->Arg(600)->Arg(40000);
BENCHMARK(BM_Attention<kernels::serial::attention>)->Name("attention/serial")->Args({8, 15})->Args({400, 2000});
BENCHMARK(BM_Attention<kernels::parallel::attention>)->Name("attention/parallel")->Args({8, 15})->Args({400, 2000});
BENCHMARK(BM_DecoderStep)->Name("decoder_step/default")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
