#include <benchmark/benchmark.h>

#include <random>

#include "volseg/curate.hpp"
#include "volseg/infer.hpp"
#include "volseg/net3d.hpp"
#include "volseg/nifti.hpp"
#include "volseg/segserve.hpp"
#include "volseg/train.hpp"

using namespace volseg;

namespace {

BinaryMask noisy_mask(int n, double density, std::uint64_t seed) {
  BinaryMask m({n, n, n});
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(density);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

Volume ramp(int n) {
  Volume v({n, n, n}, {1, 1, 1}, 0.0F);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i % 97);
  return v;
}

}  // namespace

static void BM_ConnectedComponents(benchmark::State& st) {
  const auto m = noisy_mask(static_cast<int>(st.range(0)), 0.3, 1);
  for (auto _ : st) benchmark::DoNotOptimize(connected_components(m, Connectivity::twenty_six));
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_ConnectedComponents)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Denoise(benchmark::State& st) {
  const auto m = noisy_mask(64, 0.2, 2);
  for (auto _ : st) benchmark::DoNotOptimize(curate::denoise_components(m));
}
BENCHMARK(BM_Denoise)->Unit(benchmark::kMillisecond);

static void BM_RleEncode(benchmark::State& st) {
  const auto m = noisy_mask(128, 0.05, 3);
  for (auto _ : st) benchmark::DoNotOptimize(serve::rle_encode(m.data));
  st.SetBytesProcessed(st.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_RleEncode)->Unit(benchmark::kMillisecond);

static void BM_NiftiGzipRoundTrip(benchmark::State& st) {
  const auto img = nifti::from_volume(ramp(64));
  for (auto _ : st) benchmark::DoNotOptimize(nifti::decode(nifti::encode(img, nifti::DataType::float32, true)));
}
BENCHMARK(BM_NiftiGzipRoundTrip)->Unit(benchmark::kMillisecond);

static void BM_Fuse(benchmark::State& st) {
  std::vector<infer::WindowProb> windows;
  for (int w = 0; w < 7; ++w) windows.push_back({{w * 16, 0, 0}, Grid<double>({64, 64, 64}, 0.6)});
  for (auto _ : st) benchmark::DoNotOptimize(infer::fuse(windows, {160, 64, 64}));
}
BENCHMARK(BM_Fuse)->Unit(benchmark::kMillisecond);

static void BM_Forward(benchmark::State& st) {
  const auto cfg = st.range(0) == 0 ? net::NetConfig::test() : net::NetConfig::desk();
  const auto state = net::ModelState::create(cfg, 1);
  const int p = cfg.patch_input_size;
  Volume patch({p, p, p}, {1, 1, 1}, 0.0F);
  const std::vector<PointPrompt> clicks{{{p / 2, p / 2, p / 2}, PromptLabel::positive}};
  for (auto _ : st) benchmark::DoNotOptimize(net::forward(patch, clicks, state));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& st) {
  train::SyntheticSpec spec;
  spec.dims = {32, 32, 32};
  spec.size_min_mm = 18;
  spec.size_max_mm = 24;
  std::mt19937_64 rng(4);
  auto c = train::synthesize_case(spec, train::Shape::ellipsoid, false, rng);
  const std::vector<train::Sample> samples{
      {"c0", c.labels.class_map.begin()->second, intensity::normalize(c.volume), c.labels.one_hot(1)}};
  train::TrainConfig cfg;
  cfg.max_steps = 1;
  auto state = net::ModelState::create(net::NetConfig::test(), 1);
  for (auto _ : st) state = train::train_stage(std::move(state), samples, cfg).state;
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
