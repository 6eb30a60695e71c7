#include <benchmark/benchmark.h>

#include "vqnerv/compression.hpp"
#include "vqnerv/model.hpp"
#include "vqnerv/ops.hpp"
#include "vqnerv/rng.hpp"
#include "vqnerv/transforms.hpp"

using namespace vqnerv;

static void BM_Conv2d3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({c, 32, 64});
  const Tensor w = rng.normal_tensor({c, c, 3, 3}, 0.1f);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d_forward(x, w, nullptr, 1, 1));
  state.SetItemsProcessed(state.iterations() * c * c * 9 * 32 * 64);
}
BENCHMARK(BM_Conv2d3x3)->Arg(16)->Arg(64);

static void BM_HaarCascade(benchmark::State& state) {
  Rng rng(2);
  const Tensor x = rng.normal_tensor({32, 64, 128});
  for (auto _ : state) benchmark::DoNotOptimize(haar_inverse(haar_forward(x, 3), 3));
}
BENCHMARK(BM_HaarCascade);

static Bytes skewed_bytes(std::size_t n) {
  Rng rng(3);
  Bytes b(n);
  for (auto& v : b) v = static_cast<std::uint8_t>(std::min(255.0f, std::abs(rng.normal()) * 12.0f));
  return b;
}

static void BM_Huffman(benchmark::State& state) {
  const Bytes b = skewed_bytes(1 << 16);
  for (auto _ : state) benchmark::DoNotOptimize(huffman_decode(huffman_encode(b)));
  state.SetBytesProcessed(state.iterations() * b.size());
}
BENCHMARK(BM_Huffman);

static void BM_Deflate(benchmark::State& state) {
  const Bytes b = skewed_bytes(1 << 16);
  for (auto _ : state) benchmark::DoNotOptimize(deflate_decode(deflate_encode(b)));
  state.SetBytesProcessed(state.iterations() * b.size());
}
BENCHMARK(BM_Deflate);

static void BM_DecodeFrame(benchmark::State& state) {
  Model m(ModelConfig{}, 4);
  Rng rng(5);
  const Tensor emb = rng.normal_tensor(m.plan().embedding_shape);
  TokenGrid tokens{m.plan().token_height, m.plan().token_width, {}};
  tokens.indices.assign(static_cast<std::size_t>(tokens.height) * tokens.width, 1);
  for (auto _ : state) benchmark::DoNotOptimize(m.decode_frame(emb, tokens));
}
BENCHMARK(BM_DecodeFrame)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
