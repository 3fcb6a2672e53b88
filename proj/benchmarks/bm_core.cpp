// Microbenchmarks for the hot paths: decomposition, allocation, masking,
// GPTQ, bit packing and whole-checkpoint compression.

#include <benchmark/benchmark.h>

#include <random>

#include "deltapress/artifact.hpp"
#include "deltapress/bitpack.hpp"
#include "deltapress/impart.hpp"
#include "deltapress/quant.hpp"
#include "deltapress/svd.hpp"
#include "deltapress/synthetic.hpp"

using namespace deltapress;

namespace {

Matrix square_delta(Eigen::Index n) { return power_law_delta(n, n, 1.0, 0.1, 42, 0.01); }

void BM_Svd(benchmark::State& state) {
  const Matrix d = square_delta(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(svd(d));
}
BENCHMARK(BM_Svd)->Arg(128)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_Allocate(benchmark::State& state) {
  const auto f = svd(square_delta(state.range(0)));
  const auto sigma = stored_sigma(f);
  SparsifyConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(allocate_sparsity(sigma, cfg));
}
BENCHMARK(BM_Allocate)->Arg(256)->Arg(1024);

void BM_Sparsify(benchmark::State& state) {
  const auto f = svd(square_delta(state.range(0)));
  SparsifyConfig cfg;
  cfg.alpha = 1.0 - 1.0 / 16.0;
  const auto plan = allocate_sparsity(stored_sigma(f), cfg);
  for (auto _ : state) benchmark::DoNotOptimize(sparsify(f, plan, cfg, MaskOptions{}));
}
BENCHMARK(BM_Sparsify)->Arg(256)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_GptqSparse(benchmark::State& state) {
  const auto n = state.range(0);
  std::mt19937_64 gen(1);
  std::normal_distribution<float> dist;
  Matrix w(64, n);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(gen);
  Mask mask(64, n);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = gen() & 1;
  MatrixD x(n, 4 * n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = dist(gen);
  const auto hinv = build_hessian_inverse(x, 0.01);
  const std::vector<int> bits(64, 3);
  for (auto _ : state) benchmark::DoNotOptimize(gptq_sparse(w, mask, hinv, bits, 128));
}
BENCHMARK(BM_GptqSparse)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_PackCodes(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  std::vector<std::uint32_t> codes(1 << 16);
  std::mt19937 gen(2);
  for (auto& c : codes) c = gen() & ((1u << bits) - 1);
  for (auto _ : state) benchmark::DoNotOptimize(pack_codes(codes, bits));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(codes.size()));
}
BENCHMARK(BM_PackCodes)->Arg(2)->Arg(3)->Arg(8);

void BM_Compress(benchmark::State& state) {
  DeltaSet set;
  for (int i = 0; i < 4; ++i) {
    DeltaTensor d;
    d.name = "layer" + std::to_string(i);
    d.source_dtype = DType::kF16;
    d.data = power_law_delta(256, 256, 1.0, 0.1, 10 + i, 0.01);
    d.shape = {256, 256};
    set.compressible.push_back(std::move(d));
  }
  CompressOptions opt;
  opt.method = static_cast<Method>(state.range(0));
  opt.target = opt.method == Method::kImpartQt ? CompressTarget::cr_qt(32) : CompressTarget::cr(16);
  state.SetLabel(std::string(method_name(opt.method)));
  for (auto _ : state) benchmark::DoNotOptimize(compress(set, opt, "bench"));
}
BENCHMARK(BM_Compress)
    ->Arg(static_cast<int>(Method::kImpart))
    ->Arg(static_cast<int>(Method::kImpartQt))
    ->Arg(static_cast<int>(Method::kDare))
    ->Arg(static_cast<int>(Method::kLowRank))
    ->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
