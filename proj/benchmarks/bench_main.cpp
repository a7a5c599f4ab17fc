// Microbenchmarks for the selection primitives, the wire codec, and the
// in-process collectives. The collective benchmarks spawn a fresh worker
// group per iteration, so they include thread startup — treat them as
// end-to-end lab-step costs, not pure algorithm costs.

#include <benchmark/benchmark.h>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "oklab/collectives.hpp"
#include "oklab/oktopk.hpp"
#include "oklab/sparse.hpp"
#include "test_util.hpp"

namespace {

using namespace oklab;
using oklab::test::World;
using oklab::test::random_dense;
using oklab::test::run_ranks;

constexpr std::size_t kN = 100000;
constexpr std::size_t kK = 1000;

SparseGrad strided_sparse(std::size_t n, std::size_t nnz, std::uint64_t seed) {
  SparseGrad s(n);
  SplitMix64 rng(seed);
  const std::size_t stride = n / nnz;
  for (std::size_t j = 0; j < nnz; ++j) {
    s.indices.push_back(static_cast<Index>(j * stride));
    s.values.push_back(rng.next_pm1());
  }
  return s;
}

void BM_TopkExactDense(benchmark::State& state) {
  DenseGrad g = random_dense(1, kN);
  for (auto _ : state) {
    benchmark::DoNotOptimize(topk_exact(g, kK));
  }
}
BENCHMARK(BM_TopkExactDense);

void BM_TopkExactSparse(benchmark::State& state) {
  SparseGrad s = strided_sparse(kN, 5000, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(topk_exact(s, kK));
  }
}
BENCHMARK(BM_TopkExactSparse);

void BM_SelectByThreshold(benchmark::State& state) {
  DenseGrad g = random_dense(3, kN);
  for (auto _ : state) {
    benchmark::DoNotOptimize(select_by_threshold(g, 0.98));
  }
}
BENCHMARK(BM_SelectByThreshold);

void BM_GaussianThreshold(benchmark::State& state) {
  DenseGrad g = random_dense(4, kN);
  for (auto _ : state) {
    benchmark::DoNotOptimize(gaussian_threshold(g, kK));
  }
}
BENCHMARK(BM_GaussianThreshold);

void BM_GaussiankScaledThreshold(benchmark::State& state) {
  DenseGrad g = random_dense(5, kN);
  for (auto _ : state) {
    benchmark::DoNotOptimize(gaussiank_scaled_threshold(g, kK));
  }
}
BENCHMARK(BM_GaussiankScaledThreshold);

void BM_SparseSum(benchmark::State& state) {
  std::vector<SparseGrad> parts;
  for (std::uint64_t r = 0; r < 8; ++r) {
    parts.push_back(strided_sparse(kN, 2000, 10 + r));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        sparse_sum(std::span<const SparseGrad>(parts), kN));
  }
}
BENCHMARK(BM_SparseSum);

void BM_WireCodec(benchmark::State& state) {
  SparseGrad s = strided_sparse(kN, kK, 6);
  for (auto _ : state) {
    std::vector<std::uint8_t> bytes = wire_encode(s);
    benchmark::DoNotOptimize(wire_decode(bytes, kN));
  }
}
BENCHMARK(BM_WireCodec);

void BM_DenseAllreduce(benchmark::State& state) {
  const int P = 4;
  const std::size_t n = 16384;
  std::vector<DenseGrad> inputs;
  for (int r = 0; r < P; ++r) {
    inputs.push_back(random_dense(20 + static_cast<std::uint64_t>(r), n));
  }
  for (auto _ : state) {
    World w(P);
    auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
      return dense_allreduce(ctx, inputs[static_cast<std::size_t>(ctx.rank)]);
    });
    benchmark::DoNotOptimize(got);
  }
}
BENCHMARK(BM_DenseAllreduce);

void BM_OkAllreduce(benchmark::State& state) {
  const int P = 4;
  const std::size_t n = 16384;
  const std::size_t k = 160;
  std::vector<DenseGrad> inputs;
  for (int r = 0; r < P; ++r) {
    inputs.push_back(random_dense(30 + static_cast<std::uint64_t>(r), n));
  }
  std::vector<OkState> states(static_cast<std::size_t>(P));
  std::int64_t t = 0;
  for (auto _ : state) {
    ++t;
    World w(P);
    auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
      return ok_sparse_allreduce(ctx, states[static_cast<std::size_t>(ctx.rank)],
                                 inputs[static_cast<std::size_t>(ctx.rank)], t,
                                 k);
    });
    benchmark::DoNotOptimize(got);
  }
}
BENCHMARK(BM_OkAllreduce);

}  // namespace

BENCHMARK_MAIN();
