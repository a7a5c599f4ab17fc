#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "oklab/collectives.hpp"
#include "oklab/errors.hpp"
#include "oklab/oktopk.hpp"
#include "oklab/rng.hpp"
#include "oklab/sparse.hpp"
#include "test_util.hpp"

using namespace oklab;
using oklab::test::World;
using oklab::test::run_ranks;
using oklab::test::oracle_topk;
using oklab::test::exact_sparse_sum;
using oklab::test::random_dense;
using oklab::test::same_sparse;

namespace {

SparseGrad sparse_of(std::size_t n, std::vector<Index> idx,
                     std::vector<double> vals) {
  SparseGrad s(n);
  s.indices = std::move(idx);
  s.values = std::move(vals);
  return s;
}

std::map<Index, double> as_map(const SparseGrad& s) {
  std::map<Index, double> m;
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    m[s.indices[i]] = s.values[i];
  }
  return m;
}

}  // namespace

TEST_CASE("th_re_evaluate returns the exact k-th largest magnitude") {
  DenseGrad g(std::vector<double>{0.5, -2.0, 1.0, 0.25});
  CHECK(th_re_evaluate(g, 1) == 2.0);
  CHECK(th_re_evaluate(g, 2) == 1.0);
  CHECK(th_re_evaluate(g, 3) == 0.5);
  // k beyond the length clamps to the smallest magnitude present.
  CHECK(th_re_evaluate(g, 400) == 0.25);
  CHECK_THROWS_AS(th_re_evaluate(DenseGrad{}, 1), std::invalid_argument);
  CHECK_THROWS_AS(th_re_evaluate(g, 0), std::invalid_argument);
}

TEST_CASE("th_re_evaluate with k == nnz reports the minimum magnitude") {
  // Regression: the count-selects-everything path must still scan for the
  // smallest magnitude instead of reading whatever sits last.
  SparseGrad s = sparse_of(8, {0, 1, 2}, {0.9, -0.2, 0.5});
  CHECK(th_re_evaluate(s, 3) == 0.2);
  CHECK(th_re_evaluate(s, 9) == 0.2);  // k > nnz clamps the same way
  CHECK(th_re_evaluate(s, 1) == 0.9);
  CHECK_THROWS_AS(th_re_evaluate(SparseGrad(8), 1), std::invalid_argument);
}

TEST_CASE("space_repartition averages the per-rank quantile proposals") {
  World w(2);
  auto got = run_ranks(w, [](const WorkerCtx& ctx) {
    SparseGrad sel =
        ctx.rank == 0
            ? sparse_of(8, {0, 1, 2, 3}, {1.0, 1.0, 1.0, 1.0})
            : sparse_of(8, {4, 5, 6, 7}, {1.0, 1.0, 1.0, 1.0});
    return space_repartition(ctx, sel).cuts;
  });
  // Proposals {0,2,8} and {0,6,8} average to {0,4,8}.
  CHECK(got[0] == std::vector<std::size_t>{0, 4, 8});
  CHECK(got[1] == got[0]);
}

TEST_CASE("space_repartition consensus over four asymmetric proposals") {
  World w(4);
  auto got = run_ranks(w, [](const WorkerCtx& ctx) {
    SparseGrad sel(16);
    switch (ctx.rank) {
      case 0:
        sel = sparse_of(16, {0, 1, 2, 3, 4, 5, 6, 7},
                        std::vector<double>(8, 1.0));
        break;
      case 1:
        sel = sparse_of(16, {8, 9, 10, 11, 12, 13, 14, 15},
                        std::vector<double>(8, 1.0));
        break;
      case 2:
        break;  // empty: proposes equal-width cuts
      case 3:
        sel = sparse_of(16, {0, 15}, {1.0, 1.0});
        break;
    }
    return space_repartition(ctx, sel).cuts;
  });
  // Proposals {0,2,4,6,16}, {0,10,12,14,16}, {0,4,8,12,16}, {0,0,15,15,16}
  // average to {0,4,9.75,11.75,16} and round to:
  std::vector<std::size_t> expected{0, 4, 10, 12, 16};
  for (int r = 0; r < 4; ++r) CHECK(got[r] == expected);
}

TEST_CASE("space_repartition with all selections empty is equal-width") {
  World w(4);
  auto got = run_ranks(w, [](const WorkerCtx& ctx) {
    return space_repartition(ctx, SparseGrad(12)).cuts;
  });
  for (int r = 0; r < 4; ++r) {
    CHECK(got[r] == std::vector<std::size_t>{0, 3, 6, 9, 12});
  }
}

TEST_CASE("split_and_reduce routes slices to owners and sums per region") {
  World w(2);
  RegionBoundaries bounds;
  bounds.cuts = {0, 5, 10};
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    DenseGrad g(10);
    if (ctx.rank == 0) {
      g[5] = 1.0;
      g[6] = 2.0;
      g[7] = 3.0;
      g[8] = 4.0;
      g[9] = 5.0;
    } else {
      g[2] = 7.0;
      g[5] = 9.0;
    }
    return split_and_reduce(ctx, g, 0.5, bounds, /*bucket_size=*/2);
  });

  CHECK(as_map(got[0].region_reduced) == std::map<Index, double>{{2, 7.0}});
  CHECK(as_map(got[1].region_reduced) ==
        std::map<Index, double>{
            {5, 10.0}, {6, 2.0}, {7, 3.0}, {8, 4.0}, {9, 5.0}});
  CHECK(got[0].local_topk_indexes == std::vector<Index>{5, 6, 7, 8, 9});
  CHECK(got[1].local_topk_indexes == std::vector<Index>{2, 5});

  // Rank 0 shipped 5 entries in buckets of 2 -> 3 messages, 10 words.
  CHECK(w.ledger.at(0, Phase::split).msgs_sent == 3);
  CHECK(w.ledger.at(0, Phase::split).words_sent == 10);
  // Rank 1 shipped a single entry -> 1 message, 2 words.
  CHECK(w.ledger.at(1, Phase::split).msgs_sent == 1);
  CHECK(w.ledger.at(1, Phase::split).words_sent == 2);
}

TEST_CASE("split_and_reduce sends one empty bucket for an empty slice") {
  World w(2);
  RegionBoundaries bounds;
  bounds.cuts = {0, 4, 8};
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    DenseGrad g(8);
    g[static_cast<std::size_t>(4 * ctx.rank)] = 1.0;  // only my own region
    return split_and_reduce(ctx, g, 0.5, bounds, 4);
  });
  for (int r = 0; r < 2; ++r) {
    CHECK(got[r].region_reduced.nnz() == 1);
    CHECK(w.ledger.at(r, Phase::split).msgs_sent == 1);
    CHECK(w.ledger.at(r, Phase::split).words_sent == 0);
  }
}

TEST_CASE("split_and_reduce walks destinations in rotation order") {
  World w(4);
  w.transport.enable_message_log();
  RegionBoundaries bounds;
  bounds.cuts = {0, 4, 8, 12, 16};
  run_ranks(w, [&](const WorkerCtx& ctx) {
    DenseGrad g(16);
    for (std::size_t i = 0; i < 16; ++i) g[i] = 1.0 + static_cast<double>(i);
    return split_and_reduce(ctx, g, 0.5, bounds, /*bucket_size=*/0)
        .region_reduced.nnz();
  });
  std::vector<std::vector<int>> dst_order(4);
  for (const auto& e : w.transport.message_log()) {
    if (e.phase == Phase::split) dst_order[static_cast<std::size_t>(e.src)].push_back(e.dst);
  }
  for (int r = 0; r < 4; ++r) {
    CHECK(dst_order[static_cast<std::size_t>(r)] ==
          std::vector<int>{(r + 1) % 4, (r + 2) % 4, (r + 3) % 4});
  }
}

TEST_CASE("split_and_reduce rejects malformed and out-of-region buckets") {
  RegionBoundaries bounds;
  bounds.cuts = {0, 5, 10};

  auto run_bad = [&](Message bad) {
    World w(2);
    return run_ranks(w, [&, bad](const WorkerCtx& ctx) {
      if (ctx.rank == 0) {
        ctx.send(1, Phase::split, bad);
        ctx.recv(1, Phase::split);  // drain rank 1's bucket to us
        return 0;
      }
      DenseGrad g(10);
      g[1] = 1.0;
      split_and_reduce(ctx, g, 0.5, bounds, 4);
      return 1;
    });
  };

  Message outside;
  outside.meta = {1, 0, 1};
  outside.ints = {2};  // rank 1 owns [5, 10)
  outside.reals = {1.0};
  CHECK_THROWS_AS(run_bad(outside), ProtocolError);

  Message wrong_seq;
  wrong_seq.meta = {2, 1, 0};  // first bucket must carry b == 0
  CHECK_THROWS_AS(run_bad(wrong_seq), ProtocolError);

  Message short_payload;
  short_payload.meta = {1, 0, 3};
  short_payload.ints = {6};
  short_payload.reals = {1.0};
  CHECK_THROWS_AS(run_bad(short_payload), ProtocolError);
}

TEST_CASE("balance_and_allgatherv without skew is a pure allgather") {
  const std::size_t n = 40;
  World w(4);
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    SparseGrad region(n);
    for (int j = 0; j < 3; ++j) {
      region.indices.push_back(static_cast<Index>(10 * ctx.rank + j));
      region.values.push_back(2.0 + ctx.rank + 0.125 * j);
    }
    region.indices.push_back(static_cast<Index>(10 * ctx.rank + 5));
    region.values.push_back(0.5);  // filtered out by the global threshold
    return balance_and_allgatherv(ctx, region, 1.0);
  });
  REQUIRE(got[0].nnz() == 12);
  CHECK(got[0].valid());
  for (int r = 0; r < 4; ++r) {
    CHECK(same_sparse(got[r], got[0]));
    CHECK(w.ledger.at(r, Phase::balance).words_sent == 0);
    CHECK(w.ledger.at(r, Phase::balance).msgs_sent == 0);
  }
  CHECK(as_map(got[1]).count(5) == 0);
  CHECK(as_map(got[2]).at(12) == 3.25);  // rank 1's entry at 10 * 1 + 2
}

TEST_CASE("balance_and_allgatherv rebalances an all-at-one-rank skew") {
  const std::size_t n = 100;
  World w(4);
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    SparseGrad region(n);
    if (ctx.rank == 0) {
      for (Index i = 0; i < 12; ++i) {
        region.indices.push_back(i);
        region.values.push_back(2.0 + i);
      }
    }
    return balance_and_allgatherv(ctx, region, 1.0);
  });
  for (int r = 0; r < 4; ++r) {
    REQUIRE(got[r].nnz() == 12);
    CHECK(same_sparse(got[r], got[0]));
    CHECK(got[r].valid());
  }
  // 12 survivors at rank 0 against a mean of 3 triggers the move: blocks of
  // 3 go to ranks 1..3 (9 entries = 18 words), each receiving 6 words.
  CHECK(w.ledger.at(0, Phase::balance).words_sent == 18);
  CHECK(w.ledger.at(0, Phase::balance).msgs_sent == 3);
  for (int r = 1; r < 4; ++r) {
    CHECK(w.ledger.at(r, Phase::balance).words_recv == 6);
    CHECK(w.ledger.at(r, Phase::balance).words_sent == 0);
  }
}

TEST_CASE("ok_sparse_allreduce at t = 1 matches the selection-sum oracle") {
  const std::size_t n = 64;
  const std::size_t k = 6;
  for (int P : {2, 4}) {
    std::vector<DenseGrad> inputs;
    for (int r = 0; r < P; ++r) {
      inputs.push_back(random_dense(2026 + 11 * static_cast<std::uint64_t>(r), n));
    }
    // Oracle: the reduced vector is the sum of the local top-k selections,
    // combined per coordinate with the same stride-doubling bracket the
    // region reduction uses (bitwise equality on arbitrary doubles); u keeps
    // its k largest magnitudes.
    std::vector<SparseGrad> sels;
    for (const DenseGrad& g : inputs) sels.push_back(oracle_topk(g, k));
    std::map<Index, double> fused;
    for (Index i = 0; i < n; ++i) {
      std::vector<std::optional<double>> xs(static_cast<std::size_t>(P));
      for (int r = 0; r < P; ++r) {
        const SparseGrad& s = sels[static_cast<std::size_t>(r)];
        auto it = std::lower_bound(s.indices.begin(), s.indices.end(), i);
        if (it != s.indices.end() && *it == i) {
          xs[static_cast<std::size_t>(r)] =
              s.values[static_cast<std::size_t>(it - s.indices.begin())];
        }
      }
      if (auto v = oklab::test::bracket_combine(xs, 0, 1)) fused[i] = *v;
    }
    std::vector<double> mags;
    for (const auto& [idx, val] : fused) mags.push_back(std::fabs(val));
    std::sort(mags.begin(), mags.end(), std::greater<>());
    const double gth = mags.at(k - 1);
    std::map<Index, double> u_expected;
    for (const auto& [idx, val] : fused) {
      if (std::fabs(val) >= gth) u_expected[idx] = val;
    }

    World w(P);
    auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
      OkState state;
      return ok_sparse_allreduce(
          ctx, state, inputs[static_cast<std::size_t>(ctx.rank)], 1, k);
    });
    for (int r = 0; r < P; ++r) {
      CHECK(as_map(got[r].u) == u_expected);
      CHECK(got[r].local_selected == k);
      // indexes = my local selection ∩ the global index set.
      std::vector<Index> expect_ix;
      for (Index i : sels[static_cast<std::size_t>(r)].indices) {
        if (u_expected.count(i)) expect_ix.push_back(i);
      }
      CHECK(got[r].indexes == expect_ix);
    }
  }
}

TEST_CASE("ok_sparse_allreduce reuses stale thresholds between refreshes") {
  const std::size_t n = 48;
  const std::size_t k = 5;
  const int P = 4;
  using Probe = std::tuple<std::size_t, double, double, std::vector<std::size_t>>;
  World w(P);
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    OkState state;
    state.th.tau = 4;
    state.th.tau_prime = 2;
    std::vector<Probe> probes;
    SplitMix64 rng(900 + static_cast<std::uint64_t>(ctx.rank));
    for (std::int64_t t = 1; t <= 5; ++t) {
      DenseGrad g(n);
      for (std::size_t i = 0; i < n; ++i) {
        // Mass concentrates low early and high at t = 5 so the t = 5
        // repartition must learn different cuts.
        double bias = (t < 5) == (i < n / 2) ? 3.0 : 0.0;
        g[i] = rng.next_pm1() + (rng.next_unit() < 0.3 ? bias : 0.0);
      }
      std::uint64_t gather_before = w.ledger.at(ctx.rank, Phase::gather).words_sent +
                                    w.ledger.at(ctx.rank, Phase::gather).words_recv;
      ok_sparse_allreduce(ctx, state, g, t, k);
      std::uint64_t gather_after = w.ledger.at(ctx.rank, Phase::gather).words_sent +
                                   w.ledger.at(ctx.rank, Phase::gather).words_recv;
      probes.emplace_back(gather_after - gather_before, state.th.local_th,
                          state.th.global_th, state.bounds.cuts);
    }
    return probes;
  });
  for (int r = 0; r < P; ++r) {
    const auto& p = got[static_cast<std::size_t>(r)];
    // Gather traffic (the global-threshold refresh) only on t = 1, 3, 5.
    CHECK(std::get<0>(p[0]) > 0);
    CHECK(std::get<0>(p[1]) == 0);
    CHECK(std::get<0>(p[2]) > 0);
    CHECK(std::get<0>(p[3]) == 0);
    CHECK(std::get<0>(p[4]) > 0);
    // Thresholds persist across the non-refresh iteration...
    CHECK(std::get<1>(p[1]) == std::get<1>(p[0]));
    CHECK(std::get<2>(p[1]) == std::get<2>(p[0]));
    CHECK(std::get<1>(p[3]) == std::get<1>(p[2]));
    // ...and boundaries persist until the tau refresh at t = 5.
    CHECK(std::get<3>(p[1]) == std::get<3>(p[0]));
    CHECK(std::get<3>(p[2]) == std::get<3>(p[0]));
    CHECK(std::get<3>(p[3]) == std::get<3>(p[0]));
    CHECK(std::get<3>(p[4]) != std::get<3>(p[0]));
  }
}

TEST_CASE("ok_sparse_allreduce falls back to equal-width regions off-cycle") {
  const std::size_t n = 32;
  const int P = 2;
  World w(P);
  auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
    OkState state;  // fresh; t = 5 refreshes neither boundaries nor thresholds
    DenseGrad g = random_dense(77 + static_cast<std::uint64_t>(ctx.rank), n);
    auto res = ok_sparse_allreduce(ctx, state, g, 5, 4);
    return std::make_pair(state.bounds.cuts, res.u);
  });
  for (int r = 0; r < P; ++r) {
    CHECK(got[r].first == std::vector<std::size_t>{0, 16, 32});
    // Initial thresholds are 0, so everything is selected and reduced.
    CHECK(got[r].second.nnz() == n);
    CHECK(same_sparse(got[r].second, got[0].second));
  }
}

TEST_CASE("ok_sparse_allreduce works single-rank and validates input") {
  World w(1);
  WorkerCtx ctx = w.ctx(0);
  OkState state;
  DenseGrad g(std::vector<double>{3.0, -1.0, 0.5, 2.0});
  auto res = ok_sparse_allreduce(ctx, state, g, 1, 2);
  CHECK(as_map(res.u) == std::map<Index, double>{{0, 3.0}, {3, 2.0}});
  CHECK(res.indexes == std::vector<Index>{0, 3});
  CHECK(res.local_selected == 2);

  OkState s2;
  CHECK_THROWS_AS(ok_sparse_allreduce(ctx, s2, DenseGrad{}, 1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(ok_sparse_allreduce(ctx, s2, g, 0, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(ok_sparse_allreduce(ctx, s2, g, 1, 0),
                  std::invalid_argument);
  DenseGrad bad(std::vector<double>{1.0, std::nan("")});
  CHECK_THROWS_AS(ok_sparse_allreduce(ctx, s2, bad, 1, 1), NumericError);
}
