#include "oklab/oktopk.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "oklab/collectives.hpp"
#include "oklab/errors.hpp"

namespace oklab {

double th_re_evaluate(const DenseGrad& g, std::size_t k) {
  if (g.size() == 0) {
    throw std::invalid_argument("th_re_evaluate: empty gradient");
  }
  if (k < 1) throw std::invalid_argument("th_re_evaluate: k must be >= 1");
  return topk_exact(g, std::min(k, g.size())).threshold;
}

double th_re_evaluate(const SparseGrad& g, std::size_t k) {
  if (g.empty()) {
    throw std::invalid_argument("th_re_evaluate: empty gradient");
  }
  if (k < 1) throw std::invalid_argument("th_re_evaluate: k must be >= 1");
  return topk_exact(g, std::min(k, g.nnz())).threshold;
}

RegionBoundaries space_repartition(const WorkerCtx& ctx,
                                   const SparseGrad& selected) {
  const int P = ctx.world;
  const std::size_t n = selected.n;
  const std::size_t m = selected.nnz();

  // Propose a P+1 cut vector: the coordinates splitting my selection into P
  // equal prefix runs, or equal-width cuts if I selected nothing.
  std::vector<double> proposal(static_cast<std::size_t>(P) + 1);
  proposal[0] = 0.0;
  proposal[static_cast<std::size_t>(P)] = static_cast<double>(n);
  for (int r = 1; r < P; ++r) {
    std::size_t cut;
    if (m == 0) {
      cut = static_cast<std::size_t>(r) * n / static_cast<std::size_t>(P);
    } else {
      std::size_t pos =
          static_cast<std::size_t>(r) * m / static_cast<std::size_t>(P);
      cut = pos < m ? selected.indices[pos] : n;
    }
    proposal[r] = static_cast<double>(cut);
  }

  std::vector<double> avg = small_allreduce_avg(ctx, std::move(proposal));

  RegionBoundaries out;
  out.cuts.assign(static_cast<std::size_t>(P) + 1, 0);
  out.cuts[static_cast<std::size_t>(P)] = n;
  for (int r = 1; r < P; ++r) {
    auto rounded =
        static_cast<std::size_t>(std::llround(std::max(0.0, avg[r])));
    rounded = std::min(rounded, n);
    out.cuts[r] = std::max(rounded, out.cuts[r - 1]);
  }
  return out;
}

RegionBoundaries space_repartition(const WorkerCtx& ctx, const DenseGrad& g,
                                   double local_th) {
  return space_repartition(ctx, select_by_threshold(g, local_th));
}

namespace {

// Chunk b of a slice, as a split-phase message. The meta triple
// [buckets, b, nnz_b] lets the receiver learn the bucket count from the
// first chunk and validate the rest.
Message make_bucket(const SparseGrad& slice, std::uint32_t buckets,
                    std::uint32_t b, std::uint32_t stride) {
  std::size_t lo = std::size_t{b} * stride;
  std::size_t hi = b + 1 == buckets
                       ? slice.nnz()
                       : std::min<std::size_t>(lo + stride, slice.nnz());
  Message m;
  m.meta = {buckets, b, static_cast<std::uint32_t>(hi - lo)};
  m.ints.assign(slice.indices.begin() + lo, slice.indices.begin() + hi);
  m.reals.assign(slice.values.begin() + lo, slice.values.begin() + hi);
  return m;
}

std::uint32_t bucket_count(std::size_t nnz, std::uint32_t bucket_size) {
  if (bucket_size == 0 || nnz <= bucket_size) return 1;
  return static_cast<std::uint32_t>((nnz + bucket_size - 1) / bucket_size);
}

}  // namespace

SplitReduceResult split_and_reduce(const WorkerCtx& ctx, const DenseGrad& g,
                                   double local_th,
                                   const RegionBoundaries& bounds,
                                   std::uint32_t bucket_size) {
  const int P = ctx.world;
  const std::size_t n = g.size();
  if (bounds.regions() != P) {
    throw std::invalid_argument("split_and_reduce: boundaries do not match P");
  }
  SparseGrad selected = select_by_threshold(g, local_th);

  const std::size_t my_lo = bounds.lo(ctx.rank);
  const std::size_t my_hi = bounds.hi(ctx.rank);

  std::vector<SparseGrad> parts(static_cast<std::size_t>(P));
  parts[static_cast<std::size_t>(ctx.rank)] =
      sparse_slice(selected, my_lo, my_hi);

  for (int s = 1; s < P; ++s) {
    const int dst = (ctx.rank + s) % P;
    const int src = (ctx.rank - s + P) % P;
    SparseGrad out_slice =
        sparse_slice(selected, bounds.lo(dst), bounds.hi(dst));
    const std::uint32_t out_buckets =
        bucket_count(out_slice.nnz(), bucket_size);
    const std::uint32_t stride =
        bucket_size == 0 ? static_cast<std::uint32_t>(
                               std::max<std::size_t>(out_slice.nnz(), 1))
                         : bucket_size;

    SparseGrad& in_slice = parts[static_cast<std::size_t>(src)];
    in_slice.n = n;

    // Interleave chunk sends with receives so only a couple of chunks are
    // ever in flight per channel, whatever the bucket count.
    auto take_bucket = [&](std::uint32_t expect_buckets, std::uint32_t b) {
      Message in = ctx.recv(src, Phase::split);
      if (in.meta.size() != 3 || in.meta[0] == 0 || in.meta[1] != b ||
          (expect_buckets != 0 && in.meta[0] != expect_buckets) ||
          in.ints.size() != in.meta[2] || in.reals.size() != in.meta[2]) {
        throw ProtocolError("split_and_reduce: malformed bucket");
      }
      if (!in.ints.empty() &&
          (in.ints.front() < my_lo || in.ints.back() >= my_hi)) {
        throw ProtocolError("split_and_reduce: entries outside my region");
      }
      in_slice.indices.insert(in_slice.indices.end(), in.ints.begin(),
                              in.ints.end());
      in_slice.values.insert(in_slice.values.end(), in.reals.begin(),
                             in.reals.end());
      return in.meta[0];
    };

    ctx.send(dst, Phase::split, make_bucket(out_slice, out_buckets, 0, stride));
    const std::uint32_t in_buckets = take_bucket(0, 0);
    for (std::uint32_t b = 1; b < std::max(out_buckets, in_buckets); ++b) {
      if (b < out_buckets) {
        ctx.send(dst, Phase::split,
                 make_bucket(out_slice, out_buckets, b, stride));
      }
      if (b < in_buckets) take_bucket(in_buckets, b);
    }
  }

  SplitReduceResult out;
  out.region_reduced = sparse_sum(parts, n);
  out.local_topk_indexes = std::move(selected.indices);
  return out;
}

SparseGrad balance_and_allgatherv(const WorkerCtx& ctx,
                                  const SparseGrad& region, double global_th) {
  const int P = ctx.world;
  const std::size_t n = region.n;
  SparseGrad mine = select_by_threshold(region, global_th);
  if (P == 1) return mine;

  std::vector<std::uint32_t> sizes = small_allgather_u32(
      ctx, {static_cast<std::uint32_t>(mine.nnz())}, Phase::consensus);

  std::uint64_t total = 0;
  std::uint64_t max_size = 0;
  for (std::uint32_t s : sizes) {
    total += s;
    max_size = std::max<std::uint64_t>(max_size, s);
  }

  // Balance gross skew: buffers at or beyond 4x the mean size. (The extreme
  // all-at-one-rank case with P = 4 lands exactly on the boundary and is
  // meant to trigger.)
  if (total > 0 && max_size * static_cast<std::uint64_t>(P) >= 4 * total) {
    // Deterministic plan over the rank-concatenated survivor stream: re-cut
    // it into P equal blocks and move every overlap to its block owner.
    std::vector<std::size_t> off(static_cast<std::size_t>(P) + 1, 0);
    for (int r = 0; r < P; ++r) off[r + 1] = off[r] + sizes[r];
    std::vector<std::size_t> block =
        equal_slice_ends(static_cast<std::size_t>(total), P);

    auto overlap = [&](int src, int dst, std::size_t& a, std::size_t& b) {
      a = std::max(off[src], block[dst]);
      b = std::min(off[src + 1], block[dst + 1]);
      return a < b;
    };

    std::size_t a, b;
    for (int dst = 0; dst < P; ++dst) {
      if (dst != ctx.rank && overlap(ctx.rank, dst, a, b)) {
        SparseGrad piece(n);
        piece.indices.assign(mine.indices.begin() + (a - off[ctx.rank]),
                             mine.indices.begin() + (b - off[ctx.rank]));
        piece.values.assign(mine.values.begin() + (a - off[ctx.rank]),
                            mine.values.begin() + (b - off[ctx.rank]));
        ctx.send(dst, Phase::balance, pack_sparse(piece));
      }
    }

    SparseGrad balanced(n);
    for (int src = 0; src < P; ++src) {
      if (!overlap(src, ctx.rank, a, b)) continue;
      if (src == ctx.rank) {
        balanced.indices.insert(balanced.indices.end(),
                                mine.indices.begin() + (a - off[src]),
                                mine.indices.begin() + (b - off[src]));
        balanced.values.insert(balanced.values.end(),
                               mine.values.begin() + (a - off[src]),
                               mine.values.begin() + (b - off[src]));
      } else {
        Message in = ctx.recv(src, Phase::balance);
        SparseGrad piece = unpack_sparse(in, n);
        balanced.indices.insert(balanced.indices.end(), piece.indices.begin(),
                                piece.indices.end());
        balanced.values.insert(balanced.values.end(), piece.values.begin(),
                               piece.values.end());
      }
    }
    mine = std::move(balanced);
  }

  std::vector<SparseGrad> parts =
      sparse_allgatherv(ctx, mine, Phase::allgatherv);

  // Parts cover disjoint ascending index ranges (regions, or blocks of the
  // stream of regions), so concatenation in rank order is the reduced result.
  SparseGrad u(n);
  for (const SparseGrad& p : parts) {
    u.indices.insert(u.indices.end(), p.indices.begin(), p.indices.end());
    u.values.insert(u.values.end(), p.values.begin(), p.values.end());
  }
  return u;
}

OkAllreduceResult ok_sparse_allreduce(const WorkerCtx& ctx, OkState& state,
                                      const DenseGrad& g, std::int64_t t,
                                      std::size_t k) {
  if (g.size() == 0 || k < 1 || t < 1) {
    throw std::invalid_argument(
        "ok_sparse_allreduce: empty input, k < 1, or t < 1");
  }
  if (!g.all_finite()) {
    throw NumericError("ok_sparse_allreduce: non-finite input");
  }
  const std::size_t n = g.size();
  ThresholdState& th = state.th;
  const bool threshold_refresh = (t - 1) % th.tau_prime == 0;
  const bool boundary_refresh = (t - 1) % th.tau == 0;

  if (threshold_refresh) {
    th.local_th = th_re_evaluate(g, k);
    th.last_local_eval = t;
  }

  if (boundary_refresh) {
    state.bounds = space_repartition(ctx, g, th.local_th);
  } else if (state.bounds.regions() != ctx.world) {
    // Fresh state whose first iteration is not a boundary-refresh one:
    // fall back to equal-width regions (no consensus needed).
    state.bounds.cuts = equal_slice_ends(n, ctx.world);
  }

  SplitReduceResult split =
      split_and_reduce(ctx, g, th.local_th, state.bounds, state.bucket_size);

  if (threshold_refresh) {
    // The reduced regions concatenate (in rank order) to the full reduced
    // vector, so its exact k-th largest magnitude is the new global cutoff.
    std::vector<SparseGrad> regions =
        sparse_allgatherv(ctx, split.region_reduced, Phase::gather);
    SparseGrad reduced(n);
    for (const SparseGrad& r : regions) {
      reduced.indices.insert(reduced.indices.end(), r.indices.begin(),
                             r.indices.end());
      reduced.values.insert(reduced.values.end(), r.values.begin(),
                            r.values.end());
    }
    if (!reduced.empty()) {
      th.global_th = th_re_evaluate(reduced, k);
    }
    th.last_global_eval = t;
  }

  SparseGrad u =
      balance_and_allgatherv(ctx, split.region_reduced, th.global_th);

  OkAllreduceResult out;
  out.indexes.reserve(std::min(split.local_topk_indexes.size(), u.nnz()));
  std::set_intersection(split.local_topk_indexes.begin(),
                        split.local_topk_indexes.end(), u.indices.begin(),
                        u.indices.end(), std::back_inserter(out.indexes));
  out.u = std::move(u);
  out.local_selected = split.local_topk_indexes.size();
  state.t = t;
  return out;
}

}  // namespace oklab
