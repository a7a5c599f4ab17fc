#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "oklab/sparse.hpp"
#include "oklab/transport.hpp"

namespace oklab {

/** Consensus partition of the coordinate space [0, n) into P regions.
 *  cuts has P + 1 nondecreasing entries with cuts[0] == 0 and cuts[P] == n;
 *  region r is [cuts[r], cuts[r+1]) and is owned by rank r. Identical on all
 *  ranks by construction. */
struct RegionBoundaries {
  std::vector<std::size_t> cuts;

  int regions() const { return static_cast<int>(cuts.size()) - 1; }
  std::size_t lo(int r) const { return cuts[static_cast<std::size_t>(r)]; }
  std::size_t hi(int r) const { return cuts[static_cast<std::size_t>(r) + 1]; }
};

/** Per-rank persistent state of the sparse allreduce.
 *
 *  Thresholds are re-evaluated exactly on iterations with (t-1) % tau_prime
 *  == 0 and region boundaries exactly when (t-1) % tau == 0; in between, the
 *  stale values are reused. bucket_size is the split-phase send granularity
 *  in entries (0 means one message per destination). */
struct OkState {
  ThresholdState th;
  RegionBoundaries bounds;
  std::int64_t t = 0;  // last executed iteration
  std::uint32_t bucket_size = 4;
};

/** Acceptance threshold for keeping k components: the exact k-th largest
 *  magnitude. For sparse input with fewer than k stored entries, the smallest
 *  stored magnitude (stale local thresholds can under-select, leaving fewer
 *  than k candidates). Throws std::invalid_argument on empty input. */
double th_re_evaluate(const DenseGrad& g, std::size_t k);
double th_re_evaluate(const SparseGrad& g, std::size_t k);

/** Agrees on region boundaries that split the locally selected coordinates
 *  roughly evenly across ranks.
 *
 *  Each rank builds a P+1 cut vector whose interior entries are the
 *  coordinates of the P-quantiles of its selected index set (prefix counts,
 *  so each region holds floor(m/P) or ceil(m/P) of the m selected entries;
 *  equal-width cuts if it selected nothing). The cut vectors are averaged
 *  element-wise with a consensus-tagged small allreduce, rounded to the
 *  nearest integer, and clamped nondecreasing. All ranks return identical
 *  boundaries. */
RegionBoundaries space_repartition(const WorkerCtx& ctx, const DenseGrad& g,
                                   double local_th);

/** space_repartition on an already-selected coordinate set. */
RegionBoundaries space_repartition(const WorkerCtx& ctx,
                                   const SparseGrad& selected);

struct SplitReduceResult {
  SparseGrad region_reduced;  // sum of all P contributions to my region
  std::vector<Index> local_topk_indexes;  // my full local selection
};

/** Routes every rank's selected entries to the owners of their regions and
 *  reduces each region at its owner.
 *
 *  Rank i selects locally by local_th, slices the selection by the region
 *  boundaries, and sends the slice of region (i + s) mod P at step
 *  s = 1..P-1 — the destination rotation keeps each step's traffic spread
 *  over distinct targets — as ceil(slice_nnz / bucket_size) split-tagged
 *  messages (at least one per destination, so message counts stay
 *  deterministic for empty slices). Returns the sum of all P contributions
 *  to this rank's own region, combined in source-rank order, plus the index
 *  set of the full local selection. */
SplitReduceResult split_and_reduce(const WorkerCtx& ctx, const DenseGrad& g,
                                   double local_th,
                                   const RegionBoundaries& bounds,
                                   std::uint32_t bucket_size);

/** Filters the reduced region by the global threshold, fixes gross
 *  imbalance, and allgathers the survivors; every rank returns the identical
 *  result, whose index set is the global top-k index set.
 *
 *  Survivor counts are shared with a consensus-tagged allgather, giving all
 *  ranks the same balancing plan. When the largest count reaches 4x the mean
 *  buffer size, the survivors are re-cut into P equal blocks of the
 *  rank-concatenated stream and the overlaps move with balance-tagged sends;
 *  otherwise the balancing step costs nothing. The allgatherv itself is
 *  recursive doubling, tag "allgatherv". */
SparseGrad balance_and_allgatherv(const WorkerCtx& ctx,
                                  const SparseGrad& region, double global_th);

struct OkAllreduceResult {
  SparseGrad u;  // reduced, globally selected gradient; identical on all ranks
  std::vector<Index> indexes;    // local_topk_indexes ∩ global_topk_indexes
  std::size_t local_selected{};  // entries this rank selected by local_th
};

/** One sparse allreduce of the accumulated gradient g at iteration t
 *  (1-based).
 *
 *  Periodic machinery: on iterations with (t-1) % tau_prime == 0 the local
 *  threshold is re-evaluated from g before the split, and the global
 *  threshold is re-evaluated after the split from a gather-tagged allgather
 *  of the reduced regions (the concatenation of the regions is the reduced
 *  global vector, so its k-th largest magnitude is the fresh global cutoff).
 *  On iterations with (t-1) % tau == 0 the region boundaries are re-learned
 *  before the split. Otherwise stale thresholds and boundaries are reused
 *  and an iteration costs only split + (balance) + allgatherv traffic plus
 *  consensus metadata.
 *
 *  Start runs at t = 1 (both periods fire there); on a fresh state whose
 *  first call skips the boundary refresh, equal-width boundaries are used.
 *
 *  Throws NumericError if g contains non-finite components. */
OkAllreduceResult ok_sparse_allreduce(const WorkerCtx& ctx, OkState& state,
                                      const DenseGrad& g, std::int64_t t,
                                      std::size_t k);

}  // namespace oklab
