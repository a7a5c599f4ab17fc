#pragma once

#include <vector>

#include "oklab/sparse.hpp"
#include "oklab/transport.hpp"

namespace oklab {

/** Sparse gradient as a message: meta carries the entry count, the payload is
 *  one word per index plus one word per value. */
Message pack_sparse(const SparseGrad& s);
SparseGrad unpack_sparse(const Message& m, std::size_t n);

/** Recursive-doubling allgather of one sparse part per rank (variable sizes).
 *  Returns all P parts ordered by rank; every rank returns identical data.
 *  World size must be a power of two. */
std::vector<SparseGrad> sparse_allgatherv(const WorkerCtx& ctx,
                                          const SparseGrad& mine, Phase phase);

/** Dense allreduce (elementwise sum) via recursive-halving reduce-scatter
 *  followed by recursive-doubling allgather, tagged Phase::dense.
 *
 *  Moves exactly 2n(P-1)/P payload words per rank when P divides n (and the
 *  ceil-split equivalent otherwise). Requires power-of-two world size; all
 *  ranks must pass the same n. Every rank returns bit-identical sums.
 */
DenseGrad dense_allreduce(const WorkerCtx& ctx, const DenseGrad& g);

/** Allgather of every rank's exact local top-k, then a local sum in rank
 *  order. Output support is the union of the P selections (at most kP wide);
 *  moves exactly 2k(P-1) payload words per rank. */
SparseGrad topka_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                           std::size_t k);

/** Sparse reduce-scatter with fill-in over equal-width segments, then an
 *  allgatherv of the owned segments ("dynamic sparse allgather").
 *
 *  The result is the exact sum of the P local top-k selections (no second
 *  top-k). A rank converts its working set to a dense segment when COO
 *  storage would exceed dense storage of the current working range
 *  (2*nnz >= range width); dense segments drop exact zeros when converted
 *  back at the end.
 */
SparseGrad topkdsa_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                             std::size_t k);

/** Global top-k via a binary exchange tree: at each of log2(P) levels a rank
 *  pairs with rank XOR 2^level, the pair exchange their current k-entry
 *  selections (2k words each way), sum, and re-select top-k. The tree state
 *  is symmetric, so every rank holds the identical k-entry result with no
 *  broadcast leg; per-rank traffic is 2k*log2(P) words each direction. */
SparseGrad gtopk_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                           std::size_t k);

struct GaussiankOptions {
  /** Rescale the threshold by 0.9 until more than 3k/4 components are
   *  selected. Disable to observe raw Gaussian-fit selection. */
  bool scale_to_floor = true;
};

/** Threshold produced by the Gaussian fit after the 0.9 scaling loop
 *  (already clamped to >= 0). */
double gaussiank_scaled_threshold(const DenseGrad& g, std::size_t k);

/** Threshold-based selection from a Gaussian fit of the gradient, exchanged
 *  over the same allgather path as topka_allreduce. Selection counts are
 *  approximate by construction; the scaling loop only guarantees more than
 *  3k/4 survivors. */
SparseGrad gaussiank_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                               std::size_t k, GaussiankOptions opts = {});

/** Equal-width slice boundaries used by dense/topkdsa: P+1 cut points with
 *  ceil-sized slices first. */
std::vector<std::size_t> equal_slice_ends(std::size_t n, int P);

}  // namespace oklab
