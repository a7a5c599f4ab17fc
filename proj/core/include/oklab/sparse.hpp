#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace oklab {

using Index = std::uint32_t;

/** Dense gradient: a flat vector of finite 64-bit reals. */
struct DenseGrad {
  std::vector<double> values;

  DenseGrad() = default;
  explicit DenseGrad(std::size_t n) : values(n, 0.0) {}
  explicit DenseGrad(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  /** True iff every component is finite. */
  bool all_finite() const;
};

/** Sparse gradient in coordinate form over a dense space of dimension n.
 *
 *  Invariants: indices strictly increasing, every index < n, values parallel
 *  to indices. Entries whose value is exactly zero are allowed (cancellation
 *  during summation does not drop coordinates).
 */
struct SparseGrad {
  std::size_t n = 0;
  std::vector<Index> indices;
  std::vector<double> values;

  SparseGrad() = default;
  explicit SparseGrad(std::size_t dim) : n(dim) {}

  std::size_t nnz() const { return indices.size(); }
  bool empty() const { return indices.empty(); }

  /** Checks the structural invariants (sorted unique indices below n). */
  bool valid() const;

  bool operator==(const SparseGrad& other) const = default;
};

/** Threshold bookkeeping for periodically re-evaluated selection.
 *
 *  local_th / global_th are reused between re-evaluations; tau controls the
 *  region-boundary period and tau_prime the threshold period.
 */
struct ThresholdState {
  double local_th = 0.0;
  double global_th = 0.0;
  std::uint32_t tau = 64;
  std::uint32_t tau_prime = 32;
  std::int64_t last_local_eval = -1;   // iteration of the last local_th eval
  std::int64_t last_global_eval = -1;  // iteration of the last global_th eval
};

struct TopkResult {
  SparseGrad selection;  // exactly min(k, n) entries, index-sorted
  double threshold;      // |value| of the k-th selected component
};

/** Exact top-k selection by magnitude.
 *
 *  Ties on |value| are broken toward the smaller index. The returned
 *  threshold is the magnitude of the weakest selected component, so
 *  select_by_threshold(g, threshold) is always a superset of the selection
 *  and equals it when magnitudes are distinct.
 *
 *  Throws std::invalid_argument unless 1 <= k <= g.size().
 */
TopkResult topk_exact(const DenseGrad& g, std::size_t k);

/** Top-k over the stored entries of a sparse gradient (same tie rule).
 *  Selects min(k, nnz) entries; k == 0 is invalid. */
TopkResult topk_exact(const SparseGrad& g, std::size_t k);

/** All components with |value| >= th, in index order. th must be >= 0.
 *  th == 0 selects every component, including exact zeros. */
SparseGrad select_by_threshold(const DenseGrad& g, double th);

/** Threshold selection restricted to the stored entries of a sparse input. */
SparseGrad select_by_threshold(const SparseGrad& g, double th);

/** Inverse standard normal CDF, accurate to well below 1e-6 over (0, 1). */
double inverse_normal_cdf(double p);

/** Threshold from a Gaussian fit: mean + stddev * Phi^-1(1 - k/(2n)),
 *  a two-tailed cutoff calibrated so ~k of n components survive if the
 *  components were really Gaussian.
 *
 *  Throws std::invalid_argument for k < 1, k > n, or n < 2, and
 *  DegenerateDistributionError when the sample variance is zero.
 */
double gaussian_threshold(const DenseGrad& g, std::size_t k);

/** Restriction of a sparse gradient to the coordinate range [lo, hi).
 *  Keeps the dimension n; copies only the entries whose index falls in the
 *  range. lo > hi or hi > n is invalid. */
SparseGrad sparse_slice(const SparseGrad& s, std::size_t lo, std::size_t hi);

/** Sum of sparse gradients over a common dimension n.
 *
 *  The result's support is the union of the inputs' supports; coordinates
 *  that cancel to zero are kept as explicit zeros. Parts are combined with a
 *  fixed stride-doubling bracket (the same shape halving/doubling collectives
 *  produce), and each pairwise merge walks indices in ascending order, so the
 *  result is bit-deterministic for a fixed part order.
 */
SparseGrad sparse_sum(std::span<const SparseGrad> parts, std::size_t n);

/** Wire image of a sparse gradient, little-endian:
 *  [nnz : u32][indices : u32 * nnz][values : f32 * nnz].
 *
 *  The nnz header is one 32-bit word; the payload is 2 * nnz words. Values
 *  are stored at f32, so the encoding is exact only for f32-representable
 *  values.
 */
std::vector<std::uint8_t> wire_encode(const SparseGrad& s);

/** Decodes a wire image produced by wire_encode for dimension n.
 *  Throws DecodeError on truncated/oversized buffers, unsorted or duplicate
 *  indices, or indices >= n. */
SparseGrad wire_decode(std::span<const std::uint8_t> bytes, std::size_t n);

/** Payload word count of an encoded sparse gradient (2 words per entry). */
inline std::size_t wire_payload_words(const SparseGrad& s) { return 2 * s.nnz(); }

}  // namespace oklab
