#pragma once

#include <cstddef>

#include "oklab/algorithms.hpp"

namespace oklab {

/** Alpha-beta machine model: sending one message of L words costs
 *  alpha + beta * L seconds. */
struct CostModelParams {
  double alpha = 1.0;  // seconds per message
  double beta = 1.0;   // seconds per word

  bool valid() const { return alpha > 0.0 && beta > 0.0; }
};

/** Predicted per-rank communication cost of one collective invocation.
 *
 *  `messages` is the count multiplying alpha; `words_lo`/`words_hi` are the
 *  word-count endpoints multiplying beta. Exact rows have words_lo ==
 *  words_hi; input-dependent rows report a genuine interval. */
struct CostPrediction {
  double messages = 0.0;
  double words_lo = 0.0;
  double words_hi = 0.0;
  double latency_seconds = 0.0;
  double bandwidth_lo_seconds = 0.0;
  double bandwidth_hi_seconds = 0.0;
  double total_lo_seconds = 0.0;
  double total_hi_seconds = 0.0;

  bool is_interval() const { return words_lo != words_hi; }
};

/** Evaluates the per-rank cost row for one allreduce of an n-dimensional
 *  gradient with per-rank selection size k over P ranks:
 *
 *    dense      2n(P-1)/P          beta  +  2 log2(P)        alpha
 *    topka      2k(P-1)            beta  +    log2(P)        alpha
 *    topkdsa    [4k(P-1)/P,
 *                (2k+n)(P-1)/P]    beta  +  (P + 2 log2(P))  alpha
 *    gtopk      4k log2(P)         beta  +  2 log2(P)        alpha
 *    gaussiank  2k(P-1)            beta  +  2 log2(P)        alpha
 *    oktopk     [2k(P-1)/P,
 *                6k(P-1)/P]        beta  +  (2P + 2 log2(P)) alpha
 *
 *  P == 1 yields all-zero terms. k is ignored for dense; otherwise
 *  1 <= k <= n is required. Throws std::invalid_argument on bad arguments
 *  or non-positive model parameters. */
CostPrediction cost_predict(Algorithm alg, std::size_t n, std::size_t k, int P,
                            CostModelParams params = {});

}  // namespace oklab
