#include "oklab/cost_model.hpp"

#include <cmath>
#include <stdexcept>

namespace oklab {

CostPrediction cost_predict(Algorithm alg, std::size_t n, std::size_t k, int P,
                            CostModelParams params) {
  if (!params.valid()) {
    throw std::invalid_argument("cost_predict: alpha and beta must be > 0");
  }
  if (P < 1 || n == 0) {
    throw std::invalid_argument("cost_predict: need P >= 1 and n >= 1");
  }
  if (alg != Algorithm::dense && (k < 1 || k > n)) {
    throw std::invalid_argument("cost_predict: need 1 <= k <= n");
  }

  const double p = static_cast<double>(P);
  const double nn = static_cast<double>(n);
  const double kk = static_cast<double>(k);
  const double lg = std::log2(p);
  const double frac = (p - 1.0) / p;  // zero when P == 1

  CostPrediction c;
  switch (alg) {
    case Algorithm::dense:
      c.messages = 2.0 * lg;
      c.words_lo = c.words_hi = 2.0 * nn * frac;
      break;
    case Algorithm::topka:
      c.messages = lg;
      c.words_lo = c.words_hi = 2.0 * kk * (p - 1.0);
      break;
    case Algorithm::topkdsa:
      c.messages = p + 2.0 * lg;
      c.words_lo = 4.0 * kk * frac;
      c.words_hi = (2.0 * kk + nn) * frac;
      break;
    case Algorithm::gtopk:
      c.messages = 2.0 * lg;
      c.words_lo = c.words_hi = 4.0 * kk * lg;
      break;
    case Algorithm::gaussiank:
      c.messages = 2.0 * lg;
      c.words_lo = c.words_hi = 2.0 * kk * (p - 1.0);
      break;
    case Algorithm::oktopk:
      c.messages = 2.0 * p + 2.0 * lg;
      c.words_lo = 2.0 * kk * frac;
      c.words_hi = 6.0 * kk * frac;
      break;
    default:
      throw std::invalid_argument("cost_predict: unknown algorithm");
  }
  if (P == 1) c.messages = 0.0;

  c.latency_seconds = c.messages * params.alpha;
  c.bandwidth_lo_seconds = c.words_lo * params.beta;
  c.bandwidth_hi_seconds = c.words_hi * params.beta;
  c.total_lo_seconds = c.latency_seconds + c.bandwidth_lo_seconds;
  c.total_hi_seconds = c.latency_seconds + c.bandwidth_hi_seconds;
  return c;
}

}  // namespace oklab
