#pragma once

#include <cstdint>
#include <memory>
#include <span>

#include "oklab/algorithms.hpp"
#include "oklab/oktopk.hpp"
#include "oklab/sparse.hpp"
#include "oklab/transport.hpp"

namespace oklab {

/** Learning-rate schedule: constant, or alpha/sqrt(t) when decay is on. */
struct LrSchedule {
  double alpha = 0.05;
  bool inv_sqrt_decay = false;

  double at(std::int64_t t) const;  // t >= 1
};

/** One rank's view of the model. w is identical across ranks after every
 *  step (the harness checks this bitwise); t counts completed steps. */
struct ModelState {
  DenseGrad w;
  std::int64_t t = 0;
  LrSchedule lr;
};

/** Error-feedback residual: unsent accumulated gradient mass, zeroed each
 *  iteration exactly at the indexes whose contribution was applied. */
struct Residual {
  DenseGrad eps;

  Residual() = default;
  explicit Residual(std::size_t n) : eps(n) {}
};

/** A deterministic toy optimization problem, sharded by rank.
 *
 *  Convention: the global gradient is the mean over ranks of local_gradient,
 *  so local gradients of data-sharded problems are means over the local rows
 *  scaled to make the rank-average equal the full-data gradient. Gradient
 *  evaluations are deterministic functions of (w, seed, rank, t). */
class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::size_t dim() const = 0;
  virtual const char* name() const = 0;

  /** Deterministic starting point (identical on all ranks). */
  virtual DenseGrad initial_w() const { return DenseGrad(dim()); }

  virtual DenseGrad local_gradient(const DenseGrad& w, int rank, int world,
                                   std::int64_t t) const = 0;

  /** Global objective at w (computable by any rank, rank-identical). */
  virtual double objective(const DenseGrad& w, std::int64_t t) const = 0;
};

/** f(w) = 0.5*||w||^2 from a ones start; every rank sees the same gradient w
 *  (with learning rate 0.5 the iterates halve every step). */
std::unique_ptr<Problem> make_quadratic_problem(std::size_t n);

/** f(w) = ||Aw - b||^2 / (2N) with seeded data, decaying per-column scales
 *  (so top-k selection captures most of the gradient mass), and rows sharded
 *  contiguously by rank. N must be divisible by the world size when sharded.
 */
std::unique_ptr<Problem> make_least_squares_problem(std::size_t n,
                                                    std::uint64_t seed,
                                                    std::size_t rows = 1024);

/** Gradients come from drifting_gradient_process with a rank-mixed seed;
 *  the objective is the tracking quantity 0.5*||w||^2. */
std::unique_ptr<Problem> make_drift_problem(std::size_t n, std::uint64_t seed);

/** 8 -> H -> 1 tanh regression MLP with H = (n-1)/10 (remaining coordinates
 *  are unused padding with zero gradient); seeded teacher data, rows sharded
 *  by rank. */
std::unique_ptr<Problem> make_tiny_mlp_problem(std::size_t n,
                                               std::uint64_t seed,
                                               std::size_t samples = 256);

/** The best-case construction for the sparse allreduce volume lower bound:
 *  at t=1 every rank emits an identical calibration gradient (k evenly
 *  spaced spikes) that pins block-aligned region boundaries and thresholds;
 *  from t=2 on, rank i's k selected coordinates all lie inside region i,
 *  with exactly k/P of them above the global threshold. Alternating-sign
 *  low spikes keep residual accumulation bounded, so every non-refresh
 *  iteration's received split+balance+allgatherv volume is exactly
 *  2k(P-1)/P words while t <= tau_prime. Requires k % P == 0, n % k == 0,
 *  even n/k, and n/P >= 2k. */
std::unique_ptr<Problem> make_tight_case_problem(std::size_t n, std::size_t k,
                                                 int world);

struct DriftOptions {
  /** Freeze heavy-coordinate positions, magnitudes, and wobble at their
   *  epoch-0 values, so only the global scale decays. */
  bool fixed_positions = false;
  /** Distinguishes per-rank streams. Heavy-coordinate *positions* depend
   *  only on the master seed, so streams with different keys (ranks) place
   *  their heavy values on the same coordinates — the distribution
   *  consistency that makes balanced space partitioning work — while their
   *  magnitudes, signs, and noise differ. */
  std::uint64_t rank_key = 0;
};

/** Synthetic slowly changing gradient (t >= 1, deterministic in
 *  (t, seed, opts)): n/100 distinct heavy coordinates whose positions and
 *  base magnitudes (uniform in [scale, 2*scale]) re-roll once per
 *  1024-iteration epoch, per-iteration magnitude wobble of +-8%, a global
 *  scale decaying by 0.95 per epoch, and background noise at 4% of the scale
 *  whose signs flip on consecutive iterations (pairwise-cancelling under
 *  residual accumulation). Within an epoch the exact top-k cutoff at
 *  density 1% moves only with the wobble, so thresholds reused for
 *  tau_prime < 1024 iterations stay within 1.2x of fresh and selection
 *  counts stay near k. */
DenseGrad drifting_gradient_process(std::int64_t t, std::uint64_t seed,
                                    std::size_t n, DriftOptions opts = {});

/** What one SGD step reports to the harness. */
struct StepOutcome {
  double objective = 0.0;          // global objective at the updated w
  std::size_t selected_local = 0;  // entries this rank selected / sent
  std::size_t selected_global = 0;  // entries in the applied global update
};

/** Per-rank instrumentation snapshot taken inside a step, for the central
 *  ξ collector: the accumulator that was sparsified and the raw local
 *  gradient. Filled only when a probe is passed. */
struct XiProbe {
  DenseGrad acc;
  DenseGrad grad;
};

/** One synchronous dense-SGD step: w <- w - alpha * (sum_i G_i) / P.
 *  The local gradient is scaled by alpha *before* the allreduce so the
 *  arithmetic per coordinate is identical to the sparse path's accumulator
 *  (which applies alpha at accumulation time); this is what makes the k=n
 *  trajectory comparison exact rather than approximate.
 *  Throws NumericError on non-finite gradients or iterates. */
StepOutcome dense_sgd_step(const WorkerCtx& ctx, ModelState& state,
                           const Problem& problem);

/** One Ok-Topk SGD step: acc = eps + alpha*G; (u, indexes) =
 *  ok_sparse_allreduce(acc, t, k); eps = acc zeroed at indexes;
 *  w <- w - u/P. */
StepOutcome oktopk_sgd_step(const WorkerCtx& ctx, ModelState& state,
                            Residual& residual, const Problem& problem,
                            std::size_t k, OkState& ok,
                            XiProbe* probe = nullptr);

/** One SGD step through a baseline collective (topka/topkdsa/gtopk/
 *  gaussiank) with the same error-feedback scheme: the residual keeps
 *  acc minus this rank's own local selection. Algorithm::dense and
 *  Algorithm::oktopk are not valid here. */
StepOutcome baseline_sgd_step(const WorkerCtx& ctx, ModelState& state,
                              Residual& residual, const Problem& problem,
                              std::size_t k, Algorithm alg);

/** Central ξ sample over all ranks' probes:
 *  || Topk((1/P) Σ acc_i)  -  Topk((1/P) Σ Topk(acc_i)) ||_2
 *  divided by || alpha * (1/P) Σ grad_i ||_2.
 *  Both averages accumulate in rank order with identical arithmetic, so the
 *  sample is exactly zero when k = n or when all accs coincide (at
 *  power-of-two P). Runs centrally on gathered state and touches no
 *  transport, so it never perturbs the traffic ledgers.
 *  Throws UndefinedRatioError when the true-gradient norm is zero. */
double measure_xi(std::span<const XiProbe> probes, double alpha,
                  std::size_t k);

}  // namespace oklab
