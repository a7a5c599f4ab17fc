#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oklab/algorithms.hpp"
#include "oklab/cost_model.hpp"
#include "oklab/trainer.hpp"
#include "oklab/transport.hpp"

namespace oklab {

enum class ProblemKind { quadratic = 0, leastsquares, drift, mlp, tightcase };
enum class TransportKind { inproc = 0, tcp };
enum class MetricsFormat { csv = 0, jsonl };

const char* problem_kind_name(ProblemKind p);
std::optional<ProblemKind> problem_kind_from_name(std::string_view name);
const char* transport_kind_name(TransportKind t);
std::optional<TransportKind> transport_kind_from_name(std::string_view name);
const char* metrics_format_name(MetricsFormat f);
std::optional<MetricsFormat> metrics_format_from_name(std::string_view name);

/** Constant learning rate the CLI uses when none is configured, tuned per
 *  toy problem for stable convergence at the default step counts. */
LrSchedule default_lr(ProblemKind p);

/** One experiment, fully determined by this struct (plus the rank-map file
 *  for the TCP backend). k is derived as ceil(density * n). */
struct ExperimentConfig {
  Algorithm algorithm = Algorithm::oktopk;
  int workers = 4;
  std::size_t n = 1000;
  double density = 0.01;
  std::uint32_t tau = 64;
  std::uint32_t tau_prime = 32;
  std::uint32_t bucket = 4;
  std::int64_t steps = 10;
  ProblemKind problem = ProblemKind::leastsquares;
  std::uint64_t seed = 1;
  TransportKind transport = TransportKind::inproc;
  std::string rank_map;  // required for tcp: "rank host:port" lines
  bool instrument_xi = false;
  std::string out;  // metrics file path; empty = no file
  MetricsFormat format = MetricsFormat::csv;
  double cost_alpha = 1.0;  // seconds per message in predictions
  double cost_beta = 1.0;   // seconds per word in predictions
  double lr_alpha = 0.0;    // 0 = use default_lr(problem)
  bool lr_decay = false;

  /** ceil(density * n), clamped to [1, n]; a tiny relative shrink guards the
   *  ceil against binary representation error in density * n (5% of 200 must
   *  give k = 10, not 11). */
  std::size_t k() const;

  /** Throws ConfigError on any invalid combination. */
  void validate() const;
};

/** One metrics record: traffic of one (iteration, phase, rank) cell plus the
 *  iteration-level step measurements repeated on each of its rows.
 *
 *  selected_k holds the global output support size on allgatherv rows and
 *  the rank's local selection count on all other phases (n for dense rows);
 *  exact_k is the configured k (n for dense). msgs counts messages received.
 *  wall_ns is always 0 in emitted rows: wall time varies run to run and the
 *  metrics files are byte-reproducible by contract; real timings live in
 *  RunResult::iter_wall_ns. */
struct MetricRow {
  std::int64_t iter = 0;  // 1-based
  double objective = 0.0;
  Phase phase = Phase::split;
  int rank = 0;
  std::uint64_t words_sent = 0;
  std::uint64_t words_recv = 0;
  std::uint64_t msgs = 0;
  std::uint64_t selected_k = 0;
  std::uint64_t exact_k = 0;
  double xi = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t wall_ns = 0;
};

inline constexpr char kMetricsCsvHeader[] =
    "iter,objective,phase,rank,words_sent,words_recv,msgs,selected_k,exact_k,"
    "xi,wall_ns";

/** Phases whose rows run_experiment emits for an algorithm, in emission
 *  order. The Ok-Topk set includes the amortized metadata phases (consensus,
 *  gather) so their cost stays visible in the output. */
std::vector<Phase> logging_phases(Algorithm alg);

/** Phases whose received words are compared against the cost-model bandwidth
 *  term. Strictly the data-moving phases: consensus and gather metadata are
 *  excluded, matching the convention that their bandwidth is ignored. */
std::vector<Phase> conformance_phases(Algorithm alg);

/** Order-sensitive 64-bit hash of the exact bit patterns of w (a +0.0/-0.0
 *  difference changes the hash). Used for cross-rank and cross-run
 *  bitwise-trajectory comparisons. */
std::uint64_t state_hash(const DenseGrad& w);

struct PostRunChecks {
  bool replicas_identical = true;  // all ranks' w bitwise equal every step
  bool conservation = true;        // per phase: total sent == total received
  bool volume_conformant = true;   // per-algorithm bandwidth rule
  bool model_finite = true;        // final iterate is finite
  std::string detail;              // human-readable failure descriptions

  bool all_ok() const {
    return replicas_identical && conservation && volume_conformant &&
           model_finite;
  }
};

struct RunResult {
  std::size_t k = 0;
  std::vector<MetricRow> rows;

  // Per-iteration series (index 0 = iteration 1).
  std::vector<double> objectives;           // rank-0 objective after the step
  std::vector<std::uint64_t> state_hashes;  // hash of rank-0 w after the step
  std::vector<double> xi_series;            // NaN when not instrumented
  std::vector<std::vector<StepOutcome>> outcomes;  // [iteration][rank]
  std::vector<std::uint64_t> iter_wall_ns;         // real time, not emitted

  /** Received words per iteration and rank over the conformance phases. */
  std::vector<std::vector<std::uint64_t>> iter_rank_volume;

  DenseGrad final_w;  // rank-0 copy after the last step

  CostPrediction predicted;
  double mean_volume = std::numeric_limits<double>::quiet_NaN();
  /** Ok-Topk only: mean over iterations with (t-1) % tau_prime != 0; NaN when
   *  every iteration is a refresh. */
  double steady_mean_volume = std::numeric_limits<double>::quiet_NaN();

  PostRunChecks checks;
};

/** Builds the configured problem instance (deterministic in cfg). */
std::unique_ptr<Problem> make_problem(const ExperimentConfig& cfg);

/** Runs the configured experiment on `workers` threads, one rank each, with
 *  a shared transport and ledger. Collection happens at a per-iteration
 *  barrier while every rank is quiescent, so ledger reads race with nothing.
 *  A throwing worker aborts the run: the transport is closed to unblock its
 *  peers and the failure resurfaces as std::runtime_error with the rank
 *  attached. Config problems throw ConfigError before any thread starts. */
RunResult run_experiment(const ExperimentConfig& cfg);

/** Renders rows as CSV (fixed header above) or JSON lines with the same
 *  keys. All numeric fields; doubles use shortest-round-trip-ish %.17g, CSV
 *  encodes NaN as "nan", JSON as null. */
std::string render_metrics(const std::vector<MetricRow>& rows,
                           MetricsFormat format);

/** Writes render_metrics output to `path` (binary stream, so bytes are
 *  platform-stable). Throws ConfigError when the file cannot be written. */
void emit_metrics(const std::vector<MetricRow>& rows, const std::string& path,
                  MetricsFormat format);

}  // namespace oklab
