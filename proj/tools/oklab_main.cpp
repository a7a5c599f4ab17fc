#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "oklab/errors.hpp"
#include "oklab/harness.hpp"

namespace {

int fail_usage(const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace oklab;

  CLI::App app{
      "oklab: a message-passing laboratory for sparse allreduce and "
      "top-k-compressed SGD"};

  ExperimentConfig cfg;
  std::string algorithm = algorithm_name(cfg.algorithm);
  std::string problem = problem_kind_name(cfg.problem);
  std::string transport = transport_kind_name(cfg.transport);
  std::string format = metrics_format_name(cfg.format);

  app.add_option("--algorithm", algorithm,
                 "dense | topka | topkdsa | gtopk | gaussiank | oktopk")
      ->capture_default_str();
  app.add_option("--workers", cfg.workers, "number of ranks (power of two)")
      ->capture_default_str();
  app.add_option("--n", cfg.n, "gradient dimension")->capture_default_str();
  app.add_option("--density", cfg.density,
                 "selection density in (0,1]; k = ceil(density*n)")
      ->capture_default_str();
  app.add_option("--tau", cfg.tau, "region-boundary re-learning period")
      ->capture_default_str();
  app.add_option("--tau-prime", cfg.tau_prime,
                 "threshold re-evaluation period")
      ->capture_default_str();
  app.add_option("--bucket", cfg.bucket,
                 "split-phase send granularity in entries (0 = one message "
                 "per destination)")
      ->capture_default_str();
  app.add_option("--steps", cfg.steps, "SGD iterations to run")
      ->capture_default_str();
  app.add_option("--problem", problem,
                 "quadratic | leastsquares | drift | mlp | tightcase")
      ->capture_default_str();
  app.add_option("--seed", cfg.seed, "master seed (OKLAB_SEED overrides)")
      ->capture_default_str();
  app.add_option("--transport", transport, "inproc | tcp")
      ->capture_default_str();
  app.add_option("--rank-map", cfg.rank_map,
                 "tcp only: file of 'rank host:port' lines, one per rank");
  app.add_flag("--instrument-xi", cfg.instrument_xi,
               "collect the per-iteration xi sample (oktopk only)");
  app.add_option("--out", cfg.out, "metrics output path");
  app.add_option("--format", format, "csv | jsonl")->capture_default_str();
  app.add_option("--cost-alpha", cfg.cost_alpha,
                 "cost-model seconds per message")
      ->capture_default_str();
  app.add_option("--cost-beta", cfg.cost_beta, "cost-model seconds per word")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Remap CLI11's exit codes onto the usage-error convention (help stays 0).
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (auto a = algorithm_from_name(algorithm)) {
    cfg.algorithm = *a;
  } else {
    return fail_usage("unknown --algorithm '" + algorithm + "'");
  }
  if (auto p = problem_kind_from_name(problem)) {
    cfg.problem = *p;
  } else {
    return fail_usage("unknown --problem '" + problem + "'");
  }
  if (auto t = transport_kind_from_name(transport)) {
    cfg.transport = *t;
  } else {
    return fail_usage("unknown --transport '" + transport + "'");
  }
  if (auto f = metrics_format_from_name(format)) {
    cfg.format = *f;
  } else {
    return fail_usage("unknown --format '" + format + "'");
  }

  if (const char* env = std::getenv("OKLAB_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      return fail_usage(std::string("OKLAB_SEED is not an integer: ") + env);
    }
    cfg.seed = static_cast<std::uint64_t>(v);
  }

  RunResult res;
  try {
    res = run_experiment(cfg);
  } catch (const ConfigError& e) {
    return fail_usage(e.what());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "run failed: %s\n", e.what());
    return 3;
  }

  std::printf(
      "algorithm=%s problem=%s workers=%d n=%zu k=%zu density=%g tau=%u "
      "tau'=%u bucket=%u steps=%" PRId64 " seed=%" PRIu64 " transport=%s\n",
      algorithm_name(cfg.algorithm), problem_kind_name(cfg.problem),
      cfg.workers, cfg.n, res.k, cfg.density, cfg.tau, cfg.tau_prime,
      cfg.bucket, cfg.steps, cfg.seed, transport_kind_name(cfg.transport));

  const CostPrediction& pr = res.predicted;
  if (pr.is_interval()) {
    std::printf(
        "predicted per iteration: %.6g msgs, [%.6g, %.6g] words "
        "-> [%.6g, %.6g] s at alpha=%g beta=%g\n",
        pr.messages, pr.words_lo, pr.words_hi, pr.total_lo_seconds,
        pr.total_hi_seconds, cfg.cost_alpha, cfg.cost_beta);
  } else {
    std::printf(
        "predicted per iteration: %.6g msgs, %.6g words -> %.6g s at "
        "alpha=%g beta=%g\n",
        pr.messages, pr.words_lo, pr.total_lo_seconds, cfg.cost_alpha,
        cfg.cost_beta);
  }
  if (std::isnan(res.steady_mean_volume)) {
    std::printf("measured: mean %.6g words/iteration/rank\n", res.mean_volume);
  } else {
    std::printf(
        "measured: mean %.6g words/iteration/rank (steady-state %.6g)\n",
        res.mean_volume, res.steady_mean_volume);
  }

  std::map<Phase, std::array<std::uint64_t, 3>> phase_totals;
  for (const MetricRow& row : res.rows) {
    auto& t = phase_totals[row.phase];
    t[0] += row.words_sent;
    t[1] += row.words_recv;
    t[2] += row.msgs;
  }
  for (const auto& [phase, t] : phase_totals) {
    std::printf("  phase %-10s sent %10" PRIu64 "  recv %10" PRIu64
                "  msgs %8" PRIu64 "\n",
                phase_name(phase), t[0], t[1], t[2]);
  }

  if (!res.objectives.empty()) {
    std::printf("objective: first %.10g -> last %.10g\n", res.objectives[0],
                res.objectives.back());
  }
  if (cfg.instrument_xi && !res.xi_series.empty()) {
    double mx = 0.0, sum = 0.0;
    bool finite = true;
    for (double x : res.xi_series) {
      if (!std::isfinite(x)) finite = false;
      mx = std::max(mx, x);
      sum += x;
    }
    std::printf("xi: max %.6g mean %.6g%s\n", mx,
                sum / static_cast<double>(res.xi_series.size()),
                finite ? "" : " (non-finite samples present)");
  }
  std::uint64_t wall_total = 0;
  for (std::uint64_t w : res.iter_wall_ns) wall_total += w;
  std::printf("wall: total %.3f ms, mean %.3f ms/iteration\n",
              static_cast<double>(wall_total) * 1e-6,
              static_cast<double>(wall_total) * 1e-6 /
                  static_cast<double>(std::max<std::size_t>(
                      1, res.iter_wall_ns.size())));

  if (!cfg.out.empty()) {
    try {
      emit_metrics(res.rows, cfg.out, cfg.format);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 2;
    }
    std::printf("wrote %zu rows to %s (%s)\n", res.rows.size(),
                cfg.out.c_str(), metrics_format_name(cfg.format));
  }

  const PostRunChecks& c = res.checks;
  std::printf("checks: replicas %s, conservation %s, volume %s, finite %s\n",
              c.replicas_identical ? "ok" : "FAIL",
              c.conservation ? "ok" : "FAIL",
              c.volume_conformant ? "ok" : "FAIL",
              c.model_finite ? "ok" : "FAIL");
  if (!c.detail.empty()) std::printf("  %s\n", c.detail.c_str());
  std::printf("%s\n", c.all_ok() ? "PASS" : "FAIL");
  return c.all_ok() ? 0 : 1;
}
