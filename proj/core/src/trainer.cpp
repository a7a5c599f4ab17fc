#include "oklab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "oklab/collectives.hpp"
#include "oklab/errors.hpp"
#include "oklab/rng.hpp"

namespace oklab {

double LrSchedule::at(std::int64_t t) const {
  if (t < 1) throw std::invalid_argument("LrSchedule::at: t must be >= 1");
  return inv_sqrt_decay ? alpha / std::sqrt(static_cast<double>(t)) : alpha;
}

namespace {

class QuadraticProblem final : public Problem {
 public:
  explicit QuadraticProblem(std::size_t n) : n_(n) {
    if (n == 0) throw ConfigError("quadratic: dimension must be positive");
  }

  std::size_t dim() const override { return n_; }
  const char* name() const override { return "quadratic"; }

  DenseGrad initial_w() const override {
    DenseGrad w(n_);
    for (std::size_t i = 0; i < n_; ++i) w[i] = 1.0;
    return w;
  }

  DenseGrad local_gradient(const DenseGrad& w, int /*rank*/, int /*world*/,
                           std::int64_t /*t*/) const override {
    return w;
  }

  double objective(const DenseGrad& w, std::int64_t /*t*/) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += w[i] * w[i];
    return 0.5 * s;
  }

 private:
  std::size_t n_;
};

class LeastSquaresProblem final : public Problem {
 public:
  LeastSquaresProblem(std::size_t n, std::uint64_t seed, std::size_t rows)
      : n_(n), rows_(rows) {
    if (n == 0 || rows == 0) {
      throw ConfigError("leastsquares: need positive dimension and rows");
    }
    a_.resize(rows_ * n_);
    b_.resize(rows_);

    // Column scales decay steeply so the gradient's mass concentrates on low
    // coordinates: top-k selection is then meaningful at small densities, and
    // error-feedback residuals of tail coordinates need many iterations to
    // climb past a reused selection threshold (a flat spectrum would push
    // ever more coordinates over a stale cutoff within one reuse window).
    std::vector<double> col_scale(n_);
    for (std::size_t j = 0; j < n_; ++j) {
      col_scale[j] = std::pow(1.0 + static_cast<double>(j), -2.0);
    }
    SplitMix64 rng(mix64(seed, 0x4c53u));
    std::vector<double> w_true(n_);
    for (std::size_t j = 0; j < n_; ++j) {
      w_true[j] =
          2.0 * rng.next_pm1() * std::pow(1.0 + static_cast<double>(j), -0.25);
    }
    for (std::size_t m = 0; m < rows_; ++m) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n_; ++j) {
        double v = rng.next_pm1() * col_scale[j];
        a_[m * n_ + j] = v;
        dot += v * w_true[j];
      }
      b_[m] = dot + 0.01 * rng.next_pm1();
    }
  }

  std::size_t dim() const override { return n_; }
  const char* name() const override { return "leastsquares"; }

  DenseGrad local_gradient(const DenseGrad& w, int rank, int world,
                           std::int64_t /*t*/) const override {
    // Mean over local rows, scaled so the rank-average equals the full-data
    // gradient: (P/N) * A_r^T (A_r w - b_r).
    std::vector<std::size_t> ends = equal_slice_ends(rows_, world);
    DenseGrad g(n_);
    for (std::size_t m = ends[rank]; m < ends[rank + 1]; ++m) {
      const double* row = a_.data() + m * n_;
      double r = -b_[m];
      for (std::size_t j = 0; j < n_; ++j) r += row[j] * w[j];
      for (std::size_t j = 0; j < n_; ++j) g[j] += row[j] * r;
    }
    double c = static_cast<double>(world) / static_cast<double>(rows_);
    for (std::size_t j = 0; j < n_; ++j) g[j] *= c;
    return g;
  }

  double objective(const DenseGrad& w, std::int64_t /*t*/) const override {
    double s = 0.0;
    for (std::size_t m = 0; m < rows_; ++m) {
      const double* row = a_.data() + m * n_;
      double r = -b_[m];
      for (std::size_t j = 0; j < n_; ++j) r += row[j] * w[j];
      s += r * r;
    }
    return s / (2.0 * static_cast<double>(rows_));
  }

 private:
  std::size_t n_;
  std::size_t rows_;
  std::vector<double> a_;
  std::vector<double> b_;
};

class DriftProblem final : public Problem {
 public:
  DriftProblem(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw ConfigError("drift: dimension must be positive");
  }

  std::size_t dim() const override { return n_; }
  const char* name() const override { return "drift"; }

  DenseGrad local_gradient(const DenseGrad& /*w*/, int rank, int /*world*/,
                           std::int64_t t) const override {
    DriftOptions opts;
    opts.rank_key = static_cast<std::uint64_t>(rank) + 1;
    return drifting_gradient_process(t, seed_, n_, opts);
  }

  double objective(const DenseGrad& w, std::int64_t /*t*/) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += w[i] * w[i];
    return 0.5 * s;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
};

class TinyMlpProblem final : public Problem {
 public:
  TinyMlpProblem(std::size_t n, std::uint64_t seed, std::size_t samples)
      : n_(n), samples_(samples), hidden_((n >= 21) ? (n - 1) / 10 : 2) {
    if (n < 10 * hidden_ + 1) {
      throw ConfigError("mlp: dimension too small for the parameter layout");
    }
    if (samples == 0) throw ConfigError("mlp: need at least one sample");
    x_.resize(samples_ * kIn);
    y_.resize(samples_);
    SplitMix64 rng(mix64(seed, 0x6d6c70u));
    double teacher[kIn];
    for (double& v : teacher) v = rng.next_pm1();
    for (std::size_t m = 0; m < samples_; ++m) {
      double dot = 0.0;
      for (int j = 0; j < kIn; ++j) {
        double v = rng.next_pm1();
        x_[m * kIn + j] = v;
        dot += teacher[j] * v;
      }
      y_[m] = std::tanh(dot) + 0.3 * x_[m * kIn] * x_[m * kIn + 1];
    }
    init_ = DenseGrad(n_);
    SplitMix64 wrng(mix64(seed, 0x77696e69u));
    for (std::size_t i = 0; i < 10 * hidden_ + 1; ++i) {
      init_[i] = 0.5 * wrng.next_pm1();
    }
  }

  std::size_t dim() const override { return n_; }
  const char* name() const override { return "mlp"; }
  DenseGrad initial_w() const override { return init_; }

  DenseGrad local_gradient(const DenseGrad& w, int rank, int world,
                           std::int64_t /*t*/) const override {
    std::vector<std::size_t> ends = equal_slice_ends(samples_, world);
    DenseGrad g(n_);
    std::vector<double> h(hidden_), dz(hidden_);
    for (std::size_t m = ends[rank]; m < ends[rank + 1]; ++m) {
      accumulate_sample(w, m, g, h, dz);
    }
    double c = static_cast<double>(world) / static_cast<double>(samples_);
    for (std::size_t i = 0; i < n_; ++i) g[i] *= c;
    return g;
  }

  double objective(const DenseGrad& w, std::int64_t /*t*/) const override {
    double s = 0.0;
    std::vector<double> h(hidden_);
    for (std::size_t m = 0; m < samples_; ++m) {
      double e = forward(w, m, h) - y_[m];
      s += e * e;
    }
    return s / (2.0 * static_cast<double>(samples_));
  }

 private:
  static constexpr int kIn = 8;

  // Parameter layout: W1 (hidden x kIn, row-major), b1, w2, b2, padding.
  std::size_t w1_at(std::size_t u, int j) const { return u * kIn + j; }
  std::size_t b1_at(std::size_t u) const { return kIn * hidden_ + u; }
  std::size_t w2_at(std::size_t u) const { return (kIn + 1) * hidden_ + u; }
  std::size_t b2_at() const { return (kIn + 2) * hidden_; }

  double forward(const DenseGrad& w, std::size_t m,
                 std::vector<double>& h) const {
    const double* x = x_.data() + m * kIn;
    double pred = w[b2_at()];
    for (std::size_t u = 0; u < hidden_; ++u) {
      double z = w[b1_at(u)];
      for (int j = 0; j < kIn; ++j) z += w[w1_at(u, j)] * x[j];
      h[u] = std::tanh(z);
      pred += w[w2_at(u)] * h[u];
    }
    return pred;
  }

  void accumulate_sample(const DenseGrad& w, std::size_t m, DenseGrad& g,
                         std::vector<double>& h,
                         std::vector<double>& dz) const {
    const double* x = x_.data() + m * kIn;
    double e = forward(w, m, h) - y_[m];
    g[b2_at()] += e;
    for (std::size_t u = 0; u < hidden_; ++u) {
      g[w2_at(u)] += e * h[u];
      dz[u] = e * w[w2_at(u)] * (1.0 - h[u] * h[u]);
      g[b1_at(u)] += dz[u];
      for (int j = 0; j < kIn; ++j) g[w1_at(u, j)] += dz[u] * x[j];
    }
  }

  std::size_t n_;
  std::size_t samples_;
  std::size_t hidden_;
  std::vector<double> x_;
  std::vector<double> y_;
  DenseGrad init_;
};

class TightCaseProblem final : public Problem {
 public:
  TightCaseProblem(std::size_t n, std::size_t k, int world)
      : n_(n), k_(k), world_(world) {
    std::size_t p = static_cast<std::size_t>(world);
    if (world < 1 || k < p || k % p != 0 || n % k != 0 ||
        (n / k) % 2 != 0 || n % p != 0 || n / p < 2 * k) {
      throw ConfigError(
          "tightcase: need k % P == 0, n % k == 0, even n/k, n % P == 0, "
          "and n/P >= 2k");
    }
  }

  std::size_t dim() const override { return n_; }
  const char* name() const override { return "tightcase"; }

  DenseGrad local_gradient(const DenseGrad& /*w*/, int rank, int world,
                           std::int64_t t) const override {
    if (world != world_) {
      throw ConfigError("tightcase: constructed for a different world size");
    }
    DenseGrad g(n_);
    const std::size_t stride = n_ / k_;
    if (t == 1) {
      // Calibration: identical on all ranks; k evenly spaced spikes pin
      // block-aligned boundaries, local_th = 4, global_th = 4P.
      for (std::size_t j = 0; j < k_; ++j) g[j * stride] = 4.0;
      return g;
    }
    const std::size_t per = k_ / static_cast<std::size_t>(world_);
    const std::size_t block = n_ / static_cast<std::size_t>(world_);
    const std::size_t r = static_cast<std::size_t>(rank);
    // k/P strong spikes on this rank's own calibration slots: these pass the
    // global threshold and are the only globally applied coordinates.
    for (std::size_t j = r * per; j < (r + 1) * per; ++j) {
      g[j * stride] = 100.0 + 0.5 * static_cast<double>(j);
    }
    // k - k/P weak spikes at odd in-block offsets: above local_th (so the
    // local selection has exactly k entries, all inside this rank's region)
    // but below global_th. The sign alternates so the unsent residual mass
    // cancels every other iteration instead of accumulating past 4P.
    const double low = (t % 2 == 0) ? 5.0 : -5.0;
    for (std::size_t j = 0; j + per < k_; ++j) {
      g[r * block + 2 * j + 1] = low;
    }
    return g;
  }

  double objective(const DenseGrad& /*w*/, std::int64_t /*t*/) const override {
    return 0.0;
  }

 private:
  std::size_t n_;
  std::size_t k_;
  int world_;
};

}  // namespace

std::unique_ptr<Problem> make_quadratic_problem(std::size_t n) {
  return std::make_unique<QuadraticProblem>(n);
}

std::unique_ptr<Problem> make_least_squares_problem(std::size_t n,
                                                    std::uint64_t seed,
                                                    std::size_t rows) {
  return std::make_unique<LeastSquaresProblem>(n, seed, rows);
}

std::unique_ptr<Problem> make_drift_problem(std::size_t n,
                                            std::uint64_t seed) {
  return std::make_unique<DriftProblem>(n, seed);
}

std::unique_ptr<Problem> make_tiny_mlp_problem(std::size_t n,
                                               std::uint64_t seed,
                                               std::size_t samples) {
  return std::make_unique<TinyMlpProblem>(n, seed, samples);
}

std::unique_ptr<Problem> make_tight_case_problem(std::size_t n, std::size_t k,
                                                 int world) {
  return std::make_unique<TightCaseProblem>(n, k, world);
}

DenseGrad drifting_gradient_process(std::int64_t t, std::uint64_t seed,
                                    std::size_t n, DriftOptions opts) {
  if (t < 1) {
    throw std::invalid_argument("drifting_gradient_process: t must be >= 1");
  }
  const std::uint64_t epoch = static_cast<std::uint64_t>((t - 1) / 1024);
  const double scale = std::pow(0.95, static_cast<double>(epoch));
  DenseGrad g(n);
  if (n == 0) return g;

  const std::uint64_t stream = mix64(seed, mix64(0x72616e6bu, opts.rank_key));

  // Background noise at 4% of the scale. Consecutive iterations use the same
  // magnitudes with flipped signs, so under error feedback the unselected
  // noise mass cancels pairwise instead of random-walking across a long run.
  const std::uint64_t pair = static_cast<std::uint64_t>((t + 1) / 2);
  const double noise_sign = (t % 2 == 1) ? 1.0 : -1.0;
  const std::uint64_t noise_key = mix64(mix64(stream, 0x6e6f6973u), pair);
  for (std::size_t i = 0; i < n; ++i) {
    double u = unit_from_bits(mix64(noise_key, i));
    g[i] = noise_sign * 0.04 * scale * (2.0 * u - 1.0);
  }

  // Heavy component: n/100 distinct spike slots whose positions are shared
  // by every rank stream (gradients of data-parallel workers concentrate on
  // consistent coordinates) while base magnitudes and signs are per-stream.
  // Positions and magnitudes re-roll once per 1024-iteration epoch (never,
  // for the fixed-positions variant); values wobble by at most +-8% per
  // iteration, which keeps the exact top-k cutoff two snapshots apart within
  // 1.08/0.92 < 1.2x of each other inside an epoch.
  const std::uint64_t heavy_epoch = opts.fixed_positions ? 0 : epoch;
  const std::uint64_t pos_key = mix64(mix64(seed, 0x65706f73u), heavy_epoch);
  const std::uint64_t mag_key = mix64(mix64(stream, 0x656d6167u), heavy_epoch);
  const std::uint64_t jit_key = mix64(stream, 0x6a697474u);
  const std::size_t slots = std::max<std::size_t>(1, n / 100);
  std::vector<char> taken(n, 0);
  for (std::size_t h = 0; h < slots; ++h) {
    std::size_t pos = static_cast<std::size_t>(mix64(pos_key, h) % n);
    while (taken[pos]) pos = (pos + 1) % n;
    taken[pos] = 1;
    std::uint64_t mag_bits = mix64(mag_key, h);
    double mag = (1.0 + unit_from_bits(mag_bits)) * scale;
    if (!opts.fixed_positions) {
      double u = unit_from_bits(
          mix64(mix64(jit_key, static_cast<std::uint64_t>(t)), h));
      mag *= 1.0 + 0.08 * (2.0 * u - 1.0);
    }
    g[pos] = (mag_bits & 1u) ? mag : -mag;
  }
  return g;
}

namespace {

// Shared step plumbing: next iteration index, learning rate, and the checked
// local gradient.
struct StepInputs {
  std::int64_t t;
  double alpha;
  DenseGrad grad;
};

StepInputs begin_step(const WorkerCtx& ctx, ModelState& state,
                      const Problem& problem, const char* who) {
  StepInputs in;
  in.t = state.t + 1;
  in.alpha = state.lr.at(in.t);
  if (state.w.size() != problem.dim()) {
    throw std::invalid_argument(std::string(who) +
                                ": model size does not match problem");
  }
  in.grad = problem.local_gradient(state.w, ctx.rank, ctx.world, in.t);
  if (in.grad.size() != problem.dim() || !in.grad.all_finite()) {
    throw NumericError(std::string(who) + ": non-finite or misshaped gradient");
  }
  return in;
}

void finish_step(ModelState& state, std::int64_t t, const char* who) {
  if (!state.w.all_finite()) {
    throw NumericError(std::string(who) + ": non-finite iterate");
  }
  state.t = t;
}

DenseGrad make_accumulator(const Residual& residual, const StepInputs& in,
                           const char* who) {
  const std::size_t n = in.grad.size();
  if (residual.eps.size() != n) {
    throw std::invalid_argument(std::string(who) +
                                ": residual size does not match problem");
  }
  DenseGrad acc(n);
  for (std::size_t i = 0; i < n; ++i) {
    acc[i] = residual.eps[i] + in.alpha * in.grad[i];
  }
  return acc;
}

void apply_sparse_update(ModelState& state, const SparseGrad& u, int world) {
  const double p = static_cast<double>(world);
  for (std::size_t i = 0; i < u.nnz(); ++i) {
    state.w[u.indices[i]] -= u.values[i] / p;
  }
}

}  // namespace

StepOutcome dense_sgd_step(const WorkerCtx& ctx, ModelState& state,
                           const Problem& problem) {
  StepInputs in = begin_step(ctx, state, problem, "dense_sgd_step");
  const std::size_t n = in.grad.size();
  // Scale by alpha before reducing; summing alpha*G_i keeps the per-
  // coordinate arithmetic identical to the accumulator path.
  DenseGrad scaled(n);
  for (std::size_t i = 0; i < n; ++i) scaled[i] = in.alpha * in.grad[i];
  DenseGrad reduced = dense_allreduce(ctx, scaled);
  const double p = static_cast<double>(ctx.world);
  for (std::size_t i = 0; i < n; ++i) state.w[i] -= reduced[i] / p;
  finish_step(state, in.t, "dense_sgd_step");

  StepOutcome out;
  out.objective = problem.objective(state.w, in.t);
  out.selected_local = n;
  out.selected_global = n;
  return out;
}

StepOutcome oktopk_sgd_step(const WorkerCtx& ctx, ModelState& state,
                            Residual& residual, const Problem& problem,
                            std::size_t k, OkState& ok, XiProbe* probe) {
  StepInputs in = begin_step(ctx, state, problem, "oktopk_sgd_step");
  DenseGrad acc = make_accumulator(residual, in, "oktopk_sgd_step");
  if (probe != nullptr) {
    probe->acc = acc;
    probe->grad = in.grad;
  }

  OkAllreduceResult res = ok_sparse_allreduce(ctx, ok, acc, in.t, k);

  residual.eps = std::move(acc);
  for (Index idx : res.indexes) residual.eps[idx] = 0.0;
  apply_sparse_update(state, res.u, ctx.world);
  finish_step(state, in.t, "oktopk_sgd_step");

  StepOutcome out;
  out.objective = problem.objective(state.w, in.t);
  out.selected_local = res.local_selected;
  out.selected_global = res.u.nnz();
  return out;
}

StepOutcome baseline_sgd_step(const WorkerCtx& ctx, ModelState& state,
                              Residual& residual, const Problem& problem,
                              std::size_t k, Algorithm alg) {
  StepInputs in = begin_step(ctx, state, problem, "baseline_sgd_step");
  DenseGrad acc = make_accumulator(residual, in, "baseline_sgd_step");

  SparseGrad local;
  SparseGrad global;
  switch (alg) {
    case Algorithm::topka:
      local = topk_exact(acc, k).selection;
      global = topka_allreduce(ctx, acc, k);
      break;
    case Algorithm::topkdsa:
      local = topk_exact(acc, k).selection;
      global = topkdsa_allreduce(ctx, acc, k);
      break;
    case Algorithm::gtopk:
      local = topk_exact(acc, k).selection;
      global = gtopk_allreduce(ctx, acc, k);
      break;
    case Algorithm::gaussiank:
      local = select_by_threshold(acc, gaussiank_scaled_threshold(acc, k));
      global = gaussiank_allreduce(ctx, acc, k);
      break;
    default:
      throw std::invalid_argument(
          "baseline_sgd_step: expects one of the four sparse baselines");
  }

  // Error feedback: the residual keeps everything this rank did not send.
  residual.eps = std::move(acc);
  for (Index idx : local.indices) residual.eps[idx] = 0.0;
  apply_sparse_update(state, global, ctx.world);
  finish_step(state, in.t, "baseline_sgd_step");

  StepOutcome out;
  out.objective = problem.objective(state.w, in.t);
  out.selected_local = local.nnz();
  out.selected_global = global.nnz();
  return out;
}

double measure_xi(std::span<const XiProbe> probes, double alpha,
                  std::size_t k) {
  if (probes.empty()) {
    throw std::invalid_argument("measure_xi: no probes");
  }
  const std::size_t n = probes[0].acc.size();
  if (n == 0 || k < 1 || k > n) {
    throw std::invalid_argument("measure_xi: bad dimensions");
  }
  for (const XiProbe& p : probes) {
    if (p.acc.size() != n || p.grad.size() != n) {
      throw std::invalid_argument("measure_xi: probe size mismatch");
    }
  }
  const double p = static_cast<double>(probes.size());

  // Both averages accumulate per coordinate in rank order with the same
  // operations, so they agree exactly wherever every rank's top-k kept the
  // coordinate (and everywhere when k = n).
  DenseGrad avg_full(n);
  DenseGrad avg_sel(n);
  DenseGrad avg_grad(n);
  DenseGrad expanded(n);
  for (const XiProbe& probe : probes) {
    for (std::size_t i = 0; i < n; ++i) expanded[i] = 0.0;
    SparseGrad sel = topk_exact(probe.acc, k).selection;
    for (std::size_t j = 0; j < sel.nnz(); ++j) {
      expanded[sel.indices[j]] = sel.values[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      avg_full[i] += probe.acc[i];
      avg_sel[i] += expanded[i];
      avg_grad[i] += probe.grad[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    avg_full[i] /= p;
    avg_sel[i] /= p;
    avg_grad[i] /= p;
  }

  SparseGrad ta = topk_exact(avg_full, k).selection;
  SparseGrad tb = topk_exact(avg_sel, k).selection;
  DenseGrad da(n);
  for (std::size_t j = 0; j < ta.nnz(); ++j) da[ta.indices[j]] = ta.values[j];
  for (std::size_t j = 0; j < tb.nnz(); ++j) {
    da[tb.indices[j]] -= tb.values[j];
  }
  double num = 0.0;
  for (std::size_t i = 0; i < n; ++i) num += da[i] * da[i];
  num = std::sqrt(num);

  double den = 0.0;
  for (std::size_t i = 0; i < n; ++i) den += avg_grad[i] * avg_grad[i];
  den = alpha * std::sqrt(den);
  if (den == 0.0) {
    throw UndefinedRatioError("measure_xi: true gradient norm is zero");
  }
  return num / den;
}

}  // namespace oklab
