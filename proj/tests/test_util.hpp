#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <numeric>
#include <optional>
#include <thread>
#include <type_traits>
#include <vector>

#include "oklab/errors.hpp"
#include "oklab/inproc.hpp"
#include "oklab/rng.hpp"
#include "oklab/sparse.hpp"
#include "oklab/transport.hpp"

namespace oklab::test {

/** A transport plus its ledger, one ctx per rank. */
struct World {
  InprocTransport transport;
  TrafficLedger ledger;

  explicit World(int P, std::size_t capacity = 64)
      : transport(P, capacity), ledger(P) {}

  WorkerCtx ctx(int rank) {
    return WorkerCtx{rank, transport.world(), &transport, &ledger};
  }
};

/** Runs `body(ctx)` on one thread per rank and returns the per-rank results.
 *  If any worker throws, the transport is closed (so blocked peers unwind)
 *  and the first non-TransportError — the root cause — is rethrown on the
 *  calling thread after all workers joined. */
template <typename F>
auto run_ranks(World& w, F body)
    -> std::vector<std::invoke_result_t<F, const WorkerCtx&>> {
  using R = std::invoke_result_t<F, const WorkerCtx&>;
  const int P = w.transport.world();
  std::vector<R> out(static_cast<std::size_t>(P));
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(P));
  {
    std::vector<std::jthread> threads;
    threads.reserve(static_cast<std::size_t>(P));
    for (int r = 0; r < P; ++r) {
      threads.emplace_back([&, r] {
        try {
          out[static_cast<std::size_t>(r)] = body(w.ctx(r));
        } catch (...) {
          errs[static_cast<std::size_t>(r)] = std::current_exception();
          w.transport.close();
        }
      });
    }
  }
  std::exception_ptr first;
  std::exception_ptr root;
  for (const std::exception_ptr& e : errs) {
    if (!e) continue;
    if (!first) first = e;
    if (!root) {
      try {
        std::rethrow_exception(e);
      } catch (const TransportError&) {
      } catch (...) {
        root = e;
      }
    }
  }
  if (root) std::rethrow_exception(root);
  if (first) std::rethrow_exception(first);
  return out;
}

/** run_ranks over a throwaway world. */
template <typename F>
auto run_ranks(int P, F body) {
  World w(P);
  return run_ranks(w, std::move(body));
}

/** Independent top-k oracle: full sort by magnitude descending, ties toward
 *  the smaller index, then the k winners in index order. */
inline SparseGrad oracle_topk(const DenseGrad& g, std::size_t k) {
  std::vector<Index> idx(g.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
    double ma = std::fabs(g[a]);
    double mb = std::fabs(g[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  idx.resize(std::min(k, g.size()));
  std::sort(idx.begin(), idx.end());
  SparseGrad s(g.size());
  for (Index i : idx) {
    s.indices.push_back(i);
    s.values.push_back(g[i]);
  }
  return s;
}

/** Exact (order-free) per-coordinate sum; only valid as an equality oracle
 *  when the inputs make double addition exact (e.g. small integers). */
inline std::map<Index, double> exact_sparse_sum(
    const std::vector<SparseGrad>& parts) {
  std::map<Index, double> acc;
  for (const SparseGrad& p : parts) {
    for (std::size_t i = 0; i < p.nnz(); ++i) {
      acc[p.indices[i]] += p.values[i];
    }
  }
  return acc;
}

/** Per-coordinate combination bracket of halving/doubling collectives over
 *  possibly-absent contributions: combine(q, s) = combine(q, 2s) +
 *  combine(q + s, 2s), with absent operands passing the other side through.
 *  Mirrors the pairwise merge of sparse sums, so it reproduces distributed
 *  results bitwise for any (not just integer) doubles. */
inline std::optional<double> bracket_combine(
    const std::vector<std::optional<double>>& xs, std::size_t q,
    std::size_t s) {
  if (q + s >= xs.size()) return xs[q];
  std::optional<double> a = bracket_combine(xs, q, 2 * s);
  std::optional<double> b = bracket_combine(xs, q + s, 2 * s);
  if (a && b) return *a + *b;
  return a ? a : b;
}

/** Uniform values in [-1, 1); magnitudes are distinct with probability 1. */
inline DenseGrad random_dense(std::uint64_t seed, std::size_t n) {
  SplitMix64 rng(seed);
  DenseGrad g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = rng.next_pm1();
  return g;
}

/** Integer values in [-hi, hi]; double sums of these are exact in any
 *  association, so distributed results equal naive per-coordinate sums. */
inline DenseGrad random_int_dense(std::uint64_t seed, std::size_t n, int hi) {
  SplitMix64 rng(seed);
  DenseGrad g(n);
  const std::uint64_t span = 2 * static_cast<std::uint64_t>(hi) + 1;
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = static_cast<double>(
        static_cast<std::int64_t>(rng.next() % span) - hi);
  }
  return g;
}

inline bool same_sparse(const SparseGrad& a, const SparseGrad& b) {
  return a.n == b.n && a.indices == b.indices && a.values == b.values;
}

}  // namespace oklab::test
