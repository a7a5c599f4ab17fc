#include "oklab/collectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "oklab/errors.hpp"

namespace oklab {

Message pack_sparse(const SparseGrad& s) {
  Message m;
  m.meta.push_back(static_cast<std::uint32_t>(s.nnz()));
  m.ints = s.indices;
  m.reals = s.values;
  return m;
}

SparseGrad unpack_sparse(const Message& m, std::size_t n) {
  if (m.meta.size() != 1 || m.ints.size() != m.meta[0] ||
      m.reals.size() != m.meta[0]) {
    throw ProtocolError("unpack_sparse: malformed sparse message");
  }
  SparseGrad s(n);
  s.indices = m.ints;
  s.values = m.reals;
  return s;
}

std::vector<SparseGrad> sparse_allgatherv(const WorkerCtx& ctx,
                                          const SparseGrad& mine, Phase phase) {
  const int P = ctx.world;
  if (!is_pow2(P)) {
    throw ConfigError("sparse_allgatherv: world size must be a power of two");
  }
  std::vector<SparseGrad> parts(P);
  parts[ctx.rank] = mine;
  const int rounds = log2_pow2(P);
  for (int j = 0; j < rounds; ++j) {
    int width = 1 << j;
    int partner = ctx.rank ^ width;
    int my_base = ctx.rank & ~(width - 1);
    int partner_base = partner & ~(width - 1);

    Message out;
    out.meta.push_back(static_cast<std::uint32_t>(width));
    for (int r = my_base; r < my_base + width; ++r) {
      out.meta.push_back(static_cast<std::uint32_t>(parts[r].nnz()));
      out.ints.insert(out.ints.end(), parts[r].indices.begin(),
                      parts[r].indices.end());
      out.reals.insert(out.reals.end(), parts[r].values.begin(),
                       parts[r].values.end());
    }
    ctx.send(partner, phase, std::move(out));

    Message in = ctx.recv(partner, phase);
    if (in.meta.size() != static_cast<std::size_t>(width) + 1 ||
        in.meta[0] != static_cast<std::uint32_t>(width)) {
      throw ProtocolError("sparse_allgatherv: unexpected block layout");
    }
    std::size_t off = 0;
    std::size_t total = 0;
    for (int r = 0; r < width; ++r) total += in.meta[1 + r];
    if (in.ints.size() != total || in.reals.size() != total) {
      throw ProtocolError("sparse_allgatherv: block size mismatch");
    }
    for (int r = 0; r < width; ++r) {
      std::size_t nnz = in.meta[1 + r];
      SparseGrad& part = parts[partner_base + r];
      part.n = mine.n;
      part.indices.assign(in.ints.begin() + off, in.ints.begin() + off + nnz);
      part.values.assign(in.reals.begin() + off, in.reals.begin() + off + nnz);
      off += nnz;
    }
  }
  return parts;
}

std::vector<std::size_t> equal_slice_ends(std::size_t n, int P) {
  std::vector<std::size_t> ends(static_cast<std::size_t>(P) + 1, 0);
  std::size_t base = n / static_cast<std::size_t>(P);
  std::size_t rem = n % static_cast<std::size_t>(P);
  for (int r = 0; r < P; ++r) {
    ends[r + 1] = ends[r] + base + (static_cast<std::size_t>(r) < rem ? 1 : 0);
  }
  return ends;
}

DenseGrad dense_allreduce(const WorkerCtx& ctx, const DenseGrad& g) {
  const int P = ctx.world;
  if (!is_pow2(P)) {
    throw ConfigError("dense_allreduce: world size must be a power of two");
  }
  DenseGrad buf = g;
  if (P == 1) return buf;
  const std::size_t n = buf.size();
  const std::vector<std::size_t> ends = equal_slice_ends(n, P);

  // Recursive-halving reduce-scatter: after the loop this rank owns the fully
  // reduced slice `rank`.
  int lo = 0, hi = P;
  for (int mask = P >> 1; mask > 0; mask >>= 1) {
    int partner = ctx.rank ^ mask;
    int mid = lo + mask;
    int send_lo, send_hi, keep_lo, keep_hi;
    if ((ctx.rank & mask) == 0) {
      keep_lo = lo; keep_hi = mid;
      send_lo = mid; send_hi = hi;
    } else {
      keep_lo = mid; keep_hi = hi;
      send_lo = lo; send_hi = mid;
    }
    Message out;
    out.reals.assign(buf.values.begin() + ends[send_lo],
                     buf.values.begin() + ends[send_hi]);
    ctx.send(partner, Phase::dense, std::move(out));
    Message in = ctx.recv(partner, Phase::dense);
    std::size_t keep_count = ends[keep_hi] - ends[keep_lo];
    if (in.reals.size() != keep_count) {
      throw ProtocolError("dense_allreduce: reduce-scatter length mismatch");
    }
    double* dst = buf.values.data() + ends[keep_lo];
    for (std::size_t i = 0; i < keep_count; ++i) dst[i] += in.reals[i];
    lo = keep_lo; hi = keep_hi;
  }

  // Recursive-doubling allgather of the reduced slices.
  for (int mask = 1; mask < P; mask <<= 1) {
    int partner = ctx.rank ^ mask;
    int block = 2 * mask;
    int base = ctx.rank & ~(block - 1);
    int my_lo = (ctx.rank & mask) ? base + mask : base;
    int my_hi = my_lo + mask;
    int their_lo = (ctx.rank & mask) ? base : base + mask;
    int their_hi = their_lo + mask;

    Message out;
    out.reals.assign(buf.values.begin() + ends[my_lo],
                     buf.values.begin() + ends[my_hi]);
    ctx.send(partner, Phase::dense, std::move(out));
    Message in = ctx.recv(partner, Phase::dense);
    std::size_t want = ends[their_hi] - ends[their_lo];
    if (in.reals.size() != want) {
      throw ProtocolError("dense_allreduce: allgather length mismatch");
    }
    std::copy(in.reals.begin(), in.reals.end(),
              buf.values.begin() + ends[their_lo]);
  }
  return buf;
}

SparseGrad topka_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                           std::size_t k) {
  SparseGrad mine = topk_exact(g, k).selection;
  if (ctx.world == 1) return mine;
  std::vector<SparseGrad> parts =
      sparse_allgatherv(ctx, mine, Phase::allgatherv);
  return sparse_sum(parts, g.size());
}

namespace {

// Working set of the TopkDSA reduce-scatter: sparse COO or a dense window.
struct DsaWorking {
  bool dense = false;
  SparseGrad coo;              // valid when !dense
  std::vector<double> window;  // valid when dense; covers [win_lo, win_hi)
  std::size_t win_lo = 0;
  std::size_t win_hi = 0;
};

void dsa_densify(DsaWorking& w, std::size_t lo, std::size_t hi) {
  if (w.dense) return;
  w.window.assign(hi - lo, 0.0);
  for (std::size_t i = 0; i < w.coo.nnz(); ++i) {
    w.window[w.coo.indices[i] - lo] = w.coo.values[i];
  }
  w.win_lo = lo;
  w.win_hi = hi;
  w.dense = true;
  w.coo = SparseGrad();
}

}  // namespace

SparseGrad topkdsa_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                             std::size_t k) {
  const int P = ctx.world;
  if (!is_pow2(P)) {
    throw ConfigError("topkdsa_allreduce: world size must be a power of two");
  }
  const std::size_t n = g.size();
  SparseGrad mine = topk_exact(g, k).selection;
  if (P == 1) return mine;

  const std::vector<std::size_t> ends = equal_slice_ends(n, P);
  DsaWorking work;
  work.coo = std::move(mine);

  int lo = 0, hi = P;
  for (int mask = P >> 1; mask > 0; mask >>= 1) {
    int partner = ctx.rank ^ mask;
    int mid = lo + mask;
    int keep_lo, keep_hi, send_lo, send_hi;
    if ((ctx.rank & mask) == 0) {
      keep_lo = lo; keep_hi = mid;
      send_lo = mid; send_hi = hi;
    } else {
      keep_lo = mid; keep_hi = hi;
      send_lo = lo; send_hi = mid;
    }
    const std::size_t send_c0 = ends[send_lo], send_c1 = ends[send_hi];
    const std::size_t keep_c0 = ends[keep_lo], keep_c1 = ends[keep_hi];

    // Ship the half this rank gives up: raw window if dense, COO otherwise.
    Message out;
    if (work.dense) {
      out.meta.push_back(1);
      out.reals.assign(work.window.begin() + (send_c0 - work.win_lo),
                       work.window.begin() + (send_c1 - work.win_lo));
    } else {
      SparseGrad part = sparse_slice(work.coo, send_c0, send_c1);
      out = pack_sparse(part);
      out.meta.insert(out.meta.begin(), 0);
    }
    ctx.send(partner, Phase::split, std::move(out));
    Message in = ctx.recv(partner, Phase::split);
    if (in.meta.empty()) throw ProtocolError("topkdsa: missing message kind");

    // Restrict the working set to the kept half, then fold in the partner's
    // contribution for that half.
    if (work.dense) {
      std::vector<double> kept(work.window.begin() + (keep_c0 - work.win_lo),
                               work.window.begin() + (keep_c1 - work.win_lo));
      work.window = std::move(kept);
      work.win_lo = keep_c0;
      work.win_hi = keep_c1;
    } else {
      work.coo = sparse_slice(work.coo, keep_c0, keep_c1);
    }

    if (in.meta[0] == 1) {
      if (in.reals.size() != keep_c1 - keep_c0) {
        throw ProtocolError("topkdsa: dense half length mismatch");
      }
      dsa_densify(work, keep_c0, keep_c1);
      for (std::size_t i = 0; i < in.reals.size(); ++i) {
        work.window[i] += in.reals[i];
      }
    } else {
      Message body = in;
      body.meta.erase(body.meta.begin());
      SparseGrad theirs = unpack_sparse(body, n);
      if (work.dense) {
        for (std::size_t i = 0; i < theirs.nnz(); ++i) {
          work.window[theirs.indices[i] - work.win_lo] += theirs.values[i];
        }
      } else {
        std::vector<SparseGrad> two(2);
        // Keep the halving bracket: lower-rank contribution first.
        if (ctx.rank < partner) {
          two[0] = std::move(work.coo);
          two[1] = std::move(theirs);
        } else {
          two[0] = std::move(theirs);
          two[1] = std::move(work.coo);
        }
        work.coo = sparse_sum(two, n);
      }
    }

    // Storage crossover for the remaining working range: COO costs two words
    // per entry, a dense window one word per coordinate.
    if (!work.dense && 2 * work.coo.nnz() >= keep_c1 - keep_c0) {
      dsa_densify(work, keep_c0, keep_c1);
    }
    lo = keep_lo; hi = keep_hi;
  }

  SparseGrad segment(n);
  if (work.dense) {
    for (std::size_t i = 0; i < work.window.size(); ++i) {
      if (work.window[i] != 0.0) {
        segment.indices.push_back(static_cast<Index>(work.win_lo + i));
        segment.values.push_back(work.window[i]);
      }
    }
  } else {
    segment = std::move(work.coo);
    segment.n = n;
  }

  std::vector<SparseGrad> segments =
      sparse_allgatherv(ctx, segment, Phase::allgatherv);
  // Segments cover disjoint ascending ranges; concatenation is the sum.
  SparseGrad out(n);
  for (const SparseGrad& s : segments) {
    out.indices.insert(out.indices.end(), s.indices.begin(), s.indices.end());
    out.values.insert(out.values.end(), s.values.begin(), s.values.end());
  }
  return out;
}

SparseGrad gtopk_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                           std::size_t k) {
  const int P = ctx.world;
  if (!is_pow2(P)) {
    throw ConfigError("gtopk_allreduce: world size must be a power of two");
  }
  SparseGrad cur = topk_exact(g, k).selection;
  const int rounds = log2_pow2(P);
  for (int level = 0; level < rounds; ++level) {
    int partner = ctx.rank ^ (1 << level);
    ctx.send(partner, Phase::split, pack_sparse(cur));
    Message in = ctx.recv(partner, Phase::split);
    SparseGrad theirs = unpack_sparse(in, g.size());
    std::vector<SparseGrad> two(2);
    if (ctx.rank < partner) {
      two[0] = std::move(cur);
      two[1] = std::move(theirs);
    } else {
      two[0] = std::move(theirs);
      two[1] = std::move(cur);
    }
    SparseGrad combined = sparse_sum(two, g.size());
    cur = topk_exact(combined, k).selection;
  }
  return cur;
}

double gaussiank_scaled_threshold(const DenseGrad& g, std::size_t k) {
  double th = std::max(gaussian_threshold(g, k), 0.0);
  auto count_at = [&](double t) {
    std::size_t c = 0;
    for (double v : g.values) {
      if (std::fabs(v) >= t) ++c;
    }
    return c;
  };
  // Scale down until strictly more than 3k/4 components survive.
  while (4 * count_at(th) <= 3 * k) th *= 0.9;
  return th;
}

SparseGrad gaussiank_allreduce(const WorkerCtx& ctx, const DenseGrad& g,
                               std::size_t k, GaussiankOptions opts) {
  double th = opts.scale_to_floor ? gaussiank_scaled_threshold(g, k)
                                  : std::max(gaussian_threshold(g, k), 0.0);
  SparseGrad mine = select_by_threshold(g, th);
  if (ctx.world == 1) return mine;
  std::vector<SparseGrad> parts =
      sparse_allgatherv(ctx, mine, Phase::allgatherv);
  return sparse_sum(parts, g.size());
}

}  // namespace oklab
