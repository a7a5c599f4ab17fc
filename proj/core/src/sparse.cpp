#include "oklab/sparse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "oklab/errors.hpp"

namespace oklab {

bool DenseGrad::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool SparseGrad::valid() const {
  if (indices.size() != values.size()) return false;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) return false;
    if (i > 0 && indices[i] <= indices[i - 1]) return false;
  }
  return true;
}

namespace {

// Magnitude-descending order with ties broken toward the smaller index.
struct MagnitudeGreater {
  const double* v;
  bool operator()(Index a, Index b) const {
    double ma = std::fabs(v[a]);
    double mb = std::fabs(v[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  }
};

TopkResult topk_from(const double* values, const Index* idx_map,
                     std::size_t count, std::size_t n, std::size_t k) {
  std::vector<Index> order(count);
  std::iota(order.begin(), order.end(), Index{0});
  MagnitudeGreater cmp{values};
  double threshold;
  if (k < count) {
    std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), cmp);
    threshold = std::fabs(values[order[k - 1]]);
  } else {
    // Everything is selected; the cutoff is the smallest magnitude present
    // (the maximum under the magnitude-descending order).
    threshold =
        std::fabs(values[*std::max_element(order.begin(), order.end(), cmp)]);
  }
  order.resize(k);
  std::sort(order.begin(), order.end());

  TopkResult out;
  out.selection.n = n;
  out.selection.indices.reserve(k);
  out.selection.values.reserve(k);
  for (Index pos : order) {
    out.selection.indices.push_back(idx_map ? idx_map[pos] : pos);
    out.selection.values.push_back(values[pos]);
  }
  out.threshold = threshold;
  return out;
}

}  // namespace

TopkResult topk_exact(const DenseGrad& g, std::size_t k) {
  if (k < 1 || k > g.size()) {
    throw std::invalid_argument("topk_exact: k must be in [1, n]");
  }
  return topk_from(g.values.data(), nullptr, g.size(), g.size(), k);
}

TopkResult topk_exact(const SparseGrad& g, std::size_t k) {
  if (k < 1) throw std::invalid_argument("topk_exact: k must be >= 1");
  if (g.empty()) {
    TopkResult out;
    out.selection.n = g.n;
    out.threshold = 0.0;
    return out;
  }
  std::size_t take = std::min(k, g.nnz());
  return topk_from(g.values.data(), g.indices.data(), g.nnz(), g.n, take);
}

SparseGrad select_by_threshold(const DenseGrad& g, double th) {
  if (!(th >= 0.0)) {
    throw std::invalid_argument("select_by_threshold: th must be >= 0");
  }
  SparseGrad out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (std::fabs(g.values[i]) >= th) {
      out.indices.push_back(static_cast<Index>(i));
      out.values.push_back(g.values[i]);
    }
  }
  return out;
}

SparseGrad select_by_threshold(const SparseGrad& g, double th) {
  if (!(th >= 0.0)) {
    throw std::invalid_argument("select_by_threshold: th must be >= 0");
  }
  SparseGrad out(g.n);
  for (std::size_t i = 0; i < g.nnz(); ++i) {
    if (std::fabs(g.values[i]) >= th) {
      out.indices.push_back(g.indices[i]);
      out.values.push_back(g.values[i]);
    }
  }
  return out;
}

double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("inverse_normal_cdf: p must be in (0, 1)");
  }
  // Acklam's rational approximation, then two Halley refinements against
  // the erfc-based CDF. Accurate to ~1e-15 over the open unit interval.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;

  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  static const double sqrt2pi = 2.5066282746310005;
  for (int it = 0; it < 2; ++it) {
    double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    double u = e * sqrt2pi * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
  }
  return x;
}

double gaussian_threshold(const DenseGrad& g, std::size_t k) {
  std::size_t n = g.size();
  if (n < 2) throw std::invalid_argument("gaussian_threshold: need n >= 2");
  if (k < 1 || k > n) {
    throw std::invalid_argument("gaussian_threshold: k must be in [1, n]");
  }
  double mean = 0.0;
  for (double v : g.values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : g.values) {
    double d = v - mean;
    ss += d * d;
  }
  double var = ss / static_cast<double>(n - 1);
  if (var == 0.0) {
    throw DegenerateDistributionError(
        "gaussian_threshold: zero variance input");
  }
  double p = 1.0 - static_cast<double>(k) / (2.0 * static_cast<double>(n));
  return mean + std::sqrt(var) * inverse_normal_cdf(p);
}

SparseGrad sparse_slice(const SparseGrad& s, std::size_t lo, std::size_t hi) {
  if (lo > hi || hi > s.n) {
    throw std::invalid_argument("sparse_slice: bad range");
  }
  SparseGrad out(s.n);
  auto first = std::lower_bound(s.indices.begin(), s.indices.end(), lo);
  auto last = std::lower_bound(s.indices.begin(), s.indices.end(), hi);
  std::size_t a = static_cast<std::size_t>(first - s.indices.begin());
  std::size_t b = static_cast<std::size_t>(last - s.indices.begin());
  out.indices.assign(s.indices.begin() + a, s.indices.begin() + b);
  out.values.assign(s.values.begin() + a, s.values.begin() + b);
  return out;
}

namespace {

SparseGrad merge_two(const SparseGrad& a, const SparseGrad& b) {
  SparseGrad out(a.n);
  out.indices.reserve(a.nnz() + b.nnz());
  out.values.reserve(a.nnz() + b.nnz());
  std::size_t i = 0, j = 0;
  while (i < a.nnz() && j < b.nnz()) {
    if (a.indices[i] < b.indices[j]) {
      out.indices.push_back(a.indices[i]);
      out.values.push_back(a.values[i]);
      ++i;
    } else if (b.indices[j] < a.indices[i]) {
      out.indices.push_back(b.indices[j]);
      out.values.push_back(b.values[j]);
      ++j;
    } else {
      out.indices.push_back(a.indices[i]);
      out.values.push_back(a.values[i] + b.values[j]);
      ++i;
      ++j;
    }
  }
  for (; i < a.nnz(); ++i) {
    out.indices.push_back(a.indices[i]);
    out.values.push_back(a.values[i]);
  }
  for (; j < b.nnz(); ++j) {
    out.indices.push_back(b.indices[j]);
    out.values.push_back(b.values[j]);
  }
  return out;
}

// Stride-doubling reduction bracket: sum(q, s) = sum(q, 2s) + sum(q+s, 2s).
// Matches the combination tree of recursive-halving collectives, so local
// sums and distributed sums of the same parts agree bitwise.
SparseGrad stride_sum(std::span<const SparseGrad> parts, std::size_t q,
                      std::size_t s) {
  if (q + s >= parts.size()) return parts[q];
  return merge_two(stride_sum(parts, q, 2 * s), stride_sum(parts, q + s, 2 * s));
}

}  // namespace

SparseGrad sparse_sum(std::span<const SparseGrad> parts, std::size_t n) {
  for (const SparseGrad& p : parts) {
    if (p.n != n) {
      throw std::invalid_argument("sparse_sum: mismatched dimensions");
    }
  }
  if (parts.empty()) return SparseGrad(n);
  return stride_sum(parts, 0, 1);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t w) {
  out.push_back(static_cast<std::uint8_t>(w & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 24) & 0xff));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  return static_cast<std::uint32_t>(bytes[at]) |
         (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
         (static_cast<std::uint32_t>(bytes[at + 2]) << 16) |
         (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> wire_encode(const SparseGrad& s) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 8 * s.nnz());
  put_u32(out, static_cast<std::uint32_t>(s.nnz()));
  for (Index idx : s.indices) put_u32(out, idx);
  for (double v : s.values) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

SparseGrad wire_decode(std::span<const std::uint8_t> bytes, std::size_t n) {
  if (bytes.size() < 4) throw DecodeError("wire_decode: missing header");
  std::uint32_t nnz = get_u32(bytes, 0);
  std::size_t expect = 4 + std::size_t{8} * nnz;
  if (bytes.size() != expect) {
    throw DecodeError("wire_decode: buffer length does not match nnz header");
  }
  SparseGrad out(n);
  out.indices.reserve(nnz);
  out.values.reserve(nnz);
  for (std::uint32_t i = 0; i < nnz; ++i) {
    Index idx = get_u32(bytes, 4 + 4 * std::size_t{i});
    if (idx >= n) throw DecodeError("wire_decode: index out of range");
    if (i > 0 && idx <= out.indices.back()) {
      throw DecodeError("wire_decode: indices not strictly increasing");
    }
    out.indices.push_back(idx);
  }
  std::size_t voff = 4 + 4 * std::size_t{nnz};
  for (std::uint32_t i = 0; i < nnz; ++i) {
    std::uint32_t w = get_u32(bytes, voff + 4 * std::size_t{i});
    out.values.push_back(static_cast<double>(std::bit_cast<float>(w)));
  }
  return out;
}

}  // namespace oklab
