#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

namespace percohom {

/// Undirected graph in compressed adjacency form on local ids 0..n-1.
struct CsrGraph {
  std::vector<std::uint64_t> offsets{0};
  std::vector<std::uint32_t> neighbors;

  std::size_t size() const { return offsets.size() - 1; }
  int degree(std::size_t i) const { return static_cast<int>(offsets[i + 1] - offsets[i]); }
};

/// out = (D - A) in, the combinatorial graph Laplacian.
inline void apply_laplacian(const CsrGraph& g, std::span<const double> in, std::span<double> out) {
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (auto k = g.offsets[i]; k < g.offsets[i + 1]; ++k) acc += in[i] - in[g.neighbors[k]];
    out[i] = acc;
  }
}

namespace linalg {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void subtract_mean(std::span<double> a) {
  if (a.empty()) return;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  for (auto& v : a) v -= mean;
}

}  // namespace linalg

struct SolveStats {
  long iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

/// Preconditioned conjugate gradient for a symmetric positive semi-definite operator
/// whose kernel is the constants (a connected-graph Laplacian). Iterates, residuals and
/// preconditioned residuals are kept mean-zero, fixing the gauge mean(x) = 0.
/// `apply(in, out)` computes out = A in; `precondition(in, out)` computes out = M^-1 in.
template <typename Apply, typename Precondition>
SolveStats solve_mean_zero_pcg(Apply&& apply, Precondition&& precondition, std::span<const double> rhs,
                               std::span<double> x, double tolerance, long max_iterations) {
  const std::size_t n = rhs.size();
  std::vector<double> b(rhs.begin(), rhs.end());
  linalg::subtract_mean(b);
  linalg::subtract_mean(x);
  const double bnorm = linalg::norm2(b);
  SolveStats stats;
  if (bnorm == 0.0) {
    std::fill(x.begin(), x.end(), 0.0);
    stats.converged = true;
    return stats;
  }

  std::vector<double> r(n), z(n), p(n), ap(n);
  auto true_residual = [&] {
    apply(std::span<const double>(x.data(), n), std::span<double>(ap));
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
    linalg::subtract_mean(r);
    return linalg::norm2(r) / bnorm;
  };

  stats.relative_residual = true_residual();
  if (stats.relative_residual <= tolerance) {
    stats.converged = true;
    return stats;
  }
  precondition(std::span<const double>(r), std::span<double>(z));
  linalg::subtract_mean(z);
  p = z;
  double rz = linalg::dot(r, z);

  for (long it = 1; it <= max_iterations; ++it) {
    apply(std::span<const double>(p), std::span<double>(ap));
    const double pap = linalg::dot(p, ap);
    if (!(pap > 0.0)) break;
    const double alpha = rz / pap;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    linalg::subtract_mean(x);
    linalg::subtract_mean(r);
    stats.iterations = it;
    stats.relative_residual = linalg::norm2(r) / bnorm;
    if (stats.relative_residual <= tolerance) {
      // Guard against drift between the recursive and true residual.
      stats.relative_residual = true_residual();
      if (stats.relative_residual <= tolerance) {
        stats.converged = true;
        return stats;
      }
      // Restart from the true residual.
      precondition(std::span<const double>(r), std::span<double>(z));
      linalg::subtract_mean(z);
      p = z;
      rz = linalg::dot(r, z);
      continue;
    }
    precondition(std::span<const double>(r), std::span<double>(z));
    linalg::subtract_mean(z);
    const double rz_next = linalg::dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  stats.relative_residual = true_residual();
  stats.converged = stats.relative_residual <= tolerance;
  return stats;
}

}  // namespace percohom
