#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "percohom/cell_problem.hpp"
#include "percohom/errors.hpp"
#include "percohom/lattice.hpp"
#include "percohom/rng.hpp"
#include "percohom/solver.hpp"
#include "percohom/stats.hpp"
#include "percohom/walk.hpp"

namespace percohom {

// ---------------------------------------------------------------------------
// Effective diffusivity
// ---------------------------------------------------------------------------

/// Q̃₀ realized on a finite cluster: vertex weights n(x) / Σ n.
struct TildeQWeights {
  double normalization = 0.0;  // Σ_{x in cluster} n(x)
};

inline TildeQWeights tilde_q_weights(const ClusterGraph& cluster) {
  TildeQWeights w;
  for (std::size_t i = 0; i < cluster.size(); ++i) w.normalization += cluster.degree(i);
  return w;
}

/// σ̂²_b = Σ_x Σ_{e open} (e·b + G_b(x,e))² / Σ_x n(x): the Q̃₀ average of the
/// martingale bracket density (1/n) Σ_e ω(e) (e·b + G_b)².
inline std::vector<double> variational_sigma2(const ClusterGraph& cluster, std::span<const DirectionField> fields) {
  const int d = cluster.spec.dimension;
  require(static_cast<int>(fields.size()) == d, "variational_sigma2 needs one field per direction");
  const auto weights = tilde_q_weights(cluster);
  require(weights.normalization > 0.0, "variational_sigma2 needs a cluster with at least one edge");
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  for (int b = 0; b < d; ++b) {
    double numerator = 0.0;
    for (std::size_t i = 0; i < cluster.size(); ++i) {
      const Vertex x = cluster.vertices[i];
      for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
        const auto e = Direction::from_index(cluster.edge_directions[k]);
        const double flux = e.component(b) + fields[static_cast<std::size_t>(b)](x, e);
        numerator += flux * flux;
      }
    }
    out[static_cast<std::size_t>(b)] = numerator / weights.normalization;
  }
  return out;
}

inline std::vector<double> variational_sigma2(const ClusterGraph& cluster, std::span<const CellSolution> solutions) {
  std::vector<DirectionField> fields;
  for (const auto& s : solutions) fields.push_back(s.field);
  return variational_sigma2(cluster, std::span<const DirectionField>(fields));
}

/// The same functional with G_b = 0, an upper bound for the projected value.
inline std::vector<double> unprojected_sigma2(const ClusterGraph& cluster) {
  std::vector<DirectionField> zero;
  for (int b = 0; b < cluster.spec.dimension; ++b) zero.emplace_back(cluster.spec, b);
  return variational_sigma2(cluster, std::span<const DirectionField>(zero));
}

struct MsdEstimate {
  int dimension = 2;
  double t = 0.0;
  std::vector<double> sigma2;          // Var(X(t)·b) / t per direction
  std::vector<double> sigma2_stderr;   // bootstrap
  double mean_sigma2 = 0.0;            // average over directions
  double mean_sigma2_stderr = 0.0;
  std::vector<double> covariance;      // d x d, Cov(X(t)) / t
  std::vector<double> covariance_stderr;
  bool degenerate = false;

  double cov(int i, int j) const { return covariance[static_cast<std::size_t>(i * dimension + j)]; }
  double cov_stderr(int i, int j) const { return covariance_stderr[static_cast<std::size_t>(i * dimension + j)]; }
};

namespace detail {

inline std::vector<double> covariance_over_t(const EndpointSample& sample, std::span<const std::size_t> rows,
                                             double t) {
  const int d = sample.dimension;
  const auto n = static_cast<double>(rows.size());
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (auto r : rows)
    for (int k = 0; k < d; ++k) mean[static_cast<std::size_t>(k)] += sample.at(r, k);
  for (auto& m : mean) m /= n;
  std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
  for (auto r : rows) {
    for (int i = 0; i < d; ++i) {
      const double di = sample.at(r, i) - mean[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) cov[static_cast<std::size_t>(i * d + j)] += di * (sample.at(r, j) - mean[static_cast<std::size_t>(j)]);
    }
  }
  for (auto& c : cov) c /= (n - 1.0) * t;
  return cov;
}

}  // namespace detail

/// Per-direction Var(X(t)·b)/t with bootstrap standard errors, plus the full
/// covariance matrix / t. `t` is the time the endpoints were taken at, in the
/// same units as the endpoints (macroscopic time for rescaled endpoints).
inline MsdEstimate msd_sigma2(const EndpointSample& sample, double t, int resamples = 1000,
                              std::uint64_t seed = 0) {
  require(sample.size() >= 100, "msd_sigma2 needs at least 100 endpoints");
  require(t > 0.0, "msd_sigma2 needs t > 0");
  require(resamples >= 2, "msd_sigma2 needs at least 2 bootstrap resamples");
  const int d = sample.dimension;
  const std::size_t n = sample.size();
  MsdEstimate est;
  est.dimension = d;
  est.t = t;

  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  est.covariance = detail::covariance_over_t(sample, rows, t);
  for (int b = 0; b < d; ++b) est.sigma2.push_back(est.cov(b, b));
  for (double s : est.sigma2) est.mean_sigma2 += s / d;

  est.degenerate = std::all_of(est.covariance.begin(), est.covariance.end(), [](double c) { return c == 0.0; });
  est.sigma2_stderr.assign(static_cast<std::size_t>(d), 0.0);
  est.covariance_stderr.assign(static_cast<std::size_t>(d * d), 0.0);
  if (est.degenerate) return est;

  Engine engine = make_engine(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> sum(static_cast<std::size_t>(d * d), 0.0), sum_sq(static_cast<std::size_t>(d * d), 0.0);
  double mean_sum = 0.0, mean_sum_sq = 0.0;
  for (int r = 0; r < resamples; ++r) {
    for (auto& row : rows) row = pick(engine);
    const auto cov = detail::covariance_over_t(sample, rows, t);
    double diag_mean = 0.0;
    for (std::size_t j = 0; j < cov.size(); ++j) {
      sum[j] += cov[j];
      sum_sq[j] += cov[j] * cov[j];
    }
    for (int b = 0; b < d; ++b) diag_mean += cov[static_cast<std::size_t>(b * d + b)] / d;
    mean_sum += diag_mean;
    mean_sum_sq += diag_mean * diag_mean;
  }
  auto spread = [resamples](double s, double s2) {
    const double m = s / resamples;
    return std::sqrt(std::max(0.0, (s2 / resamples - m * m) * resamples / (resamples - 1.0)));
  };
  for (std::size_t j = 0; j < sum.size(); ++j) est.covariance_stderr[j] = spread(sum[j], sum_sq[j]);
  for (int b = 0; b < d; ++b) est.sigma2_stderr[static_cast<std::size_t>(b)] = est.cov_stderr(b, b);
  est.mean_sigma2_stderr = spread(mean_sum, mean_sum_sq);
  return est;
}

struct DiffusivityReport {
  std::vector<double> variational_sigma2;
  MsdEstimate msd;
  int side = 0;
  int dimension = 0;
  double p = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t walks = 0;
  double microscopic_time = 0.0;

  /// |variational mean - MSD mean| within `k` standard errors of the MSD estimate.
  bool agrees(double k = 3.0) const {
    double v = 0.0;
    for (double s : variational_sigma2) v += s / static_cast<double>(variational_sigma2.size());
    return std::abs(v - msd.mean_sigma2) <= k * msd.mean_sigma2_stderr;
  }
};

// ---------------------------------------------------------------------------
// Sublinearity of the corrector
// ---------------------------------------------------------------------------

struct SublinearityEntry {
  double eps = 0.0;
  std::vector<double> a_eps;  // cluster mean of εχ over {|x| <= 1/ε}
  double s = 0.0;             // ε^d Σ |εχ(x) - a_ε|²
  std::uint64_t box_vertices = 0;
};

struct SublinearityReport {
  std::vector<SublinearityEntry> entries;  // decreasing ε

  bool strictly_decreasing() const {
    for (std::size_t i = 1; i < entries.size(); ++i)
      if (!(entries[i].s < entries[i - 1].s)) return false;
    return true;
  }
};

namespace detail {

inline long long sup_norm(const std::vector<long long>& x) {
  long long m = 0;
  for (auto c : x) m = std::max(m, c < 0 ? -c : c);
  return m;
}

}  // namespace detail

inline SublinearityEntry sublinearity_at(const CorrectorField& chi, double eps) {
  const auto& spec = chi.spec;
  const int d = spec.dimension;
  require(eps > 0.0, "eps must be positive");
  require(1.0 / eps <= spec.side / 2.0, "box of radius 1/eps exceeds the torus");
  const double radius = 1.0 / eps;

  SublinearityEntry entry;
  entry.eps = eps;
  entry.a_eps.assign(static_cast<std::size_t>(d), 0.0);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < chi.size(); ++i) {
    if (static_cast<double>(detail::sup_norm(spec.centered_offset(chi.vertices[i], chi.root))) <= radius)
      members.push_back(i);
  }
  entry.box_vertices = members.size();
  if (members.empty()) return entry;
  for (auto i : members)
    for (int b = 0; b < d; ++b) entry.a_eps[static_cast<std::size_t>(b)] += eps * chi.at(i, b);
  for (auto& a : entry.a_eps) a /= static_cast<double>(members.size());
  double acc = 0.0;
  for (auto i : members) {
    for (int b = 0; b < d; ++b) {
      const double dev = eps * chi.at(i, b) - entry.a_eps[static_cast<std::size_t>(b)];
      acc += dev * dev;
    }
  }
  entry.s = std::pow(eps, d) * acc;
  return entry;
}

inline SublinearityReport sublinearity_statistic(const CorrectorField& chi, std::vector<double> eps_list) {
  std::sort(eps_list.begin(), eps_list.end(), std::greater<>());
  SublinearityReport report;
  for (double eps : eps_list) report.entries.push_back(sublinearity_at(chi, eps));
  return report;
}

/// Axis-aligned closed rectangle inside [-1, 1]^d.
struct Rectangle {
  std::vector<double> lo;
  std::vector<double> hi;

  bool contains(std::span<const double> z) const {
    for (std::size_t k = 0; k < lo.size(); ++k)
      if (z[k] < lo[k] || z[k] > hi[k]) return false;
    return true;
  }
};

inline Rectangle full_box(int d) {
  return {std::vector<double>(static_cast<std::size_t>(d), -1.0), std::vector<double>(static_cast<std::size_t>(d), 1.0)};
}

/// Quadrants (orthants) of [-1, 1]^d, ordered by sign pattern.
inline std::vector<Rectangle> orthants(int d) {
  std::vector<Rectangle> out;
  for (int mask = 0; mask < (1 << d); ++mask) {
    Rectangle r;
    for (int k = 0; k < d; ++k) {
      const bool neg = (mask >> k) & 1;
      r.lo.push_back(neg ? -1.0 : 0.0);
      r.hi.push_back(neg ? 0.0 : 1.0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// ε^d Σ_{x in cluster, εx in A} (εχ(x) - a_ε)·b₀ for each rectangle A.
inline std::vector<double> box_average_statistic(const CorrectorField& chi, const SublinearityEntry& scale,
                                                 std::span<const Rectangle> rectangles, int b0 = 0) {
  const auto& spec = chi.spec;
  const int d = spec.dimension;
  require(b0 >= 0 && b0 < d, "b0 out of range");
  for (const auto& r : rectangles) {
    require(static_cast<int>(r.lo.size()) == d && static_cast<int>(r.hi.size()) == d, "rectangle dimension mismatch");
    for (int k = 0; k < d; ++k)
      require(r.lo[k] >= -1.0 && r.hi[k] <= 1.0 && r.lo[k] <= r.hi[k], "rectangles must lie inside [-1, 1]^d");
  }
  const double eps = scale.eps;
  std::vector<double> out(rectangles.size(), 0.0);
  std::vector<double> z(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < chi.size(); ++i) {
    const auto offset = spec.centered_offset(chi.vertices[i], chi.root);
    for (int k = 0; k < d; ++k) z[static_cast<std::size_t>(k)] = eps * static_cast<double>(offset[k]);
    const double dev = eps * chi.at(i, b0) - scale.a_eps[static_cast<std::size_t>(b0)];
    for (std::size_t r = 0; r < rectangles.size(); ++r)
      if (rectangles[r].contains(z)) out[r] += dev;
  }
  const double weight = std::pow(eps, d);
  for (auto& v : out) v *= weight;
  return out;
}

// ---------------------------------------------------------------------------
// Poincaré inequality on boxes
// ---------------------------------------------------------------------------

/// Connected component containing the root of (largest cluster) ∩ [-1/ε, 1/ε]^d,
/// with only the open edges internal to the box.
struct BoxComponent {
  std::vector<Vertex> vertices;
  CsrGraph graph;
};

inline BoxComponent box_component(const BondConfiguration& config, const ClusterGraph& cluster, double eps) {
  const auto& spec = config.spec();
  require(eps > 0.0, "eps must be positive");
  require(2.0 / eps <= spec.side, "box side 2/eps exceeds the torus side");
  const double radius = 1.0 / eps;
  const Vertex root = cluster.root();
  auto inside = [&](Vertex v) {
    return cluster.contains(v) && static_cast<double>(detail::sup_norm(spec.centered_offset(v, root))) <= radius;
  };

  BoxComponent comp;
  std::vector<std::int64_t> local(static_cast<std::size_t>(spec.vertex_count()), -1);
  std::deque<Vertex> frontier{root};
  local[root] = 0;
  comp.vertices.push_back(root);
  while (!frontier.empty()) {
    const Vertex v = frontier.front();
    frontier.pop_front();
    const auto ov = spec.centered_offset(v, root);
    for (int i = 0; i < spec.direction_count(); ++i) {
      const auto e = Direction::from_index(i);
      if (!config.is_open(v, e)) continue;
      const Vertex w = spec.neighbor(v, e);
      if (!inside(w)) continue;
      // Reject edges that cross the seam of the centered chart.
      auto ow = spec.centered_offset(w, root);
      ow[static_cast<std::size_t>(e.axis())] -= e.sign();
      if (ow != ov) continue;
      if (local[w] >= 0) continue;
      local[w] = static_cast<std::int64_t>(comp.vertices.size());
      comp.vertices.push_back(w);
      frontier.push_back(w);
    }
  }
  comp.graph.offsets.assign(1, 0);
  for (const Vertex v : comp.vertices) {
    const auto ov = spec.centered_offset(v, root);
    for (int i = 0; i < spec.direction_count(); ++i) {
      const auto e = Direction::from_index(i);
      if (!config.is_open(v, e)) continue;
      const Vertex w = spec.neighbor(v, e);
      if (local[w] < 0) continue;
      auto ow = spec.centered_offset(w, root);
      ow[static_cast<std::size_t>(e.axis())] -= e.sign();
      if (ow != ov) continue;
      comp.graph.neighbors.push_back(static_cast<std::uint32_t>(local[w]));
    }
    comp.graph.offsets.push_back(comp.graph.neighbors.size());
  }
  return comp;
}

struct SpectralGap {
  double lambda1 = 0.0;
  long outer_iterations = 0;
  double residual = 0.0;  // ||L v - λ v|| for the returned unit vector
};

/// Smallest nonzero eigenvalue of a connected graph Laplacian by block inverse
/// iteration: each sweep applies L^+ (mean-zero PCG) to a block orthogonal to the
/// constants, followed by Rayleigh-Ritz on the block.
inline SpectralGap smallest_nonzero_laplacian_eigenvalue(const CsrGraph& g, std::uint64_t seed,
                                                         double tolerance = 1e-12, long max_sweeps = 500) {
  const std::size_t n = g.size();
  require(n >= 2, "spectral gap needs at least 2 vertices");
  const int block = static_cast<int>(std::min<std::size_t>(4, n - 1));

  Engine engine = make_engine(seed);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), block);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = gauss(engine);

  auto orthonormalize = [&](Eigen::MatrixXd& m) {
    m.rowwise() -= m.colwise().mean();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    m = qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols());
    m.rowwise() -= m.colwise().mean();
  };
  auto laplacian = [&](std::span<const double> in, std::span<double> out) { apply_laplacian(g, in, out); };
  std::vector<double> inv_degree(n);
  for (std::size_t i = 0; i < n; ++i) inv_degree[i] = 1.0 / std::max(1, g.degree(i));
  auto jacobi = [&](std::span<const double> in, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = inv_degree[i] * in[i];
  };
  auto apply_block = [&](const Eigen::MatrixXd& in) {
    Eigen::MatrixXd out(in.rows(), in.cols());
    for (Eigen::Index j = 0; j < in.cols(); ++j)
      laplacian(std::span<const double>(in.col(j).data(), n), std::span<double>(out.col(j).data(), n));
    return out;
  };

  orthonormalize(x);
  SpectralGap gap;
  double previous = std::numeric_limits<double>::infinity();
  const long cg_limit = static_cast<long>(std::max<std::size_t>(1000, 20 * n));
  for (long sweep = 1; sweep <= max_sweeps; ++sweep) {
    Eigen::MatrixXd y(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      std::vector<double> sol(n, 0.0);
      solve_mean_zero_pcg(laplacian, jacobi, std::span<const double>(x.col(j).data(), n), sol, 1e-10, cg_limit);
      y.col(j) = Eigen::Map<const Eigen::VectorXd>(sol.data(), static_cast<Eigen::Index>(n));
    }
    orthonormalize(y);
    const Eigen::MatrixXd ly = apply_block(y);
    Eigen::MatrixXd h = y.transpose() * ly;
    h = 0.5 * (h + h.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ritz(h);
    x = y * ritz.eigenvectors();
    const Eigen::MatrixXd lx = ly * ritz.eigenvectors();
    gap.lambda1 = ritz.eigenvalues()(0);
    gap.residual = (lx.col(0) - gap.lambda1 * x.col(0)).norm();
    gap.outer_iterations = sweep;
    if (std::abs(previous - gap.lambda1) <= tolerance * gap.lambda1 && gap.residual <= 1e-8 * std::max(1.0, gap.lambda1))
      break;
    previous = gap.lambda1;
  }
  return gap;
}

struct PoincareEstimate {
  double eps = 0.0;
  std::uint64_t component_size = 0;
  double lambda1 = 0.0;
  double constant = 0.0;         // sharp K in (1/#C) Σ_{x,y} (u(x)-u(y))² <= K Σ_{x~y} (u(x)-u(y))²
  double scaled_constant = 0.0;  // K ε², bounded in ε when the inequality scales as ε^-2
  double best_trial_ratio = 0.0;  // max over random test functions, <= K
};

/// Ratio of the two sides of the Poincaré inequality on the ε-box component,
/// for a test function u on the component.
inline double poincare_ratio_of(const CsrGraph& g, std::span<const double> u) {
  const std::size_t n = g.size();
  double mean = 0.0;
  for (double v : u) mean += v;
  mean /= static_cast<double>(n);
  double var_sum = 0.0;
  for (double v : u) var_sum += (v - mean) * (v - mean);
  // (1/n) Σ_{x,y} (u(x)-u(y))² over ordered pairs = 2 Σ_x (u(x) - ū)².
  const double lhs = 2.0 * var_sum;
  double rhs = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (auto k = g.offsets[i]; k < g.offsets[i + 1]; ++k)
      if (g.neighbors[k] > i) rhs += (u[i] - u[g.neighbors[k]]) * (u[i] - u[g.neighbors[k]]);
  if (lhs == 0.0) return 0.0;
  return rhs == 0.0 ? std::numeric_limits<double>::infinity() : lhs / rhs;
}

inline PoincareEstimate poincare_ratio(const BondConfiguration& config, const ClusterGraph& cluster, double eps,
                                       int trials, std::uint64_t seed) {
  const auto comp = box_component(config, cluster, eps);
  require(comp.vertices.size() >= 2, "Poincaré box component has fewer than 2 vertices");
  PoincareEstimate est;
  est.eps = eps;
  est.component_size = comp.vertices.size();
  const auto gap = smallest_nonzero_laplacian_eigenvalue(comp.graph, seed);
  est.lambda1 = gap.lambda1;
  est.constant = 2.0 / gap.lambda1;
  est.scaled_constant = est.constant * eps * eps;

  Engine engine = make_engine(counter_hash(seed, 1));
  std::normal_distribution<double> gauss;
  std::vector<double> u(comp.vertices.size());
  for (int t = 0; t < trials; ++t) {
    for (auto& v : u) v = gauss(engine);
    est.best_trial_ratio = std::max(est.best_trial_ratio, poincare_ratio_of(comp.graph, u));
  }
  return est;
}

// ---------------------------------------------------------------------------
// Small-box scaling bound
// ---------------------------------------------------------------------------

struct ChoppedBoxBound {
  double lhs = 0.0;     // ε^d Σ_z Σ_{x in C ∩ C_z(ε)} |εχ(x) - a_ε(z)|²
  double energy = 0.0;  // ε^d Σ_z Σ_{x in C ∩ B_z(ε)} Σ_b Σ_{e open} G_b(x,e)²
  double rhs = 0.0;     // δ² energy
  std::uint64_t cells = 0;

  double ratio() const { return rhs > 0.0 ? lhs / rhs : 0.0; }
};

/// Chops [-1,1]^d into cells C_z of side δ centred at z in δZ^d, |z| <= 1 (half-open,
/// so each vertex falls in exactly one cell), and compares the within-cell spread of
/// εχ with the gradient energy on the enlarged boxes B_z of side Mδ.
inline ChoppedBoxBound chopped_box_bound(const CorrectorField& chi, std::span<const DirectionField> fields,
                                         double eps, double delta, int M) {
  const auto& spec = chi.spec;
  const int d = spec.dimension;
  require(static_cast<int>(fields.size()) == d, "chopped_box_bound needs one field per direction");
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
  require(M >= 1 && M * delta <= 2.0, "M must be >= 1 with M delta <= 2");
  require(eps > 0.0, "eps must be positive");
  require((1.0 + M * delta / 2.0) / eps <= spec.side / 2.0, "enlarged boxes exceed the torus at this eps");

  const int half_cells = static_cast<int>(std::floor(1.0 / delta + 1e-9));
  const int per_axis = 2 * half_cells + 1;
  std::size_t cell_count = 1;
  for (int k = 0; k < d; ++k) cell_count *= static_cast<std::size_t>(per_axis);

  auto cell_flat = [&](const std::vector<int>& c) {
    std::size_t flat = 0;
    for (int k = d - 1; k >= 0; --k) flat = flat * per_axis + static_cast<std::size_t>(c[k] + half_cells);
    return flat;
  };

  std::vector<double> sums(cell_count * static_cast<std::size_t>(d), 0.0);
  std::vector<std::uint64_t> counts(cell_count, 0);
  std::vector<int> cell_of(chi.size(), -1);
  std::vector<double> energy_of(chi.size(), 0.0);
  std::vector<std::vector<long long>> offsets(chi.size());

  std::vector<int> c(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < chi.size(); ++i) {
    const Vertex x = chi.vertices[i];
    offsets[i] = spec.centered_offset(x, chi.root);
    double energy = 0.0;
    for (int j = 0; j < spec.direction_count(); ++j) {
      const auto e = Direction::from_index(j);
      for (int b = 0; b < d; ++b) {
        const double g = fields[static_cast<std::size_t>(b)](x, e);
        energy += g * g;
      }
    }
    energy_of[i] = energy;
    if (static_cast<double>(detail::sup_norm(offsets[i])) > 1.0 / eps) continue;
    for (int k = 0; k < d; ++k) c[k] = static_cast<int>(std::floor(eps * offsets[i][k] / delta + 0.5));
    bool ok = true;
    for (int k = 0; k < d; ++k) ok = ok && std::abs(c[k]) <= half_cells;
    if (!ok) continue;
    const auto flat = cell_flat(c);
    cell_of[i] = static_cast<int>(flat);
    ++counts[flat];
    for (int b = 0; b < d; ++b) sums[flat * d + b] += eps * chi.at(i, b);
  }

  ChoppedBoxBound out;
  for (std::size_t i = 0; i < chi.size(); ++i) {
    if (cell_of[i] < 0) continue;
    const auto flat = static_cast<std::size_t>(cell_of[i]);
    for (int b = 0; b < d; ++b) {
      const double dev = eps * chi.at(i, b) - sums[flat * d + b] / static_cast<double>(counts[flat]);
      out.lhs += dev * dev;
    }
  }

  // Each vertex contributes its energy once per enlarged box B_z containing it.
  const double reach = M * delta / 2.0;
  for (std::size_t i = 0; i < chi.size(); ++i) {
    if (energy_of[i] == 0.0) continue;
    std::vector<int> lo(static_cast<std::size_t>(d)), hi(static_cast<std::size_t>(d));
    bool any = true;
    for (int k = 0; k < d; ++k) {
      const double pos = eps * offsets[i][k];
      lo[k] = std::max(-half_cells, static_cast<int>(std::ceil((pos - reach) / delta - 1e-12)));
      hi[k] = std::min(half_cells, static_cast<int>(std::floor((pos + reach) / delta + 1e-12)));
      any = any && lo[k] <= hi[k];
    }
    if (!any) continue;
    std::uint64_t boxes = 1;
    for (int k = 0; k < d; ++k) boxes *= static_cast<std::uint64_t>(hi[k] - lo[k] + 1);
    out.energy += static_cast<double>(boxes) * energy_of[i];
  }

  for (auto n : counts) out.cells += n > 0 ? 1 : 0;
  const double weight = std::pow(eps, d);
  out.lhs *= weight;
  out.energy *= weight;
  out.rhs = delta * delta * out.energy;
  return out;
}

// ---------------------------------------------------------------------------
// Heat kernel and Gaussianity
// ---------------------------------------------------------------------------

struct HeatKernelEntry {
  double t = 0.0;
  std::uint64_t returns = 0;
  std::uint64_t walks = 0;
  double probability = 0.0;
  stats::Interval wilson;
};

struct HeatKernelReport {
  std::vector<HeatKernelEntry> entries;
  stats::LinearFit fit;  // log P vs log t over entries with t > 0 and returns > 0
  bool fitted = false;
};

/// Monte-Carlo P_x0[X(t) = x0] (return to the start in Z^d, unwrapped), walk i seeded
/// with seed + i, and a weighted fit of log P against log t.
inline HeatKernelReport heat_kernel_return(const WalkEnvironment& env, Vertex x0, std::vector<double> t_list,
                                           std::uint64_t walks, std::uint64_t seed, unsigned threads = 1) {
  require(env.clusters->in_largest(x0), "heat kernel start must lie in the largest cluster");
  require(walks >= 1000, "heat kernel estimate needs at least 1000 walks");
  require(!t_list.empty(), "heat kernel needs at least one time");
  for (double t : t_list) require(t >= 0.0, "heat kernel times must be >= 0");
  std::sort(t_list.begin(), t_list.end());
  const int d = env.dimension();
  const std::size_t nt = t_list.size();

  std::vector<std::uint8_t> returned(walks * nt, 0);
  parallel_for_index(walks, threads, [&](std::uint64_t i) {
    Walker walker(env, x0, seed + i);
    for (std::size_t j = 0; j < nt; ++j) {
      walker.advance_to(t_list[j]);
      bool home = true;
      for (int k = 0; k < d; ++k) home = home && walker.displacement()[static_cast<std::size_t>(k)] == 0;
      returned[i * nt + j] = home ? 1 : 0;
    }
  });

  HeatKernelReport report;
  std::vector<double> lx, ly, w;
  for (std::size_t j = 0; j < nt; ++j) {
    HeatKernelEntry entry;
    entry.t = t_list[j];
    entry.walks = walks;
    for (std::uint64_t i = 0; i < walks; ++i) entry.returns += returned[i * nt + j];
    entry.probability = static_cast<double>(entry.returns) / static_cast<double>(walks);
    entry.wilson = stats::wilson_interval(entry.returns, walks);
    if (entry.t > 0.0 && entry.returns > 0 && entry.returns < walks) {
      lx.push_back(std::log(entry.t));
      ly.push_back(std::log(entry.probability));
      // var(log p̂) ≈ (1 - p) / (N p)
      w.push_back(static_cast<double>(entry.returns) / (1.0 - entry.probability));
    }
    report.entries.push_back(entry);
  }
  if (lx.size() >= 2) {
    report.fit = stats::weighted_linear_fit(lx, ly, w);
    report.fitted = true;
  }
  return report;
}

/// KS test of X^ε(t)·b against a normal law with the sample's own mean and variance.
inline stats::KsResult gaussianity_test(const EndpointSample& sample, int axis) {
  require(sample.size() >= 1000, "gaussianity test needs at least 1000 endpoints");
  require(axis >= 0 && axis < sample.dimension, "direction axis out of range");
  std::vector<double> column(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) column[i] = sample.at(i, axis);
  return stats::ks_standard_normal(column);
}

}  // namespace percohom
