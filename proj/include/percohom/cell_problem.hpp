#pragma once

#include <algorithm>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "percohom/binary_io.hpp"
#include "percohom/errors.hpp"
#include "percohom/lattice.hpp"
#include "percohom/solver.hpp"

namespace percohom {

inline constexpr std::int64_t kNotInCluster = -1;

/// One cluster of ω with compact local numbering (ascending global index) and its
/// open-edge adjacency. Local id 0 is the root, the smallest-index cluster vertex.
struct ClusterGraph {
  LatticeSpec spec;
  std::uint32_t cluster_id = 0;
  std::vector<Vertex> vertices;
  std::vector<std::int64_t> local_index;  // size L^d, kNotInCluster outside
  CsrGraph graph;
  std::vector<std::uint8_t> edge_directions;  // parallel to graph.neighbors

  std::size_t size() const { return vertices.size(); }
  Vertex root() const { return vertices.front(); }
  bool contains(Vertex v) const { return local_index[v] != kNotInCluster; }
  int degree(std::size_t local) const { return graph.degree(local); }
};

inline ClusterGraph build_cluster_graph(const BondConfiguration& config, const ClusterDecomposition& clusters,
                                        std::uint32_t cluster_id) {
  require(cluster_id < clusters.cluster_count(), "cluster id out of range");
  const auto& spec = config.spec();
  ClusterGraph g;
  g.spec = spec;
  g.cluster_id = cluster_id;
  g.vertices = clusters.vertices_of(cluster_id);
  require(!g.vertices.empty(), "empty cluster");
  g.local_index.assign(static_cast<std::size_t>(spec.vertex_count()), kNotInCluster);
  for (std::size_t i = 0; i < g.vertices.size(); ++i) g.local_index[g.vertices[i]] = static_cast<std::int64_t>(i);
  g.graph.offsets.assign(1, 0);
  for (const Vertex v : g.vertices) {
    for (int i = 0; i < spec.direction_count(); ++i) {
      const auto e = Direction::from_index(i);
      if (!config.is_open(v, e)) continue;
      g.graph.neighbors.push_back(static_cast<std::uint32_t>(g.local_index[spec.neighbor(v, e)]));
      g.edge_directions.push_back(static_cast<std::uint8_t>(i));
    }
    g.graph.offsets.push_back(g.graph.neighbors.size());
  }
  return g;
}

/// The proxy for the infinite cluster: the largest cluster of the torus.
inline ClusterGraph build_largest_cluster_graph(const BondConfiguration& config,
                                                const ClusterDecomposition& clusters) {
  return build_cluster_graph(config, clusters, clusters.largest_cluster_id);
}

/// ∇u(x, e) = u(x+e) - u(x) on an open edge. `u` is indexed by global vertex.
inline double gradient(const BondConfiguration& config, std::span<const double> u, Vertex x, Direction e) {
  if (!config.is_open(x, e)) throw ValidationError("gradient evaluated on a closed edge");
  return u[config.spec().neighbor(x, e)] - u[x];
}

/// Antisymmetric field on undirected edges: value(x, e) = -value(x+e, -e). Stored once
/// per undirected edge as value(tail, +e_k) at edge index k L^d + tail.
class DirectionField {
 public:
  DirectionField() = default;
  DirectionField(const LatticeSpec& spec, int axis)
      : spec_(spec), axis_(axis), values_(static_cast<std::size_t>(spec.edge_count()), 0.0) {}

  template <typename Fn>
  static DirectionField from_function(const LatticeSpec& spec, int axis, Fn&& fn) {
    DirectionField f(spec, axis);
    for (Vertex v = 0; v < spec.vertex_count(); ++v)
      for (int k = 0; k < spec.dimension; ++k) f.set(v, Direction::positive(k), fn(v, Direction::positive(k)));
    return f;
  }

  const LatticeSpec& spec() const { return spec_; }
  int axis() const { return axis_; }
  std::span<const double> edge_values() const { return values_; }

  double operator()(Vertex x, Direction e) const {
    const double v = values_[spec_.edge_index(x, e)];
    return e.is_positive() ? v : -v;
  }

  void set(Vertex x, Direction e, double value) {
    values_[spec_.edge_index(x, e)] = e.is_positive() ? value : -value;
  }

 private:
  LatticeSpec spec_{};
  int axis_ = 0;
  std::vector<double> values_;
};

/// Arbitrary (not necessarily antisymmetric) field u(x, e): 2d values per vertex.
class DirectedEdgeField {
 public:
  DirectedEdgeField() = default;
  explicit DirectedEdgeField(const LatticeSpec& spec)
      : spec_(spec), values_(static_cast<std::size_t>(spec.vertex_count()) * spec.direction_count(), 0.0) {}

  const LatticeSpec& spec() const { return spec_; }
  double operator()(Vertex x, Direction e) const { return values_[slot(x, e)]; }
  void set(Vertex x, Direction e, double value) { values_[slot(x, e)] = value; }

 private:
  std::size_t slot(Vertex x, Direction e) const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(spec_.direction_count()) +
           static_cast<std::size_t>(e.index());
  }
  LatticeSpec spec_{};
  std::vector<double> values_;
};

/// b̂(x, e) = 1_{e=b} - 1_{e=-b} = e·b.
struct HatField {
  int axis = 0;
  double operator()(Vertex, Direction e) const { return static_cast<double>(e.component(axis)); }
};

inline HatField hat_field(int axis) { return HatField{axis}; }

template <typename Field>
concept EdgeField = requires(const Field& f, Vertex x, Direction e) {
  { f(x, e) } -> std::convertible_to<double>;
};

/// ∇*v(x) = (1/n(x)) Σ_{e open at x} (v(x, e) - v(x+e, -e)).
template <EdgeField Field>
double divergence(const BondConfiguration& config, const Field& v, Vertex x) {
  const auto& spec = config.spec();
  int n = 0;
  double acc = 0.0;
  for (int i = 0; i < spec.direction_count(); ++i) {
    const auto e = Direction::from_index(i);
    if (!config.is_open(x, e)) continue;
    ++n;
    acc += v(x, e) - v(spec.neighbor(x, e), e.opposite());
  }
  if (n == 0) throw ValidationError("divergence undefined at an isolated vertex");
  return acc / n;
}

/// Both sides of the finite-volume integration by parts over a cluster:
///   Σ_{x, e open} v(x,e) ∇w(x,e)  =  -Σ_x n(x) w(x) ∇*v(x).
/// `w` is indexed by global vertex.
template <EdgeField Field>
std::pair<double, double> divergence_ibp_sides(const BondConfiguration& config, const ClusterGraph& cluster,
                                               const Field& v, std::span<const double> w) {
  const auto& spec = config.spec();
  double lhs = 0.0;
  double rhs = 0.0;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const Vertex x = cluster.vertices[i];
    for (int j = 0; j < spec.direction_count(); ++j) {
      const auto e = Direction::from_index(j);
      if (config.is_open(x, e)) lhs += v(x, e) * gradient(config, w, x, e);
    }
    const int n = cluster.degree(i);
    if (n > 0) rhs -= n * w[x] * divergence(config, v, x);
  }
  return {lhs, rhs};
}

enum class Preconditioner { none, diagonal };

struct SolverOptions {
  double tolerance = 1e-10;
  long max_iterations = 0;  // 0: 20 * L^(d/2) * d
  Preconditioner preconditioner = Preconditioner::diagonal;

  long effective_max_iterations(const LatticeSpec& spec) const {
    if (max_iterations > 0) return max_iterations;
    return static_cast<long>(std::ceil(20.0 * std::pow(spec.side, spec.dimension / 2.0) * spec.dimension));
  }

  void validate() const {
    require(tolerance > 0.0 && tolerance < 1.0, "solver tolerance must lie in (0, 1)");
    require(max_iterations >= 0, "solver max iterations must be >= 1 (or 0 for the default)");
  }
};

struct CellSolution {
  int axis = 0;
  std::vector<double> potential;  // u_b per cluster vertex (local order), mean zero
  DirectionField field;           // G_b = ∇u_b on the cluster's open edges, 0 elsewhere
  SolveStats stats;
};

/// Right-hand side of the normal equations L u = g with g(x) = Σ_{e open} e·b.
inline std::vector<double> cell_rhs(const ClusterGraph& cluster, int axis) {
  std::vector<double> g(cluster.size(), 0.0);
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      g[i] += Direction::from_index(cluster.edge_directions[k]).component(axis);
    }
  }
  return g;
}

/// E(u) = Σ_{open directed edges (x, e) of the cluster} (e·b + u(x+e) - u(x))², u in local order.
inline double cell_energy(const ClusterGraph& cluster, int axis, std::span<const double> u) {
  double energy = 0.0;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const double eb = Direction::from_index(cluster.edge_directions[k]).component(axis);
      const double r = eb + u[cluster.graph.neighbors[k]] - u[i];
      energy += r * r;
    }
  }
  return energy;
}

/// Finite-volume projection of -b̂ onto gradients: minimize the cell energy over
/// periodic potentials on the cluster. Normal equations L u_b = g are solved by
/// mean-zero PCG; G_b = ∇u_b, so b̂ + G_b is divergence free on the cluster.
inline CellSolution solve_cell_problem(const ClusterGraph& cluster, int axis, const SolverOptions& opts = {}) {
  opts.validate();
  require(axis >= 0 && axis < cluster.spec.dimension, "direction axis out of range");
  require(cluster.size() >= 2, "cell problem needs a cluster with at least 2 vertices");
  const std::size_t n = cluster.size();
  const auto rhs = cell_rhs(cluster, axis);

  std::vector<double> inv_degree(n, 1.0);
  if (opts.preconditioner == Preconditioner::diagonal) {
    for (std::size_t i = 0; i < n; ++i) inv_degree[i] = 1.0 / cluster.degree(i);
  }
  auto apply = [&](std::span<const double> in, std::span<double> out) { apply_laplacian(cluster.graph, in, out); };
  auto precondition = [&](std::span<const double> in, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = inv_degree[i] * in[i];
  };

  CellSolution sol;
  sol.axis = axis;
  sol.potential.assign(n, 0.0);
  const long max_it = opts.effective_max_iterations(cluster.spec);
  sol.stats = solve_mean_zero_pcg(apply, precondition, rhs, sol.potential, opts.tolerance, max_it);
  if (!sol.stats.converged) {
    throw ConvergenceError("cell problem for direction " + std::to_string(axis + 1) + " did not converge",
                           sol.stats.relative_residual, sol.stats.iterations);
  }

  sol.field = DirectionField(cluster.spec, axis);
  for (std::size_t i = 0; i < n; ++i) {
    const Vertex x = cluster.vertices[i];
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const auto e = Direction::from_index(cluster.edge_directions[k]);
      if (!e.is_positive()) continue;
      sol.field.set(x, e, sol.potential[cluster.graph.neighbors[k]] - sol.potential[i]);
    }
  }
  return sol;
}

inline std::vector<CellSolution> solve_all_directions(const ClusterGraph& cluster, const SolverOptions& opts = {}) {
  std::vector<CellSolution> out;
  for (int b = 0; b < cluster.spec.dimension; ++b) out.push_back(solve_cell_problem(cluster, b, opts));
  return out;
}

/// χ: R^d per cluster vertex, χ(root) = 0, with χ(x+e)·b - χ(x)·b = G_b(x, e).
struct CorrectorField {
  LatticeSpec spec;
  std::uint32_t cluster_id = 0;
  Vertex root = 0;
  std::vector<Vertex> vertices;
  std::vector<double> values;  // row-major (local vertex, axis)

  int dimension() const { return spec.dimension; }
  std::size_t size() const { return vertices.size(); }
  double at(std::size_t local, int axis) const {
    return values[local * static_cast<std::size_t>(spec.dimension) + static_cast<std::size_t>(axis)];
  }
  double& at(std::size_t local, int axis) {
    return values[local * static_cast<std::size_t>(spec.dimension) + static_cast<std::size_t>(axis)];
  }
};

enum class TreeOrder { breadth_first, depth_first };

namespace detail {

/// Spanning tree of the cluster from local root 0: parent slot (index into the CSR
/// neighbor array, pointing from child to parent's edge) and visit order.
struct SpanningTree {
  std::vector<std::int64_t> parent_local;
  std::vector<std::uint64_t> parent_slot;  // CSR slot at the parent pointing to the child
  std::vector<std::uint32_t> order;
};

inline SpanningTree spanning_tree(const ClusterGraph& cluster, TreeOrder order) {
  const std::size_t n = cluster.size();
  SpanningTree tree;
  tree.parent_local.assign(n, -2);
  tree.parent_slot.assign(n, 0);
  tree.order.reserve(n);
  std::deque<std::uint32_t> frontier{0};
  tree.parent_local[0] = -1;
  while (!frontier.empty()) {
    std::uint32_t i;
    if (order == TreeOrder::breadth_first) {
      i = frontier.front();
      frontier.pop_front();
    } else {
      i = frontier.back();
      frontier.pop_back();
    }
    tree.order.push_back(i);
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const auto j = cluster.graph.neighbors[k];
      if (tree.parent_local[j] != -2) continue;
      tree.parent_local[j] = i;
      tree.parent_slot[j] = k;
      frontier.push_back(j);
    }
  }
  if (tree.order.size() != n) throw std::logic_error("cluster is not connected to its root");
  return tree;
}

}  // namespace detail

/// Integrates G_1..G_d along a spanning tree rooted at the smallest-index vertex.
inline CorrectorField integrate_corrector(const ClusterGraph& cluster, std::span<const DirectionField> fields,
                                          TreeOrder order = TreeOrder::breadth_first) {
  const int d = cluster.spec.dimension;
  require(static_cast<int>(fields.size()) == d, "integrate_corrector needs one field per direction");
  for (int b = 0; b < d; ++b) require(fields[b].axis() == b, "fields must be ordered by direction");
  const auto tree = detail::spanning_tree(cluster, order);

  CorrectorField chi;
  chi.spec = cluster.spec;
  chi.cluster_id = cluster.cluster_id;
  chi.root = cluster.root();
  chi.vertices = cluster.vertices;
  chi.values.assign(cluster.size() * static_cast<std::size_t>(d), 0.0);
  for (const auto i : tree.order) {
    const auto parent = tree.parent_local[i];
    if (parent < 0) continue;
    const auto slot = tree.parent_slot[i];
    const auto e = Direction::from_index(cluster.edge_directions[slot]);
    const Vertex px = cluster.vertices[static_cast<std::size_t>(parent)];
    for (int b = 0; b < d; ++b) {
      chi.at(i, b) = chi.at(static_cast<std::size_t>(parent), b) + fields[b](px, e);
    }
  }
  return chi;
}

inline CorrectorField integrate_corrector(const ClusterGraph& cluster, std::span<const CellSolution> solutions,
                                          TreeOrder order = TreeOrder::breadth_first) {
  std::vector<DirectionField> fields;
  for (const auto& s : solutions) fields.push_back(s.field);
  return integrate_corrector(cluster, std::span<const DirectionField>(fields), order);
}

/// Largest |sum of the field around a fundamental cycle| of a BFS spanning tree.
template <EdgeField Field>
double verify_cocycle(const Field& field, const ClusterGraph& cluster) {
  const auto tree = detail::spanning_tree(cluster, TreeOrder::breadth_first);
  std::vector<double> potential(cluster.size(), 0.0);
  for (const auto i : tree.order) {
    const auto parent = tree.parent_local[i];
    if (parent < 0) continue;
    const auto e = Direction::from_index(cluster.edge_directions[tree.parent_slot[i]]);
    potential[i] = potential[static_cast<std::size_t>(parent)] +
                   field(cluster.vertices[static_cast<std::size_t>(parent)], e);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const auto j = cluster.graph.neighbors[k];
      const auto e = Direction::from_index(cluster.edge_directions[k]);
      if (!e.is_positive()) continue;  // each undirected edge once
      // At most one edge joins two vertices when L >= 4.
      const bool tree_edge =
          tree.parent_local[j] == static_cast<std::int64_t>(i) || tree.parent_local[i] == static_cast<std::int64_t>(j);
      if (tree_edge) continue;
      const double cycle = potential[i] + field(cluster.vertices[i], e) - potential[j];
      worst = std::max(worst, std::abs(cycle));
    }
  }
  return worst;
}

/// max over cluster x and directions b of |L^ω(id + χ)(x)·b|.
inline double verify_harmonic(const CorrectorField& chi, const ClusterGraph& cluster) {
  const int d = chi.dimension();
  double worst = 0.0;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const int n = cluster.degree(i);
    if (n == 0) continue;
    for (int b = 0; b < d; ++b) {
      double acc = 0.0;
      for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
        const auto e = Direction::from_index(cluster.edge_directions[k]);
        acc += e.component(b) + chi.at(cluster.graph.neighbors[k], b) - chi.at(i, b);
      }
      worst = std::max(worst, std::abs(acc / n));
    }
  }
  return worst;
}

/// Σ_{x in cluster} Σ_{e open} G(x, e), accumulated pairwise over each undirected
/// edge, so an antisymmetric field sums to exactly zero.
inline double directed_edge_sum(const DirectionField& field, const ClusterGraph& cluster) {
  double acc = 0.0;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const Vertex x = cluster.vertices[i];
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const auto e = Direction::from_index(cluster.edge_directions[k]);
      if (!e.is_positive()) continue;
      const Vertex y = cluster.vertices[cluster.graph.neighbors[k]];
      acc += field(x, e) + field(y, e.opposite());
    }
  }
  return acc;
}

/// A test function on R^d supported in the open cube (-r, r)^d, r < 1.
struct TestFunction {
  std::function<double(std::span<const double>)> value;
  double support_radius = 1.0;
};

struct IbpSides {
  double lhs = 0.0;
  double rhs = 0.0;
};

/// Both sides of the two-scale integration by parts identity with
/// μ^ε = ε^d Σ_{z in cluster} n(z) δ_{εz} and ∇^ε_e φ(z) = (φ(z + εe) - φ(z)) / ε:
///   ∫ φ(z) ∇*u(z/ε) dμ^ε = -ε ∫ (1/n(z/ε)) Σ_e ω(z/ε, e) u(z/ε, e) ∇^ε_e φ(z) dμ^ε.
/// Positions are centered offsets from the cluster root.
template <EdgeField Field>
IbpSides two_scale_ibp_check(const BondConfiguration& config, const ClusterGraph& cluster, const Field& u,
                             const TestFunction& phi, double eps) {
  const auto& spec = config.spec();
  const int d = spec.dimension;
  require(eps > 0.0, "eps must be positive");
  require(phi.support_radius > 0.0 && phi.support_radius < 1.0, "test function support must lie inside (-1, 1)^d");
  require(phi.support_radius / eps + 1.0 < spec.side / 2.0,
          "test function support wraps around the torus at this eps");
  const double weight = std::pow(eps, d);

  std::vector<double> z(static_cast<std::size_t>(d)), z_shift(static_cast<std::size_t>(d));
  IbpSides sides;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    const Vertex x = cluster.vertices[i];
    const int n = cluster.degree(i);
    if (n == 0) continue;
    const auto offset = spec.centered_offset(x, cluster.root());
    for (int k = 0; k < d; ++k) z[static_cast<std::size_t>(k)] = eps * static_cast<double>(offset[k]);
    const double phi_z = phi.value(z);

    sides.lhs += weight * n * phi_z * divergence(config, u, x);

    double flux = 0.0;
    for (int j = 0; j < spec.direction_count(); ++j) {
      const auto e = Direction::from_index(j);
      if (!config.is_open(x, e)) continue;
      z_shift = z;
      z_shift[static_cast<std::size_t>(e.axis())] += eps * e.sign();
      const double grad_phi = (phi.value(z_shift) - phi_z) / eps;
      flux += u(x, e) * grad_phi;
    }
    sides.rhs += -eps * weight * n * (flux / n);
  }
  return sides;
}

// GCHI v1: "GCHI", u16 version, u8 d, u32 L, u64 cluster size, then per vertex
// u64 vertex index and d binary64 components.
// GFLD v1: "GFLD", u16 version, u8 d, u32 L, u8 axis, u64 edge count, then per
// undirected open cluster edge u64 edge index and binary64 value(tail, +e_k).
inline constexpr std::uint16_t kFieldFormatVersion = 1;

inline void write_corrector(std::ostream& out, const CorrectorField& chi) {
  binary::put_magic(out, "GCHI");
  binary::put_le<std::uint16_t>(out, kFieldFormatVersion);
  binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(chi.spec.dimension));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(chi.spec.side));
  binary::put_le<std::uint64_t>(out, chi.size());
  for (std::size_t i = 0; i < chi.size(); ++i) {
    binary::put_le<std::uint64_t>(out, chi.vertices[i]);
    for (int b = 0; b < chi.dimension(); ++b) binary::put_f64(out, chi.at(i, b));
  }
}

inline CorrectorField read_corrector(std::istream& in) {
  binary::expect_magic(in, "GCHI");
  require(binary::get_le<std::uint16_t>(in) == kFieldFormatVersion, "unsupported GCHI version");
  CorrectorField chi;
  chi.spec.dimension = binary::get_le<std::uint8_t>(in);
  chi.spec.side = static_cast<int>(binary::get_le<std::uint32_t>(in));
  chi.spec.validate();
  const auto n = binary::get_le<std::uint64_t>(in);
  require(n >= 1 && n <= chi.spec.vertex_count(), "GCHI cluster size out of range");
  chi.vertices.resize(n);
  chi.values.resize(n * static_cast<std::size_t>(chi.spec.dimension));
  for (std::size_t i = 0; i < n; ++i) {
    chi.vertices[i] = binary::get_le<std::uint64_t>(in);
    for (int b = 0; b < chi.dimension(); ++b) chi.at(i, b) = binary::get_f64(in);
  }
  chi.root = chi.vertices.front();
  return chi;
}

inline void write_direction_field(std::ostream& out, const DirectionField& field, const ClusterGraph& cluster) {
  std::vector<std::pair<EdgeIndex, double>> edges;
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    for (auto k = cluster.graph.offsets[i]; k < cluster.graph.offsets[i + 1]; ++k) {
      const auto e = Direction::from_index(cluster.edge_directions[k]);
      if (!e.is_positive()) continue;
      const Vertex x = cluster.vertices[i];
      edges.emplace_back(cluster.spec.edge_index(x, e), field(x, e));
    }
  }
  std::sort(edges.begin(), edges.end());
  binary::put_magic(out, "GFLD");
  binary::put_le<std::uint16_t>(out, kFieldFormatVersion);
  binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(cluster.spec.dimension));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cluster.spec.side));
  binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(field.axis()));
  binary::put_le<std::uint64_t>(out, edges.size());
  for (const auto& [index, value] : edges) {
    binary::put_le<std::uint64_t>(out, index);
    binary::put_f64(out, value);
  }
}

inline DirectionField read_direction_field(std::istream& in) {
  binary::expect_magic(in, "GFLD");
  require(binary::get_le<std::uint16_t>(in) == kFieldFormatVersion, "unsupported GFLD version");
  LatticeSpec spec;
  spec.dimension = binary::get_le<std::uint8_t>(in);
  spec.side = static_cast<int>(binary::get_le<std::uint32_t>(in));
  spec.validate();
  const int axis = binary::get_le<std::uint8_t>(in);
  require(axis < spec.dimension, "GFLD axis out of range");
  DirectionField field(spec, axis);
  const auto count = binary::get_le<std::uint64_t>(in);
  require(count <= spec.edge_count(), "GFLD edge count out of range");
  for (std::uint64_t j = 0; j < count; ++j) {
    const auto index = binary::get_le<std::uint64_t>(in);
    require(index < spec.edge_count(), "GFLD edge index out of range");
    const auto k = static_cast<int>(index / spec.vertex_count());
    const Vertex tail = index % spec.vertex_count();
    field.set(tail, Direction::positive(k), binary::get_f64(in));
  }
  return field;
}

}  // namespace percohom
