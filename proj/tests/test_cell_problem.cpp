#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "percohom/cell_problem.hpp"

using namespace percohom;

namespace {

struct Solved {
  BondConfiguration config;
  ClusterDecomposition clusters;
  ClusterGraph cluster;
  std::vector<CellSolution> solutions;

  Solved(LatticeSpec s, double p, std::uint64_t seed, SolverOptions opts = {})
      : config(sample_bonds(s, p, seed)),
        clusters(decompose_clusters(config)),
        cluster(build_largest_cluster_graph(config, clusters)),
        solutions(solve_all_directions(cluster, opts)) {}
};

std::vector<double> random_vertex_function(const LatticeSpec& s, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> u(s.vertex_count());
  for (auto& v : u) v = g(rng);
  return u;
}

DirectedEdgeField random_directed_field(const LatticeSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> g(-1.0, 1.0);
  DirectedEdgeField f(s);
  for (Vertex x = 0; x < s.vertex_count(); ++x)
    for (int i = 0; i < s.direction_count(); ++i) f.set(x, Direction::from_index(i), g(rng));
  return f;
}

DirectionField random_direction_field(const LatticeSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> g(-1.0, 1.0);
  return DirectionField::from_function(s, 0, [&](Vertex, Direction) { return g(rng); });
}

double rel_gap(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

// ---------------------------------------------------------------- fields

TEST(HatField, ValuesAndAntisymmetry) {
  const auto h = hat_field(1);
  EXPECT_EQ(h(0, Direction::positive(1)), 1.0);
  EXPECT_EQ(h(0, Direction::negative(1)), -1.0);
  EXPECT_EQ(h(0, Direction::positive(0)), 0.0);
  EXPECT_EQ(h(0, Direction::negative(2)), 0.0);
  const LatticeSpec s{3, 4};
  for (Vertex x = 0; x < s.vertex_count(); ++x)
    for (int i = 0; i < 6; ++i) {
      const auto e = Direction::from_index(i);
      EXPECT_EQ(h(x, e), -h(s.neighbor(x, e), e.opposite()));
    }
}

TEST(HatField, DivergenceIsTwiceMeanProjection) {
  const auto c = sample_bonds(LatticeSpec{2, 8}, 0.6, 3);
  const auto& s = c.spec();
  for (int b = 0; b < 2; ++b) {
    for (Vertex x = 0; x < s.vertex_count(); ++x) {
      const auto hops = oracle::hops(c, x);
      if (hops.empty()) {
        EXPECT_THROW(divergence(c, hat_field(b), x), ValidationError);
        continue;
      }
      double sum = 0.0;
      for (const auto& h : hops) sum += h.axis == b ? h.sign : 0;
      EXPECT_DOUBLE_EQ(divergence(c, hat_field(b), x), 2.0 * sum / static_cast<double>(hops.size()));
    }
  }
}

TEST(DirectionField, StorageIsAntisymmetric) {
  const LatticeSpec s{2, 6};
  DirectionField f(s, 0);
  f.set(7, Direction::negative(1), 2.5);
  EXPECT_EQ(f(7, Direction::negative(1)), 2.5);
  EXPECT_EQ(f(s.neighbor(7, Direction::negative(1)), Direction::positive(1)), -2.5);
}

TEST(Gradient, ConstantLinearAndRandom) {
  const LatticeSpec s{2, 4};
  const auto full = sample_bonds(s, 1.0, 1);
  std::vector<double> constant(s.vertex_count(), 3.25);
  std::vector<double> linear(s.vertex_count());
  for (Vertex x = 0; x < s.vertex_count(); ++x) linear[x] = s.coordinate(x, 1);
  for (Vertex x = 0; x < s.vertex_count(); ++x) {
    for (int i = 0; i < 4; ++i) {
      const auto e = Direction::from_index(i);
      EXPECT_EQ(gradient(full, constant, x, e), 0.0);
      const int c = s.coordinate(x, e.axis());
      const bool wraps = (e.is_positive() && c == s.side - 1) || (!e.is_positive() && c == 0);
      if (!wraps) EXPECT_EQ(gradient(full, linear, x, e), e.component(1));
    }
  }

  const auto c = sample_bonds(s, 0.5, 17);
  std::mt19937_64 rng(2);
  const auto u = random_vertex_function(s, rng);
  for (Vertex x = 0; x < s.vertex_count(); ++x) {
    for (const auto& h : oracle::hops(c, x))
      EXPECT_EQ(gradient(c, u, x, Direction(h.axis, h.sign)), u[h.to] - u[x]);
    for (int i = 0; i < 4; ++i) {
      const auto e = Direction::from_index(i);
      if (!c.is_open(x, e)) EXPECT_THROW(gradient(c, u, x, e), ValidationError);
    }
  }
}

TEST(Divergence, ZeroFieldAndSingleEdge) {
  const auto c = sample_bonds(LatticeSpec{2, 6}, 1.0, 1);
  const auto& s = c.spec();
  DirectionField zero(s, 0);
  for (Vertex x = 0; x < s.vertex_count(); ++x) EXPECT_EQ(divergence(c, zero, x), 0.0);

  DirectionField one(s, 0);
  const Vertex x = 9;
  const auto e = Direction::positive(1);
  one.set(x, e, 0.75);
  EXPECT_DOUBLE_EQ(divergence(c, one, x), 2.0 * 0.75 / 4.0);
  EXPECT_DOUBLE_EQ(divergence(c, one, s.neighbor(x, e)), -2.0 * 0.75 / 4.0);
}

TEST(Divergence, FiniteVolumeIntegrationByPartsOnRandomConfigs) {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = trial % 2 == 0 ? 2 : 3;
    const int side = d == 2 ? 4 + 2 * (trial % 7) : 4 + 2 * (trial % 3);
    const auto c = sample_bonds(LatticeSpec{d, side}, 0.5 + 0.01 * (trial % 40), rng());
    const auto cl = decompose_clusters(c);
    const auto cluster = build_largest_cluster_graph(c, cl);
    const auto w = random_vertex_function(c.spec(), rng);
    {
      const auto v = random_directed_field(c.spec(), rng);
      const auto [lhs, rhs] = divergence_ibp_sides(c, cluster, v, w);
      worst = std::max(worst, rel_gap(lhs, rhs));
    }
    {
      const auto v = random_direction_field(c.spec(), rng);
      const auto [lhs, rhs] = divergence_ibp_sides(c, cluster, v, w);
      worst = std::max(worst, rel_gap(lhs, rhs));
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(TwoScale, IntegrationByPartsIsExact) {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = trial % 2 == 0 ? 2 : 3;
    const int side = d == 2 ? 16 : 12;
    const double eps = d == 2 ? 1.0 / 6.0 : 1.0 / 4.0;
    const auto c = sample_bonds(LatticeSpec{d, side}, 0.6, rng());
    const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
    const auto u = random_directed_field(c.spec(), rng);
    std::uniform_real_distribution<double> centre(-0.2, 0.2);
    std::vector<double> z0(static_cast<std::size_t>(d));
    for (auto& z : z0) z = centre(rng);
    const TestFunction phi{[z0](std::span<const double> z) {
                             double v = 1.0;
                             for (std::size_t k = 0; k < z.size(); ++k) {
                               const double r = (z[k] - z0[k]) / 0.6;
                               v *= std::abs(r) < 1.0 ? std::exp(-1.0 / (1.0 - r * r)) : 0.0;
                             }
                             return v;
                           },
                           0.8};
    const auto sides = two_scale_ibp_check(c, cluster, u, phi, eps);
    worst = std::max(worst, rel_gap(sides.lhs, sides.rhs));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(TwoScale, DegenerateCases) {
  const auto c = sample_bonds(LatticeSpec{2, 32}, 0.7, 5);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  const TestFunction zero{[](std::span<const double>) { return 0.0; }, 0.5};
  std::mt19937_64 rng(1);
  const auto u = random_directed_field(c.spec(), rng);
  const auto z = two_scale_ibp_check(c, cluster, u, zero, 1.0 / 16);
  EXPECT_EQ(z.lhs, 0.0);
  EXPECT_EQ(z.rhs, 0.0);

  const TestFunction bump{[](std::span<const double> x) {
                            const double r2 = x[0] * x[0] + x[1] * x[1];
                            return r2 < 0.25 ? std::exp(-1.0 / (0.25 - r2)) : 0.0;
                          },
                          0.5};
  const DirectionField scaled = DirectionField::from_function(
      c.spec(), 0, [](Vertex, Direction e) { return 1.5 * e.component(0); });
  const auto s = two_scale_ibp_check(c, cluster, scaled, bump, 1.0 / 16);
  EXPECT_LE(std::abs(s.lhs - s.rhs), 1e-12 * (std::abs(s.lhs) + std::abs(s.rhs)));

  EXPECT_NO_THROW(two_scale_ibp_check(c, cluster, u, bump, 1.0 / 2));
  EXPECT_THROW(two_scale_ibp_check(c, cluster, u, bump, 1.0 / 32), ValidationError);  // 16 + 1 hops reach the seam
  const TestFunction wide{[](std::span<const double>) { return 1.0; }, 1.0};
  EXPECT_THROW(two_scale_ibp_check(c, cluster, u, wide, 1.0 / 8), ValidationError);
}

// ---------------------------------------------------------------- solver

TEST(CellProblem, FullLatticeIsAlreadySolenoidal) {
  for (int d : {2, 3}) {
    const Solved s(LatticeSpec{d, 6}, 1.0, 1);
    for (const auto& sol : s.solutions) {
      for (double u : sol.potential) EXPECT_EQ(u, 0.0);
      for (double g : sol.field.edge_values()) EXPECT_EQ(g, 0.0);
      // E(0) counts (e·b)² = 1 twice per undirected b-edge.
      EXPECT_EQ(cell_energy(s.cluster, sol.axis, sol.potential), 2.0 * static_cast<double>(s.config.spec().vertex_count()));
    }
  }
}

TEST(CellProblem, MatchesDenseOracleOnFourByFour) {
  const Solved s(LatticeSpec{2, 4}, 0.6, 31);
  const auto ref_vertices = oracle::largest_cluster(s.config);
  ASSERT_EQ(ref_vertices, s.cluster.vertices);
  for (int b = 0; b < 2; ++b) {
    const auto ref = oracle::dense_cell_potential(s.config, ref_vertices, b);
    for (std::size_t i = 0; i < ref_vertices.size(); ++i)
      EXPECT_NEAR(s.solutions[static_cast<std::size_t>(b)].potential[i], ref(static_cast<Eigen::Index>(i)), 1e-8);
  }
}

TEST(CellProblem, MatchesDenseOracleOnTwentyClusters) {
  std::mt19937_64 rng(7);
  int done = 0;
  for (int attempt = 0; done < 20 && attempt < 200; ++attempt) {
    const int d = attempt % 3 == 2 ? 3 : 2;
    const int side = d == 2 ? 14 : 6;
    const auto c = sample_bonds(LatticeSpec{d, side}, d == 2 ? 0.55 : 0.35, rng());
    const auto cl = decompose_clusters(c);
    if (cl.largest_size() > 200 || cl.largest_size() < 10) continue;
    const auto cluster = build_largest_cluster_graph(c, cl);
    const auto ref_vertices = oracle::largest_cluster(c);
    ASSERT_EQ(ref_vertices, cluster.vertices);
    for (int b = 0; b < d; ++b) {
      const auto sol = solve_cell_problem(cluster, b);
      const auto ref = oracle::dense_cell_potential(c, ref_vertices, b);
      double err = 0.0;
      for (std::size_t i = 0; i < ref_vertices.size(); ++i)
        err = std::max(err, std::abs(sol.potential[i] - ref(static_cast<Eigen::Index>(i))));
      EXPECT_LE(err, 1e-8) << "attempt " << attempt << " b " << b;
    }
    ++done;
  }
  EXPECT_EQ(done, 20);
}

TEST(CellProblem, ProjectionReducesEnergyAndIsOrthogonal) {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Solved s(LatticeSpec{2, 24}, 0.65, seed);
    for (const auto& sol : s.solutions) {
      const std::vector<double> zero(s.cluster.size(), 0.0);
      EXPECT_LE(cell_energy(s.cluster, sol.axis, sol.potential), cell_energy(s.cluster, sol.axis, zero));
      // Σ_{directed open edges} (e·b + ∇u_b)·∇w = 0 for every w.
      const auto w = random_vertex_function(s.config.spec(), rng);
      double acc = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < s.cluster.size(); ++i) {
        const Vertex x = s.cluster.vertices[i];
        for (auto k = s.cluster.graph.offsets[i]; k < s.cluster.graph.offsets[i + 1]; ++k) {
          const auto e = Direction::from_index(s.cluster.edge_directions[k]);
          const double term = (e.component(sol.axis) + sol.field(x, e)) * gradient(s.config, w, x, e);
          acc += term;
          scale += std::abs(term);
        }
      }
      EXPECT_LE(std::abs(acc), 1e-8 * scale);
    }
  }
}

TEST(CellProblem, DivergenceFreeAfterProjection) {
  const Solved s(LatticeSpec{2, 32}, 0.7, 8);
  for (const auto& sol : s.solutions) {
    const int b = sol.axis;
    double worst = 0.0;
    for (const Vertex x : s.cluster.vertices) {
      const auto flux = [&](Vertex y, Direction e) { return e.component(b) + sol.field(y, e); };
      worst = std::max(worst, std::abs(divergence(s.config, flux, x)));
    }
    EXPECT_LE(worst, 1e-8);
  }
}

TEST(CellProblem, GradientSumIsExactlyZeroAndAntisymmetric) {
  const Solved s(LatticeSpec{3, 10}, 0.5, 4);
  for (const auto& sol : s.solutions) {
    EXPECT_EQ(directed_edge_sum(sol.field, s.cluster), 0.0);
    for (std::size_t i = 0; i < s.cluster.size(); ++i) {
      const Vertex x = s.cluster.vertices[i];
      for (auto k = s.cluster.graph.offsets[i]; k < s.cluster.graph.offsets[i + 1]; ++k) {
        const auto e = Direction::from_index(s.cluster.edge_directions[k]);
        EXPECT_EQ(sol.field(x, e), -sol.field(s.config.spec().neighbor(x, e), e.opposite()));
      }
    }
  }
}

TEST(CellProblem, GaugeInvariance) {
  const Solved s(LatticeSpec{2, 16}, 0.7, 2);
  const auto& sol = s.solutions[0];
  std::vector<double> shifted(s.config.spec().vertex_count(), 0.0), plain(s.config.spec().vertex_count(), 0.0);
  for (std::size_t i = 0; i < s.cluster.size(); ++i) {
    plain[s.cluster.vertices[i]] = sol.potential[i];
    shifted[s.cluster.vertices[i]] = sol.potential[i] + 123.0;
  }
  for (std::size_t i = 0; i < s.cluster.size(); ++i) {
    const Vertex x = s.cluster.vertices[i];
    for (auto k = s.cluster.graph.offsets[i]; k < s.cluster.graph.offsets[i + 1]; ++k) {
      const auto e = Direction::from_index(s.cluster.edge_directions[k]);
      EXPECT_NEAR(gradient(s.config, shifted, x, e), gradient(s.config, plain, x, e), 1e-12);
      EXPECT_NEAR(gradient(s.config, plain, x, e), sol.field(x, e), 1e-15);
    }
  }
}

TEST(CellProblem, NonConvergenceCarriesResidual) {
  const auto c = sample_bonds(LatticeSpec{2, 32}, 0.7, 3);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  SolverOptions opts;
  opts.max_iterations = 2;
  try {
    solve_cell_problem(cluster, 0, opts);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), opts.tolerance);
    EXPECT_EQ(e.iterations(), 2);
  }
  SolverOptions bad;
  bad.tolerance = 1.5;
  EXPECT_THROW(solve_cell_problem(cluster, 0, bad), ValidationError);
  EXPECT_EQ(SolverOptions{}.effective_max_iterations(LatticeSpec{2, 64}), 20 * 64 * 2);
}

TEST(CellProblem, PreconditionerChoiceAgrees) {
  const auto c = sample_bonds(LatticeSpec{2, 24}, 0.65, 3);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  SolverOptions plain;
  plain.preconditioner = Preconditioner::none;
  const auto a = solve_cell_problem(cluster, 1);
  const auto b = solve_cell_problem(cluster, 1, plain);
  for (std::size_t i = 0; i < cluster.size(); ++i) EXPECT_NEAR(a.potential[i], b.potential[i], 1e-8);
}

TEST(CellProblem, RejectsTrivialCluster) {
  const auto c = sample_bonds(LatticeSpec{2, 8}, 0.0, 1);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  EXPECT_THROW(solve_cell_problem(cluster, 0), ValidationError);
}

// ---------------------------------------------------------------- corrector

TEST(Corrector, FullLatticeIsZero) {
  const Solved s(LatticeSpec{2, 8}, 1.0, 1);
  const auto chi = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions));
  for (double v : chi.values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(verify_harmonic(chi, s.cluster), 0.0);
}

TEST(Corrector, BreadthAndDepthFirstTreesAgree) {
  const Solved s(LatticeSpec{2, 4}, 0.6, 31);
  const auto bfs = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions), TreeOrder::breadth_first);
  const auto dfs = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions), TreeOrder::depth_first);
  for (std::size_t i = 0; i < bfs.values.size(); ++i) EXPECT_NEAR(bfs.values[i], dfs.values[i], 1e-8);

  const Solved big(LatticeSpec{2, 48}, 0.7, 6);
  const auto b2 = integrate_corrector(big.cluster, std::span<const CellSolution>(big.solutions), TreeOrder::breadth_first);
  const auto d2 = integrate_corrector(big.cluster, std::span<const CellSolution>(big.solutions), TreeOrder::depth_first);
  for (std::size_t i = 0; i < b2.values.size(); ++i) EXPECT_NEAR(b2.values[i], d2.values[i], 1e-8);
}

TEST(Corrector, SingleEdgeCluster) {
  const LatticeSpec s{2, 8};
  std::vector<std::uint64_t> words(BondConfiguration::word_count(s), 0);
  words[0] |= 1ULL << 10;  // edge (10, +e1)
  const BondConfiguration c(s, 0.5, 0, words);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  ASSERT_EQ(cluster.size(), 2u);
  const auto sols = solve_all_directions(cluster);
  const auto chi = integrate_corrector(cluster, std::span<const CellSolution>(sols));
  const double g = sols[0].field(10, Direction::positive(0));
  EXPECT_NEAR(g, -1.0, 1e-12);  // the lone edge carries no net flux
  EXPECT_NEAR(chi.at(1, 0) - chi.at(0, 0), g, 1e-15);
  EXPECT_EQ(chi.at(0, 0), 0.0);
  EXPECT_EQ(chi.root, 10u);
}

TEST(Corrector, AnchoredAtSmallestVertexAndIncrementsMatchField) {
  const Solved s(LatticeSpec{3, 8}, 0.5, 2);
  const auto chi = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions));
  EXPECT_EQ(chi.root, s.cluster.vertices.front());
  for (int b = 0; b < 3; ++b) EXPECT_EQ(chi.at(0, b), 0.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < s.cluster.size(); ++i) {
    for (auto k = s.cluster.graph.offsets[i]; k < s.cluster.graph.offsets[i + 1]; ++k) {
      const auto e = Direction::from_index(s.cluster.edge_directions[k]);
      for (int b = 0; b < 3; ++b) {
        const double inc = chi.at(s.cluster.graph.neighbors[k], b) - chi.at(i, b);
        worst = std::max(worst, std::abs(inc - s.solutions[static_cast<std::size_t>(b)].field(s.cluster.vertices[i], e)));
      }
    }
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(Cocycle, GradientFieldsAndPlaquettes) {
  const auto c = sample_bonds(LatticeSpec{2, 16}, 0.7, 9);
  const auto cluster = build_largest_cluster_graph(c, decompose_clusters(c));
  std::mt19937_64 rng(4);
  const auto u = random_vertex_function(c.spec(), rng);
  const auto grad = DirectionField::from_function(c.spec(), 0, [&](Vertex x, Direction e) {
    return u[c.spec().neighbor(x, e)] - u[x];
  });
  EXPECT_LE(verify_cocycle(grad, cluster), 1e-12);

  const auto full = sample_bonds(LatticeSpec{2, 4}, 1.0, 1);
  const auto fc = build_largest_cluster_graph(full, decompose_clusters(full));
  // e·b is closed on every plaquette but winds once around the torus: the loop sum is L.
  EXPECT_EQ(verify_cocycle(hat_field(0), fc), 4.0);

  // A field with a vortex around one plaquette is detected.
  DirectionField vortex(c.spec(), 0);
  for (Vertex x = 0; x < c.spec().vertex_count(); ++x)
    if (c.is_open(x, Direction::positive(0))) vortex.set(x, Direction::positive(0), 1.0);
  EXPECT_GT(verify_cocycle(vortex, cluster), 0.5);
}

TEST(Cocycle, SolvedFieldsAtDefaultTolerance) {
  const Solved s(LatticeSpec{2, 16}, 0.7, 1);
  for (const auto& sol : s.solutions) EXPECT_LE(verify_cocycle(sol.field, s.cluster), 1e-8);
}

TEST(Harmonic, DenseOracleCorrectorOnFourByFour) {
  const Solved s(LatticeSpec{2, 4}, 0.6, 31);
  std::vector<DirectionField> fields;
  for (int b = 0; b < 2; ++b) {
    const auto ref = oracle::dense_cell_potential(s.config, s.cluster.vertices, b);
    DirectionField f(s.config.spec(), b);
    for (std::size_t i = 0; i < s.cluster.size(); ++i) {
      const Vertex x = s.cluster.vertices[i];
      for (const auto& h : oracle::hops(s.config, x)) {
        if (h.sign < 0) continue;
        const auto j = static_cast<std::size_t>(s.cluster.local_index[h.to]);
        f.set(x, Direction(h.axis, 1), ref(static_cast<Eigen::Index>(j)) - ref(static_cast<Eigen::Index>(i)));
      }
    }
    fields.push_back(std::move(f));
  }
  const auto chi = integrate_corrector(s.cluster, std::span<const DirectionField>(fields));
  EXPECT_LE(verify_harmonic(chi, s.cluster), 1e-10);
}

TEST(Harmonic, PipelineScaleCertificate) {
  const Solved s(LatticeSpec{2, 64}, 0.7, 1);
  const auto chi = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions));
  EXPECT_LE(verify_harmonic(chi, s.cluster), 1e-8);
}

// ---------------------------------------------------------------- dumps

TEST(FieldFormats, CorrectorAndGradientRoundTrip) {
  const Solved s(LatticeSpec{2, 12}, 0.7, 3);
  const auto chi = integrate_corrector(s.cluster, std::span<const CellSolution>(s.solutions));
  std::stringstream buf;
  write_corrector(buf, chi);
  const auto bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "GCHI");
  EXPECT_EQ(bytes.size(), 4u + 2 + 1 + 4 + 8 + chi.size() * (8 + 2 * 8));
  std::istringstream in(bytes);
  const auto back = read_corrector(in);
  EXPECT_EQ(back.vertices, chi.vertices);
  EXPECT_EQ(back.values, chi.values);
  EXPECT_EQ(back.root, chi.root);

  std::stringstream fbuf;
  write_direction_field(fbuf, s.solutions[1].field, s.cluster);
  EXPECT_EQ(fbuf.str().substr(0, 4), "GFLD");
  std::istringstream fin(fbuf.str());
  const auto field = read_direction_field(fin);
  EXPECT_EQ(field.axis(), 1);
  const auto a = field.edge_values();
  const auto b = s.solutions[1].field.edge_values();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  std::istringstream truncated(bytes.substr(0, 20));
  EXPECT_THROW(read_corrector(truncated), ValidationError);
}
