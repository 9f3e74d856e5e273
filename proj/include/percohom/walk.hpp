#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "percohom/errors.hpp"
#include "percohom/lattice.hpp"
#include "percohom/rng.hpp"

namespace percohom {

using Displacement = std::array<std::int64_t, kMaxDimension>;

/// Read-only view shared by every walk on one environment.
struct WalkEnvironment {
  const BondConfiguration* config = nullptr;
  const ClusterDecomposition* clusters = nullptr;
  NeighborTable table;

  WalkEnvironment(const BondConfiguration& c, const ClusterDecomposition& cl)
      : config(&c), clusters(&cl), table(build_neighbor_table(c)) {}

  const LatticeSpec& spec() const { return config->spec(); }
  int dimension() const { return config->spec().dimension; }
};

struct TrajectoryEvent {
  double time = 0.0;
  Vertex vertex = 0;
  Displacement displacement{};  // unwrapped Z^d displacement from the start
};

struct Trajectory {
  Vertex start = 0;
  double t_max = 0.0;
  int dimension = 2;
  std::vector<TrajectoryEvent> events;
};

/// Continuous-time walk with generator L^ω f(x) = (1/n(x)) Σ_{y~x, ω(x,y)=1} (f(y) - f(x)):
/// Exp(1) holding times, then a jump to a uniformly chosen open neighbor.
class Walker {
 public:
  Walker(const WalkEnvironment& env, Vertex start, std::uint64_t seed)
      : Walker(env, start, make_engine(seed)) {}

  Walker(const WalkEnvironment& env, Vertex start, Engine engine)
      : env_(&env), position_(start), engine_(std::move(engine)) {
    schedule_next();
  }

  Vertex position() const { return position_; }
  const Displacement& displacement() const { return displacement_; }
  double time() const { return time_; }
  /// Time of the next jump; +inf on an isolated vertex.
  double next_jump_time() const { return next_jump_; }

  /// Perform the next jump (requires a finite next_jump_time).
  void jump() {
    const auto& table = env_->table;
    const int deg = table.degree(position_);
    std::uniform_int_distribution<int> pick(0, deg - 1);
    const auto slot = table.offsets[position_] + static_cast<std::uint64_t>(pick(engine_));
    const auto e = Direction::from_index(table.directions[slot]);
    position_ = table.targets[slot];
    displacement_[static_cast<std::size_t>(e.axis())] += e.sign();
    time_ = next_jump_;
    schedule_next();
  }

  /// Apply every jump with time <= t.
  void advance_to(double t) {
    while (next_jump_ <= t) jump();
  }

 private:
  void schedule_next() {
    if (env_->table.degree(position_) == 0) {
      next_jump_ = std::numeric_limits<double>::infinity();
      return;
    }
    next_jump_ = time_ + holding_(engine_);
  }

  const WalkEnvironment* env_;
  Vertex position_;
  Displacement displacement_{};
  double time_ = 0.0;
  double next_jump_ = 0.0;
  Engine engine_;
  std::exponential_distribution<double> holding_{1.0};
};

inline Trajectory simulate_walk(const WalkEnvironment& env, Vertex x0, double t_max, std::uint64_t seed) {
  require(t_max > 0.0, "t_max must be positive");
  require(x0 < env.spec().vertex_count(), "start vertex outside the box");
  Trajectory traj;
  traj.start = x0;
  traj.t_max = t_max;
  traj.dimension = env.dimension();
  Walker walker(env, x0, seed);
  while (walker.next_jump_time() <= t_max) {
    walker.jump();
    traj.events.push_back({walker.time(), walker.position(), walker.displacement()});
  }
  return traj;
}

inline Trajectory simulate_walk(const BondConfiguration& config, const ClusterDecomposition& clusters,
                                Vertex x0, double t_max, std::uint64_t seed) {
  const WalkEnvironment env(config, clusters);
  return simulate_walk(env, x0, t_max, seed);
}

struct PositionAt {
  Vertex vertex = 0;
  Displacement displacement{};
};

/// Right-continuous evaluation of X(t).
inline PositionAt position_at(const Trajectory& traj, double t) {
  require(t >= 0.0 && t <= traj.t_max, "time outside [0, t_max]");
  const auto it = std::upper_bound(traj.events.begin(), traj.events.end(), t,
                                   [](double s, const TrajectoryEvent& ev) { return s < ev.time; });
  if (it == traj.events.begin()) return {traj.start, Displacement{}};
  const auto& ev = *std::prev(it);
  return {ev.vertex, ev.displacement};
}

enum class StartPolicy { fixed_vertex, uniform_largest_cluster };

struct EnsembleSpec {
  std::uint64_t walks = 1000;
  double t_max = 1.0;  // macroscopic horizon; each walk runs to t_max / eps^2
  std::uint64_t base_seed = 0;
  StartPolicy start = StartPolicy::uniform_largest_cluster;
  Vertex start_vertex = 0;

  void validate() const {
    require(walks >= 1, "walk count N must be >= 1");
    require(t_max > 0.0, "ensemble horizon t_max must be positive");
  }
};

/// ε X(t_max / ε²) for every walk of an ensemble, row-major (walk, axis).
struct EndpointSample {
  int dimension = 2;
  double t = 0.0;  // macroscopic time
  double eps = 1.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> coords;

  std::size_t size() const { return seeds.size(); }
  double at(std::size_t walk, int axis) const {
    return coords[walk * static_cast<std::size_t>(dimension) + static_cast<std::size_t>(axis)];
  }
};

/// Run body(i) for i in [0, n) over `threads` workers. Each index is handled exactly
/// once and results are written by index, so output does not depend on scheduling.
template <typename Body>
void parallel_for_index(std::uint64_t n, unsigned threads, Body&& body) {
  threads = std::max(1u, threads);
  if (threads == 1 || n < 2) {
    for (std::uint64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::uint64_t chunk = (n + threads - 1) / threads;
  for (unsigned w = 0; w < threads; ++w) {
    const std::uint64_t lo = w * chunk;
    const std::uint64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::uint64_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

/// Start vertex and engine for walk i: seed = base_seed + i. The uniform start
/// draw consumes the first engine output.
inline std::pair<Vertex, Engine> ensemble_start(const EnsembleSpec& spec,
                                                const std::vector<Vertex>& largest_cluster,
                                                std::uint64_t i) {
  Engine engine = make_engine(spec.base_seed + i);
  if (spec.start == StartPolicy::fixed_vertex) return {spec.start_vertex, std::move(engine)};
  std::uniform_int_distribution<std::size_t> pick(0, largest_cluster.size() - 1);
  const Vertex v = largest_cluster[pick(engine)];
  return {v, std::move(engine)};
}

inline EndpointSample rescaled_endpoints(const WalkEnvironment& env, const EnsembleSpec& spec, double eps,
                                         unsigned threads = 1) {
  spec.validate();
  require(eps > 0.0, "eps must be positive");
  if (spec.start == StartPolicy::fixed_vertex) {
    require(spec.start_vertex < env.spec().vertex_count(), "start vertex outside the box");
  }
  const auto largest = env.clusters->vertices_of(env.clusters->largest_cluster_id);
  const double horizon = spec.t_max / (eps * eps);
  const int d = env.dimension();

  EndpointSample out;
  out.dimension = d;
  out.t = spec.t_max;
  out.eps = eps;
  out.seeds.resize(spec.walks);
  out.coords.assign(spec.walks * static_cast<std::size_t>(d), 0.0);
  parallel_for_index(spec.walks, threads, [&](std::uint64_t i) {
    auto [start, engine] = ensemble_start(spec, largest, i);
    Walker walker(env, start, std::move(engine));
    walker.advance_to(horizon);
    out.seeds[i] = spec.base_seed + i;
    for (int k = 0; k < d; ++k) {
      out.coords[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] =
          eps * static_cast<double>(walker.displacement()[static_cast<std::size_t>(k)]);
    }
  });
  return out;
}

inline EndpointSample rescaled_endpoints(const BondConfiguration& config, const ClusterDecomposition& clusters,
                                         const EnsembleSpec& spec, double eps, unsigned threads = 1) {
  const WalkEnvironment env(config, clusters);
  return rescaled_endpoints(env, spec, eps, threads);
}

/// Non-fatal notice when the microscopic horizon exceeds (L/4)^2 and torus revisits
/// start to correlate the environment.
inline std::optional<std::string> horizon_warning(const LatticeSpec& spec, double microscopic_time) {
  const double limit = (spec.side / 4.0) * (spec.side / 4.0);
  if (microscopic_time <= limit) return std::nullopt;
  return "walk horizon " + std::to_string(microscopic_time) + " exceeds (L/4)^2 = " + std::to_string(limit) +
         "; the walk may wrap the torus";
}

inline void write_endpoint_csv(std::ostream& out, const EndpointSample& sample) {
  out << "walk_id,seed,t,eps";
  for (int k = 1; k <= sample.dimension; ++k) out << ",x" << k;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    out << i << ',' << sample.seeds[i] << ',' << sample.t << ',' << sample.eps;
    for (int k = 0; k < sample.dimension; ++k) out << ',' << sample.at(i, k);
    out << '\n';
  }
}

inline void write_trajectory_csv(std::ostream& out, const std::vector<Trajectory>& trajectories) {
  const int d = trajectories.empty() ? 0 : trajectories.front().dimension;
  out << "walk_id,event_index,time,";
  for (int k = 1; k <= d; ++k) out << (k > 1 ? "," : "") << "dx" << k;
  out << '\n';
  out.precision(17);
  for (std::size_t w = 0; w < trajectories.size(); ++w) {
    const auto& traj = trajectories[w];
    for (std::size_t j = 0; j < traj.events.size(); ++j) {
      out << w << ',' << j << ',' << traj.events[j].time;
      for (int k = 0; k < d; ++k) out << ',' << traj.events[j].displacement[static_cast<std::size_t>(k)];
      out << '\n';
    }
  }
}

}  // namespace percohom
