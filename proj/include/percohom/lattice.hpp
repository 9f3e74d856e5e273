#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "percohom/binary_io.hpp"
#include "percohom/errors.hpp"
#include "percohom/rng.hpp"

namespace percohom {

using Vertex = std::uint64_t;
using EdgeIndex = std::uint64_t;

inline constexpr int kMaxDimension = 8;

/// One of the 2d unit vectors ±e_k. Index order is +e_1, -e_1, +e_2, -e_2, ...
class Direction {
 public:
  constexpr Direction() = default;
  constexpr Direction(int axis, int sign) : index_(2 * axis + (sign < 0 ? 1 : 0)) {}

  static constexpr Direction from_index(int index) {
    Direction d;
    d.index_ = index;
    return d;
  }
  static constexpr Direction positive(int axis) { return Direction(axis, +1); }
  static constexpr Direction negative(int axis) { return Direction(axis, -1); }

  constexpr int index() const { return index_; }
  constexpr int axis() const { return index_ / 2; }
  constexpr int sign() const { return (index_ & 1) ? -1 : 1; }
  constexpr bool is_positive() const { return (index_ & 1) == 0; }
  constexpr Direction opposite() const { return from_index(index_ ^ 1); }

  /// e · e_axis
  constexpr int component(int axis_b) const { return axis() == axis_b ? sign() : 0; }

  friend constexpr bool operator==(Direction, Direction) = default;

 private:
  int index_ = 0;
};

/// Periodic box (Z / L Z)^d. Vertex flat index: x_0 + L x_1 + L^2 x_2 + ...
struct LatticeSpec {
  int dimension = 2;
  int side = 4;
  bool periodic = true;

  void validate() const {
    require(dimension >= 2, "lattice dimension must be >= 2 (got " + std::to_string(dimension) + ")");
    require(dimension <= kMaxDimension,
            "lattice dimension must be <= " + std::to_string(kMaxDimension));
    require(side >= 4 && side % 2 == 0,
            "lattice side L must be even and >= 4 (got " + std::to_string(side) + ")");
    require(periodic, "only periodic boundaries are supported");
    long double count = 1;
    for (int k = 0; k < dimension; ++k) count *= side;
    require(count <= static_cast<long double>(1ULL << 31), "lattice too large: L^d exceeds 2^31");
  }

  std::uint64_t vertex_count() const {
    std::uint64_t n = 1;
    for (int k = 0; k < dimension; ++k) n *= static_cast<std::uint64_t>(side);
    return n;
  }
  std::uint64_t edge_count() const { return static_cast<std::uint64_t>(dimension) * vertex_count(); }
  int direction_count() const { return 2 * dimension; }

  std::uint64_t stride(int axis) const {
    std::uint64_t s = 1;
    for (int k = 0; k < axis; ++k) s *= static_cast<std::uint64_t>(side);
    return s;
  }

  int coordinate(Vertex v, int axis) const {
    return static_cast<int>((v / stride(axis)) % static_cast<std::uint64_t>(side));
  }

  std::vector<int> coordinates(Vertex v) const {
    std::vector<int> x(dimension);
    for (int k = 0; k < dimension; ++k) {
      x[k] = static_cast<int>(v % static_cast<std::uint64_t>(side));
      v /= static_cast<std::uint64_t>(side);
    }
    return x;
  }

  /// Flat index of a coordinate vector, reduced mod L on every axis.
  Vertex vertex_at(const std::vector<long long>& x) const {
    Vertex v = 0;
    for (int k = dimension - 1; k >= 0; --k) {
      long long c = x[k] % side;
      if (c < 0) c += side;
      v = v * static_cast<Vertex>(side) + static_cast<Vertex>(c);
    }
    return v;
  }

  Vertex neighbor(Vertex v, Direction e) const {
    const std::uint64_t s = stride(e.axis());
    const int c = static_cast<int>((v / s) % static_cast<std::uint64_t>(side));
    if (e.is_positive()) return c == side - 1 ? v - s * static_cast<std::uint64_t>(side - 1) : v + s;
    return c == 0 ? v + s * static_cast<std::uint64_t>(side - 1) : v - s;
  }

  /// Index of the undirected edge {v, v+e}: axis * L^d + flat(tail), tail the lower endpoint.
  EdgeIndex edge_index(Vertex v, Direction e) const {
    const Vertex tail = e.is_positive() ? v : neighbor(v, e);
    return static_cast<EdgeIndex>(e.axis()) * vertex_count() + tail;
  }

  /// Displacement from origin to v, each component reduced to [-L/2, L/2).
  std::vector<long long> centered_offset(Vertex v, Vertex origin) const {
    std::vector<long long> out(dimension);
    for (int k = 0; k < dimension; ++k) {
      long long delta = coordinate(v, k) - coordinate(origin, k);
      if (delta >= side / 2) delta -= side;
      if (delta < -side / 2) delta += side;
      out[k] = delta;
    }
    return out;
  }

  friend bool operator==(const LatticeSpec&, const LatticeSpec&) = default;
};

/// A bond configuration ω on the torus: one bit per undirected edge, so ω(x,y) = ω(y,x).
class BondConfiguration {
 public:
  BondConfiguration() = default;

  BondConfiguration(LatticeSpec spec, double p, std::uint64_t seed, std::vector<std::uint64_t> words)
      : spec_(spec), p_(p), seed_(seed), words_(std::move(words)) {
    spec_.validate();
    require(words_.size() == word_count(spec_), "bond bit array has wrong length");
    const std::uint64_t tail_bits = spec_.edge_count() % 64;
    if (tail_bits != 0) words_.back() &= (1ULL << tail_bits) - 1;
  }

  static std::size_t word_count(const LatticeSpec& spec) {
    return static_cast<std::size_t>((spec.edge_count() + 63) / 64);
  }

  const LatticeSpec& spec() const { return spec_; }
  double p() const { return p_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::uint64_t>& words() const { return words_; }

  bool is_open(EdgeIndex edge) const { return (words_[edge >> 6] >> (edge & 63)) & 1ULL; }
  bool is_open(Vertex v, Direction e) const { return is_open(spec_.edge_index(v, e)); }

  std::uint64_t open_edge_count() const {
    std::uint64_t n = 0;
    for (auto w : words_) n += static_cast<std::uint64_t>(std::popcount(w));
    return n;
  }

  int degree(Vertex v) const {
    int n = 0;
    for (int i = 0; i < spec_.direction_count(); ++i) n += is_open(v, Direction::from_index(i)) ? 1 : 0;
    return n;
  }

  friend bool operator==(const BondConfiguration& a, const BondConfiguration& b) {
    return a.spec_ == b.spec_ && a.p_ == b.p_ && a.seed_ == b.seed_ && a.words_ == b.words_;
  }

 private:
  LatticeSpec spec_{};
  double p_ = 0.0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Bernoulli(p) bond percolation. Edge i is open iff U(seed, i) < p, where U is a
/// counter-based uniform; output does not depend on the order edges are visited.
inline BondConfiguration sample_bonds(const LatticeSpec& spec, double p, std::uint64_t seed) {
  spec.validate();
  require(p >= 0.0 && p <= 1.0, "p must lie in [0, 1] (got " + std::to_string(p) + ")");
  const std::uint64_t edges = spec.edge_count();
  std::vector<std::uint64_t> words(BondConfiguration::word_count(spec), 0);
  for (EdgeIndex i = 0; i < edges; ++i) {
    if (to_unit_interval(counter_hash(seed, i)) < p) words[i >> 6] |= 1ULL << (i & 63);
  }
  return BondConfiguration(spec, p, seed, std::move(words));
}

/// ω(x, x+e) read through the translated environment x.ω at base edge e.
inline bool translated_bond(const BondConfiguration& config, Vertex x, Direction e) {
  return config.is_open(x, e);
}

/// Open neighbors of x in the order +e_1, -e_1, ..., +e_d, -e_d.
inline std::vector<Vertex> open_neighbors(const BondConfiguration& config, Vertex x) {
  const auto& spec = config.spec();
  std::vector<Vertex> out;
  out.reserve(static_cast<std::size_t>(spec.direction_count()));
  for (int i = 0; i < spec.direction_count(); ++i) {
    const auto e = Direction::from_index(i);
    if (config.is_open(x, e)) out.push_back(spec.neighbor(x, e));
  }
  return out;
}

/// Compressed open-edge adjacency for every vertex, in open_neighbors order.
struct NeighborTable {
  std::vector<std::uint64_t> offsets;  // size V+1
  std::vector<Vertex> targets;
  std::vector<std::uint8_t> directions;

  int degree(Vertex v) const { return static_cast<int>(offsets[v + 1] - offsets[v]); }
};

inline NeighborTable build_neighbor_table(const BondConfiguration& config) {
  const auto& spec = config.spec();
  const std::uint64_t n = spec.vertex_count();
  NeighborTable table;
  table.offsets.resize(n + 1, 0);
  table.targets.reserve(2 * config.open_edge_count());
  table.directions.reserve(2 * config.open_edge_count());
  for (Vertex v = 0; v < n; ++v) {
    for (int i = 0; i < spec.direction_count(); ++i) {
      const auto e = Direction::from_index(i);
      if (!config.is_open(v, e)) continue;
      table.targets.push_back(spec.neighbor(v, e));
      table.directions.push_back(static_cast<std::uint8_t>(i));
    }
    table.offsets[v + 1] = table.targets.size();
  }
  return table;
}

struct ClusterDecomposition {
  std::vector<std::uint32_t> labels;  // cluster id per vertex, numbered by first appearance
  std::vector<std::uint64_t> sizes;   // vertex count per cluster id
  std::vector<std::uint8_t> degrees;  // n^ω(x)
  std::uint32_t largest_cluster_id = 0;

  std::size_t cluster_count() const { return sizes.size(); }
  std::uint64_t largest_size() const { return sizes.empty() ? 0 : sizes[largest_cluster_id]; }
  bool in_largest(Vertex v) const { return labels[v] == largest_cluster_id; }

  std::vector<Vertex> vertices_of(std::uint32_t id) const {
    std::vector<Vertex> out;
    out.reserve(static_cast<std::size_t>(sizes.at(id)));
    for (Vertex v = 0; v < labels.size(); ++v)
      if (labels[v] == id) out.push_back(v);
    return out;
  }
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::uint64_t{0});
  }

  std::uint64_t find(std::uint64_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::uint64_t a, std::uint64_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
  }

 private:
  std::vector<std::uint64_t> parent_;
  std::vector<std::uint64_t> size_;
};

}  // namespace detail

inline ClusterDecomposition decompose_clusters(const BondConfiguration& config) {
  const auto& spec = config.spec();
  const std::uint64_t n = spec.vertex_count();
  detail::DisjointSets sets(static_cast<std::size_t>(n));
  ClusterDecomposition out;
  out.degrees.assign(static_cast<std::size_t>(n), 0);
  for (Vertex v = 0; v < n; ++v) {
    for (int axis = 0; axis < spec.dimension; ++axis) {
      const auto e = Direction::positive(axis);
      if (!config.is_open(v, e)) continue;
      const Vertex w = spec.neighbor(v, e);
      sets.unite(v, w);
      ++out.degrees[v];
      ++out.degrees[w];
    }
  }

  constexpr auto kUnset = static_cast<std::uint32_t>(-1);
  std::vector<std::uint32_t> root_label(static_cast<std::size_t>(n), kUnset);
  out.labels.resize(static_cast<std::size_t>(n));
  for (Vertex v = 0; v < n; ++v) {
    const auto r = sets.find(v);
    if (root_label[r] == kUnset) {
      root_label[r] = static_cast<std::uint32_t>(out.sizes.size());
      out.sizes.push_back(0);
    }
    out.labels[v] = root_label[r];
    ++out.sizes[root_label[r]];
  }
  // Ties resolved toward the smallest id.
  out.largest_cluster_id = static_cast<std::uint32_t>(
      std::max_element(out.sizes.begin(), out.sizes.end()) - out.sizes.begin());
  return out;
}

// PERC v1: "PERC", u16 version, u8 d, u32 L, f64 p, u64 seed, bonds LSB-first.
inline constexpr std::uint16_t kPercVersion = 1;

inline void write_bonds(std::ostream& out, const BondConfiguration& config) {
  const auto& spec = config.spec();
  binary::put_magic(out, "PERC");
  binary::put_le<std::uint16_t>(out, kPercVersion);
  binary::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(spec.dimension));
  binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.side));
  binary::put_f64(out, config.p());
  binary::put_le<std::uint64_t>(out, config.seed());
  const std::uint64_t byte_count = (spec.edge_count() + 7) / 8;
  const auto& words = config.words();
  for (std::uint64_t j = 0; j < byte_count; ++j) {
    out.put(static_cast<char>((words[j / 8] >> (8 * (j % 8))) & 0xffu));
  }
}

inline BondConfiguration read_bonds(std::istream& in) {
  binary::expect_magic(in, "PERC");
  const auto version = binary::get_le<std::uint16_t>(in);
  require(version == kPercVersion, "unsupported PERC version " + std::to_string(version));
  LatticeSpec spec;
  spec.dimension = binary::get_le<std::uint8_t>(in);
  spec.side = static_cast<int>(binary::get_le<std::uint32_t>(in));
  spec.validate();
  const double p = binary::get_f64(in);
  const auto seed = binary::get_le<std::uint64_t>(in);
  const std::uint64_t byte_count = (spec.edge_count() + 7) / 8;
  std::vector<std::uint64_t> words(BondConfiguration::word_count(spec), 0);
  for (std::uint64_t j = 0; j < byte_count; ++j) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw ValidationError("PERC bond payload truncated");
    words[j / 8] |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * (j % 8));
  }
  return BondConfiguration(spec, p, seed, std::move(words));
}

}  // namespace percohom
