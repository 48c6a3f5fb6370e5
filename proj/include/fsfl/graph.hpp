#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fsfl {

using Edge = std::pair<std::size_t, std::size_t>;

/// Undirected simple graph over devices 0..n-1. Neighbor lists are sorted.
class Topology {
 public:
  Topology() = default;
  explicit Topology(std::size_t n) : adjacency_(n) {}

  /// Builds from an edge list; rejects self-loops and out-of-range nodes.
  /// Duplicate edges collapse.
  static Topology from_edges(std::size_t n, std::span<const Edge> edges);

  std::size_t size() const noexcept { return adjacency_.size(); }
  const std::vector<std::size_t>& neighbors(std::size_t i) const { return adjacency_.at(i); }
  std::size_t degree(std::size_t i) const { return adjacency_.at(i).size(); }
  std::size_t max_degree() const noexcept;
  std::size_t edge_count() const noexcept;
  double average_degree() const noexcept;
  bool has_edge(std::size_t i, std::size_t j) const;
  bool connected() const;

  /// Canonical edge list: i < j, sorted lexicographically.
  std::vector<Edge> edges() const;

  bool operator==(const Topology&) const = default;

 private:
  std::vector<std::vector<std::size_t>> adjacency_;
};

/// Ring lattice: node i linked to i±1..i±k (mod n). Requires n >= 3, 1 <= k < n/2.
Topology ring_lattice(std::size_t n, std::size_t k);

/// Preferential-attachment graph. The seed is m isolated nodes; node m links
/// to all of them, and every later node links to m distinct targets drawn
/// with probability proportional to degree (repeated draws rejected).
/// Requires 1 <= m < n.
Topology barabasi_albert(std::size_t n, std::size_t m, std::uint64_t seed);

Topology complete_graph(std::size_t n);

/// Graph Laplacian D - A.
Eigen::MatrixXd laplacian(const Topology& t);

struct SpectralSummary {
  Eigen::VectorXd eigenvalues;  // ascending
  double lambda2 = 0.0;
  std::size_t max_degree = 0;

  double kappa2(double sharing_rate) const { return 1.0 - sharing_rate * lambda2; }
  /// Largest sharing rate the consensus analysis admits, 1/(2 Delta).
  double max_sharing_rate() const { return 0.5 / static_cast<double>(max_degree); }
};

/// Laplacian spectrum of a connected graph. Throws DomainError if disconnected.
SpectralSummary spectral_summary(const Topology& t);

/// Induced 2-norm of Q_t = P^t - (1/n) 11^T with P = I - eps L.
/// Requires 0 < eps <= 1/(2 Delta) and a connected graph.
double qt_norm(const Topology& t, double sharing_rate, unsigned step);

enum class TopologyKind { Ring, BarabasiAlbert, Complete };

struct TopologySpec {
  TopologyKind kind = TopologyKind::Ring;
  std::size_t n = 10;
  std::size_t degree_param = 1;  // k for rings, m for BA
  std::uint64_t seed = 0;
  bool dynamic = false;  // regenerate every epoch (BA only)

  /// Paper presets: R1 R2 R3 BA1 BA2 (BA2 attaches with m = 3).
  static TopologySpec preset(const std::string& name, std::uint64_t seed = 0);
};

/// Graph used during `epoch`. Static specs ignore the epoch.
Topology make_topology(const TopologySpec& spec, std::uint64_t epoch = 0);

/// Independently regenerated BA graphs, one per epoch, deterministic per (seed, epoch).
std::vector<Topology> dynamic_sequence(const TopologySpec& spec, std::size_t epochs);

nlohmann::json to_json(const Topology& t);
Topology topology_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SpectralSummary& s);
nlohmann::json to_json(const TopologySpec& s);
TopologySpec topology_spec_from_json(const nlohmann::json& j);

}  // namespace fsfl
