#include "fsfl/graph.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/rng.hpp"
#include "fsfl/symmetric_eigen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace fsfl {

Topology Topology::from_edges(std::size_t n, std::span<const Edge> edges) {
  std::vector<std::set<std::size_t>> sets(n);
  for (auto [i, j] : edges) {
    if (i >= n || j >= n) throw ParameterError("edge endpoint out of range");
    if (i == j) throw ParameterError("self-loop at node " + std::to_string(i));
    sets[i].insert(j);
    sets[j].insert(i);
  }
  Topology t(n);
  for (std::size_t i = 0; i < n; ++i) t.adjacency_[i].assign(sets[i].begin(), sets[i].end());
  return t;
}

std::size_t Topology::max_degree() const noexcept {
  std::size_t d = 0;
  for (const auto& nb : adjacency_) d = std::max(d, nb.size());
  return d;
}

std::size_t Topology::edge_count() const noexcept {
  std::size_t twice = 0;
  for (const auto& nb : adjacency_) twice += nb.size();
  return twice / 2;
}

double Topology::average_degree() const noexcept {
  if (adjacency_.empty()) return 0.0;
  return 2.0 * static_cast<double>(edge_count()) / static_cast<double>(size());
}

bool Topology::has_edge(std::size_t i, std::size_t j) const {
  const auto& nb = adjacency_.at(i);
  return std::binary_search(nb.begin(), nb.end(), j);
}

bool Topology::connected() const {
  if (adjacency_.empty()) return true;
  std::vector<char> seen(size(), 0);
  std::vector<std::size_t> stack{0};
  seen[0] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    for (auto j : adjacency_[i]) {
      if (!seen[j]) {
        seen[j] = 1;
        ++count;
        stack.push_back(j);
      }
    }
  }
  return count == size();
}

std::vector<Edge> Topology::edges() const {
  std::vector<Edge> out;
  for (std::size_t i = 0; i < size(); ++i)
    for (auto j : adjacency_[i])
      if (i < j) out.emplace_back(i, j);
  return out;
}

Topology ring_lattice(std::size_t n, std::size_t k) {
  if (n < 3 || k < 1 || 2 * k >= n)
    throw ParameterError("ring_lattice requires n >= 3 and 1 <= k < n/2 (got n=" +
                         std::to_string(n) + ", k=" + std::to_string(k) + ")");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 1; d <= k; ++d) edges.emplace_back(i, (i + d) % n);
  return Topology::from_edges(n, edges);
}

Topology barabasi_albert(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (m < 1 || m >= n)
    throw ParameterError("barabasi_albert requires 1 <= m < n (got n=" + std::to_string(n) +
                         ", m=" + std::to_string(m) + ")");
  Rng rng(seed);
  std::vector<Edge> edges;
  std::vector<std::size_t> targets(m);
  std::iota(targets.begin(), targets.end(), std::size_t{0});
  // each node appears once per incident edge
  std::vector<std::size_t> repeated;
  for (std::size_t source = m; source < n; ++source) {
    for (auto t : targets) edges.emplace_back(t, source);
    repeated.insert(repeated.end(), targets.begin(), targets.end());
    repeated.insert(repeated.end(), m, source);
    if (source + 1 == n) break;
    std::uniform_int_distribution<std::size_t> pick(0, repeated.size() - 1);
    std::vector<std::size_t> chosen;
    while (chosen.size() < m) {
      const auto c = repeated[pick(rng)];
      if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
    }
    targets = std::move(chosen);
  }
  return Topology::from_edges(n, edges);
}

Topology complete_graph(std::size_t n) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) edges.emplace_back(i, j);
  return Topology::from_edges(n, edges);
}

Eigen::MatrixXd laplacian(const Topology& t) {
  const auto n = static_cast<Eigen::Index>(t.size());
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& nb = t.neighbors(static_cast<std::size_t>(i));
    lap(i, i) = static_cast<double>(nb.size());
    for (auto j : nb) lap(i, static_cast<Eigen::Index>(j)) = -1.0;
  }
  return lap;
}

SpectralSummary spectral_summary(const Topology& t) {
  if (t.size() == 0) throw ParameterError("spectral_summary: empty graph");
  if (!t.connected()) throw DomainError("spectral_summary: graph is disconnected (lambda2 = 0)");
  SpectralSummary s;
  s.eigenvalues = symmetric_eigenvalues(laplacian(t));
  s.lambda2 = t.size() > 1 ? s.eigenvalues(1) : 0.0;
  s.max_degree = t.max_degree();
  return s;
}

double qt_norm(const Topology& t, double sharing_rate, unsigned step) {
  if (!t.connected()) throw DomainError("qt_norm: graph is disconnected");
  const double limit = 0.5 / static_cast<double>(std::max<std::size_t>(t.max_degree(), 1));
  if (!(sharing_rate > 0.0) || sharing_rate > limit)
    throw ParameterError("qt_norm: sharing rate must satisfy 0 < eps <= 1/(2 Delta)");
  const auto n = static_cast<Eigen::Index>(t.size());
  const Eigen::MatrixXd p = Eigen::MatrixXd::Identity(n, n) - sharing_rate * laplacian(t);

  Eigen::MatrixXd power = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd base = p;
  for (unsigned e = step; e > 0; e >>= 1) {
    if (e & 1u) power = power * base;
    if (e > 1) base = base * base;
  }
  const Eigen::MatrixXd q = power - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  return symmetric_eigenvalues(q).cwiseAbs().maxCoeff();
}

TopologySpec TopologySpec::preset(const std::string& name, std::uint64_t seed) {
  TopologySpec s;
  s.n = 10;
  s.seed = seed;
  if (name == "R1" || name == "R2" || name == "R3") {
    s.kind = TopologyKind::Ring;
    s.degree_param = static_cast<std::size_t>(name[1] - '0');
  } else if (name == "BA1") {
    s.kind = TopologyKind::BarabasiAlbert;
    s.degree_param = 1;
  } else if (name == "BA2") {
    s.kind = TopologyKind::BarabasiAlbert;
    s.degree_param = 3;
  } else {
    throw ParameterError("unknown topology preset '" + name + "'");
  }
  return s;
}

Topology make_topology(const TopologySpec& spec, std::uint64_t epoch) {
  switch (spec.kind) {
    case TopologyKind::Ring:
      return ring_lattice(spec.n, spec.degree_param);
    case TopologyKind::Complete:
      return complete_graph(spec.n);
    case TopologyKind::BarabasiAlbert: {
      const auto seed = spec.dynamic ? derive_seed(spec.seed, {kTopologyStream, epoch}) : spec.seed;
      return barabasi_albert(spec.n, spec.degree_param, seed);
    }
  }
  throw ParameterError("unknown topology kind");
}

std::vector<Topology> dynamic_sequence(const TopologySpec& spec, std::size_t epochs) {
  if (spec.kind != TopologyKind::BarabasiAlbert)
    throw ParameterError("dynamic_sequence requires a Barabasi-Albert spec");
  TopologySpec dyn = spec;
  dyn.dynamic = true;
  std::vector<Topology> out;
  out.reserve(epochs);
  for (std::size_t e = 0; e < epochs; ++e) out.push_back(make_topology(dyn, e));
  return out;
}

nlohmann::json to_json(const Topology& t) {
  nlohmann::json edges = nlohmann::json::array();
  for (auto [i, j] : t.edges()) edges.push_back({i, j});
  return {{"n", t.size()}, {"edges", std::move(edges)}};
}

Topology topology_from_json(const nlohmann::json& j) {
  const auto n = j.at("n").get<std::size_t>();
  std::vector<Edge> edges;
  for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
  return Topology::from_edges(n, edges);
}

nlohmann::json to_json(const SpectralSummary& s) {
  std::vector<double> ev(s.eigenvalues.data(), s.eigenvalues.data() + s.eigenvalues.size());
  return {{"eigenvalues", ev},
          {"lambda2", s.lambda2},
          {"max_degree", s.max_degree},
          {"max_sharing_rate", s.max_sharing_rate()}};
}

namespace {
const char* kind_name(TopologyKind k) {
  switch (k) {
    case TopologyKind::Ring: return "ring";
    case TopologyKind::BarabasiAlbert: return "ba";
    case TopologyKind::Complete: return "complete";
  }
  return "?";
}
}  // namespace

nlohmann::json to_json(const TopologySpec& s) {
  return {{"type", kind_name(s.kind)}, {"n", s.n}, {"param", s.degree_param}, {"seed", s.seed}, {"dynamic", s.dynamic}};
}

TopologySpec topology_spec_from_json(const nlohmann::json& j) {
  if (j.contains("preset")) {
    auto s = TopologySpec::preset(j.at("preset").get<std::string>(), j.value("seed", std::uint64_t{0}));
    s.dynamic = j.value("dynamic", false);
    return s;
  }
  TopologySpec s;
  const auto type = j.at("type").get<std::string>();
  if (type == "ring") s.kind = TopologyKind::Ring;
  else if (type == "ba") s.kind = TopologyKind::BarabasiAlbert;
  else if (type == "complete") s.kind = TopologyKind::Complete;
  else throw ParameterError("unknown topology type '" + type + "'");
  s.n = j.value("n", std::size_t{10});
  s.degree_param = j.value("param", std::size_t{1});
  s.seed = j.value("seed", std::uint64_t{0});
  s.dynamic = j.value("dynamic", false);
  if (s.dynamic && s.kind != TopologyKind::BarabasiAlbert)
    throw ParameterError("dynamic topologies are only defined for BA graphs");
  return s;
}

}  // namespace fsfl
