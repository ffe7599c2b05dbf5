#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <vector>

namespace xane3::graph {

struct Structure {
  /// Row vectors in Angstrom.
  Eigen::Matrix3d lattice = Eigen::Matrix3d::Zero();
  std::vector<Eigen::Vector3d> positions;
  std::vector<int> numbers;
  std::array<bool, 3> pbc{false, false, false};
  std::vector<std::size_t> absorber_sites;

  std::size_t size() const { return positions.size(); }
  bool any_pbc() const { return pbc[0] || pbc[1] || pbc[2]; }
  /// Throws ValueError or ShapeError when an invariant is broken.
  void validate() const;
};

struct AtomicGraph {
  std::vector<int> numbers;
  std::vector<std::size_t> edge_src;
  std::vector<std::size_t> edge_dst;
  /// x_ij = r_j - r_i + s_ij.
  std::vector<Eigen::Vector3d> edge_vec;
  std::vector<double> edge_len;
  /// Integer lattice shift of each edge.
  std::vector<Eigen::Vector3i> edge_shift;
  std::vector<bool> absorber_mask;

  std::size_t atoms() const { return numbers.size(); }
  std::size_t edges() const { return edge_src.size(); }
};

/// Largest number of lattice images searched per periodic axis.
inline constexpr int kMaxImagesPerAxis = 64;

AtomicGraph build_graph(const Structure& s, double r_max, std::size_t absorber);

/// One graph per absorber site, identical apart from the mask.
std::vector<AtomicGraph> expand_absorber_graphs(const Structure& s, double r_max);

/// Subgraph of nodes within `hops` edges of an absorber, edges restricted to
/// kept nodes. Node order is preserved.
AtomicGraph crop_to_hops(const AtomicGraph& g, int hops);

/// Hop distance of every node from the nearest absorber, -1 if unreachable.
std::vector<int> hop_distances(const AtomicGraph& g);

/// Graphs concatenated with index offsets. Graphs with identical node and
/// edge content share one backbone; each graph keeps its own absorber set.
struct Batch {
  std::vector<int> numbers;
  std::vector<std::size_t> edge_src;
  std::vector<std::size_t> edge_dst;
  std::vector<Eigen::Vector3d> edge_vec;
  std::vector<double> edge_len;

  struct Member {
    std::size_t backbone = 0;
    std::size_t node_begin = 0;
    std::size_t node_end = 0;
    std::vector<std::size_t> absorbers;  // global node indices
  };
  std::vector<Member> graphs;
  std::size_t backbones = 0;

  std::size_t atoms() const { return numbers.size(); }
  std::size_t edges() const { return edge_src.size(); }
  std::size_t size() const { return graphs.size(); }
};

Batch make_batch(const std::vector<const AtomicGraph*>& graphs);
Batch make_batch(const std::vector<AtomicGraph>& graphs);

}  // namespace xane3::graph
