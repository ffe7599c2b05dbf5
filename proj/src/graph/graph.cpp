#include "xane3/graph/graph.hpp"

#include <cmath>
#include <deque>
#include <string>

#include "xane3/errors.hpp"

namespace xane3::graph {

void Structure::validate() const {
  if (positions.empty()) throw ValueError("structure has no atoms");
  if (numbers.size() != positions.size()) {
    throw ShapeError("structure has " + std::to_string(positions.size()) + " positions but " +
                     std::to_string(numbers.size()) + " atomic numbers");
  }
  for (const auto& p : positions)
    if (!p.allFinite()) throw ValueError("structure has a non-finite position");
  for (int z : numbers)
    if (z <= 0) throw ValueError("atomic number " + std::to_string(z) + " is not positive");
  for (auto a : absorber_sites)
    if (a >= positions.size()) throw ValueError("absorber site " + std::to_string(a) + " out of range");
  if (any_pbc()) {
    if (!lattice.allFinite() || std::abs(lattice.determinant()) < 1e-8)
      throw ValueError("lattice rows are linearly dependent on a periodic structure");
  }
}

AtomicGraph build_graph(const Structure& s, double r_max, std::size_t absorber) {
  if (!(r_max > 0) || !std::isfinite(r_max)) throw ValueError("r_max must be positive");
  s.validate();
  if (absorber >= s.size()) throw ValueError("absorber index " + std::to_string(absorber) + " out of range");

  const std::size_t n = s.size();
  std::vector<Eigen::Vector3d> frac(n, Eigen::Vector3d::Zero());
  std::array<double, 3> reach{0, 0, 0};  // r_max over the perpendicular cell height
  if (s.any_pbc()) {
    const Eigen::Matrix3d inv = s.lattice.inverse();  // columns are reciprocal vectors
    for (std::size_t i = 0; i < n; ++i) frac[i] = inv.transpose() * s.positions[i];
    for (int a = 0; a < 3; ++a) {
      if (!s.pbc[a]) continue;
      reach[a] = r_max * inv.col(a).norm();
      if (std::ceil(reach[a]) > kMaxImagesPerAxis) {
        throw ValueError("r_max " + std::to_string(r_max) + " needs more than " + std::to_string(kMaxImagesPerAxis) +
                         " periodic images along axis " + std::to_string(a));
      }
    }
  }

  AtomicGraph g;
  g.numbers = s.numbers;
  g.absorber_mask.assign(n, false);
  g.absorber_mask[absorber] = true;

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
      for (int a = 0; a < 3; ++a) {
        if (!s.pbc[a]) continue;
        const double df = frac[j][a] - frac[i][a];
        lo[a] = static_cast<int>(std::ceil(-reach[a] - df));
        hi[a] = static_cast<int>(std::floor(reach[a] - df));
      }
      for (int p = lo[0]; p <= hi[0]; ++p)
        for (int q = lo[1]; q <= hi[1]; ++q)
          for (int r = lo[2]; r <= hi[2]; ++r) {
            const Eigen::Vector3i shift(p, q, r);
            const Eigen::Vector3d vec =
                s.positions[j] - s.positions[i] + s.lattice.transpose() * shift.cast<double>();
            const double d = vec.norm();
            if (!(d > 0.0) || d > r_max) continue;
            g.edge_src.push_back(i);
            g.edge_dst.push_back(j);
            g.edge_vec.push_back(vec);
            g.edge_len.push_back(d);
            g.edge_shift.push_back(shift);
          }
    }
  }
  return g;
}

std::vector<AtomicGraph> expand_absorber_graphs(const Structure& s, double r_max) {
  if (s.absorber_sites.empty()) throw ValueError("structure has no absorber sites");
  std::vector<AtomicGraph> out;
  out.reserve(s.absorber_sites.size());
  for (std::size_t k = 0; k < s.absorber_sites.size(); ++k) {
    if (k == 0) {
      out.push_back(build_graph(s, r_max, s.absorber_sites[0]));
    } else {
      AtomicGraph g = out.front();
      g.absorber_mask.assign(g.atoms(), false);
      if (s.absorber_sites[k] >= g.atoms()) throw ValueError("absorber site out of range");
      g.absorber_mask[s.absorber_sites[k]] = true;
      out.push_back(std::move(g));
    }
  }
  return out;
}

std::vector<int> hop_distances(const AtomicGraph& g) {
  std::vector<std::vector<std::size_t>> adjacency(g.atoms());
  for (std::size_t e = 0; e < g.edges(); ++e) adjacency[g.edge_src[e]].push_back(g.edge_dst[e]);
  std::vector<int> hops(g.atoms(), -1);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < g.atoms(); ++i) {
    if (g.absorber_mask[i]) {
      hops[i] = 0;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    for (std::size_t j : adjacency[i]) {
      if (hops[j] >= 0) continue;
      hops[j] = hops[i] + 1;
      queue.push_back(j);
    }
  }
  return hops;
}

AtomicGraph crop_to_hops(const AtomicGraph& g, int hops) {
  if (hops < 0) throw ValueError("crop_to_hops: hops must be non-negative");
  const auto dist = hop_distances(g);
  constexpr std::size_t kDropped = static_cast<std::size_t>(-1);
  std::vector<std::size_t> remap(g.atoms(), kDropped);
  AtomicGraph out;
  for (std::size_t i = 0; i < g.atoms(); ++i) {
    if (dist[i] < 0 || dist[i] > hops) continue;
    remap[i] = out.numbers.size();
    out.numbers.push_back(g.numbers[i]);
    out.absorber_mask.push_back(g.absorber_mask[i]);
  }
  for (std::size_t e = 0; e < g.edges(); ++e) {
    const std::size_t s = remap[g.edge_src[e]], d = remap[g.edge_dst[e]];
    if (s == kDropped || d == kDropped) continue;
    out.edge_src.push_back(s);
    out.edge_dst.push_back(d);
    out.edge_vec.push_back(g.edge_vec[e]);
    out.edge_len.push_back(g.edge_len[e]);
    out.edge_shift.push_back(g.edge_shift[e]);
  }
  return out;
}

namespace {

bool same_content(const AtomicGraph& a, const AtomicGraph& b) {
  return a.numbers == b.numbers && a.edge_src == b.edge_src && a.edge_dst == b.edge_dst && a.edge_len == b.edge_len &&
         a.edge_vec == b.edge_vec;
}

}  // namespace

Batch make_batch(const std::vector<const AtomicGraph*>& graphs) {
  if (graphs.empty()) throw ValueError("cannot batch an empty list of graphs");
  Batch batch;
  std::vector<const AtomicGraph*> backbones;
  std::vector<std::size_t> backbone_offset;
  for (const AtomicGraph* g : graphs) {
    std::size_t b = 0;
    while (b < backbones.size() && !same_content(*backbones[b], *g)) ++b;
    if (b == backbones.size()) {
      const std::size_t offset = batch.numbers.size();
      backbones.push_back(g);
      backbone_offset.push_back(offset);
      batch.numbers.insert(batch.numbers.end(), g->numbers.begin(), g->numbers.end());
      for (std::size_t e = 0; e < g->edges(); ++e) {
        batch.edge_src.push_back(g->edge_src[e] + offset);
        batch.edge_dst.push_back(g->edge_dst[e] + offset);
      }
      batch.edge_vec.insert(batch.edge_vec.end(), g->edge_vec.begin(), g->edge_vec.end());
      batch.edge_len.insert(batch.edge_len.end(), g->edge_len.begin(), g->edge_len.end());
    }
    Batch::Member m;
    m.backbone = b;
    m.node_begin = backbone_offset[b];
    m.node_end = m.node_begin + g->atoms();
    for (std::size_t i = 0; i < g->atoms(); ++i)
      if (g->absorber_mask[i]) m.absorbers.push_back(m.node_begin + i);
    if (m.absorbers.empty()) throw ValueError("graph in batch has no absorber");
    batch.graphs.push_back(std::move(m));
  }
  batch.backbones = backbones.size();
  return batch;
}

Batch make_batch(const std::vector<AtomicGraph>& graphs) {
  std::vector<const AtomicGraph*> ptrs;
  ptrs.reserve(graphs.size());
  for (const auto& g : graphs) ptrs.push_back(&g);
  return make_batch(ptrs);
}

}  // namespace xane3::graph
