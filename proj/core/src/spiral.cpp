#include "meshseq/spiral.hpp"

#include <algorithm>

namespace meshseq {

namespace {

std::uint32_t ccw_next(const RingMap& ring, std::uint32_t center, std::uint32_t from) {
  const auto& lst = ring[center];
  auto it = std::lower_bound(lst.begin(), lst.end(), std::make_pair(from, 0u),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
  if (it != lst.end() && it->first == from) return it->second;
  return kSpiralPad;
}

// Orders the 1-ring of `center` counter-clockwise starting from the unvisited
// neighbor with the smallest index; at a boundary the walk restarts from the
// smallest unvisited neighbor.
std::vector<std::uint32_t> ordered_ring(const std::vector<std::vector<std::uint32_t>>& adj,
                                        const RingMap& ring, std::uint32_t center,
                                        const std::vector<char>& visited) {
  std::vector<std::uint32_t> candidates;
  for (std::uint32_t n : adj[center])
    if (!visited[n]) candidates.push_back(n);
  std::vector<std::uint32_t> out;
  std::vector<char> taken(candidates.size(), 0);
  auto take = [&](std::uint32_t v) {
    auto it = std::find(candidates.begin(), candidates.end(), v);
    if (it == candidates.end() || taken[it - candidates.begin()]) return false;
    taken[it - candidates.begin()] = 1;
    out.push_back(v);
    return true;
  };
  while (out.size() < candidates.size()) {
    // smallest untaken candidate starts (or restarts) the walk
    std::uint32_t start = kSpiralPad;
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (!taken[i]) {
        start = candidates[i];
        break;
      }
    take(start);
    std::uint32_t cur = start;
    while (true) {
      std::uint32_t nxt = ccw_next(ring, center, cur);
      if (nxt == kSpiralPad || !take(nxt)) break;
      cur = nxt;
    }
  }
  return out;
}

std::vector<std::uint32_t> spiral_from_structures(
    const std::vector<std::vector<std::uint32_t>>& adj, const RingMap& ring,
    std::size_t vertex_count, std::uint32_t center, std::uint32_t length,
    std::uint32_t dilation) {
  const std::size_t need = static_cast<std::size_t>(length) * dilation;
  std::vector<std::uint32_t> full{center};
  std::vector<char> visited(vertex_count, 0);
  visited[center] = 1;

  std::vector<std::uint32_t> frontier{center};
  while (full.size() < need && !frontier.empty()) {
    std::vector<std::uint32_t> next_ring;
    for (std::uint32_t v : frontier) {
      for (std::uint32_t n : ordered_ring(adj, ring, v, visited)) {
        visited[n] = 1;
        next_ring.push_back(n);
      }
    }
    for (std::uint32_t n : next_ring) full.push_back(n);
    frontier = std::move(next_ring);
  }

  std::vector<std::uint32_t> out(length, kSpiralPad);
  for (std::uint32_t k = 0; k < length; ++k) {
    const std::size_t src = static_cast<std::size_t>(k) * dilation;
    if (src < full.size()) out[k] = full[src];
  }
  return out;
}

}  // namespace

std::vector<std::uint32_t> spiral_sequence(const Mesh& mesh, std::uint32_t center,
                                           std::uint32_t length, std::uint32_t dilation) {
  require(center < mesh.vertex_count(), "spiral_sequence: center out of range");
  require(length >= 1, "spiral_sequence: length must be >= 1");
  require(dilation >= 1, "spiral_sequence: dilation must be >= 1");
  auto adj = build_adjacency(mesh);
  auto ring = build_ring_maps(mesh);
  return spiral_from_structures(adj, ring, mesh.vertex_count(), center, length, dilation);
}

SpiralTable build_spiral_table(const Mesh& mesh, std::uint32_t length, std::uint32_t dilation) {
  require(length >= 1 && dilation >= 1, "build_spiral_table: bad length/dilation");
  auto adj = build_adjacency(mesh);
  auto ring = build_ring_maps(mesh);
  SpiralTable table;
  table.length = length;
  table.dilation = dilation;
  table.vertex_count = mesh.vertex_count();
  table.entries.reserve(table.vertex_count * length);
  for (std::uint32_t v = 0; v < table.vertex_count; ++v) {
    auto row = spiral_from_structures(adj, ring, mesh.vertex_count(), v, length, dilation);
    table.entries.insert(table.entries.end(), row.begin(), row.end());
  }
  return table;
}

}  // namespace meshseq
