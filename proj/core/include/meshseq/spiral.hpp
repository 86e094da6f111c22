#pragma once

#include <cstdint>
#include <vector>

#include "meshseq/mesh.hpp"

namespace meshseq {

// Pad sentinel for exhausted spirals; gathers a zero feature vector.
inline constexpr std::uint32_t kSpiralPad = 0xffffffffu;

// Fixed-length per-vertex spiral index table for one hierarchy level.
struct SpiralTable {
  std::uint32_t length = 0;    // l
  std::uint32_t dilation = 1;  // d
  std::size_t vertex_count = 0;
  std::vector<std::uint32_t> entries;  // vertex_count * length, row-major

  const std::uint32_t* row(std::size_t v) const { return entries.data() + v * length; }
  std::uint32_t at(std::size_t v, std::size_t k) const { return entries[v * length + k]; }
};

// Deterministic spiral: starts at the center, walks the 1-ring counter-
// clockwise (per face winding) from the adjacent vertex with the smallest
// index, then continues ring by ring. With dilation d every d-th element of
// the full spiral is kept. Padded to length l with kSpiralPad.
std::vector<std::uint32_t> spiral_sequence(const Mesh& mesh, std::uint32_t center,
                                           std::uint32_t length, std::uint32_t dilation);

SpiralTable build_spiral_table(const Mesh& mesh, std::uint32_t length, std::uint32_t dilation);

}  // namespace meshseq
