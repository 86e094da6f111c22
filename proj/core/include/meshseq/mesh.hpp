#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "meshseq/common.hpp"
#include "meshseq/tensor.hpp"

namespace meshseq {

// Triangle mesh with counter-clockwise (outward) winding. Vertex-wise
// correspondence across a dataset is assumed: every patient mesh shares the
// template's vertex count and ordering.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }

  Tensor coords() const;                    // V x 3
  void set_coords(const Tensor& t);         // from V x 3
};

// Uniform scale + translate recorded when a template is normalized to the
// unit cube centered at the origin.
struct NormalizationTransform {
  Vec3 center{0.0, 0.0, 0.0};
  double scale = 1.0;  // original largest bbox extent

  Vec3 apply(const Vec3& p) const {
    return {(p.x - center.x) / scale, (p.y - center.y) / scale, (p.z - center.z) / scale};
  }
};

// Text format:
//   MESH <n_vertices> <n_faces>
//   x y z            (n_vertices lines)
//   i j k            (n_faces lines, 0-based)
Mesh load_mesh(const std::string& path);
void save_mesh(const Mesh& mesh, const std::string& path);
// Reads only the header line; used for cheap manifest validation.
std::size_t peek_mesh_vertex_count(const std::string& path);

// Structural validation: index ranges, manifold edges (<= 2 incident faces),
// consistent winding (no repeated directed edge), connectivity.
void validate_mesh(const Mesh& mesh);

// Sorted, symmetric per-vertex neighbor lists. Rejects non-manifold edges.
std::vector<std::vector<std::uint32_t>> build_adjacency(const Mesh& mesh);

// ccw_next[i] maps neighbor j of vertex i to the next 1-ring neighbor in
// counter-clockwise order (from face (i, j, k): j -> k). Stored as sorted
// (from, to) pairs per vertex.
using RingMap = std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>>;
RingMap build_ring_maps(const Mesh& mesh);

NormalizationTransform compute_normalization(const Mesh& mesh);
Mesh apply_normalization(const Mesh& mesh, const NormalizationTransform& t);
Tensor apply_normalization(const Tensor& coords, const NormalizationTransform& t);

// Test/dataset primitives.
Mesh make_tetrahedron();
Mesh make_octahedron();
Mesh make_icosahedron();
// subdivisions=0 gives the icosahedron; each level quadruples the faces.
Mesh make_icosphere(int subdivisions, double radius = 0.5);
// Planar grid in the z=0 plane, (nx*ny) vertices, CCW seen from +z.
Mesh make_grid(int nx, int ny, double spacing = 1.0);

}  // namespace meshseq
