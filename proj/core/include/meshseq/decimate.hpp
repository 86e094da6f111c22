#pragma once

#include <cstdint>
#include <vector>

#include "meshseq/mesh.hpp"

namespace meshseq {

// Garland-Heckbert plane-sum quadric. Kept as a full symmetric 4x4 so the
// error form v^T Q v evaluates in one fixed expression order.
struct Quadric {
  double q[4][4] = {};

  void add_plane(double a, double b, double c, double d, double weight = 1.0) {
    const double p[4] = {a, b, c, d};
    for (int r = 0; r < 4; ++r)
      for (int s = 0; s < 4; ++s) q[r][s] += weight * p[r] * p[s];
  }
  Quadric& operator+=(const Quadric& o) {
    for (int r = 0; r < 4; ++r)
      for (int s = 0; s < 4; ++s) q[r][s] += o.q[r][s];
    return *this;
  }
  double error(const Vec3& v) const {
    const double x = v.x, y = v.y, z = v.z;
    return x * (q[0][0] * x + q[0][1] * y + q[0][2] * z + q[0][3]) +
           y * (q[1][0] * x + q[1][1] * y + q[1][2] * z + q[1][3]) +
           z * (q[2][0] * x + q[2][1] * y + q[2][2] * z + q[2][3]) +
           (q[3][0] * x + q[3][1] * y + q[3][2] * z + q[3][3]);
  }
};

// Weight applied to boundary-edge penalty planes.
inline constexpr double kBoundaryPenalty = 1e3;
// |det| at or below this treats the 3x3 quadric system as singular and falls
// back to the edge midpoint (coordinates are assumed unit-cube scaled).
inline constexpr double kQuadricSingularDet = 1e-12;

// Initial per-vertex quadrics: one plane per incident face (faces in order),
// then boundary penalty planes (faces in order, directed edges in order,
// added to both endpoints).
std::vector<Quadric> initial_quadrics(const Mesh& mesh);

// Optimal contraction target for quadric q; falls back to the midpoint of
// (p0, p1) when the system is singular.
Vec3 contraction_target(const Quadric& q, const Vec3& p0, const Vec3& p1);

struct DecimateResult {
  Mesh coarse;                           // surviving vertices at their fine positions
  std::vector<std::uint32_t> selection;  // coarse index -> fine vertex index, ascending
};

// Repeatedly contracts the valid edge with minimal quadric error. Tie-break
// is lexicographic on (min vertex index, max vertex index); the surviving
// vertex keeps the smaller index and, during the loop, moves to the
// contraction target. Pairs whose contraction would pinch the mesh
// (link-condition failure) are skipped in favor of the next-cheapest and
// reconsidered after every successful contraction.
DecimateResult decimate_step(const Mesh& mesh, std::size_t n_contractions);

}  // namespace meshseq
