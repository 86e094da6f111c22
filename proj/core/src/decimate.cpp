#include "meshseq/decimate.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>

namespace meshseq {

namespace {

bool face_plane(const Mesh& mesh, const std::array<std::uint32_t, 3>& f, double out[4]) {
  const Vec3& v0 = mesh.vertices[f[0]];
  const Vec3& v1 = mesh.vertices[f[1]];
  const Vec3& v2 = mesh.vertices[f[2]];
  const Vec3 n = cross(v1 - v0, v2 - v0);
  const double len = norm(n);
  if (len <= 0.0) return false;
  out[0] = n.x / len;
  out[1] = n.y / len;
  out[2] = n.z / len;
  out[3] = -(out[0] * v0.x + out[1] * v0.y + out[2] * v0.z);
  return true;
}

struct Solve3Result {
  bool ok = false;
  Vec3 x;
};

// Cramer's rule on A x = r with A the upper-left 3x3 block of the quadric.
Solve3Result solve3(const Quadric& Q, const Vec3& r) {
  const double a00 = Q.q[0][0], a01 = Q.q[0][1], a02 = Q.q[0][2];
  const double a10 = Q.q[1][0], a11 = Q.q[1][1], a12 = Q.q[1][2];
  const double a20 = Q.q[2][0], a21 = Q.q[2][1], a22 = Q.q[2][2];
  const double det = a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) +
                     a02 * (a10 * a21 - a11 * a20);
  Solve3Result res;
  if (std::abs(det) <= kQuadricSingularDet) return res;
  const double dx = r.x * (a11 * a22 - a12 * a21) - a01 * (r.y * a22 - a12 * r.z) +
                    a02 * (r.y * a21 - a11 * r.z);
  const double dy = a00 * (r.y * a22 - a12 * r.z) - r.x * (a10 * a22 - a12 * a20) +
                    a02 * (a10 * r.z - r.y * a20);
  const double dz = a00 * (a11 * r.z - r.y * a21) - a01 * (a10 * r.z - r.y * a20) +
                    r.x * (a10 * a21 - a11 * a20);
  res.ok = true;
  res.x = {dx / det, dy / det, dz / det};
  return res;
}

}  // namespace

std::vector<Quadric> initial_quadrics(const Mesh& mesh) {
  std::vector<Quadric> q(mesh.vertex_count());
  for (const auto& f : mesh.faces) {
    double p[4];
    if (!face_plane(mesh, f, p)) continue;
    for (int k = 0; k < 3; ++k) q[f[k]].add_plane(p[0], p[1], p[2], p[3]);
  }
  // boundary penalty planes: perpendicular to the face through each boundary edge
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> edge_faces;
  for (const auto& f : mesh.faces)
    for (int k = 0; k < 3; ++k) {
      auto key = std::minmax(f[k], f[(k + 1) % 3]);
      edge_faces[{key.first, key.second}]++;
    }
  for (const auto& f : mesh.faces) {
    double p[4];
    if (!face_plane(mesh, f, p)) continue;
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t a = f[k], b = f[(k + 1) % 3];
      auto key = std::minmax(a, b);
      if (edge_faces[{key.first, key.second}] != 1) continue;
      const Vec3 e = mesh.vertices[b] - mesh.vertices[a];
      const Vec3 m = cross(e, {p[0], p[1], p[2]});
      const double len = norm(m);
      if (len <= 0.0) continue;
      const double bp[4] = {m.x / len, m.y / len, m.z / len, 0.0};
      const double d = -(bp[0] * mesh.vertices[a].x + bp[1] * mesh.vertices[a].y +
                         bp[2] * mesh.vertices[a].z);
      q[a].add_plane(bp[0], bp[1], bp[2], d, kBoundaryPenalty);
      q[b].add_plane(bp[0], bp[1], bp[2], d, kBoundaryPenalty);
    }
  }
  return q;
}

Vec3 contraction_target(const Quadric& q, const Vec3& p0, const Vec3& p1) {
  const Vec3 rhs = {-q.q[0][3], -q.q[1][3], -q.q[2][3]};
  auto sol = solve3(q, rhs);
  if (sol.ok) return sol.x;
  return (p0 + p1) * 0.5;
}

namespace {

struct HeapEntry {
  double err;
  std::uint32_t a, b;       // a < b
  std::uint64_t sa, sb;     // vertex stamps at push time
  // min-heap on (err, a, b)
  bool operator<(const HeapEntry& o) const {
    if (err != o.err) return err > o.err;
    if (a != o.a) return a > o.a;
    return b > o.b;
  }
};

struct WorkingMesh {
  std::vector<Vec3> pos;
  std::vector<Quadric> quad;
  std::vector<char> alive;
  std::vector<std::uint64_t> stamp;
  std::vector<std::set<std::uint32_t>> adj;
  std::vector<std::array<std::uint32_t, 3>> faces;
  std::vector<char> face_alive;

  // Link condition: the common neighbors of (a, b) must be exactly the third
  // vertices of the faces incident to the edge, and no vertex may be left
  // without an incident face.
  bool contraction_valid(std::uint32_t a, std::uint32_t b) const {
    std::vector<std::uint32_t> common;
    std::set_intersection(adj[a].begin(), adj[a].end(), adj[b].begin(), adj[b].end(),
                          std::back_inserter(common));
    std::set<std::uint32_t> opposite;
    std::size_t shared_faces = 0;
    for (std::size_t fi = 0; fi < faces.size(); ++fi) {
      if (!face_alive[fi]) continue;
      const auto& f = faces[fi];
      bool has_a = f[0] == a || f[1] == a || f[2] == a;
      bool has_b = f[0] == b || f[1] == b || f[2] == b;
      if (has_a && has_b) {
        ++shared_faces;
        for (int k = 0; k < 3; ++k)
          if (f[k] != a && f[k] != b) opposite.insert(f[k]);
      }
    }
    if (shared_faces == 0 || shared_faces > 2) return false;
    if (common.size() != opposite.size()) return false;
    for (std::uint32_t c : common)
      if (!opposite.count(c)) return false;
    // an opposite vertex whose only faces are the shared ones would dangle
    for (std::uint32_t c : opposite) {
      std::size_t total = 0, shared_with_c = 0;
      for (std::size_t fi = 0; fi < faces.size(); ++fi) {
        if (!face_alive[fi]) continue;
        const auto& f = faces[fi];
        if (f[0] != c && f[1] != c && f[2] != c) continue;
        ++total;
        bool has_a = f[0] == a || f[1] == a || f[2] == a;
        bool has_b = f[0] == b || f[1] == b || f[2] == b;
        if (has_a && has_b) ++shared_with_c;
      }
      if (total == shared_with_c) return false;
    }
    // must leave at least one face
    std::size_t alive_faces = 0;
    for (char fa : face_alive) alive_faces += fa != 0;
    return alive_faces > shared_faces;
  }

  void contract(std::uint32_t a, std::uint32_t b, const Vec3& target) {
    // a < b; a survives
    pos[a] = target;
    quad[a] += quad[b];
    alive[b] = 0;
    ++stamp[a];
    ++stamp[b];
    for (std::size_t fi = 0; fi < faces.size(); ++fi) {
      if (!face_alive[fi]) continue;
      auto& f = faces[fi];
      bool has_a = f[0] == a || f[1] == a || f[2] == a;
      bool has_b = f[0] == b || f[1] == b || f[2] == b;
      if (has_a && has_b) {
        face_alive[fi] = 0;
        continue;
      }
      if (has_b)
        for (int k = 0; k < 3; ++k)
          if (f[k] == b) f[k] = a;
    }
    adj[a].erase(b);
    adj[b].erase(a);
    for (std::uint32_t n : adj[b]) {
      adj[n].erase(b);
      adj[n].insert(a);
      adj[a].insert(n);
    }
    adj[b].clear();
  }
};

}  // namespace

DecimateResult decimate_step(const Mesh& mesh, std::size_t n_contractions) {
  require(mesh.vertex_count() >= 4, "decimate_step: mesh too small");
  require(n_contractions < mesh.vertex_count() - 3,
          "decimate_step: n_contractions must be < vertex count - 3");

  WorkingMesh w;
  w.pos = mesh.vertices;
  w.quad = initial_quadrics(mesh);
  w.alive.assign(mesh.vertex_count(), 1);
  w.stamp.assign(mesh.vertex_count(), 0);
  w.adj.resize(mesh.vertex_count());
  {
    auto adj = build_adjacency(mesh);  // also rejects non-manifold input
    for (std::size_t i = 0; i < adj.size(); ++i) w.adj[i] = {adj[i].begin(), adj[i].end()};
  }
  w.faces = mesh.faces;
  w.face_alive.assign(mesh.face_count(), 1);

  auto edge_cost = [&](std::uint32_t a, std::uint32_t b, double& err_out) {
    Quadric q = w.quad[a];
    q += w.quad[b];
    const Vec3 target = contraction_target(q, w.pos[a], w.pos[b]);
    err_out = q.error(target);
    return target;
  };

  std::priority_queue<HeapEntry> heap;
  auto push_edge = [&](std::uint32_t a, std::uint32_t b) {
    if (a > b) std::swap(a, b);
    double err;
    edge_cost(a, b, err);
    heap.push({err, a, b, w.stamp[a], w.stamp[b]});
  };
  for (std::uint32_t a = 0; a < mesh.vertex_count(); ++a)
    for (std::uint32_t b : w.adj[a])
      if (a < b) push_edge(a, b);

  std::vector<HeapEntry> deferred;
  std::size_t done = 0;
  while (done < n_contractions) {
    require(!heap.empty(), "decimate_step: no contractible edge left");
    HeapEntry e = heap.top();
    heap.pop();
    if (!w.alive[e.a] || !w.alive[e.b]) continue;
    if (w.stamp[e.a] != e.sa || w.stamp[e.b] != e.sb) continue;
    if (!w.adj[e.a].count(e.b)) continue;
    if (!w.contraction_valid(e.a, e.b)) {
      // topology may open this pair up again after another contraction
      deferred.push_back(e);
      continue;
    }
    double err;
    const Vec3 target = edge_cost(e.a, e.b, err);
    w.contract(e.a, e.b, target);
    ++done;
    for (std::uint32_t n : w.adj[e.a]) push_edge(e.a, n);
    for (const HeapEntry& d : deferred) heap.push(d);
    deferred.clear();
  }

  DecimateResult result;
  constexpr std::uint32_t kUnmapped = 0xffffffffu;
  std::vector<std::uint32_t> coarse_index(mesh.vertex_count(), kUnmapped);
  for (std::uint32_t v = 0; v < mesh.vertex_count(); ++v) {
    if (!w.alive[v]) continue;
    coarse_index[v] = static_cast<std::uint32_t>(result.selection.size());
    result.selection.push_back(v);
    result.coarse.vertices.push_back(mesh.vertices[v]);  // fine position, not the moved one
  }
  for (std::size_t fi = 0; fi < w.faces.size(); ++fi) {
    if (!w.face_alive[fi]) continue;
    const auto& f = w.faces[fi];
    result.coarse.faces.push_back({coarse_index[f[0]], coarse_index[f[1]], coarse_index[f[2]]});
  }
  return result;
}

}  // namespace meshseq
