#include "meshseq/mesh.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace meshseq {

Tensor Mesh::coords() const {
  Tensor t({vertices.size(), 3});
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    t.at(i, 0) = vertices[i].x;
    t.at(i, 1) = vertices[i].y;
    t.at(i, 2) = vertices[i].z;
  }
  return t;
}

void Mesh::set_coords(const Tensor& t) {
  require(t.rank() == 2 && t.cols() == 3 && t.rows() == vertices.size(),
          "Mesh::set_coords: shape mismatch");
  for (std::size_t i = 0; i < vertices.size(); ++i)
    vertices[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Mesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_mesh: cannot open " + path);
  std::string tag;
  std::size_t nv = 0, nf = 0;
  in >> tag >> nv >> nf;
  require(in.good() && tag == "MESH", "load_mesh: bad header in " + path);
  Mesh m;
  m.vertices.resize(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    in >> m.vertices[i].x >> m.vertices[i].y >> m.vertices[i].z;
    require(!in.fail(), "load_mesh: bad vertex line in " + path);
  }
  m.faces.resize(nf);
  for (std::size_t i = 0; i < nf; ++i) {
    in >> m.faces[i][0] >> m.faces[i][1] >> m.faces[i][2];
    require(!in.fail(), "load_mesh: bad face line in " + path);
    for (int k = 0; k < 3; ++k)
      require(m.faces[i][k] < nv, "load_mesh: face index out of range in " + path);
  }
  return m;
}

void save_mesh(const Mesh& mesh, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "save_mesh: cannot open " + path);
  out << "MESH " << mesh.vertex_count() << ' ' << mesh.face_count() << '\n';
  for (const Vec3& v : mesh.vertices)
    out << format_double(v.x) << ' ' << format_double(v.y) << ' ' << format_double(v.z) << '\n';
  for (const auto& f : mesh.faces) out << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  require(out.good(), "save_mesh: write failed for " + path);
}

std::size_t peek_mesh_vertex_count(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "peek_mesh_vertex_count: cannot open " + path);
  std::string tag;
  std::size_t nv = 0;
  in >> tag >> nv;
  require(in.good() && tag == "MESH", "peek_mesh_vertex_count: bad header in " + path);
  return nv;
}

std::vector<std::vector<std::uint32_t>> build_adjacency(const Mesh& mesh) {
  const std::size_t nv = mesh.vertex_count();
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> edge_faces;
  for (const auto& f : mesh.faces) {
    require(f[0] < nv && f[1] < nv && f[2] < nv, "build_adjacency: face index out of range");
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = f[k], b = f[(k + 1) % 3];
      require(a != b, "build_adjacency: degenerate face");
      auto key = std::minmax(a, b);
      int count = ++edge_faces[{key.first, key.second}];
      require(count <= 2, "build_adjacency: non-manifold edge (" + std::to_string(key.first) +
                              ", " + std::to_string(key.second) + ") shared by >2 faces");
    }
  }
  // each undirected edge was counted once per incident face
  std::vector<std::vector<std::uint32_t>> adj(nv);
  for (const auto& [edge, count] : edge_faces) {
    (void)count;
    adj[edge.first].push_back(edge.second);
    adj[edge.second].push_back(edge.first);
  }
  for (auto& lst : adj) std::sort(lst.begin(), lst.end());
  return adj;
}

RingMap build_ring_maps(const Mesh& mesh) {
  RingMap ring(mesh.vertex_count());
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      std::uint32_t i = f[k], j = f[(k + 1) % 3], l = f[(k + 2) % 3];
      ring[i].push_back({j, l});
    }
  }
  for (std::size_t i = 0; i < ring.size(); ++i) {
    auto& lst = ring[i];
    std::sort(lst.begin(), lst.end());
    for (std::size_t k = 1; k < lst.size(); ++k)
      require(lst[k].first != lst[k - 1].first,
              "build_ring_maps: inconsistent winding at vertex " + std::to_string(i));
  }
  return ring;
}

void validate_mesh(const Mesh& mesh) {
  require(mesh.vertex_count() >= 3, "validate_mesh: fewer than 3 vertices");
  require(mesh.face_count() >= 1, "validate_mesh: no faces");
  auto adj = build_adjacency(mesh);  // manifold edges + index range
  build_ring_maps(mesh);             // winding consistency
  // connectivity
  std::vector<char> seen(mesh.vertex_count(), 0);
  std::vector<std::uint32_t> stack{0};
  seen[0] = 1;
  while (!stack.empty()) {
    std::uint32_t v = stack.back();
    stack.pop_back();
    for (std::uint32_t n : adj[v])
      if (!seen[n]) {
        seen[n] = 1;
        stack.push_back(n);
      }
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    require(seen[i], "validate_mesh: disconnected vertex " + std::to_string(i));
}

NormalizationTransform compute_normalization(const Mesh& mesh) {
  require(!mesh.vertices.empty(), "compute_normalization: empty mesh");
  Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
  for (const Vec3& v : mesh.vertices) {
    lo.x = std::min(lo.x, v.x); lo.y = std::min(lo.y, v.y); lo.z = std::min(lo.z, v.z);
    hi.x = std::max(hi.x, v.x); hi.y = std::max(hi.y, v.y); hi.z = std::max(hi.z, v.z);
  }
  NormalizationTransform t;
  t.center = {(lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, (lo.z + hi.z) / 2.0};
  t.scale = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  if (t.scale <= 0.0) t.scale = 1.0;
  return t;
}

Mesh apply_normalization(const Mesh& mesh, const NormalizationTransform& t) {
  Mesh out = mesh;
  for (Vec3& v : out.vertices) v = t.apply(v);
  return out;
}

Tensor apply_normalization(const Tensor& coords, const NormalizationTransform& t) {
  Tensor out = coords;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    Vec3 p = t.apply({out.at(i, 0), out.at(i, 1), out.at(i, 2)});
    out.at(i, 0) = p.x;
    out.at(i, 1) = p.y;
    out.at(i, 2) = p.z;
  }
  return out;
}

Mesh make_tetrahedron() {
  Mesh m;
  m.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  m.faces = {{0, 1, 2}, {0, 2, 3}, {0, 3, 1}, {1, 3, 2}};
  return m;
}

Mesh make_octahedron() {
  Mesh m;
  m.vertices = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  m.faces = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4},
             {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
  return m;
}

Mesh make_icosahedron() {
  const double p = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0},
                {0, -1, p}, {0, 1, p}, {0, -1, -p}, {0, 1, -p},
                {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return m;
}

Mesh make_icosphere(int subdivisions, double radius) {
  Mesh m = make_icosahedron();
  auto project = [&](Vec3 v) {
    double n = norm(v);
    return Vec3{v.x / n * radius, v.y / n * radius, v.z / n * radius};
  };
  for (Vec3& v : m.vertices) v = project(v);
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
    auto mid = [&](std::uint32_t a, std::uint32_t b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find({key.first, key.second});
      if (it != midpoint.end()) return it->second;
      Vec3 v = project((m.vertices[a] + m.vertices[b]) * 0.5);
      m.vertices.push_back(v);
      std::uint32_t idx = static_cast<std::uint32_t>(m.vertices.size() - 1);
      midpoint[{key.first, key.second}] = idx;
      return idx;
    };
    std::vector<std::array<std::uint32_t, 3>> faces;
    faces.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      std::uint32_t ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      faces.push_back({f[0], ab, ca});
      faces.push_back({f[1], bc, ab});
      faces.push_back({f[2], ca, bc});
      faces.push_back({ab, bc, ca});
    }
    m.faces = std::move(faces);
  }
  return m;
}

Mesh make_grid(int nx, int ny, double spacing) {
  require(nx >= 2 && ny >= 2, "make_grid: need at least 2x2");
  Mesh m;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      m.vertices.push_back({i * spacing, j * spacing, 0.0});
  auto idx = [&](int i, int j) { return static_cast<std::uint32_t>(j * nx + i); };
  for (int j = 0; j + 1 < ny; ++j)
    for (int i = 0; i + 1 < nx; ++i) {
      m.faces.push_back({idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)});
      m.faces.push_back({idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)});
    }
  return m;
}

}  // namespace meshseq
