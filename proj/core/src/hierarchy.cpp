#include "meshseq/hierarchy.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace meshseq {

SparseMatrix SparseMatrix::identity(std::size_t n) {
  SparseMatrix m;
  m.rows = m.cols = n;
  m.row_ptr.resize(n + 1);
  m.col_idx.resize(n);
  m.values.assign(n, 1.0);
  for (std::size_t i = 0; i <= n; ++i) m.row_ptr[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < n; ++i) m.col_idx[i] = static_cast<std::uint32_t>(i);
  return m;
}

Tensor SparseMatrix::apply(const Tensor& x) const {
  require(x.rank() == 2 && x.rows() == cols, "SparseMatrix::apply: shape mismatch");
  const std::size_t c = x.cols();
  Tensor y({rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y.row(r);
    for (std::uint32_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      const double w = values[k];
      const double* xr = x.row(col_idx[k]);
      for (std::size_t j = 0; j < c; ++j) yr[j] += w * xr[j];
    }
  }
  return y;
}

void SparseMatrix::apply_transposed_add(const Tensor& g, Tensor& out) const {
  require(g.rank() == 2 && g.rows() == rows, "SparseMatrix::apply_transposed_add: shape mismatch");
  require(out.rows() == cols && out.cols() == g.cols(),
          "SparseMatrix::apply_transposed_add: output shape mismatch");
  const std::size_t c = g.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = g.row(r);
    for (std::uint32_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      const double w = values[k];
      double* or_ = out.row(col_idx[k]);
      for (std::size_t j = 0; j < c; ++j) or_[j] += w * gr[j];
    }
  }
}

namespace {

// Closest point on triangle (a, b, c) to p, returned as barycentric (u, v, w)
// with respect to (a, b, c); u + v + w = 1.
void closest_point_barycentric(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                               double& u, double& v, double& w) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) { u = 1.0; v = 0.0; w = 0.0; return; }

  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) { u = 0.0; v = 1.0; w = 0.0; return; }

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double t = d1 / (d1 - d3);
    u = 1.0 - t; v = t; w = 0.0;
    return;
  }

  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) { u = 0.0; v = 0.0; w = 1.0; return; }

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double t = d2 / (d2 - d6);
    u = 1.0 - t; v = 0.0; w = t;
    return;
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    u = 0.0; v = 1.0 - t; w = t;
    return;
  }

  const double denom = 1.0 / (va + vb + vc);
  v = vb * denom;
  w = vc * denom;
  u = 1.0 - v - w;
}

Vec3 bary_point(const Vec3& a, const Vec3& b, const Vec3& c, double u, double v, double w) {
  return {u * a.x + v * b.x + w * c.x, u * a.y + v * b.y + w * c.y,
          u * a.z + v * b.z + w * c.z};
}

}  // namespace

SparseMatrix upsample_matrix(const Mesh& fine, const Mesh& coarse,
                             const std::vector<std::uint32_t>& selection) {
  require(!coarse.faces.empty(), "upsample_matrix: coarse mesh has no faces");
  require(coarse.vertex_count() == selection.size(),
          "upsample_matrix: selection size must equal coarse vertex count");

  std::vector<std::uint32_t> fine_to_coarse(fine.vertex_count(), 0xffffffffu);
  for (std::size_t c = 0; c < selection.size(); ++c) {
    require(selection[c] < fine.vertex_count(), "upsample_matrix: selection index out of range");
    fine_to_coarse[selection[c]] = static_cast<std::uint32_t>(c);
  }

  SparseMatrix U;
  U.rows = fine.vertex_count();
  U.cols = coarse.vertex_count();
  U.row_ptr.push_back(0);
  for (std::size_t fv = 0; fv < fine.vertex_count(); ++fv) {
    if (fine_to_coarse[fv] != 0xffffffffu) {
      U.col_idx.push_back(fine_to_coarse[fv]);
      U.values.push_back(1.0);
      U.row_ptr.push_back(static_cast<std::uint32_t>(U.col_idx.size()));
      continue;
    }
    const Vec3& p = fine.vertices[fv];
    double best_d2 = 0.0, best_u = 0.0, best_v = 0.0, best_w = 0.0;
    std::size_t best_face = coarse.faces.size();
    for (std::size_t fi = 0; fi < coarse.faces.size(); ++fi) {
      const auto& f = coarse.faces[fi];
      double u, v, w;
      closest_point_barycentric(p, coarse.vertices[f[0]], coarse.vertices[f[1]],
                                coarse.vertices[f[2]], u, v, w);
      const Vec3 q =
          bary_point(coarse.vertices[f[0]], coarse.vertices[f[1]], coarse.vertices[f[2]], u, v, w);
      const double d2 = dot(p - q, p - q);
      if (best_face == coarse.faces.size() || d2 < best_d2) {
        best_d2 = d2;
        best_face = fi;
        best_u = u; best_v = v; best_w = w;
      }
    }
    const auto& f = coarse.faces[best_face];
    const double bw[3] = {best_u, best_v, best_w};
    // deterministic column order within the row
    std::vector<std::pair<std::uint32_t, double>> entries;
    for (int k = 0; k < 3; ++k)
      if (bw[k] != 0.0) entries.push_back({f[k], bw[k]});
    std::sort(entries.begin(), entries.end());
    for (const auto& [col, val] : entries) {
      U.col_idx.push_back(col);
      U.values.push_back(val);
    }
    U.row_ptr.push_back(static_cast<std::uint32_t>(U.col_idx.size()));
  }
  return U;
}

MeshHierarchy precompute_hierarchy(const Mesh& template_mesh,
                                   const std::vector<LevelSpec>& specs) {
  require(!specs.empty(), "precompute_hierarchy: need at least one level spec");
  for (const auto& s : specs)
    require(s.downsample >= 1, "precompute_hierarchy: downsample factor must be >= 1");
  validate_mesh(template_mesh);

  MeshHierarchy h;
  h.normalization = compute_normalization(template_mesh);
  h.template_mesh = apply_normalization(template_mesh, h.normalization);

  const Mesh* prev = &h.template_mesh;
  for (const auto& spec : specs) {
    HierarchyLevel level;
    if (spec.downsample == 1) {
      level.mesh = *prev;
      level.selection.resize(prev->vertex_count());
      for (std::size_t i = 0; i < level.selection.size(); ++i)
        level.selection[i] = static_cast<std::uint32_t>(i);
      level.up = SparseMatrix::identity(prev->vertex_count());
    } else {
      const std::size_t target =
          std::max<std::size_t>(4, (prev->vertex_count() + spec.downsample - 1) / spec.downsample);
      require(target < prev->vertex_count(), "precompute_hierarchy: level cannot shrink further");
      DecimateResult dec = decimate_step(*prev, prev->vertex_count() - target);
      level.selection = dec.selection;
      level.up = upsample_matrix(*prev, dec.coarse, dec.selection);
      level.mesh = std::move(dec.coarse);
    }
    level.spirals = build_spiral_table(level.mesh, spec.spiral_length, spec.dilation);
    h.levels.push_back(std::move(level));
    prev = &h.levels.back().mesh;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'C', 'S', 'H', 'H'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void write_vec(std::ostream& out, const std::vector<T>& v) {
  write_pod(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()), sizeof(T) * v.size());
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(!in.fail(), "hierarchy file truncated");
  return v;
}

template <typename T>
std::vector<T> read_vec(std::istream& in) {
  const std::uint64_t n = read_pod<std::uint64_t>(in);
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), sizeof(T) * n);
  require(!in.fail(), "hierarchy file truncated");
  return v;
}

void write_mesh_block(std::ostream& out, const Mesh& mesh) {
  std::vector<double> verts;
  verts.reserve(mesh.vertex_count() * 3);
  for (const Vec3& v : mesh.vertices) {
    verts.push_back(v.x);
    verts.push_back(v.y);
    verts.push_back(v.z);
  }
  std::vector<std::uint32_t> faces;
  faces.reserve(mesh.face_count() * 3);
  for (const auto& f : mesh.faces) {
    faces.push_back(f[0]);
    faces.push_back(f[1]);
    faces.push_back(f[2]);
  }
  write_vec(out, verts);
  write_vec(out, faces);
}

Mesh read_mesh_block(std::istream& in) {
  auto verts = read_vec<double>(in);
  auto faces = read_vec<std::uint32_t>(in);
  require(verts.size() % 3 == 0 && faces.size() % 3 == 0, "hierarchy: bad mesh block");
  Mesh m;
  for (std::size_t i = 0; i < verts.size(); i += 3)
    m.vertices.push_back({verts[i], verts[i + 1], verts[i + 2]});
  for (std::size_t i = 0; i < faces.size(); i += 3)
    m.faces.push_back({faces[i], faces[i + 1], faces[i + 2]});
  return m;
}

}  // namespace

void save_hierarchy(const MeshHierarchy& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_hierarchy: cannot open " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(h.levels.size()));
  write_pod(out, h.normalization.center.x);
  write_pod(out, h.normalization.center.y);
  write_pod(out, h.normalization.center.z);
  write_pod(out, h.normalization.scale);
  write_mesh_block(out, h.template_mesh);

  // per-level offsets, patched after the blocks are written
  const std::streampos offsets_pos = out.tellp();
  std::vector<std::uint64_t> offsets(h.levels.size(), 0);
  for (std::uint64_t o : offsets) write_pod(out, o);

  for (std::size_t i = 0; i < h.levels.size(); ++i) {
    offsets[i] = static_cast<std::uint64_t>(out.tellp());
    const HierarchyLevel& level = h.levels[i];
    write_mesh_block(out, level.mesh);
    write_pod(out, level.spirals.length);
    write_pod(out, level.spirals.dilation);
    write_pod(out, static_cast<std::uint64_t>(level.spirals.vertex_count));
    write_vec(out, level.spirals.entries);
    write_vec(out, level.selection);
    write_pod(out, static_cast<std::uint64_t>(level.up.rows));
    write_pod(out, static_cast<std::uint64_t>(level.up.cols));
    write_vec(out, level.up.row_ptr);
    write_vec(out, level.up.col_idx);
    write_vec(out, level.up.values);
  }
  out.seekp(offsets_pos);
  for (std::uint64_t o : offsets) write_pod(out, o);
  require(out.good(), "save_hierarchy: write failed for " + path);
}

MeshHierarchy load_hierarchy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_hierarchy: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(!in.fail() && std::memcmp(magic, kMagic, 4) == 0,
          "load_hierarchy: bad magic in " + path);
  const std::uint32_t version = read_pod<std::uint32_t>(in);
  require(version == kVersion, "load_hierarchy: unsupported version");
  const std::uint32_t nlevels = read_pod<std::uint32_t>(in);

  MeshHierarchy h;
  h.normalization.center.x = read_pod<double>(in);
  h.normalization.center.y = read_pod<double>(in);
  h.normalization.center.z = read_pod<double>(in);
  h.normalization.scale = read_pod<double>(in);
  h.template_mesh = read_mesh_block(in);

  std::vector<std::uint64_t> offsets(nlevels);
  for (auto& o : offsets) o = read_pod<std::uint64_t>(in);

  for (std::uint32_t i = 0; i < nlevels; ++i) {
    in.seekg(static_cast<std::streamoff>(offsets[i]));
    HierarchyLevel level;
    level.mesh = read_mesh_block(in);
    level.spirals.length = read_pod<std::uint32_t>(in);
    level.spirals.dilation = read_pod<std::uint32_t>(in);
    level.spirals.vertex_count = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    level.spirals.entries = read_vec<std::uint32_t>(in);
    level.selection = read_vec<std::uint32_t>(in);
    level.up.rows = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    level.up.cols = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    level.up.row_ptr = read_vec<std::uint32_t>(in);
    level.up.col_idx = read_vec<std::uint32_t>(in);
    level.up.values = read_vec<double>(in);
    h.levels.push_back(std::move(level));
  }
  return h;
}

}  // namespace meshseq
